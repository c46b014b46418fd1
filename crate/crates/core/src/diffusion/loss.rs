use candle_core::Tensor;

use crate::error::{Error, Result};

/// Loss weights `L x 1 x H x W`: 1 on painted entity disks, `lambda_bg`
/// everywhere else.
pub fn loss_mask(
    owners: &[Option<usize>],
    frames: usize,
    height: usize,
    width: usize,
    lambda_bg: f64,
    like: &Tensor,
) -> Result<Tensor> {
    if owners.len() != frames * height * width {
        return Err(Error::LengthMismatch {
            what: "disk owners",
            expected: frames * height * width,
            got: owners.len(),
        });
    }
    let v: Vec<f64> = owners
        .iter()
        .map(|o| if o.is_some() { 1.0 } else { lambda_bg })
        .collect();
    Ok(Tensor::from_vec(v, (frames, 1, height, width), like.device())?.to_dtype(like.dtype())?)
}

/// Mean over every element of `mask * (noise - predicted)^2`; `mask`
/// broadcasts over channels.
pub fn masked_loss(noise: &Tensor, predicted: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if noise.dims() != predicted.dims() {
        return Err(Error::fault(format!(
            "noise {:?} and prediction {:?} differ in shape",
            noise.dims(),
            predicted.dims()
        )));
    }
    let sq = (noise - predicted)?.sqr()?;
    Ok(sq.broadcast_mul(mask)?.mean_all()?)
}
