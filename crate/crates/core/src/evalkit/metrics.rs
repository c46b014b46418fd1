use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Mean Euclidean distance (px) between two trajectories over the frames
/// flagged valid in both.
pub fn objmc(pred: &[[f64; 2]], gt: &[[f64; 2]], valid: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "trajectory points",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if valid.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "validity flags",
            expected: gt.len(),
            got: valid.len(),
        });
    }
    let (sum, n) = objmc_sum(pred, gt, valid);
    if n == 0 {
        return Err(Error::Undefined("no valid frames to compare".into()));
    }
    Ok(sum / n as f64)
}

/// Sum of distances and count of valid frames, for pooled averages.
pub fn objmc_sum(pred: &[[f64; 2]], gt: &[[f64; 2]], valid: &[bool]) -> (f64, usize) {
    pred.iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0), |(s, n), ((p, g), _)| (s + (p[0] - g[0]).hypot(p[1] - g[1]), n + 1))
}

/// PSNR per frame of two `L x ...` tensors in `[-1, 1]` (peak-to-peak 2).
/// Identical frames give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::fault(format!("psnr inputs differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let l = a.dims().first().copied().unwrap_or(0);
    let mse = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .sqr()?
        .reshape((l, ()))?
        .mean(1)?
        .to_vec1::<f64>()?;
    Ok(mse
        .into_iter()
        .map(|m| if m == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / m).log10() })
        .collect())
}

/// Mean and median of `xs` (`None` when empty).
pub fn mean_median(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    (Some(mean), Some(median))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn objmc_examples() {
        let a = vec![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let all = vec![true; 3];
        assert_eq!(objmc(&a, &a, &all).unwrap(), 0.0);
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert_eq!(objmc(&a, &b, &all).unwrap(), 5.0);
        assert!(matches!(objmc(&a, &b, &[false; 3]), Err(Error::Undefined(_))));
        assert!(matches!(objmc(&a, &b[..2], &all), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn objmc_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let p: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]).collect();
            let g: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]).collect();
            let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            v[0] = true;
            let mut s = 0.0;
            let mut k = 0;
            for i in 0..n {
                if v[i] {
                    s += ((p[i][0] - g[i][0]).powi(2) + (p[i][1] - g[i][1]).powi(2)).sqrt();
                    k += 1;
                }
            }
            assert!((objmc(&p, &g, &v).unwrap() - s / k as f64).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn objmc_metric_properties(
            pts in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0), 1..12),
            scale in 0.1f64..10.0,
        ) {
            let p: Vec<[f64; 2]> = pts.iter().map(|t| [t.0, t.1]).collect();
            let g: Vec<[f64; 2]> = pts.iter().map(|t| [t.2, t.3]).collect();
            let v = vec![true; p.len()];
            let d = objmc(&p, &g, &v).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - objmc(&g, &p, &v).unwrap()).abs() < 1e-12);
            let ps: Vec<[f64; 2]> = p.iter().map(|q| [q[0] * scale, q[1] * scale]).collect();
            let gs: Vec<[f64; 2]> = g.iter().map(|q| [q[0] * scale, q[1] * scale]).collect();
            prop_assert!((objmc(&ps, &gs, &v).unwrap() - scale * d).abs() < 1e-9 * (1.0 + scale * d));
            prop_assert_eq!(d == 0.0, p == g);
        }
    }

    #[test]
    fn psnr_examples() {
        let z = Tensor::zeros((2, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let o = Tensor::ones((2, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(psnr(&z, &z).unwrap(), vec![f64::INFINITY; 2]);
        for v in psnr(&z, &o).unwrap() {
            assert!((v - 20.0 * 2f64.log10()).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_matches_loop() {
        let a = Tensor::rand(-1f64, 1., (3, 2, 5, 5), &Device::Cpu).unwrap();
        let b = Tensor::rand(-1f64, 1., (3, 2, 5, 5), &Device::Cpu).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let got = psnr(&a, &b).unwrap();
        for f in 0..3 {
            let n = 50;
            let mse: f64 = (0..n).map(|i| (av[f * n + i] - bv[f * n + i]).powi(2)).sum::<f64>() / n as f64;
            assert!((got[f] - 10.0 * (2.0f64 * 2.0 / mse).log10()).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_and_median() {
        assert_eq!(mean_median(&[]), (None, None));
        assert_eq!(mean_median(&[3.0, 1.0, 2.0]), (Some(2.0), Some(2.0)));
        assert_eq!(mean_median(&[4.0, 1.0, 2.0, 3.0]), (Some(2.5), Some(2.5)));
    }
}
