use candle_core::Tensor;

use crate::error::{Error, Result};

/// Cosine noise schedule over `T` discrete steps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        let s = 0.008;
        let f = |t: f64| (((t / timesteps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(timesteps);
        let mut alphas_cumprod = Vec::with_capacity(timesteps);
        let mut prev = 1.0;
        for t in 0..timesteps {
            let abar = f((t + 1) as f64) / f0;
            let beta = (1.0 - abar / (f(t as f64) / f0)).clamp(1e-8, 0.999);
            prev *= 1.0 - beta;
            betas.push(beta);
            alphas_cumprod.push(prev);
        }
        let sched = Self {
            betas,
            alphas_cumprod,
        };
        sched.check()?;
        Ok(sched)
    }

    fn check(&self) -> Result<()> {
        if !self.betas.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err(Error::fault("betas must lie in (0, 1)"));
        }
        if self.alphas_cumprod[0] > 1.0 || self.alphas_cumprod.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::fault("cumulative alphas must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise` with one `t` per
    /// leading group of `x0` (e.g. one per clip, shared by its frames).
    pub fn add_noise(&self, x0: &Tensor, noise: &Tensor, t: &[usize]) -> Result<Tensor> {
        let dims = x0.dims();
        let groups = t.len();
        if groups == 0 || !dims[0].is_multiple_of(groups) {
            return Err(Error::fault(format!("cannot split {} rows into {groups} groups", dims[0])));
        }
        if let Some(&bad) = t.iter().find(|&&t| t >= self.timesteps()) {
            return Err(Error::fault(format!("timestep {bad} out of range")));
        }
        let per = dims[0] / groups;
        let mut shape = vec![dims[0]];
        shape.extend(std::iter::repeat_n(1, dims.len() - 1));
        let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let v: Vec<f64> = t.iter().flat_map(|&t| std::iter::repeat_n(f(self.alpha_cumprod(t)), per)).collect();
            Ok(Tensor::from_vec(v, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
        };
        let a = coef(&|ab| ab.sqrt())?;
        let b = coef(&|ab| (1.0 - ab).sqrt())?;
        Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
    }
}
