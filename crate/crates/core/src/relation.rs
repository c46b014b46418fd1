//! Position-aware relational attention over entities.
//!
//! Each ordered pair of entities `(i, j)` gets a polar offset of `j`'s box
//! center relative to `i`'s. The offset is embedded by a bank of Gaussian
//! kernels over distance and angle, projected per head to a nonnegative score
//! and normalized across `j` into a spatial weight `w_p`. Per-head scaled
//! dot-product scores `w_s` are fused with it as
//! `w_I = w_p exp(w_s) / sum_k w_p exp(w_s)`, and the relational features are
//! `V_r = f0(V) + concat_h(w_I[h] f_h(V))`.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox, PolarOffset};
use crate::nn::{self, Init, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationConfig {
    pub n_kernels_rho: usize,
    pub n_kernels_theta: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub qk_dim: usize,
    /// Upper end of the initial distance-kernel means (distances are
    /// normalized by the image diagonal).
    pub rho_init_max: f64,
    pub eps: f64,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            n_kernels_rho: 32,
            n_kernels_theta: 32,
            heads: 6,
            feature_dim: 96,
            qk_dim: 16,
            rho_init_max: 0.7,
            eps: 1e-8,
        }
    }
}

impl RelationConfig {
    pub fn spatial_dim(&self) -> usize {
        self.n_kernels_rho + self.n_kernels_theta
    }

    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "relation feature_dim {} must be divisible by heads {}",
                self.feature_dim, self.heads
            )));
        }
        if self.n_kernels_rho == 0 || self.n_kernels_theta == 0 || self.qk_dim == 0 {
            return Err(Error::Config("relation kernel counts and qk_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Pooled entity features together with their boxes.
#[derive(Debug, Clone)]
pub struct EntitySet {
    /// `N x d_v`.
    pub features: Tensor,
    pub boxes: Vec<BBox>,
}

impl EntitySet {
    pub fn new(features: Tensor, boxes: Vec<BBox>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != boxes.len() {
            return Err(Error::LengthMismatch {
                what: "entity boxes",
                expected: n,
                got: boxes.len(),
            });
        }
        if n == 0 {
            return Err(Error::fault("entity set must not be empty"));
        }
        Ok(Self { features, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Pairwise polar offsets, row `i` anchored at entity `i`.
    pub fn offsets(&self, image_diag: f64) -> Vec<Vec<PolarOffset>> {
        self.boxes
            .iter()
            .map(|bi| {
                self.boxes
                    .iter()
                    .map(|bj| geometry::to_polar(bi.center(), bj.center(), image_diag))
                    .collect()
            })
            .collect()
    }
}

pub struct RelationParams {
    config: RelationConfig,
    rho_mean: Tensor,
    rho_log_sigma: Tensor,
    theta_mean: Tensor,
    theta_log_sigma: Tensor,
    /// `d_p -> K`: one scalar projection per head.
    spatial_proj: Linear,
    query: Linear,
    key: Linear,
    /// `d_v -> d_v`; output chunk `h` is head `h`'s value map `f_h`.
    values: Linear,
    residual: Linear,
}

impl RelationParams {
    pub fn new(p: &Params, config: &RelationConfig) -> Result<Self> {
        config.validate()?;
        let (mr, mt) = (config.n_kernels_rho, config.n_kernels_theta);
        let rho_step = config.rho_init_max / (mr.max(2) - 1) as f64;
        let rho_means: Vec<f64> = (0..mr).map(|m| m as f64 * rho_step).collect();
        let theta_step = 2.0 * PI / mt as f64;
        let theta_means: Vec<f64> = (0..mt).map(|m| -PI + m as f64 * theta_step).collect();

        let rho_mean = p.from_values("rho_mean", &[mr], rho_means)?;
        let rho_log_sigma = p.constant("rho_log_sigma", &[mr], rho_step.ln())?;
        let theta_mean = p.from_values("theta_mean", &[mt], theta_means)?;
        let theta_log_sigma = p.constant("theta_log_sigma", &[mt], theta_step.ln())?;

        let (dv, k, dqk) = (config.feature_dim, config.heads, config.qk_dim);
        Ok(Self {
            config: config.clone(),
            rho_mean,
            rho_log_sigma,
            theta_mean,
            theta_log_sigma,
            spatial_proj: nn::linear(&p.pp("spatial_proj"), config.spatial_dim(), k, true, Init::FanIn)?,
            query: nn::linear(&p.pp("query"), dv, k * dqk, false, Init::FanIn)?,
            key: nn::linear(&p.pp("key"), dv, k * dqk, false, Init::FanIn)?,
            values: nn::linear(&p.pp("values"), dv, dv, true, Init::FanIn)?,
            residual: nn::linear(&p.pp("residual"), dv, dv, true, Init::FanIn)?,
        })
    }

    pub fn config(&self) -> &RelationConfig {
        &self.config
    }

    fn dtype(&self) -> DType {
        self.rho_mean.dtype()
    }

    fn device(&self) -> &Device {
        self.rho_mean.device()
    }

    fn kernel_values(&self) -> Result<[Vec<f64>; 4]> {
        let read = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
        Ok([
            read(&self.rho_mean)?,
            read(&self.rho_log_sigma)?.into_iter().map(f64::exp).collect(),
            read(&self.theta_mean)?,
            read(&self.theta_log_sigma)?.into_iter().map(f64::exp).collect(),
        ])
    }

    /// Per-kernel distance and angle responses for a single offset.
    pub fn gaussian_weights(&self, offset: PolarOffset) -> Result<(Vec<f64>, Vec<f64>)> {
        let [rm, rs, tm, ts] = self.kernel_values()?;
        let w_rho = rm
            .iter()
            .zip(&rs)
            .map(|(m, s)| (-(offset.rho - m).powi(2) / (2.0 * s * s)).exp())
            .collect();
        let w_theta = tm
            .iter()
            .zip(&ts)
            .map(|(m, s)| (-geometry::wrap_angle(offset.theta - m).powi(2) / (2.0 * s * s)).exp())
            .collect();
        Ok((w_rho, w_theta))
    }

    /// `[w_rho || w_theta]` for a single offset.
    pub fn spatial_embedding(&self, offset: PolarOffset) -> Result<Vec<f64>> {
        let (mut w, wt) = self.gaussian_weights(offset)?;
        w.extend(wt);
        Ok(w)
    }

    /// Kernel-bank embedding of every pairwise offset: `N x N x d_p`.
    fn spatial_embedding_tensor(&self, offsets: &[Vec<PolarOffset>]) -> Result<Tensor> {
        let n = offsets.len();
        let rho: Vec<f64> = offsets.iter().flatten().map(|o| o.rho).collect();
        let theta: Vec<f64> = offsets.iter().flatten().map(|o| o.theta).collect();
        let rho = Tensor::from_vec(rho, (n, n, 1), self.device())?.to_dtype(self.dtype())?;
        let theta = Tensor::from_vec(theta, (n, n, 1), self.device())?.to_dtype(self.dtype())?;

        let gauss = |delta: Tensor, log_sigma: &Tensor| -> candle_core::Result<Tensor> {
            let var2 = (log_sigma * 2.0)?.exp()?;
            (delta.sqr()?.broadcast_div(&(var2 * 2.0)?)?).neg()?.exp()
        };
        let d_rho = rho.broadcast_sub(&self.rho_mean)?;
        let w_rho = gauss(d_rho, &self.rho_log_sigma)?;

        let d_theta = theta.broadcast_sub(&self.theta_mean)?;
        // Wrap to [-pi, pi); the period count is a constant w.r.t. the parameters.
        let periods = ((d_theta.detach() + PI)? / (2.0 * PI))?.floor()?;
        let d_theta = (d_theta - (periods * (2.0 * PI))?)?;
        let w_theta = gauss(d_theta, &self.theta_log_sigma)?;

        Ok(Tensor::cat(&[w_rho, w_theta], 2)?)
    }

    /// Spatial weights `K x N x N`, row-normalized over `j`.
    pub fn spatial_weight_matrix(&self, entities: &EntitySet, image_diag: f64) -> Result<Tensor> {
        let offsets = entities.offsets(image_diag);
        let emb = self.spatial_embedding_tensor(&offsets)?;
        let raw = nn::softplus(&self.spatial_proj.forward(&emb)?)?; // N x N x K
        let raw = raw.permute((2, 0, 1))?.contiguous()?;
        let denom = (raw.sum_keepdim(D::Minus1)? + self.config.eps)?;
        Ok(raw.broadcast_div(&denom)?)
    }

    /// Scaled dot-product scores `K x N x N`.
    pub fn semantic_weight_matrix(&self, entities: &EntitySet) -> Result<Tensor> {
        let n = entities.len();
        let (k, dqk) = (self.config.heads, self.config.qk_dim);
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((n, k, dqk))?.transpose(0, 1)?.contiguous()
        };
        let q = split(self.query.forward(&entities.features)?)?;
        let kk = split(self.key.forward(&entities.features)?)?;
        let scores = q.matmul(&kk.transpose(1, 2)?.contiguous()?)?;
        Ok((scores / (dqk as f64).sqrt())?)
    }

    pub fn forward(&self, entities: &EntitySet, image_diag: f64) -> Result<Tensor> {
        ensure_finite(&entities.features)?;
        let wp = self.spatial_weight_matrix(entities, image_diag)?;
        let ws = self.semantic_weight_matrix(entities)?;
        let wi = fuse_weights(&wp, &ws, self.config.eps)?;
        self.aggregate(entities, &wi)
    }

    /// `f0(V) + concat_h(w_I[h] f_h(V))` for given fused weights.
    pub fn aggregate(&self, entities: &EntitySet, fused: &Tensor) -> Result<Tensor> {
        let n = entities.len();
        let (k, hd) = (self.config.heads, self.config.head_dim());
        let vals = self
            .values
            .forward(&entities.features)?
            .reshape((n, k, hd))?
            .transpose(0, 1)?
            .contiguous()?;
        let mixed = fused.matmul(&vals)?; // K x N x hd
        let mixed = mixed.transpose(0, 1)?.reshape((n, k * hd))?;
        Ok((self.residual.forward(&entities.features)? + mixed)?)
    }

    /// Relation bypassed: `V_r = f0(V)`.
    pub fn forward_without_relation(&self, entities: &EntitySet) -> Result<Tensor> {
        ensure_finite(&entities.features)?;
        Ok(self.residual.forward(&entities.features)?)
    }
}

/// `w_I[h,i,j] = w_p[h,i,j] exp(w_s[h,i,j]) / sum_k w_p[h,i,k] exp(w_s[h,i,k])`.
///
/// The row max of `w_s` is subtracted first; the ratio is unchanged by it.
pub fn fuse_weights(wp: &Tensor, ws: &Tensor, eps: f64) -> Result<Tensor> {
    if wp.dims() != ws.dims() {
        return Err(Error::fault(format!(
            "weight shapes differ: {:?} vs {:?}",
            wp.dims(),
            ws.dims()
        )));
    }
    let shift = ws.detach().max_keepdim(D::Minus1)?;
    let num = (wp * ws.broadcast_sub(&shift)?.exp()?)?;
    let denom = num.sum_keepdim(D::Minus1)?.maximum(eps)?;
    Ok(num.broadcast_div(&denom)?)
}

fn ensure_finite(t: &Tensor) -> Result<()> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::fault("non-finite entity features"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &RelationConfig, seed: u64) -> (ParamStore, RelationParams) {
        let store = ParamStore::new(seed, DType::F64, Device::Cpu);
        let rel = RelationParams::new(&store.root().pp("relation"), cfg).unwrap();
        (store, rel)
    }

    fn entities(rng: &mut ChaCha8Rng, n: usize, dv: usize) -> EntitySet {
        let feats: Vec<f64> = (0..n * dv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let boxes = (0..n)
            .map(|_| BBox {
                x: rng.random_range(0..64) as f64 + 0.5,
                y: rng.random_range(0..64) as f64 + 0.5,
                w: rng.random_range(1..20) as f64,
                h: rng.random_range(1..20) as f64,
            })
            .collect();
        EntitySet::new(Tensor::from_vec(feats, (n, dv), &Device::Cpu).unwrap(), boxes).unwrap()
    }

    #[test]
    fn gaussian_weight_examples() {
        let (store, rel) = build(&RelationConfig::default(), 0);
        let means = store.get("relation.rho_mean").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let sigma = store
            .get("relation.rho_log_sigma")
            .unwrap()
            .as_tensor()
            .to_vec1::<f64>()
            .unwrap()[5]
            .exp();
        let (w, _) = rel.gaussian_weights(PolarOffset { rho: means[5], theta: 0.0 }).unwrap();
        assert_eq!(w[5], 1.0);
        let (w, _) = rel.gaussian_weights(PolarOffset { rho: means[5] + sigma, theta: 0.0 }).unwrap();
        assert!((w[5] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((w[5] - 0.60653).abs() < 1e-5);

        let tmeans = store.get("relation.theta_mean").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let (_, wt) = rel
            .gaussian_weights(PolarOffset { rho: 0.1, theta: tmeans[7] + 2.0 * PI })
            .unwrap();
        assert!((wt[7] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_embedding_shape_and_range() {
        let (_, rel) = build(&RelationConfig::default(), 0);
        let a = rel.spatial_embedding(PolarOffset { rho: 0.1, theta: 0.0 }).unwrap();
        let b = rel.spatial_embedding(PolarOffset { rho: 0.1, theta: PI / 2.0 }).unwrap();
        assert_eq!(a.len(), 64);
        assert!(a.iter().chain(&b).all(|&v| v > 0.0 && v <= 1.0));
        assert_eq!(a, rel.spatial_embedding(PolarOffset { rho: 0.1, theta: 0.0 }).unwrap());
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.1, "{dist}");
    }

    #[test]
    fn tensor_embedding_matches_scalar() {
        let (_, rel) = build(&RelationConfig::default(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = entities(&mut rng, 4, 96);
        let offsets = set.offsets(90.0);
        let emb = rel.spatial_embedding_tensor(&offsets).unwrap().to_vec3::<f64>().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let s = rel.spatial_embedding(offsets[i][j]).unwrap();
                for (a, b) in emb[i][j].iter().zip(&s) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_entity_weights_are_one() {
        let (_, rel) = build(&RelationConfig::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = entities(&mut rng, 1, 96);
        let wp = rel.spatial_weight_matrix(&set, 90.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(wp.len(), 6);
        assert!(wp.iter().all(|&w| (w - 1.0).abs() < 1e-6));
        let ws = rel.semantic_weight_matrix(&set).unwrap();
        let wi = fuse_weights(&rel.spatial_weight_matrix(&set, 90.0).unwrap(), &ws, 1e-8).unwrap();
        assert!(wi.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&w| (w - 1.0).abs() < 1e-6));
    }

    #[test]
    fn single_entity_forward_is_residual_plus_values() {
        let cfg = RelationConfig::default();
        let (_, rel) = build(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = entities(&mut rng, 1, 96);
        let out = rel.forward(&set, 90.0).unwrap();
        let expected = (rel.residual.forward(&set.features).unwrap() + rel.values.forward(&set.features).unwrap()).unwrap();
        let diff = (out - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn identical_raw_scores_split_evenly() {
        let (_, rel) = build(&RelationConfig::default(), 1);
        // Two entities at the same center see identical offsets, hence identical scores.
        let set = EntitySet::new(
            Tensor::zeros((2, 96), DType::F64, &Device::Cpu).unwrap(),
            vec![BBox { x: 10.5, y: 10.5, w: 3.0, h: 3.0 }; 2],
        )
        .unwrap();
        let wp = rel.spatial_weight_matrix(&set, 90.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(wp.iter().all(|&w| (w - 0.5).abs() < 1e-6));
    }

    #[test]
    fn semantic_scores_zero_and_bilinear() {
        let (_, rel) = build(&RelationConfig::default(), 3);
        let zero = EntitySet::new(
            Tensor::zeros((3, 96), DType::F64, &Device::Cpu).unwrap(),
            vec![BBox { x: 1.5, y: 1.5, w: 1.0, h: 1.0 }; 3],
        )
        .unwrap();
        let ws = rel.semantic_weight_matrix(&zero).unwrap();
        assert_eq!(ws.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = entities(&mut rng, 3, 96);
        let doubled = EntitySet::new((&set.features * 2.0).unwrap(), set.boxes.clone()).unwrap();
        let a = rel.semantic_weight_matrix(&set).unwrap();
        let b = rel.semantic_weight_matrix(&doubled).unwrap();
        let diff = ((a * 4.0).unwrap() - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10);
    }

    #[test]
    fn semantic_single_entity_matches_hand_computation() {
        let cfg = RelationConfig::default();
        let (_, rel) = build(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = entities(&mut rng, 1, 96);
        let v = set.features.to_vec2::<f64>().unwrap()[0].clone();
        let wq = rel.query.weight().to_vec2::<f64>().unwrap();
        let wk = rel.key.weight().to_vec2::<f64>().unwrap();
        let ws = rel.semantic_weight_matrix(&set).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for h in 0..cfg.heads {
            let mut dot = 0.0;
            for d in 0..cfg.qk_dim {
                let row = h * cfg.qk_dim + d;
                let q: f64 = wq[row].iter().zip(&v).map(|(a, b)| a * b).sum();
                let k: f64 = wk[row].iter().zip(&v).map(|(a, b)| a * b).sum();
                dot += q * k;
            }
            assert!((ws[h] - dot / 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fuse_constant_semantic_returns_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wp: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.random_range(0.01..1.0)).collect();
        let wp = Tensor::from_vec(wp, (2, 3, 3), &Device::Cpu).unwrap();
        let wp = wp.broadcast_div(&wp.sum_keepdim(2).unwrap()).unwrap();
        let ws = Tensor::full(3.7f64, (2, 3, 3), &Device::Cpu).unwrap();
        let wi = fuse_weights(&wp, &ws, 1e-8).unwrap();
        let diff = (wi - &wp).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);

        let uniform = Tensor::full(1.0f64 / 3.0, (2, 3, 3), &Device::Cpu).unwrap();
        let wi = fuse_weights(&uniform, &ws, 1e-8).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(wi.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn fuse_shape_mismatch_is_fault() {
        let a = Tensor::ones((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::ones((1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(fuse_weights(&a, &b, 1e-8), Err(Error::Fault(_))));
    }

    #[test]
    fn nan_features_fault() {
        let (_, rel) = build(&RelationConfig::default(), 0);
        let mut feats = vec![0.0f64; 2 * 96];
        feats[7] = f64::NAN;
        let set = EntitySet::new(
            Tensor::from_vec(feats, (2, 96), &Device::Cpu).unwrap(),
            vec![BBox { x: 1.5, y: 1.5, w: 1.0, h: 1.0 }; 2],
        )
        .unwrap();
        assert!(matches!(rel.forward(&set, 10.0), Err(Error::Fault(_))));
    }

    #[test]
    fn permutation_equivariance() {
        let (_, rel) = build(&RelationConfig::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = entities(&mut rng, 4, 96);
        let perm = [2usize, 0, 3, 1];
        let idx = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let permuted = EntitySet::new(
            set.features.index_select(&idx, 0).unwrap(),
            perm.iter().map(|&i| set.boxes[i]).collect(),
        )
        .unwrap();
        let a = rel.forward(&set, 90.0).unwrap().index_select(&idx, 0).unwrap();
        let b = rel.forward(&permuted, 90.0).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let cfg = RelationConfig::default();
        let (store, rel) = build(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = entities(&mut rng, 3, 96);
        let v = Var::from_tensor(&set.features).unwrap();
        let set = EntitySet::new(v.as_tensor().clone(), set.boxes).unwrap();
        let loss = rel.forward(&set, 90.0).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.named_vars() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no grad for {name}"));
            let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(norm > 0.0, "zero grad for {name}");
        }
        assert!(grads.get(v.as_tensor()).is_some());
    }
}
