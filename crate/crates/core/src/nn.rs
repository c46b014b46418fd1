//! Seeded parameter store and the handful of layers the model needs.
//!
//! Every parameter is drawn from a ChaCha stream in construction order, so two
//! models built from the same seed are bit-identical.

use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub struct ParamStore {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device,
        }
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All parameters sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().expect("varmap lock").get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn insert(&self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        let prev = self.varmap.data().lock().expect("varmap lock").insert(name.clone(), var);
        assert!(prev.is_none(), "duplicate parameter {name}");
        Ok(tensor)
    }
}

/// Prefix-scoped view into a [`ParamStore`].
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = {
            let mut rng = self.store.rng.lock().expect("rng lock");
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        self.store.insert(self.path(name), values, shape)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.store.insert(self.path(name), vec![value; n], shape)
    }

    pub fn from_values(&self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.store.insert(self.path(name), values, shape)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn,
    Zero,
}

pub fn linear(p: &Params, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<candle_nn::Linear> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let weight = match init {
        Init::FanIn => p.uniform("weight", &[d_out, d_in], bound)?,
        Init::Zero => p.constant("weight", &[d_out, d_in], 0.0)?,
    };
    let bias = if bias {
        Some(match init {
            Init::FanIn => p.uniform("bias", &[d_out], bound)?,
            Init::Zero => p.constant("bias", &[d_out], 0.0)?,
        })
    } else {
        None
    };
    Ok(candle_nn::Linear::new(weight, bias))
}

/// Same-padded 2D convolution over `N x C x H x W`, computed as an
/// unfolded matmul so both passes run through gemm. candle's CPU
/// conv_transpose2d, which its conv2d backward relies on, is a naive loop.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn unfold(&self, x: &Tensor) -> candle_core::Result<(Tensor, usize, usize)> {
        let (_, _, h, w) = x.dims4()?;
        let op = Unfold {
            kernel: self.kernel,
            stride: self.stride,
            height: h,
            width: w,
        };
        let (ho, wo) = op.out_size();
        Ok((x.contiguous()?.apply_op1(op)?, ho, wo))
    }
}

/// Patch extraction `N x C x H x W -> N x (C k k) x (Ho Wo)` for a
/// same-padded `k x k` window, with its adjoint as the backward pass.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    kernel: usize,
    stride: usize,
    height: usize,
    width: usize,
}

impl Unfold {
    fn out_size(&self) -> (usize, usize) {
        let pad = self.kernel / 2;
        let out = |n: usize| (n + 2 * pad - self.kernel) / self.stride + 1;
        (out(self.height), out(self.width))
    }

    /// Calls `f(image_index, column_index)` for every in-bounds tap of one
    /// channel plane.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = self.out_size();
        for ky in 0..k {
            for kx in 0..k {
                let col_base = (ky * k + kx) * ho * wo;
                for oy in 0..ho {
                    let Some(y) = (oy * s + ky).checked_sub(pad).filter(|&y| y < self.height) else {
                        continue;
                    };
                    for ox in 0..wo {
                        let Some(x) = (ox * s + kx).checked_sub(pad).filter(|&x| x < self.width) else {
                            continue;
                        };
                        f(y * self.width + x, col_base + oy * wo + ox);
                    }
                }
            }
        }
    }

    fn planes(&self, layout: &candle_core::Layout, plane: usize) -> candle_core::Result<(usize, usize)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("unfold expects a contiguous tensor".into()))?;
        Ok((start, (end - start) / plane))
    }

    fn unfold<T: Copy + Default>(&self, src: &[T], planes: usize) -> Vec<T> {
        let (ho, wo) = self.out_size();
        let (img, cols) = (self.height * self.width, self.kernel * self.kernel * ho * wo);
        let mut out = vec![T::default(); planes * cols];
        for p in 0..planes {
            let (src, dst) = (&src[p * img..(p + 1) * img], &mut out[p * cols..(p + 1) * cols]);
            self.for_each_tap(|i, j| dst[j] = src[i]);
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T], planes: usize) -> Vec<T> {
        let (ho, wo) = self.out_size();
        let (img, cols) = (self.height * self.width, self.kernel * self.kernel * ho * wo);
        let mut out = vec![T::default(); planes * img];
        for p in 0..planes {
            let (src, dst) = (&src[p * cols..(p + 1) * cols], &mut out[p * img..(p + 1) * img]);
            self.for_each_tap(|i, j| dst[i] += src[j]);
        }
        out
    }
}

impl candle_core::CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (n, c, _, _) = layout.shape().dims4()?;
        let (start, planes) = self.planes(layout, self.height * self.width)?;
        let (ho, wo) = self.out_size();
        let out = match storage {
            S::F32(v) => S::F32(self.unfold(&v[start..], planes)),
            S::F64(v) => S::F64(self.unfold(&v[start..], planes)),
            _ => candle_core::bail!("unfold supports f32 and f64"),
        };
        Ok((out, (n, c * self.kernel * self.kernel, ho * wo).into()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1_no_bwd(&Fold(*self))?;
        Ok(Some(g.reshape(arg.dims())?))
    }
}

/// Adjoint of [`Unfold`]: overlapping patches are summed back into place.
struct Fold(Unfold);

impl candle_core::CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let u = &self.0;
        let (ho, wo) = u.out_size();
        let (n, _, _) = layout.shape().dims3()?;
        let (start, planes) = u.planes(layout, u.kernel * u.kernel * ho * wo)?;
        let out = match storage {
            S::F32(v) => S::F32(u.fold(&v[start..], planes)),
            S::F64(v) => S::F64(u.fold(&v[start..], planes)),
            _ => candle_core::bail!("fold supports f32 and f64"),
        };
        Ok((out, (n, planes / n, u.height, u.width).into()))
    }
}

impl candle_core::Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let c_out = self.weight.dims()[0];
        let (cols, ho, wo) = if self.kernel == 1 && self.stride == 1 {
            (x.reshape((n, c, h * w))?, h, w)
        } else {
            self.unfold(x)?
        };
        let wm = self.weight.reshape((c_out, c * self.kernel * self.kernel))?;
        wm.broadcast_matmul(&cols)?
            .broadcast_add(&self.bias.reshape((c_out, 1))?)?
            .reshape((n, c_out, ho, wo))
    }
}

pub fn conv2d(p: &Params, c_in: usize, c_out: usize, kernel: usize, stride: usize, init: Init) -> Result<Conv2d> {
    let fan_in = c_in * kernel * kernel;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let shape = [c_out, c_in, kernel, kernel];
    let (weight, bias) = match init {
        Init::FanIn => (p.uniform("weight", &shape, bound)?, p.uniform("bias", &[c_out], bound)?),
        Init::Zero => (p.constant("weight", &shape, 0.0)?, p.constant("bias", &[c_out], 0.0)?),
    };
    Ok(Conv2d {
        weight,
        bias,
        kernel,
        stride,
    })
}

/// Same-padded 1D convolution over a sequence axis, computed as an
/// unfolded matmul. candle's native conv1d backward breaks when the
/// sequence is not longer than the padding.
#[derive(Debug, Clone)]
pub struct SeqConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl SeqConv {
    /// `N x C x L` to `N x C_out x L`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, l) = x.dims3()?;
        let pad = self.kernel / 2;
        let x = x.pad_with_zeros(2, pad, pad)?;
        let taps = (0..self.kernel).map(|k| x.narrow(2, k, l)).collect::<candle_core::Result<Vec<_>>>()?;
        let cols = Tensor::stack(&taps, 2)?.reshape((n, c * self.kernel, l))?;
        let (c_out, _, _) = self.weight.dims3()?;
        let w = self.weight.reshape((c_out, c * self.kernel))?;
        w.broadcast_matmul(&cols)?.broadcast_add(&self.bias.reshape((c_out, 1))?)
    }

    /// `N x L x C x P` to `N x L x C_out x P`: every one of the `P`
    /// positions is convolved independently along `L`.
    pub fn forward_steps(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, l, c, p) = x.dims4()?;
        let pad = self.kernel / 2;
        let x = x.pad_with_zeros(1, pad, pad)?;
        let taps = (0..self.kernel).map(|k| x.narrow(1, k, l)).collect::<candle_core::Result<Vec<_>>>()?;
        // channel-major unfold matches the (c_out, c_in, k) weight layout
        let cols = Tensor::stack(&taps, 3)?.reshape((n * l, c * self.kernel, p))?;
        let (c_out, _, _) = self.weight.dims3()?;
        let w = self.weight.reshape((c_out, c * self.kernel))?;
        w.broadcast_matmul(&cols)?
            .broadcast_add(&self.bias.reshape((c_out, 1))?)?
            .reshape((n, l, c_out, p))
    }
}

pub fn conv1d(p: &Params, c_in: usize, c_out: usize, kernel: usize, init: Init) -> Result<SeqConv> {
    let fan_in = c_in * kernel;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let shape = [c_out, c_in, kernel];
    let (weight, bias) = match init {
        Init::FanIn => (p.uniform("weight", &shape, bound)?, p.uniform("bias", &[c_out], bound)?),
        Init::Zero => (p.constant("weight", &shape, 0.0)?, p.constant("bias", &[c_out], 0.0)?),
    };
    Ok(SeqConv { weight, bias, kernel })
}

/// Largest divisor of `channels` that does not exceed `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

pub fn group_norm(p: &Params, channels: usize, max_groups: usize) -> Result<candle_nn::GroupNorm> {
    let weight = p.constant("weight", &[channels], 1.0)?;
    let bias = p.constant("bias", &[channels], 0.0)?;
    Ok(candle_nn::GroupNorm::new(
        weight,
        bias,
        channels,
        group_count(channels, max_groups),
        1e-5,
    )?)
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::silu(x)
}
