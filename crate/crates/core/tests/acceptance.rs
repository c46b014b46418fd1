//! Acceptance criteria. Every test prints one `[PASS]`/`[FAIL]` line.
//!
//! The three training-scale criteria are `#[ignore]`d because they need hours
//! of compute; `recorded_training_criteria` reports on finished runs found
//! under the acceptance directory (`ENTITYDRAG_ACCEPTANCE_DIR`, default
//! `target/tmp/acceptance`) without training anything.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use entitydrag::config::Config;
use entitydrag::diffusion::loss::{loss_mask, masked_loss};
use entitydrag::diffusion::{ClipCondition, ModelConfig, VideoModel};
use entitydrag::entity_rep::{ConditioningMode, Entity, Trajectory};
use entitydrag::evalkit::{tracker_gate, EvalClip};
use entitydrag::experiment::{self, ExperimentReport, Variant};
use entitydrag::geometry::{self, BBox, Mask, Point, Raster};
use entitydrag::nn::ParamStore;
use entitydrag::pipeline::{self, LogLine};
use entitydrag::relation::{fuse_weights, EntitySet, RelationConfig, RelationParams};
use entitydrag::synth::{generate_clip, generate_dataset, sample_scene, Dataset, SceneSamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes straight to stderr so the line survives libtest's output capture.
fn say(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(name: &str, passed: bool, detail: impl std::fmt::Display) {
    say(format!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" }));
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Uniform values in `[lo, hi)` drawn from `rng`, so every run sees the same inputs.
fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Relation module instances and the scalar reference.

const SIDE: usize = 64;

struct Instance {
    store: ParamStore,
    rel: RelationParams,
    cfg: RelationConfig,
    features: Vec<Vec<f64>>,
    boxes: Vec<BBox>,
}

impl Instance {
    fn entities(&self) -> EntitySet {
        let n = self.features.len();
        let flat: Vec<f64> = self.features.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (n, self.cfg.feature_dim), &Device::Cpu).unwrap();
        EntitySet::new(t, self.boxes.clone()).unwrap()
    }

    fn param(&self, name: &str) -> Vec<f64> {
        let v = self.store.get(&format!("relation.{name}")).unwrap_or_else(|| panic!("no parameter {name}"));
        vec1(v.as_tensor())
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> RelationConfig {
    if rng.random_bool(0.25) {
        return RelationConfig::default();
    }
    let heads = rng.random_range(1..=3);
    RelationConfig {
        n_kernels_rho: rng.random_range(1..=6),
        n_kernels_theta: rng.random_range(1..=6),
        heads,
        feature_dim: heads * rng.random_range(1..=4),
        qk_dim: rng.random_range(1..=5),
        ..Default::default()
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox {
        x: rng.random_range(0..SIDE) as f64 + 0.5,
        y: rng.random_range(0..SIDE) as f64 + 0.5,
        w: rng.random_range(1..20) as f64,
        h: rng.random_range(1..20) as f64,
    }
}

/// Relation parameters with every kernel mean and width drawn at random,
/// not left at their grid initialization.
fn instance(rng: &mut ChaCha8Rng, n: usize) -> Instance {
    let cfg = random_config(rng);
    let store = ParamStore::new(rng.random(), DType::F64, Device::Cpu);
    let rel = RelationParams::new(&store.root().pp("relation"), &cfg).unwrap();
    let set = |name: &str, values: Vec<f64>| {
        let var = store.get(&format!("relation.{name}")).unwrap();
        let len = values.len();
        var.set(&Tensor::from_vec(values, len, &Device::Cpu).unwrap()).unwrap();
    };
    let (mr, mt) = (cfg.n_kernels_rho, cfg.n_kernels_theta);
    set("rho_mean", (0..mr).map(|_| rng.random_range(0.0..0.8)).collect());
    set("rho_log_sigma", (0..mr).map(|_| rng.random_range(0.03f64..0.5).ln()).collect());
    set("theta_mean", (0..mt).map(|_| rng.random_range(-PI..PI)).collect());
    set("theta_log_sigma", (0..mt).map(|_| rng.random_range(0.2f64..2.0).ln()).collect());
    let features = (0..n)
        .map(|_| (0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut boxes: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
    if n > 1 && rng.random_bool(0.2) {
        // coincident centers exercise the zero-offset case
        boxes[1].x = boxes[0].x;
        boxes[1].y = boxes[0].y;
    }
    Instance {
        store,
        rel,
        cfg,
        features,
        boxes,
    }
}

struct Reference {
    /// `[head][i][j]`
    spatial: Vec<Vec<Vec<f64>>>,
    fused: Vec<Vec<Vec<f64>>>,
    /// `[i][channel]`
    relational: Vec<Vec<f64>>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn wrap(mut a: f64) -> f64 {
    while a >= PI {
        a -= 2.0 * PI;
    }
    while a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// `weight` is `out x in`, row-major.
fn affine(weight: &[f64], bias: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let d_in = x.len();
    (0..weight.len() / d_in)
        .map(|o| {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for c in 0..d_in {
                acc += weight[o * d_in + c] * x[c];
            }
            acc
        })
        .collect()
}

/// Double loop over entity pairs, written straight from the definitions.
fn reference(inst: &Instance) -> Reference {
    let cfg = &inst.cfg;
    let n = inst.features.len();
    let (heads, dqk, hd) = (cfg.heads, cfg.qk_dim, cfg.feature_dim / cfg.heads);
    let diag = ((SIDE * SIDE * 2) as f64).sqrt();
    let (rm, rls) = (inst.param("rho_mean"), inst.param("rho_log_sigma"));
    let (tm, tls) = (inst.param("theta_mean"), inst.param("theta_log_sigma"));
    let (pw, pb) = (inst.param("spatial_proj.weight"), inst.param("spatial_proj.bias"));
    let (qw, kw) = (inst.param("query.weight"), inst.param("key.weight"));
    let (vw, vb) = (inst.param("values.weight"), inst.param("values.bias"));
    let (fw, fb) = (inst.param("residual.weight"), inst.param("residual.bias"));

    let mut raw = vec![vec![vec![0.0; n]; n]; heads];
    for i in 0..n {
        for j in 0..n {
            let dx = inst.boxes[j].x - inst.boxes[i].x;
            let dy = inst.boxes[j].y - inst.boxes[i].y;
            let rho = (dx * dx + dy * dy).sqrt() / diag;
            let theta = if rho == 0.0 {
                0.0
            } else {
                let a = dy.atan2(dx);
                if a == PI {
                    -PI
                } else {
                    a
                }
            };
            let mut emb = Vec::new();
            for m in 0..rm.len() {
                let s = rls[m].exp();
                emb.push((-(rho - rm[m]).powi(2) / (2.0 * s * s)).exp());
            }
            for m in 0..tm.len() {
                let s = tls[m].exp();
                emb.push((-wrap(theta - tm[m]).powi(2) / (2.0 * s * s)).exp());
            }
            for h in 0..heads {
                let mut z = pb[h];
                for (m, e) in emb.iter().enumerate() {
                    z += pw[h * emb.len() + m] * e;
                }
                raw[h][i][j] = softplus(z);
            }
        }
    }
    let mut spatial = raw.clone();
    for row in spatial.iter_mut().flatten() {
        let total: f64 = row.iter().sum::<f64>() + cfg.eps;
        row.iter_mut().for_each(|v| *v /= total);
    }

    let q: Vec<Vec<f64>> = inst.features.iter().map(|f| affine(&qw, None, f)).collect();
    let k: Vec<Vec<f64>> = inst.features.iter().map(|f| affine(&kw, None, f)).collect();
    let mut fused = vec![vec![vec![0.0; n]; n]; heads];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dqk).map(|d| q[i][h * dqk + d] * k[j][h * dqk + d]).sum::<f64>() / (dqk as f64).sqrt())
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let num: Vec<f64> = (0..n).map(|j| spatial[h][i][j] * (scores[j] - top).exp()).collect();
            let total: f64 = num.iter().sum();
            for j in 0..n {
                fused[h][i][j] = num[j] / total;
            }
        }
    }

    let vals: Vec<Vec<f64>> = inst.features.iter().map(|f| affine(&vw, Some(&vb), f)).collect();
    let relational = (0..n)
        .map(|i| {
            let mut out = affine(&fw, Some(&fb), &inst.features[i]);
            for h in 0..heads {
                for e in 0..hd {
                    for j in 0..n {
                        out[h * hd + e] += fused[h][i][j] * vals[j][h * hd + e];
                    }
                }
            }
            out
        })
        .collect();
    Reference {
        spatial,
        fused,
        relational,
    }
}

fn flat3(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    x.iter().flatten().flatten().copied().collect()
}

#[test]
fn relation_oracle_equivalence() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let diag = geometry::image_diagonal(SIDE, SIDE);
    let (mut e_p, mut e_i, mut e_v) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let inst = instance(&mut rng, n);
        let ents = inst.entities();
        let wp = inst.rel.spatial_weight_matrix(&ents, diag).unwrap();
        let ws = inst.rel.semantic_weight_matrix(&ents).unwrap();
        let wi = fuse_weights(&wp, &ws, inst.cfg.eps).unwrap();
        let vr = inst.rel.forward(&ents, diag).unwrap();
        let r = reference(&inst);
        e_p = e_p.max(max_abs_diff(&vec1(&wp), &flat3(&r.spatial)));
        e_i = e_i.max(max_abs_diff(&vec1(&wi), &flat3(&r.fused)));
        let rv: Vec<f64> = r.relational.iter().flatten().copied().collect();
        e_v = e_v.max(max_abs_diff(&vec1(&vr), &rv));
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = e_p < 1e-6 && e_i < 1e-6 && e_v < 1e-5 && secs < 60.0;
    report(
        "relation oracle equivalence",
        passed,
        format!("200 instances, max |dw_p| {e_p:.2e}, |dw_I| {e_i:.2e} (tol 1e-6), |dV_r| {e_v:.2e} (tol 1e-5), {secs:.1}s"),
    );
    assert!(passed);
}

#[test]
fn normalization_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let diag = geometry::image_diagonal(SIDE, SIDE);
    let (mut dev_p, mut dev_i) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..=5);
        let inst = instance(&mut rng, n);
        let ents = inst.entities();
        let wp = inst.rel.spatial_weight_matrix(&ents, diag).unwrap();
        let ws = inst.rel.semantic_weight_matrix(&ents).unwrap();
        let wi = fuse_weights(&wp, &ws, inst.cfg.eps).unwrap();
        for (w, dev) in [(&wp, &mut dev_p), (&wi, &mut dev_i)] {
            for s in vec1(&w.sum(2).unwrap()) {
                *dev = dev.max((s - 1.0).abs());
            }
        }
    }
    let passed = dev_p < 1e-6 && dev_i < 1e-6;
    report(
        "normalization",
        passed,
        format!("1000 instances, max |sum_j w_p - 1| {dev_p:.2e}, max |sum_j w_I - 1| {dev_i:.2e} (tol 1e-6)"),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// Finite differences.

const FD_STEP: f64 = 1e-5;

/// Largest coordinate-wise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
struct FdResult {
    worst: f64,
    worst_at: String,
    checked: usize,
    /// Coordinates whose numeric derivative is not negligible.
    live: usize,
}

fn fd_check(vars: &[(String, Var)], per_var: usize, rng: &mut ChaCha8Rng, loss: &dyn Fn() -> Tensor, floor: f64) -> FdResult {
    let grads = loss().backward().unwrap();
    let (mut worst, mut checked, mut live, mut worst_at) = (0.0f64, 0usize, 0usize, String::new());
    for (name, var) in vars {
        // parameters the loss does not touch, e.g. the null-entity vector in full mode
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        let analytic = vec1(g);
        let base = vec1(var.as_tensor());
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..base.len())).collect()
        };
        let shape = var.as_tensor().dims().to_vec();
        let eval_at = |idx: usize, delta: f64| {
            let mut v = base.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            vec1(&loss())[0]
        };
        for idx in picks {
            let numeric = (eval_at(idx, FD_STEP) - eval_at(idx, -FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{idx}] (analytic {a:.3e}, numeric {numeric:.3e})");
            }
            checked += 1;
            live += (numeric.abs() >= floor) as usize;
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
    }
    FdResult {
        worst,
        worst_at,
        checked,
        live,
    }
}

#[test]
fn gradient_suite() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let diag = geometry::image_diagonal(SIDE, SIDE);

    // relation module: every parameter coordinate and every input feature
    let mut rel_worst = 0.0f64;
    let (mut rel_checked, mut rel_live) = (0, 0);
    let mut rel_at = String::new();
    for _ in 0..5 {
        let n = rng.random_range(2..=5);
        let mut inst = instance(&mut rng, n);
        while inst.cfg == RelationConfig::default() {
            inst = instance(&mut rng, n);
        }
        let features = Var::from_tensor(&inst.entities().features).unwrap();
        let probe = uniform(&mut rng, -1.0, 1.0, &[n, inst.cfg.feature_dim]);
        let loss = || {
            let set = EntitySet::new(features.as_tensor().clone(), inst.boxes.clone()).unwrap();
            (inst.rel.forward(&set, diag).unwrap() * &probe).unwrap().sum_all().unwrap()
        };
        let mut vars = inst.store.named_vars();
        vars.push(("features".into(), features.clone()));
        let r = fd_check(&vars, usize::MAX, &mut rng, &loss, 1e-6);
        if r.worst > rel_worst {
            rel_worst = r.worst;
            rel_at = r.worst_at;
        }
        rel_checked += r.checked;
        rel_live += r.live;
    }
    let rel_ok = rel_worst < 1e-4 && rel_live * 2 > rel_checked;
    report(
        "gradient check, relation module",
        rel_ok,
        format!("{rel_checked} coordinates ({rel_live} non-negligible), max relative error {rel_worst:.2e} at {rel_at} (tol 1e-4)"),
    );

    // guidance encoder + entity maps + denoiser under the masked loss
    let cfg = ModelConfig::micro(16, 16, 2);
    let model = VideoModel::new(&cfg, 21, DType::F64, &Device::Cpu).unwrap();
    // zero-initialized layers (injection, output, temporal mixing) would
    // block every gradient upstream of them
    for (_, var) in model.store().named_vars() {
        if vec1(var.as_tensor()).iter().all(|v| *v == 0.0) {
            let t = uniform(&mut rng, -0.3, 0.3, var.as_tensor().dims());
            var.set(&t).unwrap();
        }
    }
    // the grid puts an angle kernel exactly on the wrap seam, where the
    // self-pair offset (angle 0) makes the embedding non-differentiable
    let theta_mean = model.store().get("entity.relation.theta_mean").unwrap();
    let k = theta_mean.as_tensor().dims()[0];
    theta_mean.set(&(theta_mean.as_tensor() + uniform(&mut rng, 0.01, 0.1, &[k])).unwrap()).unwrap();
    let cond = micro_condition(&mut rng);
    let x_t = uniform(&mut rng, -1.5, 1.5, &[2, 3, 16, 16]);
    let noise = uniform(&mut rng, -1.5, 1.5, &[2, 3, 16, 16]);
    let mask = loss_mask(&cond.owners, 2, 16, 16, 0.1, &x_t).unwrap();
    let loss = || {
        let (first, maps) = model.conditioning(&[&cond], &[ConditioningMode::Full]).unwrap();
        let pred = model.predict_noise(&x_t, &first, Some(&maps), &[9]).unwrap();
        masked_loss(&noise, &pred, &mask).unwrap()
    };
    let vars: Vec<(String, Var)> = model
        .store()
        .named_vars()
        .into_iter()
        .filter(|(n, _)| n.starts_with("guidance.") || n.starts_with("entity."))
        .collect();
    let comp = fd_check(&vars, 3, &mut rng, &loss, 1e-6);
    let comp_ok = comp.worst < 1e-3 && comp.live * 2 > comp.checked;
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient check, guidance composite",
        comp_ok && secs < 300.0,
        format!(
            "{} coordinates over {} tensors ({} non-negligible), max relative error {:.2e} at {} (tol 1e-3), suite {secs:.0}s",
            comp.checked,
            vars.len(),
            comp.live,
            comp.worst,
            comp.worst_at
        ),
    );
    assert!(rel_ok && comp_ok && secs < 300.0);
}

fn disk_entity(id: u32, cx: f64, cy: f64, r: f64, side: usize) -> Entity {
    let m = Mask::from_fn(side, side, |row, col| Point::pixel_center(row, col).distance(&Point::new(cx, cy)) <= r);
    Entity::from_mask(id, m).unwrap()
}

fn micro_condition(rng: &mut ChaCha8Rng) -> ClipCondition {
    let first = uniform(rng, -1.0, 1.0, &[1, 3, 16, 16]);
    let ents = vec![disk_entity(1, 4.5, 4.5, 2.5, 16), disk_entity(2, 11.5, 10.5, 3.0, 16)];
    let mut jitter = |p: f64| p + rng.random_range(-2.0..2.0);
    let trajs = vec![
        Trajectory::new(1, [Point::new(4.5, 4.5), Point::new(jitter(6.5), jitter(5.0))]),
        Trajectory::new(2, [Point::new(11.5, 10.5), Point::new(jitter(10.0), jitter(12.0))]),
    ];
    ClipCondition::new(first, ents, trajs, 2).unwrap()
}

// ---------------------------------------------------------------------------
// Invariances.

#[test]
fn invariance_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let diag = geometry::image_diagonal(SIDE, SIDE);
    let (mut translation_ok, mut perm_err, mut shift_err) = (true, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let inst = instance(&mut rng, n);
        let ents = inst.entities();

        // lattice translation keeps every offset exactly representable
        let (tx, ty) = (rng.random_range(-40..=40) as f64, rng.random_range(-40..=40) as f64);
        let moved: Vec<BBox> = inst.boxes.iter().map(|b| BBox { x: b.x + tx, y: b.y + ty, ..*b }).collect();
        let moved = EntitySet::new(ents.features.clone(), moved).unwrap();
        let a = vec1(&inst.rel.spatial_weight_matrix(&ents, diag).unwrap());
        let b = vec1(&inst.rel.spatial_weight_matrix(&moved, diag).unwrap());
        translation_ok &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

        // permuting entities permutes the rows of V_r
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), n, &Device::Cpu).unwrap();
        let permuted = EntitySet::new(
            ents.features.index_select(&idx, 0).unwrap(),
            perm.iter().map(|&p| inst.boxes[p]).collect(),
        )
        .unwrap();
        let base = inst.rel.forward(&ents, diag).unwrap();
        let expected = vec1(&base.index_select(&idx, 0).unwrap());
        let got = vec1(&inst.rel.forward(&permuted, diag).unwrap());
        perm_err = perm_err.max(max_abs_diff(&expected, &got));

        // adding a constant to each row of w_s leaves w_I unchanged
        let wp = inst.rel.spatial_weight_matrix(&ents, diag).unwrap();
        let ws = inst.rel.semantic_weight_matrix(&ents).unwrap();
        let shift = uniform(&mut rng, -50.0, 50.0, &[inst.cfg.heads, n, 1]);
        let shifted = ws.broadcast_add(&shift).unwrap();
        let w0 = vec1(&fuse_weights(&wp, &ws, inst.cfg.eps).unwrap());
        let w1 = vec1(&fuse_weights(&wp, &shifted, inst.cfg.eps).unwrap());
        shift_err = shift_err.max(max_abs_diff(&w0, &w1));
    }
    report("translation invariance of w_p", translation_ok, "100 instances, bit-exact under lattice shifts");
    report("permutation equivariance of V_r", perm_err < 1e-12, format!("100 instances, max deviation {perm_err:.2e} (tol 1e-12)"));
    report("row-shift invariance of w_I", shift_err < 1e-12, format!("100 instances, max deviation {shift_err:.2e} (tol 1e-12)"));

    // freshly built guidance leaves the denoiser untouched
    let mut no_op = true;
    for (dtype, seed) in [(DType::F32, 3u64), (DType::F64, 4)] {
        let model = VideoModel::new(&ModelConfig::micro(16, 16, 2), seed, dtype, &Device::Cpu).unwrap();
        let cond = micro_condition(&mut rng);
        let x = uniform(&mut rng, -1.5, 1.5, &[2, 3, 16, 16]).to_dtype(dtype).unwrap();
        for mode in [ConditioningMode::Full, ConditioningMode::NoPosition, ConditioningMode::None] {
            let (first, maps) = model.conditioning(&[&cond], &[mode]).unwrap();
            let with = vec1(&model.predict_noise(&x, &first, Some(&maps), &[5]).unwrap());
            let without = vec1(&model.predict_noise(&x, &first, None, &[5]).unwrap());
            no_op &= with.iter().zip(&without).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    report("zero-init guidance no-op", no_op, "f32 and f64, three modes, bit-exact");
    assert!(translation_ok && perm_err < 1e-12 && shift_err < 1e-12 && no_op);
}

// ---------------------------------------------------------------------------
// Geometry.

fn random_blob(rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
    let parts: Vec<(f64, f64, f64, bool)> = (0..rng.random_range(1..=4))
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(0.5..8.0),
                rng.random_bool(0.5),
            )
        })
        .collect();
    let mut m = Mask::from_fn(h, w, |r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        parts.iter().any(|&(cx, cy, s, square)| {
            if square {
                (x - cx).abs() <= s && (y - cy).abs() <= s
            } else {
                (x - cx).hypot(y - cy) <= s
            }
        })
    });
    if m.is_empty() {
        m.set(rng.random_range(0..h), rng.random_range(0..w), true);
    }
    m
}

/// Every foreground pixel against every background pixel, with the
/// outside of the raster counted as background.
fn brute_incircle(m: &Mask) -> (usize, usize, f64) {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let mut best: Option<(i64, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if !m.get(r as usize, c as usize) {
                continue;
            }
            let edge = (r + 1).min(h - r).min(c + 1).min(w - c);
            let mut d2 = edge * edge;
            for br in 0..h {
                for bc in 0..w {
                    if !m.get(br as usize, bc as usize) {
                        d2 = d2.min((br - r).pow(2) + (bc - c).pow(2));
                    }
                }
            }
            if best.is_none_or(|(b, _, _)| d2 > b) {
                best = Some((d2, r as usize, c as usize));
            }
        }
    }
    let (d2, r, c) = best.unwrap();
    (r, c, (d2 as f64).sqrt())
}

#[test]
fn geometry_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut incircle_ok = 0;
    for _ in 0..100 {
        let m = random_blob(&mut rng);
        let got = geometry::incircle(&m).unwrap();
        let (r, c, radius) = brute_incircle(&m);
        let center = Point::pixel_center(r, c);
        if got.center == center && (got.radius - radius).abs() < 1e-9 {
            incircle_ok += 1;
        }
    }
    report("incircle vs brute force", incircle_ok == 100, format!("{incircle_ok}/100 blobs exact (center, radius within 1e-9)"));

    let mut disk_ok = 0;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let center = Point::new(rng.random_range(-5.0..w as f64 + 5.0), rng.random_range(-5.0..h as f64 + 5.0));
        let radius = rng.random_range(0.0..12.0);
        let mut canvas = Raster::zeros(h, w, 1);
        geometry::paint_disk(&mut canvas, center, radius, &[1.0]).unwrap();
        let r = radius.max(geometry::MIN_DISK_RADIUS);
        let same = (0..h).all(|row| {
            (0..w).all(|col| {
                let (dx, dy) = (col as f64 + 0.5 - center.x, row as f64 + 0.5 - center.y);
                (dx * dx + dy * dy <= r * r) == (canvas.pixel(row, col)[0] == 1.0)
            })
        });
        disk_ok += same as usize;
    }
    report("paint_disk vs per-pixel predicate", disk_ok == 200, format!("{disk_ok}/200 rasters identical"));
    assert!(incircle_ok == 100 && disk_ok == 200);
}

// ---------------------------------------------------------------------------
// Tracker.

#[test]
fn tracker_gate_on_ground_truth() {
    let cfg = SceneSamplerConfig {
        allow_occlusion: false,
        ..Default::default()
    };
    let clips: Vec<EvalClip> = (0..100u64)
        .map(|seed| EvalClip {
            clip_id: format!("gate-{seed:03}"),
            seed,
            clip: generate_clip(&sample_scene(&cfg, 1000 + seed).unwrap()).unwrap(),
        })
        .collect();
    let gate = tracker_gate(&clips).unwrap();
    let mean = gate.mean_objmc.unwrap_or(f64::NAN);
    let passed = mean < 1.0;
    report("tracker gate", passed, format!("100 unoccluded clips, mean ObjMC {mean:.3} px (tol < 1.0)"));
    assert!(passed);
}

// ---------------------------------------------------------------------------
// Training-scale criteria.

fn acceptance_dir() -> PathBuf {
    std::env::var_os("ENTITYDRAG_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

/// 32x32 fallback of the tiny config: L = 8, base 32 channels, 2k steps.
const SMOKE_OVERRIDES: &[(&str, &str)] = &[
    ("dataset.train_clips", "400"),
    ("dataset.val_clips", "20"),
    ("dataset.test_clips", "50"),
    ("dataset.scene.height", "32"),
    ("dataset.scene.width", "32"),
    ("dataset.scene.min_size", "6.0"),
    ("dataset.scene.max_size", "10.0"),
    ("dataset.scene.min_speed", "0.5"),
    ("dataset.scene.max_speed", "2.0"),
    ("model.height", "32"),
    ("model.width", "32"),
    ("model.denoiser.base_channels", "32"),
    ("train.steps", "2000"),
    ("train.log_every", "100"),
    ("train.checkpoint_every", "250"),
];

fn smoke_config(dir: &Path) -> Config {
    let mut overrides: Vec<(String, String)> = SMOKE_OVERRIDES.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    overrides.push(("paths.data".into(), dir.join("data32").display().to_string()));
    overrides.push(("paths.checkpoint".into(), dir.join("smoke32").display().to_string()));
    Config::load(None, &overrides, std::iter::empty()).unwrap()
}

/// First and last window means of a finished run's training log.
fn smoke_losses(cfg: &Config) -> Option<(f64, f64)> {
    let manifest = entitydrag::diffusion::checkpoint::read_manifest(&cfg.paths.checkpoint).ok()?;
    if manifest.step < cfg.train.steps || manifest.training.as_ref() != Some(&cfg.train) {
        return None;
    }
    let log = std::fs::read_to_string(cfg.paths.checkpoint.join(pipeline::TRAIN_LOG)).ok()?;
    let lines: Vec<LogLine> = log.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    let first = lines.iter().find(|l| l.step == cfg.train.log_every)?;
    let last = lines.iter().find(|l| l.step == cfg.train.steps)?;
    Some((first.loss, last.loss))
}

fn report_smoke(first: f64, last: f64, origin: &str) -> bool {
    let passed = last <= 0.5 * first;
    report(
        "training smoke test",
        passed,
        format!("32x32, 2000 steps, first-100 mean loss {first:.4}, last-100 {last:.4}, ratio {:.3} (tol <= 0.5); {origin}", last / first),
    );
    passed
}

fn experiment_config(dir: &Path) -> Config {
    let overrides = vec![("paths.data".to_string(), dir.join("data64").display().to_string())];
    Config::load(None, &overrides, std::iter::empty()).unwrap()
}

fn variant_mean(r: &ExperimentReport, v: Variant) -> f64 {
    r.row(v).and_then(|row| row.mean).unwrap_or(f64::NAN)
}

fn report_efficacy(r: &ExperimentReport) -> bool {
    let (full, none) = (variant_mean(r, Variant::Full), variant_mean(r, Variant::Unconditioned));
    let passed = full <= 0.5 * none;
    report(
        "control efficacy",
        passed,
        format!("{} seeds, mean ObjMC full {full:.2} vs unconditioned {none:.2} (need full <= 0.5x)", r.runs.len()),
    );
    passed
}

fn report_ordering(r: &ExperimentReport) -> bool {
    let full = variant_mean(r, Variant::Full);
    let entity_only = variant_mean(r, Variant::NoPosition);
    let none = variant_mean(r, Variant::Unconditioned);
    let unmasked = variant_mean(r, Variant::NoLossMask);
    let passed = full <= entity_only && entity_only <= none && full <= unmasked;
    report(
        "ablation ordering",
        passed,
        format!("mean ObjMC full {full:.2} <= relation bypassed {entity_only:.2} <= unconditioned {none:.2}; loss mask {full:.2} <= uniform {unmasked:.2}"),
    );
    passed
}

#[test]
fn recorded_training_criteria() {
    let dir = acceptance_dir();
    let smoke = smoke_config(&dir);
    match smoke_losses(&smoke) {
        Some((first, last)) => {
            report_smoke(first, last, &format!("recorded run in {}", smoke.paths.checkpoint.display()));
        }
        None => say(format!("[SKIP] training smoke test: no finished run in {}; run `cargo test --release --test acceptance -- --ignored`", smoke.paths.checkpoint.display())),
    }
    let exp_dir = dir.join("experiment");
    match ExperimentReport::load(&exp_dir) {
        Ok(r) if r.runs.len() >= 3 => {
            report_efficacy(&r);
            report_ordering(&r);
        }
        _ => {
            for name in ["control efficacy", "ablation ordering"] {
                say(format!("[SKIP] {name}: no finished 3-seed experiment in {}; run `cargo test --release --test acceptance -- --ignored`", exp_dir.display()));
            }
        }
    }
}

#[test]
#[ignore = "trains for hours on CPU"]
fn training_smoke_test() {
    let dir = acceptance_dir();
    let cfg = smoke_config(&dir);
    generate_dataset(&cfg.dataset, &cfg.paths.data).unwrap();
    let ds = Dataset::open(&cfg.paths.data).unwrap();
    pipeline::train(&ds, &cfg.model, &cfg.train, &cfg.paths.checkpoint).unwrap();
    let (first, last) = smoke_losses(&cfg).expect("finished run with a training log");
    assert!(report_smoke(first, last, "trained by this test"));
}

fn full_experiment() -> ExperimentReport {
    let dir = acceptance_dir();
    let cfg = experiment_config(&dir);
    generate_dataset(&cfg.dataset, &cfg.paths.data).unwrap();
    let ds = Dataset::open(&cfg.paths.data).unwrap();
    experiment::run(&cfg, &ds, &dir.join("experiment")).unwrap()
}

#[test]
#[ignore = "3 seeds x 4 variants x 20k training steps"]
fn control_efficacy() {
    assert!(report_efficacy(&full_experiment()));
}

#[test]
#[ignore = "3 seeds x 4 variants x 20k training steps"]
fn ablation_ordering() {
    assert!(report_ordering(&full_experiment()));
}
