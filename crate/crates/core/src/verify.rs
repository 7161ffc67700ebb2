//! Self-checks run by `gasa verify`.
//!
//! Each suite compares a library routine against an independent, slower
//! oracle: central finite differences for gradients, all-pairs distances for
//! the surface metric, closed-form values for resampling, and a per-voxel
//! loop for sliding-window blending. Failures are report entries, not errors.

use serde::Serialize;

use crate::autodiff::{Conv3dOpts, Tape, Var};
use crate::backbone::{build_model, BackboneConfig};
use crate::error::Result;
use crate::gasa::{GasaBlock, GasaConfig, GasaOptions, PeMode};
use crate::gradcheck::{self, GradCheckOpts, GradCheckReport};
use crate::infer::{sliding_window_predict, SegmentationModel, SlidingWindowConfig};
use crate::loss::{one_hot, soft_dice_ce_loss};
use crate::metrics::nsd_masks;
use crate::params::{Bound, ParamStore};
use crate::preprocess::{resample_image, resample_labels, resampled_extents, separate_axis, source_coord};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Offset added to every analytic gradient; nonzero values must fail.
    pub perturb_gradient: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest error observed, in the check's own units.
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub max_grad_rel_err: f64,
    pub checks: Vec<CheckOutcome>,
}

/// Raw result of one oracle comparison.
#[derive(Clone, Debug)]
pub struct Measured {
    pub cases: usize,
    pub max_error: f64,
    pub detail: String,
}

fn run(name: &str, tolerance: f64, f: impl FnOnce() -> Result<Measured>) -> CheckOutcome {
    match f() {
        Ok(m) => CheckOutcome {
            name: name.into(),
            passed: m.cases > 0 && m.max_error <= tolerance,
            cases: m.cases,
            max_error: m.max_error,
            tolerance,
            detail: m.detail,
        },
        Err(e) => CheckOutcome {
            name: name.into(),
            passed: false,
            cases: 0,
            max_error: f64::NAN,
            tolerance,
            detail: e.to_string(),
        },
    }
}

fn from_grad(r: GradCheckReport) -> Measured {
    Measured {
        cases: r.checked,
        max_error: r.max_rel_err,
        detail: match r.worst {
            Some((t, e, a, n)) => format!("worst input {t} element {e}: analytic {a:e}, numeric {n:e}"),
            None => String::new(),
        },
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0))
}

fn grad_opts(opts: &VerifyOptions) -> GradCheckOpts {
    GradCheckOpts {
        perturb: opts.perturb_gradient,
        ..GradCheckOpts::default()
    }
}

/// Strided padded convolution, instance norm, leaky ReLU and softmax.
pub fn grad_ops(opts: &VerifyOptions) -> Result<GradCheckReport> {
    let mut rng = Rng::new(opts.seed ^ 0x0b5);
    let x = random(&[2, 5, 4, 3], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let g = random(&[3], &mut rng);
    let beta = random(&[3], &mut rng);
    let probe = random(&[3, 3, 2, 2], &mut rng);
    gradcheck::check(&[x, w, b, g, beta], grad_opts(opts), |t, v| {
        let y = t.conv3d(v[0], v[1], v[2], Conv3dOpts::same(3, 2))?;
        let y = t.instance_norm(y, v[3], v[4])?;
        let y = t.leaky_relu(y, 0.01);
        let y = t.softmax(y, 0)?;
        let p = t.constant(probe.clone());
        let m = t.mul(y, p)?;
        Ok(t.sum(m))
    })
}

/// Every parameter and the input of one block, dropout off.
pub fn grad_gasa_block(opts: &VerifyOptions, options: GasaOptions, c: usize, spatial: [usize; 3]) -> Result<GradCheckReport> {
    let mut rng = Rng::new(opts.seed ^ 0x9a5a);
    let cfg = GasaConfig::new(options, c, spatial)?;
    let mut store = ParamStore::new();
    let block = GasaBlock::new(cfg, &mut store, "gasa", &mut rng);
    // The positional table starts at zero; give it values so its gradient
    // path is exercised with a nontrivial forward.
    let mut inputs: Vec<Tensor> = store
        .tensors()
        .iter()
        .map(|t| Tensor::from_fn(t.shape().to_vec(), |_| rng.uniform_range(-0.5, 0.5)))
        .collect();
    let x = random(&[c, spatial[0], spatial[1], spatial[2]], &mut rng);
    inputs.push(x);
    let out_c = c + 3 * block.cfg.d_model();
    let probe = random(&[out_c, spatial[0], spatial[1], spatial[2]], &mut rng);
    let n = store.len();
    gradcheck::check(&inputs, grad_opts(opts), |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let y = block.forward(t, &bound, v[n], false, &mut Rng::new(0))?;
        let p = t.constant(probe.clone());
        let m = t.mul(y, p)?;
        Ok(t.sum(m))
    })
}

/// The smallest useful full network: two classes, 8^3 input, two stages.
pub fn tiny_model_config() -> BackboneConfig {
    BackboneConfig {
        in_channels: 1,
        num_classes: 2,
        stage_channels: vec![2, 4],
        patch_size: [8; 3],
        gasa: GasaOptions {
            d_model: 4,
            heads: 2,
            ..GasaOptions::default()
        },
        ..BackboneConfig::default()
    }
}

struct ModelPoint {
    model: crate::backbone::Model,
    x: Tensor,
    y: Tensor,
}

impl ModelPoint {
    fn new(opts: &VerifyOptions, cfg: &BackboneConfig) -> Result<Self> {
        let mut rng = Rng::new(opts.seed ^ 0x30de1);
        let mut model = build_model(cfg, &mut rng)?;
        // Move the zero-initialised positional table and the unit affine
        // pairs off their special values.
        for t in model.params_mut().tensors_mut() {
            for v in t.values_mut() {
                *v += rng.uniform_range(-0.1, 0.1);
            }
        }
        let [w, h, d] = cfg.patch_size;
        let x = random(&[cfg.in_channels, w, h, d], &mut rng);
        let labels: Vec<u16> = (0..w * h * d).map(|_| rng.below(cfg.num_classes) as u16).collect();
        let y = one_hot(&labels, cfg.patch_size, cfg.num_classes)?;
        Ok(Self { model, x, y })
    }

    fn loss(&self, tape: &Tape, params: &[Var]) -> Result<Var> {
        let bound = Bound::from_vars(params.to_vec());
        let xv = tape.constant(self.x.clone());
        let yv = tape.constant(self.y.clone());
        let logits = self.model.forward(tape, &bound, xv, false, &mut Rng::new(0))?;
        soft_dice_ce_loss(tape, logits, yv)
    }

    fn pattern(&self, params: &[Tensor]) -> Result<Vec<bool>> {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        self.loss(&tape, &vars)?;
        Ok(tape.activation_pattern())
    }
}

/// Gradient of the training loss with respect to every model parameter.
pub fn grad_model(opts: &VerifyOptions, cfg: &BackboneConfig) -> Result<GradCheckReport> {
    let point = ModelPoint::new(opts, cfg)?;
    let inputs = point.model.params().tensors().to_vec();
    gradcheck::check(&inputs, grad_opts(opts), |t, v| point.loss(t, v))
}

/// Parameters whose `+-eps` stencil changes the leaky-ReLU sign pattern.
/// Finite differences are meaningless across a kink, so a failing model
/// check with nonzero count points at the check point, not the gradients.
pub fn kinked_stencils(opts: &VerifyOptions, cfg: &BackboneConfig, eps: f64) -> Result<usize> {
    let point = ModelPoint::new(opts, cfg)?;
    let mut params = point.model.params().tensors().to_vec();
    let base = point.pattern(&params)?;
    let mut kinked = 0;
    for ti in 0..params.len() {
        for e in 0..params[ti].len() {
            let orig = params[ti].values()[e];
            params[ti].values_mut()[e] = orig + eps;
            let plus = point.pattern(&params)?;
            params[ti].values_mut()[e] = orig - eps;
            let minus = point.pattern(&params)?;
            params[ti].values_mut()[e] = orig;
            kinked += (plus != base || minus != base) as usize;
        }
    }
    Ok(kinked)
}

/// Surface Dice by comparing every border voxel with every other border voxel.
pub fn nsd_brute_force(p: &[bool], g: &[bool], dims: [usize; 3], tau: f64, spacing: [f64; 3]) -> Option<f64> {
    let [w, h, d] = dims;
    let inside = |m: &[bool], i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < w
            && (j as usize) < h
            && (k as usize) < d
            && m[(i as usize * h + j as usize) * d + k as usize]
    };
    let surface = |m: &[bool]| -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        for i in 0..w as isize {
            for j in 0..h as isize {
                for k in 0..d as isize {
                    if !inside(m, i, j, k) {
                        continue;
                    }
                    let nbrs = [
                        (i - 1, j, k),
                        (i + 1, j, k),
                        (i, j - 1, k),
                        (i, j + 1, k),
                        (i, j, k - 1),
                        (i, j, k + 1),
                    ];
                    if nbrs.iter().any(|&(a, b, c)| !inside(m, a, b, c)) {
                        pts.push([
                            i as f64 * spacing[0],
                            j as f64 * spacing[1],
                            k as f64 * spacing[2],
                        ]);
                    }
                }
            }
        }
        pts
    };
    let sp = surface(p);
    let sg = surface(g);
    if sp.is_empty() && sg.is_empty() {
        return None;
    }
    let matched = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .filter(|a| {
                to.iter().any(|b| {
                    let d2: f64 = (0..3).map(|x| (a[x] - b[x]).powi(2)).sum();
                    d2 <= tau * tau
                })
            })
            .count()
    };
    Some((matched(&sp, &sg) + matched(&sg, &sp)) as f64 / (sp.len() + sg.len()) as f64)
}

fn random_mask(dims: [usize; 3], density: f64, rng: &mut Rng) -> Vec<bool> {
    (0..dims.iter().product::<usize>()).map(|_| rng.bernoulli(density)).collect()
}

pub fn nsd_oracle(opts: &VerifyOptions, cases: usize) -> Result<Measured> {
    let mut rng = Rng::new(opts.seed ^ 0x45d);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dims = [0; 3].map(|_| 1 + rng.below(6));
        let spacing = [0; 3].map(|_| [0.5, 1.0, 1.5, 2.5][rng.below(4)]);
        let tau = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0][rng.below(6)];
        let p = random_mask(dims, rng.uniform(), &mut rng);
        let g = random_mask(dims, rng.uniform(), &mut rng);
        let fast = nsd_masks(&p, &g, dims, tau, spacing);
        let slow = nsd_brute_force(&p, &g, dims, tau, spacing);
        let err = match (fast, slow) {
            (None, None) => 0.0,
            (Some(a), Some(b)) => (a - b).abs(),
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    Ok(Measured {
        cases,
        max_error: worst,
        detail: "nsd vs all-pairs border distances".into(),
    })
}

/// Constants exact, linear ramps exact away from the border, labels never
/// take ids absent from the input.
pub fn resampling_oracle(opts: &VerifyOptions, cases: usize) -> Result<Measured> {
    let mut rng = Rng::new(opts.seed ^ 0x7e5);
    let mut worst = 0.0f64;
    let mut novel = 0usize;
    for _ in 0..cases {
        let dims = [0; 3].map(|_| 2 + rng.below(7));
        let spacing = [0; 3].map(|_| rng.uniform_range(0.5, 3.0));
        let new_spacing = [0; 3].map(|_| rng.uniform_range(0.5, 3.0));
        let n: usize = dims.iter().product();
        let out_dims = resampled_extents(dims, spacing, new_spacing);

        let c = rng.uniform_range(-100.0, 100.0);
        let img = Volume::image(dims.to_vec(), vec![c; n], spacing)?;
        let r = resample_image(&img, new_spacing)?;
        for v in r.to_f64() {
            worst = worst.max((v - c).abs());
        }

        let axis = rng.below(3);
        let (a0, slope) = (rng.uniform_range(-5.0, 5.0), rng.uniform_range(-3.0, 3.0));
        let strides = [dims[1] * dims[2], dims[2], 1];
        let ramp: Vec<f64> = (0..n).map(|j| a0 + slope * ((j / strides[axis]) % dims[axis]) as f64).collect();
        let r = resample_image(&Volume::image(dims.to_vec(), ramp, spacing)?, new_spacing)?;
        if separate_axis(spacing, dims) != Some(axis) {
            let out = r.to_f64();
            let ostr = [out_dims[1] * out_dims[2], out_dims[2], 1];
            for (j, v) in out.iter().enumerate() {
                let o = (j / ostr[axis]) % out_dims[axis];
                let x = if out_dims[axis] == dims[axis] {
                    o as f64
                } else {
                    source_coord(o, dims[axis], out_dims[axis])
                };
                if x.floor() >= 1.0 && x.floor() + 2.0 <= (dims[axis] - 1) as f64 {
                    worst = worst.max((v - (a0 + slope * x)).abs());
                }
            }
        }

        let classes = 2 + rng.below(4);
        let labels: Vec<u16> = (0..n).map(|_| rng.below(classes) as u16).collect();
        let lab = Volume::labels(dims, labels.clone(), spacing)?;
        let out = resample_labels(&lab, new_spacing, classes)?;
        novel += out.label_data()?.iter().filter(|l| !labels.contains(l)).count();
    }
    if novel > 0 {
        worst = f64::INFINITY;
    }
    Ok(Measured {
        cases,
        max_error: worst,
        detail: format!("{novel} novel label voxels"),
    })
}

/// A window model whose logits depend on both the input and the position
/// inside the window, so overlapping windows disagree.
pub struct PositionStub {
    pub classes: usize,
}

impl SegmentationModel for PositionStub {
    fn in_channels(&self) -> usize {
        1
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn window_logits(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (w, h, d) = (s[1], s[2], s[3]);
        let n = w * h * d;
        let xv = x.values();
        Ok(Tensor::from_fn([self.classes, w, h, d], |f| {
            let (c, j) = (f / n, f % n);
            let (i, r) = (j / (h * d), j % (h * d));
            let (k, l) = (r / d, r % d);
            (c as f64 + 1.0) * xv[j] + 0.3 * (c * i) as f64 - 0.2 * (k as f64) * (c as f64 - 1.0) + 0.1 * (l * c) as f64
        }))
    }
}

/// Per-voxel blending loop: for each voxel, every window covering it
/// contributes its softmax times a freshly computed Gaussian weight.
pub fn sliding_window_dense<M: SegmentationModel>(model: &M, image: &Tensor, swc: &SlidingWindowConfig) -> Result<Tensor> {
    let s = image.shape();
    let dims = [s[1], s[2], s[3]];
    let p = swc.patch_size;
    let k = model.num_classes();
    let starts = |a: usize| -> Vec<usize> {
        let stride = ((p[a] as f64 * (1.0 - swc.overlap)).floor() as usize).max(1);
        let mut v = Vec::new();
        let mut x = 0;
        while x + p[a] < dims[a] {
            v.push(x);
            x += stride;
        }
        v.push(dims[a] - p[a]);
        v
    };
    let gauss = |a: usize, i: usize| {
        let c = (p[a] as f64 - 1.0) / 2.0;
        let sigma = swc.sigma_scale * p[a] as f64;
        (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()
    };
    let mut windows = Vec::new();
    for &a in &starts(0) {
        for &b in &starts(1) {
            for &c in &starts(2) {
                let crop = Tensor::from_fn([s[0], p[0], p[1], p[2]], |f| {
                    let pn = p[0] * p[1] * p[2];
                    let (ch, j) = (f / pn, f % pn);
                    let (i, r) = (j / (p[1] * p[2]), j % (p[1] * p[2]));
                    let (jj, l) = (r / p[2], r % p[2]);
                    image.at(&[ch, a + i, b + jj, c + l])
                });
                let logits = model.window_logits(&crop)?;
                windows.push(([a, b, c], logits));
            }
        }
    }
    let mut out = Tensor::zeros([k, dims[0], dims[1], dims[2]]);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for l in 0..dims[2] {
                let mut acc = vec![0.0; k];
                let mut wsum = 0.0;
                for (o, logits) in &windows {
                    let inside = (0..3).all(|a| [i, j, l][a] >= o[a] && [i, j, l][a] < o[a] + p[a]);
                    if !inside {
                        continue;
                    }
                    let loc = [i - o[0], j - o[1], l - o[2]];
                    let z: Vec<f64> = (0..k).map(|c| logits.at(&[c, loc[0], loc[1], loc[2]])).collect();
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let se: f64 = e.iter().sum();
                    let g = gauss(0, loc[0]) * gauss(1, loc[1]) * gauss(2, loc[2]);
                    wsum += g;
                    for c in 0..k {
                        acc[c] += g * e[c] / se;
                    }
                }
                for c in 0..k {
                    let f = out.offset(&[c, i, j, l]);
                    out.values_mut()[f] = acc[c] / wsum;
                }
            }
        }
    }
    Ok(out)
}

pub fn sliding_window_oracle(opts: &VerifyOptions, cases: usize) -> Result<Measured> {
    let mut rng = Rng::new(opts.seed ^ 0x5111);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let patch = [0; 3].map(|_| 2 + rng.below(4));
        let dims: [usize; 3] = std::array::from_fn(|a| patch[a] + rng.below(7));
        let swc = SlidingWindowConfig {
            patch_size: patch,
            overlap: [0.25, 0.5, 0.75][rng.below(3)],
            ..SlidingWindowConfig::default()
        };
        let stub = PositionStub { classes: 2 + rng.below(3) };
        let img = random(&[1, dims[0], dims[1], dims[2]], &mut rng);
        let fast = sliding_window_predict(&stub, &img, &swc)?;
        let slow = sliding_window_dense(&stub, &img, &swc)?;
        for (a, b) in fast.values().iter().zip(slow.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Measured {
        cases,
        max_error: worst,
        detail: "blended probabilities vs per-voxel loop".into(),
    })
}

pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    let mut checks = Vec::new();
    let mut max_grad = 0.0f64;
    let mut grad = |name: &str, r: Result<GradCheckReport>, checks: &mut Vec<CheckOutcome>| {
        let c = run(name, GRAD_TOLERANCE, || r.map(from_grad));
        if c.max_error.is_finite() {
            max_grad = max_grad.max(c.max_error);
        }
        checks.push(c);
    };
    grad("grad_ops", grad_ops(opts), &mut checks);
    for (pe, ln) in [(PeMode::AfterMhsa, false), (PeMode::BeforeMhsa, true)] {
        let o = GasaOptions {
            d_model: 4,
            heads: 2,
            pe_mode: pe,
            use_layer_norm: ln,
            dropout_p: 0.5,
        };
        let name = format!("grad_gasa_block_pe_{}_ln_{ln}", pe.label());
        grad(&name, grad_gasa_block(opts, o, 2, [3, 4, 5]), &mut checks);
    }
    let tiny = tiny_model_config();
    grad("grad_tiny_model", grad_model(opts, &tiny), &mut checks);
    if let Some(c) = checks.last_mut().filter(|c| !c.passed && opts.perturb_gradient == 0.0) {
        if let Ok(k) = kinked_stencils(opts, &tiny, GradCheckOpts::default().eps) {
            c.detail += &format!("; {k} stencils straddle an activation kink");
        }
    }
    checks.push(run("nsd_oracle", 0.0, || nsd_oracle(opts, 200)));
    checks.push(run("resampling_oracle", 1e-9, || resampling_oracle(opts, 100)));
    checks.push(run("sliding_window_oracle", 1e-12, || sliding_window_oracle(opts, 20)));
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        max_grad_rel_err: max_grad,
        checks,
    }
}
