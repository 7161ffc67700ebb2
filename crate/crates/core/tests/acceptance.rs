//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use gasa::backbone::{build_model, BackboneConfig};
use gasa::cli::{cmd_ablate, AblationConfig, DataConfig, RunConfig, ABLATION_TABLE_NAME};
use gasa::gasa::{GasaBlock, GasaConfig, GasaOptions, PeMode};
use gasa::infer::{
    mirrored_predict, sliding_window_predict, tta_mirror_predict, SegmentationModel, SlidingWindowConfig,
};
use gasa::loss::{one_hot, soft_dice_ce_loss, soft_dice_ce_terms};
use gasa::metrics::nsd;
use gasa::params::{Bound, ParamStore};
use gasa::pipeline::{evaluate_cases, prepare_split, train_model};
use gasa::preprocess::{resample_image, resample_labels, resampled_extents, separate_axis};
use gasa::synth::{make_dataset, PhantomSpec, MANIFEST_NAME};
use gasa::train::{load_checkpoint, poly_lr, save_checkpoint, sgd_nesterov_step, TrainConfig, Trainer};
use gasa::volume::{read_volume, write_volume, Volume, VolumeData, VolumeKind};
use gasa::{Rng, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rand_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-scale, scale))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 1 ------------------------------------------------------------------------

/// Loss of the tiny network at a random point, and its activation pattern.
struct GradFixture {
    model: gasa::backbone::Model,
    x: Tensor,
    y: Tensor,
}

impl GradFixture {
    fn new(seed: u64) -> Self {
        let cfg = BackboneConfig {
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
        };
        let mut rng = Rng::new(seed);
        let mut model = build_model(&cfg, &mut rng).unwrap();
        for t in model.params_mut().tensors_mut() {
            for v in t.values_mut() {
                *v += rng.uniform_range(-0.1, 0.1);
            }
        }
        let x = rand_tensor(&[1, 8, 8, 8], &mut rng, 1.0);
        let labels: Vec<u16> = (0..512).map(|_| rng.below(2) as u16).collect();
        let y = one_hot(&labels, [8; 3], 2).unwrap();
        Self { model, x, y }
    }

    fn eval(&self, params: &[Tensor], grad: bool) -> (f64, Vec<bool>, Option<Vec<Tensor>>) {
        let tape = Tape::new();
        let vars = params.iter().map(|p| tape.leaf(p.clone(), grad)).collect();
        let bound = Bound::from_vars(vars);
        let xv = tape.constant(self.x.clone());
        let yv = tape.constant(self.y.clone());
        let logits = self.model.forward(&tape, &bound, xv, false, &mut Rng::new(0)).unwrap();
        let loss = soft_dice_ce_loss(&tape, logits, yv).unwrap();
        let value = tape.value(loss).item();
        let pattern = tape.activation_pattern();
        if !grad {
            return (value, pattern, None);
        }
        tape.backward(loss).unwrap();
        (value, pattern, Some(bound.grads(&tape, self.model.params())))
    }
}

/// Central differences are only an oracle where the loss is smooth over the
/// stencil. The fixture is the first seed at which no stencil changes the
/// leaky-ReLU sign pattern; at that point every parameter must agree.
fn gradient_oracle() -> Outcome {
    let eps = 1e-4;
    let mut skipped = Vec::new();
    for seed in 0..20u64 {
        let fx = GradFixture::new(seed);
        let mut params = fx.model.params().tensors().to_vec();
        let (_, base, analytic) = fx.eval(&params, true);
        let analytic = analytic.unwrap();
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut kinked = 0;
        for ti in 0..params.len() {
            for e in 0..params[ti].len() {
                let orig = params[ti].values()[e];
                params[ti].values_mut()[e] = orig + eps;
                let (plus, pp, _) = fx.eval(&params, false);
                params[ti].values_mut()[e] = orig - eps;
                let (minus, pm, _) = fx.eval(&params, false);
                params[ti].values_mut()[e] = orig;
                kinked += (pp != base || pm != base) as usize;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[ti].values()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        if kinked > 0 {
            skipped.push(format!("{seed} ({kinked} kinked)"));
            continue;
        }
        ensure!(worst <= 1e-3, "seed {seed}: max relative error {worst:e} over {checked} parameters");
        return Ok(format!(
            "{checked} parameters, max rel err {worst:.2e}, seed {seed}; skipped seeds: [{}]",
            skipped.join(", ")
        ));
    }
    Err(format!("no kink-free fixture among seeds 0..20: {}", skipped.join(", ")))
}

// 2 ------------------------------------------------------------------------

fn gasa_invariants() -> Outcome {
    let shapes = (1usize..4, 1usize..9, 1usize..9, 1usize..9, 0usize..4, 0usize..3, any::<u64>());
    let mut runner = TestRunner::new(PtConfig {
        cases: 128,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let worst_row = Cell::new(0.0f64);
    let cases = Cell::new(0usize);
    let result = runner.run(&shapes, |(c, w, h, d, dm_pick, pe_pick, seed)| {
        let (d_model, heads) = [(2, 1), (4, 2), (6, 3), (5, 5)][dm_pick];
        let pe_mode = [PeMode::None, PeMode::BeforeMhsa, PeMode::AfterMhsa][pe_pick];
        let opts = GasaOptions {
            d_model,
            heads,
            pe_mode,
            use_layer_norm: seed % 2 == 0,
            dropout_p: 0.5,
        };
        let cfg = GasaConfig::new(opts, c, [w, h, d]).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let block = GasaBlock::new(cfg, &mut store, "g", &mut rng);
        for t in store.tensors_mut() {
            for v in t.values_mut() {
                *v += rng.uniform_range(-0.5, 0.5);
            }
        }
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let x = rand_tensor(&[c, w, h, d], &mut rng, 2.0);
        let xv = tape.constant(x.clone());

        let patches = block.axial_project(&tape, &bound, xv).unwrap();
        prop_assert_eq!(tape.shape(patches.tokens), vec![w + h + d, d_model]);
        prop_assert_eq!(patches.axis_offsets, [0, w, w + h]);

        let att = block.mhsa(&tape, &bound, patches.tokens, false, &mut rng).unwrap();
        for a in &att.weights {
            let v = tape.value(*a);
            for row in v.values().chunks(w + h + d) {
                let s: f64 = row.iter().sum();
                worst_row.set(worst_row.get().max((s - 1.0).abs()));
                prop_assert!((s - 1.0).abs() <= 1e-12, "row sum {}", s);
            }
        }

        let y = block.forward(&tape, &bound, xv, true, &mut rng).unwrap();
        let out = tape.value(y).clone();
        prop_assert_eq!(out.shape(), &[c + 3 * d_model, w, h, d][..]);
        let n = w * h * d;
        prop_assert!(out.values()[..c * n].iter().zip(x.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // W group is constant over (h, d), H group over (w, d), D group over (w, h).
        for ch in 0..3 * d_model {
            let group = ch / d_model;
            for i in 0..w {
                for j in 0..h {
                    for k in 0..d {
                        let mut r = [i, j, k];
                        for (a, slot) in r.iter_mut().enumerate() {
                            if a != group {
                                *slot = 0;
                            }
                        }
                        let here = out.at(&[c + ch, i, j, k]);
                        let base = out.at(&[c + ch, r[0], r[1], r[2]]);
                        prop_assert!(here.to_bits() == base.to_bits());
                    }
                }
            }
        }
        cases.set(cases.get() + 1);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    let (cases, worst_row) = (cases.get(), worst_row.get());
    ensure!(cases >= 100, "only {cases} shapes");
    Ok(format!("{cases} random shapes, max |row sum - 1| {worst_row:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn loss_sanity() -> Outcome {
    let mut rng = Rng::new(3);
    let spatial = [3, 4, 2];
    let labels: Vec<u16> = (0..24).map(|_| rng.below(3) as u16).collect();
    let y = one_hot(&labels, spatial, 3).unwrap();
    let tape = Tape::new();
    let logits = tape.constant(Tensor::from_fn([3, 3, 4, 2], |i| 60.0 * y.values()[i]));
    let yv = tape.constant(y.clone());
    let perfect = tape.value(soft_dice_ce_loss(&tape, logits, yv).unwrap()).item();
    ensure!(perfect.abs() <= 1e-9, "perfect prediction loss {perfect:e}");

    let labels: Vec<u16> = (0..24).map(|_| rng.below(2) as u16).collect();
    let y = one_hot(&labels, spatial, 2).unwrap();
    let tape = Tape::new();
    let logits = tape.constant(Tensor::zeros([2, 3, 4, 2]));
    let yv = tape.constant(y);
    let terms = soft_dice_ce_terms(&tape, logits, yv).unwrap();
    let ce = tape.value(terms.ce).item();
    ensure!((ce - std::f64::consts::LN_2).abs() <= 1e-9, "uniform CE {ce} vs ln 2");

    let mut min_loss = f64::INFINITY;
    for _ in 0..1000 {
        let k = 2 + rng.below(4);
        let s = [1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)];
        let n = s.iter().product::<usize>();
        let labels: Vec<u16> = (0..n).map(|_| rng.below(k) as u16).collect();
        let y = one_hot(&labels, s, k).unwrap();
        let scale = [0.1, 1.0, 10.0, 100.0][rng.below(4)];
        let tape = Tape::new();
        let logits = tape.constant(rand_tensor(&[k, s[0], s[1], s[2]], &mut rng, scale));
        let yv = tape.constant(y);
        let l = tape.value(soft_dice_ce_loss(&tape, logits, yv).unwrap()).item();
        ensure!(l >= 0.0 && l.is_finite(), "loss {l} on random input");
        min_loss = min_loss.min(l);
    }
    Ok(format!("perfect {perfect:.1e}, uniform CE {ce:.12}, min random loss {min_loss:.3e}"))
}

// 4 ------------------------------------------------------------------------

/// Border voxels (any face neighbour outside the mask or the grid) and the
/// symmetric fraction within `tau` of the other border, all pairs compared.
fn brute_nsd(p: &[u16], g: &[u16], dims: [usize; 3], set: &[u16], tau: f64, sp: [f64; 3]) -> Option<f64> {
    let at = |m: &[u16], i: i64, j: i64, k: i64| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= dims[0] as i64 || j >= dims[1] as i64 || k >= dims[2] as i64 {
            return false;
        }
        set.contains(&m[((i as usize) * dims[1] + j as usize) * dims[2] + k as usize])
    };
    let surface = |m: &[u16]| {
        let mut pts = Vec::new();
        for i in 0..dims[0] as i64 {
            for j in 0..dims[1] as i64 {
                for k in 0..dims[2] as i64 {
                    let on = at(m, i, j, k)
                        && (!at(m, i - 1, j, k)
                            || !at(m, i + 1, j, k)
                            || !at(m, i, j - 1, k)
                            || !at(m, i, j + 1, k)
                            || !at(m, i, j, k - 1)
                            || !at(m, i, j, k + 1));
                    if on {
                        pts.push([i as f64 * sp[0], j as f64 * sp[1], k as f64 * sp[2]]);
                    }
                }
            }
        }
        pts
    };
    let (a, b) = (surface(p), surface(g));
    if a.is_empty() && b.is_empty() {
        return None;
    }
    let close = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .filter(|u| {
                to.iter()
                    .map(|v| (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2))
                    .any(|d2| d2 <= tau * tau)
            })
            .count()
    };
    Some((close(&a, &b) + close(&b, &a)) as f64 / (a.len() + b.len()) as f64)
}

fn nsd_oracle() -> Outcome {
    let mut rng = Rng::new(4);
    let spacings = [[1.0, 1.0, 1.0], [0.5, 1.0, 2.0], [1.5, 1.5, 3.0], [2.5, 0.5, 1.0]];
    let taus = [0.0, 0.5, 1.0, 2.0, 3.5];
    let mut defined = 0;
    for case in 0..200 {
        let dims = [1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6)];
        let n: usize = dims.iter().product();
        let k = 2 + rng.below(3) as u16;
        let p: Vec<u16> = (0..n).map(|_| rng.below(k as usize) as u16).collect();
        let g: Vec<u16> = (0..n).map(|_| rng.below(k as usize) as u16).collect();
        let sp = spacings[case % spacings.len()];
        let tau = taus[rng.below(taus.len())];
        let set: Vec<u16> = if rng.bernoulli(0.5) { vec![1] } else { (1..k).collect() };
        let pv = Volume::labels(dims, p.clone(), sp).unwrap();
        let gv = Volume::labels(dims, g.clone(), sp).unwrap();
        let fast = nsd(&pv, &gv, &set, tau, sp).map_err(|e| e.to_string())?;
        let slow = brute_nsd(&p, &g, dims, &set, tau, sp);
        ensure!(fast == slow, "case {case}: {fast:?} vs brute force {slow:?} (dims {dims:?}, tau {tau})");
        defined += fast.is_some() as usize;
    }
    Ok(format!("200 volumes, {defined} with defined NSD, exact agreement"))
}

// 5 ------------------------------------------------------------------------

fn resampling_oracles() -> Outcome {
    let mut rng = Rng::new(5);
    let mut worst_ramp = 0.0f64;
    let mut ramp_points = 0usize;
    for case in 0..100 {
        let dims = [2 + rng.below(8), 2 + rng.below(8), 2 + rng.below(8)];
        let n: usize = dims.iter().product();
        let spacing = [0; 3].map(|_| rng.uniform_range(0.5, 2.5));
        let target = [0; 3].map(|_| rng.uniform_range(0.5, 2.5));
        let out_dims = resampled_extents(dims, spacing, target);

        let c = rng.uniform_range(-1000.0, 1000.0);
        let r = resample_image(&Volume::image(dims.to_vec(), vec![c; n], spacing).unwrap(), target).unwrap();
        ensure!(r.to_f64().iter().all(|&v| v == c), "case {case}: constant {c} not preserved");

        let axis = rng.below(3);
        let (a0, slope) = (rng.uniform_range(-10.0, 10.0), rng.uniform_range(-4.0, 4.0));
        let idx = |flat: usize, d: [usize; 3]| [flat / (d[1] * d[2]), (flat / d[2]) % d[1], flat % d[2]];
        let ramp: Vec<f64> = (0..n).map(|f| a0 + slope * idx(f, dims)[axis] as f64).collect();
        let r = resample_image(&Volume::image(dims.to_vec(), ramp, spacing).unwrap(), target).unwrap();
        if separate_axis(spacing, dims) != Some(axis) {
            let (m, o) = (dims[axis], out_dims[axis]);
            for (f, v) in r.to_f64().iter().enumerate() {
                let q = idx(f, out_dims)[axis];
                let x = if m == o { q as f64 } else { (q as f64 + 0.5) * m as f64 / o as f64 - 0.5 };
                if x.floor() >= 1.0 && x.floor() + 2.0 <= (m - 1) as f64 {
                    let err = (v - (a0 + slope * x)).abs();
                    worst_ramp = worst_ramp.max(err);
                    ramp_points += 1;
                    ensure!(err <= 1e-9, "case {case}: ramp error {err:e} at output {q}");
                }
            }
        }

        let k = 2 + rng.below(5);
        let present: Vec<u16> = (0..k as u16).filter(|_| rng.bernoulli(0.7)).collect();
        let present = if present.is_empty() { vec![0] } else { present };
        let labels: Vec<u16> = (0..n).map(|_| present[rng.below(present.len())]).collect();
        let out = resample_labels(&Volume::labels(dims, labels, spacing).unwrap(), target, k).unwrap();
        let data = out.label_data().unwrap();
        ensure!(data.len() == out_dims.iter().product::<usize>(), "case {case}: label extents");
        ensure!(data.iter().all(|l| present.contains(l)), "case {case}: novel label id");
    }
    Ok(format!("100 cases, {ramp_points} interior ramp samples, max ramp error {worst_ramp:.1e}"))
}

// 6 ------------------------------------------------------------------------

fn schedule_checks() -> Outcome {
    let lr = |e| poly_lr(e, 1000, 0.01, 0.9).unwrap();
    ensure!(lr(0) == 0.01, "poly_lr(0) = {}", lr(0));
    ensure!(lr(1000) == 0.0, "poly_lr(max) = {}", lr(1000));
    ensure!((lr(500) - 0.0053589).abs() <= 1e-7, "poly_lr(500) = {}", lr(500));

    let (mu, step) = (0.9, 0.1);
    let (p0, g1, g2) = (1.5, 0.8, -0.3);
    let mut params = [Tensor::scalar(p0)];
    let mut buf = [Tensor::scalar(0.0)];
    sgd_nesterov_step(&mut params, &[Tensor::scalar(g1)], &mut buf, step, mu).unwrap();
    let v1 = mu * 0.0 + g1;
    let p1 = p0 - step * (g1 + mu * v1);
    ensure!(params[0].item() == p1 && buf[0].item() == v1, "step 1: {} vs {p1}", params[0].item());
    sgd_nesterov_step(&mut params, &[Tensor::scalar(g2)], &mut buf, step, mu).unwrap();
    let v2 = mu * v1 + g2;
    let p2 = p1 - step * (g2 + mu * v2);
    ensure!(params[0].item() == p2 && buf[0].item() == v2, "step 2: {} vs {p2}", params[0].item());
    Ok(format!("poly_lr(500/1000) = {:.7}, two Nesterov steps exact", lr(500)))
}

// 7 ------------------------------------------------------------------------

struct ConstantLogits(Vec<f64>);

impl SegmentationModel for ConstantLogits {
    fn in_channels(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        self.0.len()
    }
    fn window_logits(&self, x: &Tensor) -> gasa::Result<Tensor> {
        let s = x.shape();
        let n = s[1] * s[2] * s[3];
        Ok(Tensor::from_fn([self.0.len(), s[1], s[2], s[3]], |i| self.0[i / n]))
    }
}

/// Logits from the voxel value and its position inside the window.
struct WindowPosition;

impl SegmentationModel for WindowPosition {
    fn in_channels(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        3
    }
    fn window_logits(&self, x: &Tensor) -> gasa::Result<Tensor> {
        let s = x.shape();
        let (h, d) = (s[2], s[3]);
        let n = s[1] * h * d;
        Ok(Tensor::from_fn([3, s[1], h, d], |f| {
            let (c, j) = ((f / n) as f64, f % n);
            let (i, jj, k) = (j / (h * d), (j / d) % h, j % d);
            c * x.values()[j] + 0.4 * c * i as f64 - 0.3 * jj as f64 * (c - 1.0) + 0.2 * (k as f64) * c * c
        }))
    }
}

/// Logits depend only on the voxel value, so mirroring commutes with the model.
struct Pointwise;

impl SegmentationModel for Pointwise {
    fn in_channels(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        3
    }
    fn window_logits(&self, x: &Tensor) -> gasa::Result<Tensor> {
        let s = x.shape();
        let n = s[1] * s[2] * s[3];
        Ok(Tensor::from_fn([3, s[1], s[2], s[3]], |f| {
            let v = x.values()[f % n];
            [v, -v, v * v][f / n]
        }))
    }
}

fn dense_blend<M: SegmentationModel>(m: &M, img: &Tensor, patch: [usize; 3], overlap: f64, sigma_scale: f64) -> Tensor {
    let dims = [img.shape()[1], img.shape()[2], img.shape()[3]];
    let starts = |a: usize| {
        let step = ((patch[a] as f64 * (1.0 - overlap)).floor() as usize).max(1);
        let mut v: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + patch[a] < dims[a]).collect();
        v.push(dims[a] - patch[a]);
        v
    };
    let g = |a: usize, i: usize| {
        let s = sigma_scale * patch[a] as f64;
        let c = (patch[a] as f64 - 1.0) / 2.0;
        (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()
    };
    let k = m.num_classes();
    let mut num = vec![0.0; k * dims.iter().product::<usize>()];
    let mut den = vec![0.0; dims.iter().product::<usize>()];
    for &a in &starts(0) {
        for &b in &starts(1) {
            for &c in &starts(2) {
                let win = Tensor::from_fn([1, patch[0], patch[1], patch[2]], |f| {
                    let (i, j, l) = (f / (patch[1] * patch[2]), (f / patch[2]) % patch[1], f % patch[2]);
                    img.at(&[0, a + i, b + j, c + l])
                });
                let z = m.window_logits(&win).unwrap();
                for i in 0..patch[0] {
                    for j in 0..patch[1] {
                        for l in 0..patch[2] {
                            let e: Vec<f64> = (0..k).map(|q| z.at(&[q, i, j, l]).exp()).collect();
                            let tot: f64 = e.iter().sum();
                            let wt = g(0, i) * g(1, j) * g(2, l);
                            let v = ((a + i) * dims[1] + b + j) * dims[2] + c + l;
                            den[v] += wt;
                            for q in 0..k {
                                num[q * den.len() + v] += wt * e[q] / tot;
                            }
                        }
                    }
                }
            }
        }
    }
    let nv = den.len();
    Tensor::from_fn([k, dims[0], dims[1], dims[2]], |f| num[f] / den[f % nv])
}

fn simplex_error(p: &Tensor) -> f64 {
    let k = p.shape()[0];
    let n = p.len() / k;
    (0..n)
        .map(|j| {
            let s: f64 = (0..k).map(|c| p.values()[c * n + j]).sum();
            let neg = (0..k).any(|c| p.values()[c * n + j] < 0.0);
            if neg { f64::INFINITY } else { (s - 1.0).abs() }
        })
        .fold(0.0, f64::max)
}

fn inference_contracts() -> Outcome {
    let mut rng = Rng::new(7);
    let mut worst_simplex = 0.0f64;

    let logits = vec![0.3, -1.2, 2.0];
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let expect: Vec<f64> = logits.iter().map(|v| (v - m).exp() / z).collect();
    let stub = ConstantLogits(logits);
    let mut worst_const = 0.0f64;
    for dims in [[16, 16, 16], [11, 7, 5], [3, 9, 4], [20, 13, 8]] {
        let img = rand_tensor(&[1, dims[0], dims[1], dims[2]], &mut rng, 1.0);
        for overlap in [0.0, 0.25, 0.5, 0.75] {
            let swc = SlidingWindowConfig {
                patch_size: [6, 5, 4],
                overlap,
                ..SlidingWindowConfig::default()
            };
            let p = sliding_window_predict(&stub, &img, &swc).unwrap();
            ensure!(p.shape() == [3, dims[0], dims[1], dims[2]], "output shape {:?}", p.shape());
            let n = p.len() / 3;
            for (f, v) in p.values().iter().enumerate() {
                worst_const = worst_const.max((v - expect[f / n]).abs());
            }
            worst_simplex = worst_simplex.max(simplex_error(&p));
        }
    }
    ensure!(worst_const <= 1e-12, "constant stub deviates by {worst_const:e}");

    let mut worst_dense = 0.0f64;
    for _ in 0..12 {
        let patch = [2 + rng.below(4), 2 + rng.below(4), 2 + rng.below(4)];
        let dims: [usize; 3] = std::array::from_fn(|a| patch[a] + rng.below(8));
        let overlap = [0.25, 0.5, 0.6][rng.below(3)];
        let swc = SlidingWindowConfig {
            patch_size: patch,
            overlap,
            ..SlidingWindowConfig::default()
        };
        let img = rand_tensor(&[1, dims[0], dims[1], dims[2]], &mut rng, 1.0);
        let fast = sliding_window_predict(&WindowPosition, &img, &swc).unwrap();
        let slow = dense_blend(&WindowPosition, &img, patch, overlap, swc.sigma_scale);
        worst_dense = worst_dense.max(max_abs_diff(fast.values(), slow.values()));
        worst_simplex = worst_simplex.max(simplex_error(&fast));
    }
    ensure!(worst_dense <= 1e-12, "dense-loop oracle differs by {worst_dense:e}");

    let swc = SlidingWindowConfig {
        patch_size: [5, 4, 6],
        ..SlidingWindowConfig::default()
    };
    let img = rand_tensor(&[1, 9, 10, 7], &mut rng, 1.5);
    let plain = sliding_window_predict(&Pointwise, &img, &swc).unwrap();
    let tta = tta_mirror_predict(&Pointwise, &img, &swc).unwrap();
    let worst_tta = max_abs_diff(plain.values(), tta.values());
    ensure!(worst_tta <= 1e-12, "TTA changes a flip-equivariant model by {worst_tta:e}");
    worst_simplex = worst_simplex.max(simplex_error(&tta));

    let two = mirrored_predict(&WindowPosition, &img, &swc, &[[false; 3], [true, false, true]]).unwrap();
    let a = sliding_window_predict(&WindowPosition, &img, &swc).unwrap();
    let b = sliding_window_predict(&WindowPosition, &img.flip_spatial([true, false, true]).unwrap(), &swc)
        .unwrap()
        .flip_spatial([true, false, true])
        .unwrap();
    let hand: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| (x + y) / 2.0).collect();
    ensure!(max_abs_diff(two.values(), &hand) <= 1e-12, "two-flip average mismatch");

    let cfg = BackboneConfig {
        stage_channels: vec![4, 8],
        patch_size: [8; 3],
        gasa: GasaOptions {
            d_model: 4,
            heads: 2,
            ..GasaOptions::default()
        },
        ..BackboneConfig::default()
    };
    let model = build_model(&cfg, &mut rng).unwrap();
    let swc = SlidingWindowConfig {
        patch_size: [8; 3],
        tta_mirror: true,
        ..SlidingWindowConfig::default()
    };
    let p = gasa::infer::predict(&model, &rand_tensor(&[1, 12, 9, 8], &mut rng, 1.0), &swc).unwrap();
    worst_simplex = worst_simplex.max(simplex_error(&p));
    ensure!(worst_simplex <= 1e-9, "probabilities leave the simplex by {worst_simplex:e}");
    Ok(format!(
        "constant {worst_const:.1e}, dense oracle {worst_dense:.1e}, TTA {worst_tta:.1e}, simplex {worst_simplex:.1e}"
    ))
}

// 8 ------------------------------------------------------------------------

fn desk_scale_learning(root: &Path) -> Outcome {
    let dir = root.join("phantoms");
    make_dataset(&PhantomSpec::default(), 16, 4, &dir).map_err(|e| e.to_string())?;
    let split = prepare_split(&dir.join(MANIFEST_NAME), 3).map_err(|e| e.to_string())?;
    ensure!(split.train.len() == 16 && split.test.len() == 4, "split sizes");
    let train = TrainConfig::default();
    ensure!(train.epochs == 50, "default epochs {}", train.epochs);
    let mut dice = Vec::new();
    for gasa_enabled in [true, false] {
        let cfg = BackboneConfig {
            gasa_enabled,
            ..BackboneConfig::default()
        };
        let (trainer, _) = train_model(&cfg, &train, &split.train, |_| Ok(())).map_err(|e| e.to_string())?;
        let (_, agg) = evaluate_cases(
            std::slice::from_ref(trainer.model()),
            &split.test,
            &SlidingWindowConfig::default(),
            3,
            None,
            None,
        )
        .map_err(|e| e.to_string())?;
        dice.push(agg.mean_dice.ok_or("no foreground in test cases")?);
    }
    let (with, without) = (dice[0], dice[1]);
    ensure!(with >= 0.90, "GASA mean foreground Dice {with:.4} < 0.90");
    ensure!(with >= without - 0.02, "GASA {with:.4} below baseline {without:.4} - 0.02");
    Ok(format!("mean foreground Dice: GASA {with:.4}, bypass baseline {without:.4}"))
}

// 9 ------------------------------------------------------------------------

fn ablation_harness(root: &Path) -> Outcome {
    let defaults = AblationConfig::default();
    ensure!(defaults.grid == vec![(2, 10), (5, 25), (10, 50), (20, 100)], "grid {:?}", defaults.grid);
    ensure!(
        defaults.pe_modes == vec![PeMode::None, PeMode::BeforeMhsa, PeMode::AfterMhsa],
        "pe modes {:?}",
        defaults.pe_modes
    );
    let cfg = RunConfig {
        phantom: PhantomSpec {
            size: [16; 3],
            ..PhantomSpec::default()
        },
        data: DataConfig { n_train: 3, n_test: 1 },
        ablation: AblationConfig {
            epochs: 1,
            iters_per_epoch: 2,
            ..defaults
        },
        ..RunConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let data = root.join("ablation_data");
    let out = root.join("ablation_run");
    make_dataset(&cfg.phantom, 3, 1, &data).map_err(|e| e.to_string())?;
    let mut sink = Vec::new();
    let cells = cmd_ablate(&cfg, &data, &out, &mut sink).map_err(|e| e.to_string())?;
    ensure!(cells.len() == 12, "{} cells", cells.len());
    ensure!(cells.iter().all(|c| c.mean_dice.is_some() && c.params > 0), "cell without result");
    let table = std::fs::read_to_string(out.join(ABLATION_TABLE_NAME)).map_err(|e| e.to_string())?;
    for row in ["| 2/10 |", "| 5/25 |", "| 10/50 |", "| 20/100 |"] {
        ensure!(table.contains(row), "table lacks row {row}");
    }
    ensure!(table.contains("PE none") && table.contains("PE before") && table.contains("PE after"), "table columns");
    let mut sink = Vec::new();
    let again = cmd_ablate(&cfg, &data, &out, &mut sink).map_err(|e| e.to_string())?;
    ensure!(again == cells, "rerun changed the cells");
    let log = String::from_utf8_lossy(&sink);
    ensure!(log.lines().filter(|l| l.starts_with("skip")).count() == 12, "rerun did not skip finished cells");
    Ok("12 cells trained and tabulated; rerun skipped all".into())
}

// 10 -----------------------------------------------------------------------

fn determinism_and_persistence(root: &Path) -> Outcome {
    let spec = PhantomSpec {
        size: [16; 3],
        ..PhantomSpec::default()
    };
    let dir = root.join("determinism");
    make_dataset(&spec, 3, 1, &dir).map_err(|e| e.to_string())?;
    let split = prepare_split(&dir.join(MANIFEST_NAME), 3).map_err(|e| e.to_string())?;
    let model = BackboneConfig {
        stage_channels: vec![4, 8],
        patch_size: [8; 3],
        gasa: GasaOptions {
            d_model: 4,
            heads: 2,
            ..GasaOptions::default()
        },
        ..BackboneConfig::default()
    };
    let train = TrainConfig {
        epochs: 10,
        iters_per_epoch: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let key = |logs: &[gasa::train::EpochLog]| -> Vec<(usize, u64, u64)> {
        logs.iter().map(|l| (l.epoch, l.lr.to_bits(), l.loss.to_bits())).collect()
    };
    let (full, logs_a) = train_model(&model, &train, &split.train, |_| Ok(())).map_err(|e| e.to_string())?;
    let (_, logs_b) = train_model(&model, &train, &split.train, |_| Ok(())).map_err(|e| e.to_string())?;
    ensure!(key(&logs_a) == key(&logs_b), "loss logs differ between identical runs");

    let mut half = Trainer::new(&model, train.clone()).map_err(|e| e.to_string())?;
    let first = half.train_until(&split.train, 5, |_| Ok(())).map_err(|e| e.to_string())?;
    let ckpt_path = dir.join("half.ckpt");
    save_checkpoint(&half.checkpoint(), &ckpt_path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&ckpt_path).map_err(|e| e.to_string())?;
    ensure!(loaded == half.checkpoint(), "checkpoint round trip not exact");
    let bits = |ts: &[Tensor]| -> Vec<u64> { ts.iter().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect() };
    ensure!(bits(&loaded.params) == bits(&half.checkpoint().params), "parameter bits changed on disk");
    let mut resumed = Trainer::from_checkpoint(&loaded).map_err(|e| e.to_string())?;
    let second = resumed.train_until(&split.train, 10, |_| Ok(())).map_err(|e| e.to_string())?;
    let joined: Vec<_> = first.into_iter().chain(second).collect();
    let loss_gap = joined
        .iter()
        .zip(&logs_a)
        .map(|(a, b)| (a.loss - b.loss).abs().max((a.lr - b.lr).abs()))
        .fold(0.0, f64::max);
    ensure!(joined.len() == 10 && loss_gap <= 1e-12, "resumed log differs by {loss_gap:e}");
    let pa: Vec<f64> = full.model().params().tensors().iter().flat_map(|t| t.values().to_vec()).collect();
    let pb: Vec<f64> = resumed.model().params().tensors().iter().flat_map(|t| t.values().to_vec()).collect();
    let param_gap = max_abs_diff(&pa, &pb);
    ensure!(param_gap <= 1e-12, "resumed parameters differ by {param_gap:e}");

    let mut rng = Rng::new(10);
    let vols = [
        Volume::image(vec![2, 3, 4, 5], (0..120).map(|_| rng.normal() * 1e3).collect(), [0.7, 1.1, 2.9]).unwrap(),
        Volume::new(
            vec![4, 3, 2],
            [1.0, 0.5, 0.25],
            [-3.5, 0.0, 12.25],
            VolumeKind::Image,
            VolumeData::F32((0..24).map(|_| rng.normal() as f32).collect()),
        )
        .unwrap(),
        Volume::labels([3, 3, 3], (0..27).map(|_| rng.below(4) as u16).collect(), [1.0; 3]).unwrap(),
    ];
    for (i, v) in vols.iter().enumerate() {
        let p = dir.join(format!("vol{i}.gvol"));
        write_volume(v, &p).map_err(|e| e.to_string())?;
        let back = read_volume(&p).map_err(|e| e.to_string())?;
        ensure!(&back == v, "volume {i} round trip differs");
    }
    Ok(format!("bitwise logs, resume gap {loss_gap:.1e} (params {param_gap:.1e}), round trips exact"))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("gradient oracle on the tiny full model", Box::new(gradient_oracle)),
        ("axial attention block structural invariants", Box::new(gasa_invariants)),
        ("loss sanity", Box::new(loss_sanity)),
        ("surface Dice vs brute force", Box::new(nsd_oracle)),
        ("resampling oracles", Box::new(resampling_oracles)),
        ("schedule checks", Box::new(schedule_checks)),
        ("inference contracts", Box::new(inference_contracts)),
        ("desk-scale learning", Box::new(|| desk_scale_learning(root.path()))),
        ("ablation harness", Box::new(|| ablation_harness(root.path()))),
        ("determinism and persistence", Box::new(|| determinism_and_persistence(root.path()))),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
