//! SGD with Nesterov momentum, the poly learning-rate schedule, the patch
//! training loop, and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{build_model, BackboneConfig, Model};
use crate::dataset::{pad_labels, pad_to, Case};
use crate::error::{Error, Result};
use crate::loss::{one_hot, soft_dice_ce_loss};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub seed: u64,
    pub poly_exponent: f64,
    /// Fraction of each batch (rounded, taken from the end) forced to be
    /// centred on a foreground voxel.
    pub foreground_oversample: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.99,
            epochs: 50,
            iters_per_epoch: 20,
            batch: 2,
            seed: 0,
            poly_exponent: 0.9,
            foreground_oversample: 0.33,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch == 0 {
            return bad("epochs, iters_per_epoch and batch must be >= 1");
        }
        if !(self.poly_exponent >= 0.0) || !(0.0..=1.0).contains(&self.foreground_oversample) {
            return bad("poly_exponent must be >= 0 and foreground_oversample in [0, 1]");
        }
        Ok(())
    }

    fn oversampled(&self, sample: usize) -> bool {
        let plain = (self.batch as f64 * (1.0 - self.foreground_oversample)).round() as usize;
        sample >= plain
    }
}

/// `lr0 * (1 - epoch / epoch_max)^exponent`.
pub fn poly_lr(epoch: usize, epoch_max: usize, lr0: f64, exponent: f64) -> Result<f64> {
    if epoch > epoch_max || epoch_max == 0 {
        return Err(Error::InvalidEpoch {
            epoch,
            max: epoch_max,
        });
    }
    Ok(lr0 * (1.0 - epoch as f64 / epoch_max as f64).powf(exponent))
}

/// `v <- mu v + g; p <- p - lr (g + mu v)` for every tensor.
pub fn sgd_nesterov_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    buffers: &mut [Tensor],
    lr: f64,
    mu: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffers.len() {
        return Err(Error::shape(format!(
            "{} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            buffers.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(buffers.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "param {:?}, grad {:?}, buffer {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(buffers.iter_mut()) {
        for ((pi, &gi), vi) in p.values_mut().iter_mut().zip(g.values()).zip(v.values_mut()) {
            *vi = mu * *vi + gi;
            *pi -= lr * (gi + mu * *vi);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seconds: f64,
}

/// A training case padded to the patch size, with per-class voxel indices
/// for foreground-centred sampling.
struct TrainCase {
    image: Tensor,
    labels: Vec<u16>,
    spatial: [usize; 3],
    foreground: Vec<Vec<usize>>,
}

impl TrainCase {
    fn new(case: &Case, patch: [usize; 3], num_classes: usize) -> Result<Self> {
        let image = pad_to(&case.image, patch)?;
        let (labels, spatial) = pad_labels(&case.labels, case.spatial, patch);
        let mut foreground = vec![Vec::new(); num_classes];
        for (j, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::InvalidConfig(format!(
                    "label {l} outside {num_classes} classes"
                )));
            }
            if l > 0 {
                foreground[l].push(j);
            }
        }
        foreground.retain(|v| !v.is_empty());
        Ok(Self {
            image,
            labels,
            spatial,
            foreground,
        })
    }

    fn crop(&self, origin: [usize; 3], patch: [usize; 3], num_classes: usize) -> Result<(Tensor, Tensor)> {
        let [_, w, h, d] = crate::tensor::dims4(self.image.shape())?;
        let c = self.image.shape()[0];
        let [pw, ph, pd] = patch;
        let mut img = Vec::with_capacity(c * pw * ph * pd);
        let src = self.image.values();
        for ch in 0..c {
            for i in 0..pw {
                for j in 0..ph {
                    let s = ((ch * w + origin[0] + i) * h + origin[1] + j) * d + origin[2];
                    img.extend_from_slice(&src[s..s + pd]);
                }
            }
        }
        let mut lab = Vec::with_capacity(pw * ph * pd);
        for i in 0..pw {
            for j in 0..ph {
                let s = ((origin[0] + i) * h + origin[1] + j) * d + origin[2];
                lab.extend_from_slice(&self.labels[s..s + pd]);
            }
        }
        Ok((Tensor::new([c, pw, ph, pd], img)?, one_hot(&lab, patch, num_classes)?))
    }
}

fn random_origin(rng: &mut Rng, spatial: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| rng.below(spatial[a] - patch[a] + 1))
}

fn centred_origin(rng: &mut Rng, case: &TrainCase, patch: [usize; 3]) -> [usize; 3] {
    let class = &case.foreground[rng.below(case.foreground.len())];
    let j = class[rng.below(class.len())];
    let [_, h, d] = case.spatial;
    let voxel = [j / (h * d), (j / d) % h, j % d];
    [0, 1, 2].map(|a| {
        let lo = voxel[a].saturating_sub(patch[a] / 2);
        lo.min(case.spatial[a] - patch[a])
    })
}

/// Model, optimizer state, and the position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    momentum: Vec<Tensor>,
    epoch: usize,
    rng: Rng,
}

impl Trainer {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(model_cfg: &BackboneConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let model = build_model(model_cfg, &mut rng)?;
        Ok(Self::with_model(model, cfg, rng))
    }

    pub fn with_model(model: Model, cfg: TrainConfig, rng: Rng) -> Self {
        let momentum = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            model,
            cfg,
            momentum,
            epoch: 0,
            rng,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn momentum(&self) -> &[Tensor] {
        &self.momentum
    }

    fn prepare(&self, cases: &[Case]) -> Result<Vec<TrainCase>> {
        if cases.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let mc = self.model.config();
        cases
            .iter()
            .map(|c| {
                if c.image.shape()[0] != mc.in_channels {
                    return Err(Error::shape(format!(
                        "case has {} channels, model expects {}",
                        c.image.shape()[0],
                        mc.in_channels
                    )));
                }
                TrainCase::new(c, mc.patch_size, mc.num_classes)
            })
            .collect()
    }

    /// One optimisation step on a sampled batch; returns the batch loss.
    fn step(&mut self, cases: &[TrainCase], lr: f64) -> Result<f64> {
        let mc = self.model.config().clone();
        let patch = mc.patch_size;
        let tape = Tape::new();
        let bound = self.model.params().bind(&tape, true);
        let mut losses = Vec::with_capacity(self.cfg.batch);
        for b in 0..self.cfg.batch {
            let case = &cases[self.rng.below(cases.len())];
            let origin = if self.cfg.oversampled(b) && !case.foreground.is_empty() {
                centred_origin(&mut self.rng, case, patch)
            } else {
                random_origin(&mut self.rng, case.spatial, patch)
            };
            let (x, y) = case.crop(origin, patch, mc.num_classes)?;
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let logits = self.model.forward(&tape, &bound, xv, true, &mut self.rng)?;
            losses.push(soft_dice_ce_loss(&tape, logits, yv)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / self.cfg.batch as f64);
        tape.backward(loss)?;
        let grads = bound.grads(&tape, self.model.params());
        let value = tape.value(loss).item();
        let mu = self.cfg.momentum;
        sgd_nesterov_step(
            self.model.params_mut().tensors_mut(),
            &grads,
            &mut self.momentum,
            lr,
            mu,
        )?;
        Ok(value)
    }

    /// Runs epochs until `until` (capped at `cfg.epochs`) have completed,
    /// calling `on_epoch` after each.
    pub fn train_until(
        &mut self,
        cases: &[Case],
        until: usize,
        mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let prepared = self.prepare(cases)?;
        let until = until.min(self.cfg.epochs);
        let mut logs = Vec::new();
        while self.epoch < until {
            let start = Instant::now();
            let lr = poly_lr(self.epoch, self.cfg.epochs, self.cfg.lr0, self.cfg.poly_exponent)?;
            let mut sum = 0.0;
            for _ in 0..self.cfg.iters_per_epoch {
                sum += self.step(&prepared, lr)?;
            }
            self.epoch += 1;
            let log = EpochLog {
                epoch: self.epoch,
                lr,
                loss: sum / self.cfg.iters_per_epoch as f64,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_epoch(&log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn train(&mut self, cases: &[Case]) -> Result<Vec<EpochLog>> {
        self.train_until(cases, self.cfg.epochs, |_| Ok(()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = self.model.params();
        Checkpoint {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            names: store.iter().map(|(_, n, _)| n.to_string()).collect(),
            params: store.tensors().to_vec(),
            momentum: self.momentum.clone(),
            epoch: self.epoch,
            rng: self.rng.state(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let model = ckpt.build_model()?;
        if ckpt.momentum.len() != ckpt.params.len()
            || ckpt.momentum.iter().zip(&ckpt.params).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::shape("momentum buffers do not match parameters"));
        }
        Ok(Self {
            model,
            cfg: ckpt.train.clone(),
            momentum: ckpt.momentum.clone(),
            epoch: ckpt.epoch,
            rng: Rng::from_state(ckpt.rng),
        })
    }
}

pub fn write_log_line(out: &mut impl std::io::Write, log: &EpochLog) -> Result<()> {
    let line = serde_json::to_string(log)?;
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<log>"), e))
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"GASACKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub momentum: Vec<Tensor>,
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: BackboneConfig,
    train: TrainConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    epoch: usize,
    rng: RngState,
}

impl Checkpoint {
    /// Rebuilds the layer layout from the config and installs the stored
    /// parameter values.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = build_model(&self.model, &mut Rng::new(0))?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, model needs {}",
                self.params.len(),
                store.len()
            )));
        }
        for (dst, src) in store.tensors_mut().iter_mut().zip(&self.params) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor {:?} vs model {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(model)
    }
}

/// Layout: magic, u64 LE header length, JSON header, then every parameter
/// and every momentum buffer as raw f64 LE in header order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        names: ckpt.names.clone(),
        shapes: ckpt.params.iter().map(|t| t.shape().to_vec()).collect(),
        epoch: ckpt.epoch,
        rng: ckpt.rng,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in ckpt.params.iter().chain(&ckpt.momentum) {
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m || &bytes[..m] != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..m.min(bytes.len())]).into_owned();
        return Err(Error::VersionMismatch(found));
    }
    let truncated = || Error::format(path, "truncated checkpoint");
    let len_bytes = bytes.get(m..m + 8).ok_or_else(truncated)?;
    let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let json = bytes.get(m + 8..m + 8 + len).ok_or_else(truncated)?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::format(path, e.to_string()))?;
    let mut pos = m + 8 + len;
    let mut read_tensors = |shapes: &[Vec<usize>]| -> Result<Vec<Tensor>> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let raw = bytes.get(pos..pos + 8 * n).ok_or_else(truncated)?;
                pos += 8 * n;
                let v = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::new(s.clone(), v).map_err(|e| Error::format(path, e.to_string()))
            })
            .collect()
    };
    let params = read_tensors(&header.shapes)?;
    let momentum = read_tensors(&header.shapes)?;
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    if header.names.len() != params.len() {
        return Err(Error::format(path, "name count does not match tensor count"));
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        names: header.names,
        params,
        momentum,
        epoch: header.epoch,
        rng: header.rng,
    })
}
