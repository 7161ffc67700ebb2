//! Overlap and surface metrics on label volumes.
//!
//! Every metric binarizes the prediction and the reference by membership in a
//! set of label ids. A metric is `None` (undefined) when both masks are empty.
//!
//! The normalized surface Dice uses 6-connected borders: a foreground voxel is
//! on the border when any face neighbour is background or outside the grid.
//! Distances are Euclidean between voxel centres scaled by the spacing, and a
//! border voxel counts as matched when the squared distance to the nearest
//! border voxel of the other mask is at most `tau^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_spacing, Volume};

fn check_pair(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.spatial() != gt.spatial() {
        return Err(Error::shape(format!(
            "prediction {:?} vs reference {:?}",
            pred.spatial(),
            gt.spatial()
        )));
    }
    Ok(())
}

pub fn mask_of(v: &Volume, class_set: &[u16]) -> Result<Vec<bool>> {
    Ok(v.label_data()?.iter().map(|l| class_set.contains(l)).collect())
}

pub fn dice_masks(p: &[bool], g: &[bool]) -> Option<f64> {
    let (mut np, mut ng, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        np += a as usize;
        ng += b as usize;
        both += (a && b) as usize;
    }
    (np + ng > 0).then(|| 2.0 * both as f64 / (np + ng) as f64)
}

pub fn dice_score(pred: &Volume, gt: &Volume, class_set: &[u16]) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    Ok(dice_masks(&mask_of(pred, class_set)?, &mask_of(gt, class_set)?))
}

/// Border flags of a mask under 6-connectivity.
pub fn border(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [w, h, d] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * h + j) * d + k;
    let mut out = vec![false; mask.len()];
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                if !mask[idx(i, j, k)] {
                    continue;
                }
                let outside = i == 0
                    || j == 0
                    || k == 0
                    || i + 1 == w
                    || j + 1 == h
                    || k + 1 == d;
                out[idx(i, j, k)] = outside
                    || !mask[idx(i - 1, j, k)]
                    || !mask[idx(i + 1, j, k)]
                    || !mask[idx(i, j - 1, k)]
                    || !mask[idx(i, j + 1, k)]
                    || !mask[idx(i, j, k - 1)]
                    || !mask[idx(i, j, k + 1)];
            }
        }
    }
    out
}

/// Number of `from` border voxels with an `to` border voxel within `tau`.
fn count_within(from: &[bool], to: &[bool], dims: [usize; 3], tau: f64, spacing: [f64; 3]) -> usize {
    let [w, h, d] = dims;
    let tau2 = tau * tau;
    let radius: [usize; 3] = [0, 1, 2].map(|a| {
        let r = tau / spacing[a];
        if r.is_finite() {
            (r.floor() as usize).saturating_add(1).min(dims[a])
        } else {
            dims[a]
        }
    });
    let idx = |i: usize, j: usize, k: usize| (i * h + j) * d + k;
    let mut hits = 0;
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                if !from[idx(i, j, k)] {
                    continue;
                }
                let found = (i.saturating_sub(radius[0])..(i + radius[0] + 1).min(w)).any(|a| {
                    let dx = (a as f64 - i as f64) * spacing[0];
                    (j.saturating_sub(radius[1])..(j + radius[1] + 1).min(h)).any(|b| {
                        let dy = (b as f64 - j as f64) * spacing[1];
                        (k.saturating_sub(radius[2])..(k + radius[2] + 1).min(d)).any(|c| {
                            let dz = (c as f64 - k as f64) * spacing[2];
                            to[idx(a, b, c)] && dx * dx + dy * dy + dz * dz <= tau2
                        })
                    })
                });
                hits += found as usize;
            }
        }
    }
    hits
}

pub fn nsd_masks(p: &[bool], g: &[bool], dims: [usize; 3], tau: f64, spacing: [f64; 3]) -> Option<f64> {
    let bp = border(p, dims);
    let bg = border(g, dims);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np + ng == 0 {
        return None;
    }
    let matched = count_within(&bp, &bg, dims, tau, spacing) + count_within(&bg, &bp, dims, tau, spacing);
    Some(matched as f64 / (np + ng) as f64)
}

pub fn nsd(
    pred: &Volume,
    gt: &Volume,
    class_set: &[u16],
    tau: f64,
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    check_spacing(&spacing)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} must be >= 0")));
    }
    Ok(nsd_masks(
        &mask_of(pred, class_set)?,
        &mask_of(gt, class_set)?,
        pred.spatial(),
        tau,
        spacing,
    ))
}

/// Default tolerance: one voxel at the finest spacing.
pub fn default_tau(spacing: [f64; 3]) -> f64 {
    spacing.iter().copied().fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HecGroup {
    pub name: String,
    pub labels: Vec<u16>,
}

/// Hierarchical evaluation classes: named unions of label ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HecSpec {
    pub groups: Vec<HecGroup>,
}

impl HecSpec {
    pub fn new(groups: Vec<HecGroup>) -> Result<Self> {
        let spec = Self { groups };
        for g in &spec.groups {
            if g.labels.is_empty() {
                return Err(Error::InvalidConfig(format!("HEC group '{}' is empty", g.name)));
            }
        }
        Ok(spec)
    }

    /// Organ-with-lesion grouping for phantoms where label 1 is the organ and
    /// label 2 the nested tumour: `{organ, tumor}` and `{tumor}`.
    pub fn kits() -> Self {
        Self {
            groups: vec![
                HecGroup {
                    name: "Organ & Tumor".into(),
                    labels: vec![1, 2],
                },
                HecGroup {
                    name: "Tumor".into(),
                    labels: vec![2],
                },
            ],
        }
    }

    /// One group per foreground class.
    pub fn per_class(num_classes: usize) -> Self {
        Self {
            groups: (1..num_classes as u16)
                .map(|c| HecGroup {
                    name: format!("class {c}"),
                    labels: vec![c],
                })
                .collect(),
        }
    }

    pub fn by_name(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "kits" => {
                if num_classes < 3 {
                    return Err(Error::InvalidConfig(
                        "kits grouping needs organ and tumour labels (3+ classes)".into(),
                    ));
                }
                Ok(Self::kits())
            }
            "classes" => Ok(Self::per_class(num_classes)),
            other => Err(Error::InvalidConfig(format!("unknown HEC preset '{other}'"))),
        }
    }

    pub fn validate_for(&self, num_classes: usize) -> Result<()> {
        for g in &self.groups {
            if g.labels.is_empty() || g.labels.iter().any(|&l| l as usize >= num_classes) {
                return Err(Error::InvalidConfig(format!(
                    "HEC group '{}' has invalid labels {:?}",
                    g.name, g.labels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub labels: Vec<u16>,
    pub dice: Option<f64>,
    pub nsd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<MetricEntry>,
    pub groups: Vec<MetricEntry>,
    pub mean_dice: Option<f64>,
    pub mean_nsd: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn score(pred: &Volume, gt: &Volume, name: &str, labels: &[u16], tau: f64, spacing: [f64; 3]) -> Result<MetricEntry> {
    Ok(MetricEntry {
        name: name.to_string(),
        labels: labels.to_vec(),
        dice: dice_score(pred, gt, labels)?,
        nsd: nsd(pred, gt, labels, tau, spacing)?,
    })
}

pub fn hec_evaluate(
    pred: &Volume,
    gt: &Volume,
    spec: &HecSpec,
    tau: f64,
    spacing: [f64; 3],
) -> Result<MetricReport> {
    let groups = spec
        .groups
        .iter()
        .map(|g| score(pred, gt, &g.name, &g.labels, tau, spacing))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        mean_dice: mean_defined(groups.iter().map(|e| e.dice)),
        mean_nsd: mean_defined(groups.iter().map(|e| e.nsd)),
        classes: Vec::new(),
        groups,
    })
}

/// Per-foreground-class scores, plus HEC groups when given. The means are
/// over the foreground classes.
pub fn evaluate_case(
    pred: &Volume,
    gt: &Volume,
    num_classes: usize,
    hec: Option<&HecSpec>,
    tau: f64,
    spacing: [f64; 3],
) -> Result<MetricReport> {
    let classes = (1..num_classes as u16)
        .map(|c| score(pred, gt, &format!("class {c}"), &[c], tau, spacing))
        .collect::<Result<Vec<_>>>()?;
    let groups = match hec {
        Some(spec) => {
            spec.validate_for(num_classes)?;
            hec_evaluate(pred, gt, spec, tau, spacing)?.groups
        }
        None => Vec::new(),
    };
    Ok(MetricReport {
        mean_dice: mean_defined(classes.iter().map(|e| e.dice)),
        mean_nsd: mean_defined(classes.iter().map(|e| e.nsd)),
        classes,
        groups,
    })
}

impl MetricReport {
    /// Entry-wise mean over cases, skipping undefined values.
    pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
        let Some(first) = reports.first() else {
            return MetricReport::default();
        };
        let merge = |pick: fn(&MetricReport) -> &Vec<MetricEntry>| -> Vec<MetricEntry> {
            pick(first)
                .iter()
                .enumerate()
                .map(|(i, e)| MetricEntry {
                    name: e.name.clone(),
                    labels: e.labels.clone(),
                    dice: mean_defined(reports.iter().map(|r| pick(r)[i].dice)),
                    nsd: mean_defined(reports.iter().map(|r| pick(r)[i].nsd)),
                })
                .collect()
        };
        let classes = merge(|r| &r.classes);
        let groups = merge(|r| &r.groups);
        MetricReport {
            mean_dice: mean_defined(classes.iter().map(|e| e.dice)),
            mean_nsd: mean_defined(classes.iter().map(|e| e.nsd)),
            classes,
            groups,
        }
    }

    /// Markdown table with values scaled to percent.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = String::from("| Entry | Dice | NSD |\n|---|---|---|\n");
        for e in self.classes.iter().chain(&self.groups) {
            s.push_str(&format!("| {} | {} | {} |\n", e.name, pct(e.dice), pct(e.nsd)));
        }
        s.push_str(&format!(
            "| Avg | {} | {} |\n",
            pct(self.mean_dice),
            pct(self.mean_nsd)
        ));
        s
    }
}
