//! Loading manifest cases and turning them into network-ready tensors.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{clip_normalize, resample_image, resample_labels, target_spacing, NormStats};
use crate::synth::Manifest;
use crate::tensor::Tensor;
use crate::volume::{read_volume, Volume};

/// A preprocessed case: image `[C, W, H, D]` and labels over `[W, H, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub image: Tensor,
    pub labels: Vec<u16>,
    pub spatial: [usize; 3],
    pub spacing: [f64; 3],
}

impl Case {
    pub fn new(image: Tensor, labels: Vec<u16>, spacing: [f64; 3]) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("case image must be [C,W,H,D], got {s:?}")));
        }
        let spatial = [s[1], s[2], s[3]];
        if labels.len() != spatial.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} labels for spatial {spatial:?}",
                labels.len()
            )));
        }
        Ok(Self {
            image,
            labels,
            spatial,
            spacing,
        })
    }
}

/// Dataset-level normalization statistics and target spacing, fitted on the
/// training cases and reused unchanged for test cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub stats: Vec<NormStats>,
    pub spacing: [f64; 3],
}

impl Preprocessing {
    /// Pools the foreground (label > 0) intensities of all cases per channel.
    pub fn fit(cases: &[(Volume, Volume)]) -> Result<Self> {
        let Some((first, _)) = cases.first() else {
            return Err(Error::InvalidConfig("no training cases".into()));
        };
        let channels = first.channels();
        let mut pooled = vec![Vec::new(); channels];
        for (img, lab) in cases {
            if img.channels() != channels || img.spatial() != lab.spatial() {
                return Err(Error::shape(format!(
                    "case image {:?} vs labels {:?}",
                    img.shape, lab.shape
                )));
            }
            let fg: Vec<bool> = lab.label_data()?.iter().map(|&l| l > 0).collect();
            let n = img.voxels();
            for (c, ch) in img.to_f64().chunks(n).enumerate() {
                pooled[c].extend(ch.iter().zip(&fg).filter(|(_, &m)| m).map(|(&v, _)| v));
            }
        }
        let stats = pooled
            .iter()
            .map(|v| NormStats::from_foreground(v))
            .collect::<Result<Vec<_>>>()?;
        let spacings: Vec<[f64; 3]> = cases.iter().map(|(img, _)| img.spacing).collect();
        Ok(Self {
            stats,
            spacing: target_spacing(&spacings)?,
        })
    }

    pub fn apply(&self, img: &Volume, lab: &Volume, num_classes: usize) -> Result<Case> {
        let norm = clip_normalize(img, lab, Some(&self.stats))?;
        let img = resample_image(&norm, self.spacing)?;
        let lab = resample_labels(lab, self.spacing, num_classes)?;
        Case::new(img.to_tensor()?, lab.label_data()?.to_vec(), self.spacing)
    }
}

pub fn load_cases(manifest_path: &Path, manifest: &Manifest, indices: &[usize]) -> Result<Vec<(Volume, Volume)>> {
    indices
        .par_iter()
        .map(|&i| {
            if i >= manifest.cases.len() {
                return Err(Error::InvalidConfig(format!(
                    "case {i} not in manifest ({} cases)",
                    manifest.cases.len()
                )));
            }
            let (img, lab) = manifest.resolve(manifest_path, i);
            Ok((read_volume(&img)?, read_volume(&lab)?))
        })
        .collect()
}

/// Zero-pads the trailing spatial axes of `[C, W, H, D]` up to `min`.
pub fn pad_to(t: &Tensor, min: [usize; 3]) -> Result<Tensor> {
    let [c, w, h, d] = crate::tensor::dims4(t.shape())?;
    let out = [w.max(min[0]), h.max(min[1]), d.max(min[2])];
    if out == [w, h, d] {
        return Ok(t.clone());
    }
    let mut v = vec![0.0; c * out.iter().product::<usize>()];
    let src = t.values();
    for ch in 0..c {
        for i in 0..w {
            for j in 0..h {
                let s = ((ch * w + i) * h + j) * d;
                let o = ((ch * out[0] + i) * out[1] + j) * out[2];
                v[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    Tensor::new([c, out[0], out[1], out[2]], v)
}

/// Label counterpart of [`pad_to`]; padding is background.
pub fn pad_labels(labels: &[u16], spatial: [usize; 3], min: [usize; 3]) -> (Vec<u16>, [usize; 3]) {
    let [w, h, d] = spatial;
    let out = [w.max(min[0]), h.max(min[1]), d.max(min[2])];
    if out == spatial {
        return (labels.to_vec(), out);
    }
    let mut v = vec![0u16; out.iter().product()];
    for i in 0..w {
        for j in 0..h {
            let s = (i * h + j) * d;
            let o = (i * out[1] + j) * out[2];
            v[o..o + d].copy_from_slice(&labels[s..s + d]);
        }
    }
    (v, out)
}
