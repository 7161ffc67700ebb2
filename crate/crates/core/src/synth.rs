//! Seeded ellipsoid phantoms.
//!
//! Class 1 is an "organ" ellipsoid. With three or more classes, class 2 is a
//! "tumour" nested inside it, and any further classes are smaller disjoint
//! organs painted onto background only. Image intensity is the class mean
//! plus Gaussian noise of standard deviation `noise_sigma * class_sigma[c]`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{write_volume, Volume, VolumeData, VolumeKind};

const MAX_ATTEMPTS: usize = 64;
const MIN_EXTENT: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub num_classes: usize,
    /// Mean intensity per class; classes beyond the list use `100 * c`.
    pub class_means: Vec<f64>,
    /// Relative noise scale per class; missing entries are 1.
    pub class_sigmas: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub anisotropic_spacing: Option<[f64; 3]>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [32, 32, 32],
            num_classes: 3,
            class_means: vec![0.0, 100.0, 200.0],
            class_sigmas: vec![1.0, 1.0, 1.0],
            noise_sigma: 15.0,
            seed: 0,
            anisotropic_spacing: None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.size.iter().any(|&s| s < MIN_EXTENT) {
            return Err(Error::InvalidSpec(format!(
                "size {:?} too small to hold ellipsoids (min {MIN_EXTENT})",
                self.size
            )));
        }
        if !(self.noise_sigma >= 0.0) || self.class_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidSpec("noise scales must be >= 0".into()));
        }
        if let Some(s) = self.anisotropic_spacing {
            crate::volume::check_spacing(&s)?;
        }
        Ok(())
    }

    pub fn class_mean(&self, c: usize) -> f64 {
        self.class_means.get(c).copied().unwrap_or(100.0 * c as f64)
    }

    pub fn class_sigma(&self, c: usize) -> f64 {
        self.class_sigmas.get(c).copied().unwrap_or(1.0)
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.anisotropic_spacing.unwrap_or([1.0; 3])
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn random_ellipsoid(rng: &mut Rng, size: [usize; 3], lo: f64, hi: f64) -> Ellipsoid {
    let radii = size.map(|s| rng.uniform_range(lo, hi) * s as f64);
    let center = [0, 1, 2].map(|a| {
        let s = size[a] as f64;
        let margin = radii[a].min(s / 2.0 - 1.0);
        rng.uniform_range(margin, s - 1.0 - margin)
    });
    Ellipsoid { center, radii }
}

/// Scaled copy of `outer` by `k`, shifted by at most `1 - k` in the outer
/// ellipsoid's normalised metric, so it lies entirely inside `outer`.
fn nested(rng: &mut Rng, outer: &Ellipsoid, k: f64) -> Ellipsoid {
    let dir = [rng.normal(), rng.normal(), rng.normal()];
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
    let shift = rng.uniform() * (1.0 - k) * 0.8;
    Ellipsoid {
        center: [0, 1, 2].map(|a| outer.center[a] + dir[a] / norm * shift * outer.radii[a]),
        radii: outer.radii.map(|r| r * k),
    }
}

fn paint(labels: &mut [u16], size: [usize; 3], e: &Ellipsoid, class: u16, only_on: Option<u16>) {
    let [w, h, d] = size;
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                let idx = (i * h + j) * d + k;
                if only_on.is_some_and(|c| labels[idx] != c) {
                    continue;
                }
                if e.contains([i as f64, j as f64, k as f64]) {
                    labels[idx] = class;
                }
            }
        }
    }
}

fn try_layout(spec: &PhantomSpec, rng: &mut Rng) -> Vec<u16> {
    let size = spec.size;
    let mut labels = vec![0u16; size.iter().product()];
    let organ = random_ellipsoid(rng, size, 0.22, 0.36);
    paint(&mut labels, size, &organ, 1, None);
    if spec.num_classes >= 3 {
        let k = rng.uniform_range(0.4, 0.55);
        let tumor = nested(rng, &organ, k);
        paint(&mut labels, size, &tumor, 2, Some(1));
    }
    for c in 3..spec.num_classes {
        let e = random_ellipsoid(rng, size, 0.1, 0.18);
        paint(&mut labels, size, &e, c as u16, Some(0));
    }
    labels
}

/// Image and label volumes for one case. The same `(seed, case_index)` always
/// gives the same volumes.
pub fn generate_phantom(spec: &PhantomSpec, case_index: u64) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let mut rng = Rng::with_stream(spec.seed, case_index);
    let labels = (0..MAX_ATTEMPTS)
        .map(|_| try_layout(spec, &mut rng))
        .find(|l| {
            let mut seen = vec![false; spec.num_classes];
            l.iter().for_each(|&c| seen[c as usize] = true);
            seen.iter().all(|&s| s)
        })
        .ok_or_else(|| {
            Error::InvalidSpec(format!(
                "could not place all {} classes in {:?}",
                spec.num_classes, spec.size
            ))
        })?;
    let image: Vec<f64> = labels
        .iter()
        .map(|&c| {
            let c = c as usize;
            spec.class_mean(c) + spec.noise_sigma * spec.class_sigma(c) * rng.normal()
        })
        .collect();
    let spacing = spec.spacing();
    let img = Volume::new(
        spec.size.to_vec(),
        spacing,
        [0.0; 3],
        VolumeKind::Image,
        VolumeData::F32(image.into_iter().map(|v| v as f32).collect()),
    )?;
    let lab = Volume::labels(spec.size, labels, spacing)?;
    Ok((img, lab))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub cases: Vec<CaseEntry>,
    pub split: Split,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Case paths are stored relative to the manifest's directory.
    pub fn resolve(&self, manifest_path: &Path, case: usize) -> (PathBuf, PathBuf) {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let c = &self.cases[case];
        (dir.join(&c.image), dir.join(&c.labels))
    }
}

/// Writes `n_train + n_test` cases and the manifest into `dir`. The last
/// `n_test` cases form the test split.
pub fn make_dataset(spec: &PhantomSpec, n_train: usize, n_test: usize, dir: &Path) -> Result<Manifest> {
    let n_cases = n_train + n_test;
    if n_cases == 0 {
        return Err(Error::InvalidSpec("dataset needs at least one case".into()));
    }
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cases = (0..n_cases)
        .into_par_iter()
        .map(|i| {
            let (img, lab) = generate_phantom(spec, i as u64)?;
            let entry = CaseEntry {
                image: PathBuf::from(format!("case_{i:03}_image.gvol")),
                labels: PathBuf::from(format!("case_{i:03}_labels.gvol")),
            };
            write_volume(&img, &dir.join(&entry.image))?;
            write_volume(&lab, &dir.join(&entry.labels))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        spec: spec.clone(),
        cases,
        split: Split {
            train: (0..n_train).collect(),
            test: (n_train..n_cases).collect(),
        },
    };
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
