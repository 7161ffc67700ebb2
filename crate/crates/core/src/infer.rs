//! Sliding-window prediction with Gaussian importance weighting, mirror
//! test-time augmentation, and checkpoint ensembling.
//!
//! Windows are placed with stride `max(1, floor(patch * (1 - overlap)))` per
//! axis; the last window on each axis is shifted inward to end at the border.
//! Each window's softmax is accumulated with the importance weights, the
//! weights are accumulated separately, and the two are divided at the end.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::dataset::pad_to;
use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowConfig {
    pub patch_size: [usize; 3],
    pub overlap: f64,
    /// Gaussian standard deviation as a fraction of the patch extent.
    pub sigma_scale: f64,
    pub tta_mirror: bool,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self {
            patch_size: [16, 16, 16],
            overlap: 0.5,
            sigma_scale: 0.125,
            tta_mirror: false,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!(
                "overlap {} must be in [0, 1)",
                self.overlap
            )));
        }
        if !(self.sigma_scale > 0.0) || self.patch_size.contains(&0) {
            return Err(Error::InvalidConfig(
                "sigma_scale and patch extents must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that maps a `[C, patch]` window to `[K, patch]` logits.
pub trait SegmentationModel: Sync {
    fn in_channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn window_logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl SegmentationModel for Model {
    fn in_channels(&self) -> usize {
        self.config().in_channels
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn window_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_logits(x)
    }
}

/// Separable Gaussian over the patch, centred at `(n - 1) / 2` on each axis
/// with `sigma = sigma_scale * n`. The value at the geometric centre is 1.
/// Returned flat in `[W, H, D]` order.
pub fn gaussian_importance(patch: [usize; 3], sigma_scale: f64) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = sigma_scale * n as f64;
        (0..n)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp())
            .collect()
    };
    let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(patch.iter().product());
    for x in &a {
        for y in &b {
            for z in &c {
                w.push((x * y * z).max(f64::MIN_POSITIVE));
            }
        }
    }
    w
}

/// Window start offsets along one axis.
pub fn tile_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s < last).collect();
    starts.push(last);
    starts
}

/// Every window origin, first axis slowest.
pub fn tile_origins(spatial: [usize; 3], patch: [usize; 3], overlap: f64) -> Vec<[usize; 3]> {
    let s: Vec<Vec<usize>> = (0..3).map(|a| tile_starts(spatial[a], patch[a], overlap)).collect();
    let mut out = Vec::new();
    for &a in &s[0] {
        for &b in &s[1] {
            for &c in &s[2] {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Numerically stable softmax over the leading (class) axis.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let [k, w, h, d] = dims4(logits.shape())?;
    let n = w * h * d;
    let v = logits.values();
    let mut out = vec![0.0; v.len()];
    for j in 0..n {
        let m = (0..k).map(|c| v[c * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = (v[c * n + j] - m).exp();
            out[c * n + j] = e;
            s += e;
        }
        for c in 0..k {
            out[c * n + j] /= s;
        }
    }
    Tensor::new([k, w, h, d], out)
}

fn crop(t: &Tensor, origin: [usize; 3], patch: [usize; 3]) -> Result<Tensor> {
    let [c, w, h, d] = dims4(t.shape())?;
    let [pw, ph, pd] = patch;
    let src = t.values();
    let mut v = Vec::with_capacity(c * pw * ph * pd);
    for ch in 0..c {
        for i in 0..pw {
            for j in 0..ph {
                let s = ((ch * w + origin[0] + i) * h + origin[1] + j) * d + origin[2];
                v.extend_from_slice(&src[s..s + pd]);
            }
        }
    }
    Tensor::new([c, pw, ph, pd], v)
}

fn uncrop_spatial(t: &Tensor, spatial: [usize; 3]) -> Result<Tensor> {
    let [k, w, h, d] = dims4(t.shape())?;
    if [w, h, d] == spatial {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(k * spatial.iter().product::<usize>());
    let v = t.values();
    for c in 0..k {
        for i in 0..spatial[0] {
            for j in 0..spatial[1] {
                let s = ((c * w + i) * h + j) * d;
                out.extend_from_slice(&v[s..s + spatial[2]]);
            }
        }
    }
    Tensor::new([k, spatial[0], spatial[1], spatial[2]], out)
}

/// Sliding-window probabilities `[K, W, H, D]` for an image `[C, W, H, D]`.
pub fn sliding_window_predict<M: SegmentationModel + ?Sized>(
    model: &M,
    image: &Tensor,
    swc: &SlidingWindowConfig,
) -> Result<Tensor> {
    sliding_window_in_order(model, image, swc, None)
}

/// As [`sliding_window_predict`], accumulating windows in the given order
/// (a permutation of the window indices) instead of raster order.
pub fn sliding_window_in_order<M: SegmentationModel + ?Sized>(
    model: &M,
    image: &Tensor,
    swc: &SlidingWindowConfig,
    order: Option<&[usize]>,
) -> Result<Tensor> {
    swc.validate()?;
    let [c, w, h, d] = dims4(image.shape())?;
    if c != model.in_channels() {
        return Err(Error::shape(format!(
            "image has {c} channels, model expects {}",
            model.in_channels()
        )));
    }
    let patch = swc.patch_size;
    let padded = pad_to(image, patch)?;
    let [_, pw, ph, pd] = dims4(padded.shape())?;
    let spatial = [pw, ph, pd];
    let origins = tile_origins(spatial, patch, swc.overlap);
    let order: Vec<usize> = match order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..origins.len()).collect::<Vec<_>>() {
                return Err(Error::InvalidConfig(format!(
                    "window order is not a permutation of 0..{}",
                    origins.len()
                )));
            }
            o.to_vec()
        }
        None => (0..origins.len()).collect(),
    };
    let k = model.num_classes();
    let weights = gaussian_importance(patch, swc.sigma_scale);
    let n = pw * ph * pd;
    let mut acc = vec![0.0; k * n];
    let mut wsum = vec![0.0; n];
    let chunk = rayon::current_num_threads().max(1);
    for group in order.chunks(chunk) {
        let probs = group
            .par_iter()
            .map(|&t| {
                let x = crop(&padded, origins[t], patch)?;
                let logits = model.window_logits(&x)?;
                if logits.shape() != [k, patch[0], patch[1], patch[2]] {
                    return Err(Error::shape(format!(
                        "window logits {:?}, expected [{k}, {patch:?}]",
                        logits.shape()
                    )));
                }
                softmax_channels(&logits)
            })
            .collect::<Result<Vec<_>>>()?;
        for (&t, p) in group.iter().zip(&probs) {
            let o = origins[t];
            let pv = p.values();
            let pn = patch.iter().product::<usize>();
            for i in 0..patch[0] {
                for j in 0..patch[1] {
                    for l in 0..patch[2] {
                        let src = (i * patch[1] + j) * patch[2] + l;
                        let dst = ((o[0] + i) * ph + o[1] + j) * pd + o[2] + l;
                        let wt = weights[src];
                        wsum[dst] += wt;
                        for cl in 0..k {
                            acc[cl * n + dst] += pv[cl * pn + src] * wt;
                        }
                    }
                }
            }
        }
    }
    for cl in 0..k {
        for (a, s) in acc[cl * n..(cl + 1) * n].iter_mut().zip(&wsum) {
            *a /= s;
        }
    }
    uncrop_spatial(&Tensor::new([k, pw, ph, pd], acc)?, [w, h, d])
}

/// The eight subsets of spatial axes to mirror, identity first.
pub fn mirror_sets() -> [[bool; 3]; 8] {
    std::array::from_fn(|m| [m & 4 != 0, m & 2 != 0, m & 1 != 0])
}

/// Mean of sliding-window predictions over the given mirrorings, each
/// mirrored back before averaging.
pub fn mirrored_predict<M: SegmentationModel + ?Sized>(
    model: &M,
    image: &Tensor,
    swc: &SlidingWindowConfig,
    flips: &[[bool; 3]],
) -> Result<Tensor> {
    if flips.is_empty() {
        return Err(Error::InvalidConfig("no mirrorings given".into()));
    }
    let mut sum: Option<Tensor> = None;
    for &f in flips {
        let p = sliding_window_predict(model, &image.flip_spatial(f)?, swc)?.flip_spatial(f)?;
        match &mut sum {
            None => sum = Some(p),
            Some(s) => s.values_mut().iter_mut().zip(p.values()).for_each(|(a, b)| *a += b),
        }
    }
    let mut s = sum.expect("at least one mirroring");
    let inv = 1.0 / flips.len() as f64;
    s.values_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(s)
}

pub fn tta_mirror_predict<M: SegmentationModel + ?Sized>(
    model: &M,
    image: &Tensor,
    swc: &SlidingWindowConfig,
) -> Result<Tensor> {
    mirrored_predict(model, image, swc, &mirror_sets())
}

/// Sliding window, with mirror averaging when `swc.tta_mirror` is set.
pub fn predict<M: SegmentationModel + ?Sized>(model: &M, image: &Tensor, swc: &SlidingWindowConfig) -> Result<Tensor> {
    if swc.tta_mirror {
        tta_mirror_predict(model, image, swc)
    } else {
        sliding_window_predict(model, image, swc)
    }
}

/// Mean probability map over several models.
pub fn predict_ensemble<M: SegmentationModel>(models: &[M], image: &Tensor, swc: &SlidingWindowConfig) -> Result<Tensor> {
    let Some((first, rest)) = models.split_first() else {
        return Err(Error::InvalidConfig("empty ensemble".into()));
    };
    let mut sum = predict(first, image, swc)?;
    for m in rest {
        let p = predict(m, image, swc)?;
        if p.shape() != sum.shape() {
            return Err(Error::shape("ensemble members disagree on class count".to_string()));
        }
        sum.values_mut().iter_mut().zip(p.values()).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / models.len() as f64;
    sum.values_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(sum)
}

/// Per-voxel class with the highest probability, lowest index on ties.
pub fn argmax_labels(probs: &Tensor) -> Result<Vec<u16>> {
    let [k, w, h, d] = dims4(probs.shape())?;
    let n = w * h * d;
    let v = probs.values();
    Ok((0..n)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if v[c * n + j] > v[best * n + j] {
                    best = c;
                }
            }
            best as u16
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<f64>);

    impl SegmentationModel for Constant {
        fn in_channels(&self) -> usize {
            1
        }
        fn num_classes(&self) -> usize {
            self.0.len()
        }
        fn window_logits(&self, x: &Tensor) -> Result<Tensor> {
            let [_, w, h, d] = dims4(x.shape())?;
            let n = w * h * d;
            Ok(Tensor::from_fn([self.0.len(), w, h, d], |i| self.0[i / n]))
        }
    }

    #[test]
    fn gaussian_closed_form() {
        let g = gaussian_importance([8, 8, 8], 1.0 / 8.0);
        let expect = (-3.0 * 3.5f64.powi(2) / 2.0).exp();
        assert!((g[0] - expect).abs() <= 1e-12);
        assert!((g[511] - expect).abs() <= 1e-12);
        let odd = gaussian_importance([5, 3, 7], 0.125);
        assert_eq!(odd[(2 * 3 + 1) * 7 + 3], 1.0);
        assert!(odd.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn tiles_cover_and_clamp() {
        assert_eq!(tile_starts(32, 16, 0.5), vec![0, 8, 16]);
        assert_eq!(tile_starts(20, 16, 0.5), vec![0, 4]);
        assert_eq!(tile_starts(16, 16, 0.5), vec![0]);
        assert_eq!(tile_starts(10, 16, 0.5), vec![0]);
        assert_eq!(tile_starts(5, 2, 0.9), vec![0, 1, 2, 3]);
    }

    #[test]
    fn constant_logits_give_constant_probabilities() {
        let m = Constant(vec![0.3, -1.0, 2.0]);
        let img = Tensor::zeros([1, 11, 9, 13]);
        let swc = SlidingWindowConfig {
            patch_size: [4, 4, 4],
            ..Default::default()
        };
        let p = sliding_window_predict(&m, &img, &swc).unwrap();
        let direct = softmax_channels(&Tensor::from_fn([3, 1, 1, 1], |i| m.0[i])).unwrap();
        let n = 11 * 9 * 13;
        for c in 0..3 {
            for j in 0..n {
                assert!((p.values()[c * n + j] - direct.values()[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn small_volume_is_padded() {
        let m = Constant(vec![0.0, 1.0]);
        let img = Tensor::zeros([1, 3, 4, 2]);
        let p = sliding_window_predict(&m, &img, &SlidingWindowConfig::default()).unwrap();
        assert_eq!(p.shape(), &[2, 3, 4, 2]);
        assert_eq!(argmax_labels(&p).unwrap(), vec![1; 24]);
    }

    #[test]
    fn rejects_bad_order_and_channels() {
        let m = Constant(vec![0.0, 1.0]);
        let swc = SlidingWindowConfig {
            patch_size: [2, 2, 2],
            ..Default::default()
        };
        let img = Tensor::zeros([1, 4, 2, 2]);
        assert!(sliding_window_in_order(&m, &img, &swc, Some(&[0, 0, 1])).is_err());
        assert!(matches!(
            sliding_window_predict(&m, &Tensor::zeros([2, 4, 2, 2]), &swc),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
