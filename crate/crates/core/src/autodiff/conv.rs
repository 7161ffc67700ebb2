//! Direct 3D convolution kernels over `[C, W, H, D]` volumes.
//!
//! Every kernel walks output rows (fixed first two output coordinates) and
//! kernel taps, and sweeps the overlapping span of the last axis as a
//! contiguous multiply-add. Each input row is reused across all channel
//! pairs before moving on. The loop order is fixed, so results are bitwise
//! reproducible.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

/// Output indices `o` along one axis for which `o * s + k - p` lands inside `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if n + p <= k {
        return (0, 0);
    }
    let hi = ((n - 1 + p - k) / s + 1).min(out);
    (lo.min(hi), hi)
}

impl ConvGeom {
    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every output row `(oa, ob)` and kernel tap with a non-empty
    /// overlap. The callback gets the output row offset, the tap index, the
    /// input row offset, the valid output range `c0..c1` along the last axis,
    /// and the first input index on that axis.
    #[inline]
    fn for_each_row_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let [iw, ih, id] = self.input;
        let [ow, oh, od] = self.output;
        let [sw, sh, sd] = self.stride;
        let [pw, ph, pd] = self.pad;
        let [kw, kh, kd] = self.kernel;
        let ranges: Vec<(usize, usize)> = (0..kd).map(|c| valid_range(id, od, c, sd, pd)).collect();
        for oa in 0..ow {
            for ob in 0..oh {
                let orow = (oa * oh + ob) * od;
                for ta in 0..kw {
                    let Some(ia) = (oa * sw + ta).checked_sub(pw).filter(|&i| i < iw) else {
                        continue;
                    };
                    for tb in 0..kh {
                        let Some(ib) = (ob * sh + tb).checked_sub(ph).filter(|&i| i < ih) else {
                            continue;
                        };
                        let irow = (ia * ih + ib) * id;
                        for (tc, &(c0, c1)) in ranges.iter().enumerate() {
                            if c1 > c0 {
                                let t = (ta * kh + tb) * kd + tc;
                                f(orow, t, irow, c0, c1, c0 * sd + tc - pd);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dst[n] += w * src[n * step]` for every `n` in `dst`.
#[inline(always)]
fn axpy_strided(dst: &mut [f64], w: f64, src: &[f64], step: usize) {
    let n = dst.len();
    if step == 1 {
        for (o, x) in dst.iter_mut().zip(&src[..n]) {
            *o += w * x;
        }
    } else {
        for (n, o) in dst.iter_mut().enumerate() {
            *o += w * src[n * step];
        }
    }
}

pub fn forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let ov = g.out_vox();
    let iv = g.in_vox();
    let taps = g.taps();
    let sd = g.stride[2];
    let mut out = vec![0.0; g.cout * ov];
    for co in 0..g.cout {
        out[co * ov..(co + 1) * ov].fill(b[co]);
    }
    g.for_each_row_tap(|orow, t, irow, c0, c1, ic0| {
        for ci in 0..g.cin {
            let src = &x[ci * iv + irow + ic0..];
            for co in 0..g.cout {
                let wv = w[(co * g.cin + ci) * taps + t];
                let base = co * ov + orow;
                axpy_strided(&mut out[base + c0..base + c1], wv, src, sd);
            }
        }
    });
    out
}

pub fn grad_input(g: &ConvGeom, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
    let ov = g.out_vox();
    let iv = g.in_vox();
    let taps = g.taps();
    let sd = g.stride[2];
    let mut gx = vec![0.0; g.cin * iv];
    let mut tmp = vec![0.0; g.output[2]];
    g.for_each_row_tap(|orow, t, irow, c0, c1, ic0| {
        let len = c1 - c0;
        for ci in 0..g.cin {
            let acc = &mut tmp[..len];
            acc.fill(0.0);
            for co in 0..g.cout {
                let wv = w[(co * g.cin + ci) * taps + t];
                let base = co * ov + orow;
                axpy_strided(acc, wv, &grad_out[base + c0..base + c1], 1);
            }
            let dst = &mut gx[ci * iv + irow + ic0..];
            if sd == 1 {
                for (d, v) in dst[..len].iter_mut().zip(acc.iter()) {
                    *d += v;
                }
            } else {
                for (n, v) in acc.iter().enumerate() {
                    dst[n * sd] += v;
                }
            }
        }
    });
    gx
}

pub fn grad_weight(g: &ConvGeom, grad_out: &[f64], x: &[f64]) -> Vec<f64> {
    let ov = g.out_vox();
    let iv = g.in_vox();
    let taps = g.taps();
    let od = g.output[2];
    let sd = g.stride[2];
    // One accumulator lane per output position along the last axis, summed
    // in order at the end.
    let mut lanes = vec![0.0; g.cout * g.cin * taps * od];
    g.for_each_row_tap(|orow, t, irow, c0, c1, ic0| {
        for ci in 0..g.cin {
            let src = &x[ci * iv + irow + ic0..];
            for co in 0..g.cout {
                let lane = ((co * g.cin + ci) * taps + t) * od;
                let gv = &grad_out[co * ov + orow + c0..co * ov + orow + c1];
                let dst = &mut lanes[lane + c0..lane + c1];
                if sd == 1 {
                    for ((d, gg), xv) in dst.iter_mut().zip(gv).zip(&src[..c1 - c0]) {
                        *d += gg * xv;
                    }
                } else {
                    for (n, (d, gg)) in dst.iter_mut().zip(gv).enumerate() {
                        *d += gg * src[n * sd];
                    }
                }
            }
        }
    });
    lanes.chunks(od).map(|l| l.iter().sum()).collect()
}

pub fn grad_bias(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    grad_out
        .chunks(g.out_vox())
        .map(|c| c.iter().sum())
        .collect()
}
