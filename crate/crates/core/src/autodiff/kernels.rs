//! Per-sample loop kernels behind the convolution and dense ops.
//!
//! Every kernel works on a single sample; the tape fans samples out over the
//! rayon pool and reduces weight gradients in sample order so results do not
//! depend on scheduling.

/// Spatial geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output extent for one axis, `None` when the kernel does not fit.
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if stride == 0 || k == 0 || k > padded {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Output index range `[lo, hi)` along one axis whose input coordinate
    /// `o * stride + tap - pad` falls inside `[0, n)`.
    fn valid(tap: usize, pad: usize, stride: usize, n: usize, n_out: usize) -> (usize, usize) {
        let lo = if pad > tap {
            (pad - tap).div_ceil(stride)
        } else {
            0
        };
        if n + pad <= tap {
            return (0, 0);
        }
        let hi = ((n - 1 + pad - tap) / stride + 1).min(n_out);
        (lo.min(hi), hi)
    }

    fn rows(&self, kh: usize) -> (usize, usize) {
        Self::valid(kh, self.pad, self.stride, self.h, self.ho)
    }

    fn cols(&self, kw: usize) -> (usize, usize) {
        Self::valid(kw, self.pad, self.stride, self.w, self.wo)
    }
}

/// `out[oh, ow] += wv * inp[oh*s + kh - p, ow*s + kw - p]` over valid taps.
#[inline]
fn accum_tap(out: &mut [f64], inp: &[f64], g: &ConvGeom, kh: usize, kw: usize, wv: f64) {
    let (r0, r1) = g.rows(kh);
    let (c0, c1) = g.cols(kw);
    if c0 >= c1 {
        return;
    }
    for oh in r0..r1 {
        let ih = oh * g.stride + kh - g.pad;
        let orow = &mut out[oh * g.wo..(oh + 1) * g.wo];
        let irow = &inp[ih * g.w..(ih + 1) * g.w];
        if g.stride == 1 {
            let shift = kw as isize - g.pad as isize;
            let src = &irow[(c0 as isize + shift) as usize..(c1 as isize + shift) as usize];
            for (o, &x) in orow[c0..c1].iter_mut().zip(src) {
                *o += wv * x;
            }
        } else {
            for ow in c0..c1 {
                orow[ow] += wv * irow[ow * g.stride + kw - g.pad];
            }
        }
    }
}

/// Transpose of [`accum_tap`]: scatters `wv * gout` back onto the input plane.
#[inline]
fn scatter_tap(gin: &mut [f64], gout: &[f64], g: &ConvGeom, kh: usize, kw: usize, wv: f64) {
    let (r0, r1) = g.rows(kh);
    let (c0, c1) = g.cols(kw);
    if c0 >= c1 {
        return;
    }
    for oh in r0..r1 {
        let ih = oh * g.stride + kh - g.pad;
        let orow = &gout[oh * g.wo..(oh + 1) * g.wo];
        let irow = &mut gin[ih * g.w..(ih + 1) * g.w];
        for ow in c0..c1 {
            irow[ow * g.stride + kw - g.pad] += wv * orow[ow];
        }
    }
}

/// Correlation of an output-gradient plane with the input plane at one tap.
#[inline]
fn dot_tap(gout: &[f64], inp: &[f64], g: &ConvGeom, kh: usize, kw: usize) -> f64 {
    let (r0, r1) = g.rows(kh);
    let (c0, c1) = g.cols(kw);
    let mut acc = 0.0;
    for oh in r0..r1 {
        let ih = oh * g.stride + kh - g.pad;
        let orow = &gout[oh * g.wo..(oh + 1) * g.wo];
        let irow = &inp[ih * g.w..(ih + 1) * g.w];
        for ow in c0..c1 {
            acc += orow[ow] * irow[ow * g.stride + kw - g.pad];
        }
    }
    acc
}

impl ConvGeom {
    /// 1x1, stride 1, no padding: input and output planes coincide.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with four running partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.k * g.k);
    if g.pointwise() {
        for co in 0..g.c_out {
            out[co * op..(co + 1) * op].fill(b[co]);
        }
        for co in 0..g.c_out {
            let oplane = &mut out[co * op..(co + 1) * op];
            for ci in 0..g.c_in {
                axpy(oplane, w[co * g.c_in + ci], &x[ci * ip..(ci + 1) * ip]);
            }
        }
        return;
    }
    for co in 0..g.c_out {
        let oplane = &mut out[co * op..(co + 1) * op];
        oplane.fill(b[co]);
        for ci in 0..g.c_in {
            let iplane = &x[ci * ip..(ci + 1) * ip];
            let wbase = (co * g.c_in + ci) * kk;
            for kh in 0..g.k {
                for kw in 0..g.k {
                    accum_tap(oplane, iplane, g, kh, kw, w[wbase + kh * g.k + kw]);
                }
            }
        }
    }
}

pub fn conv_backward_input(gout: &[f64], w: &[f64], g: &ConvGeom, gin: &mut [f64]) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.k * g.k);
    if g.pointwise() {
        for ci in 0..g.c_in {
            let gplane = &mut gin[ci * ip..(ci + 1) * ip];
            for co in 0..g.c_out {
                axpy(gplane, w[co * g.c_in + ci], &gout[co * op..(co + 1) * op]);
            }
        }
        return;
    }
    for ci in 0..g.c_in {
        let gplane = &mut gin[ci * ip..(ci + 1) * ip];
        for co in 0..g.c_out {
            let oplane = &gout[co * op..(co + 1) * op];
            let wbase = (co * g.c_in + ci) * kk;
            for kh in 0..g.k {
                for kw in 0..g.k {
                    scatter_tap(gplane, oplane, g, kh, kw, w[wbase + kh * g.k + kw]);
                }
            }
        }
    }
}

/// Accumulates this sample's weight and bias gradients.
pub fn conv_backward_params(gout: &[f64], x: &[f64], g: &ConvGeom, gw: &mut [f64], gb: &mut [f64]) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.k * g.k);
    if g.pointwise() {
        for co in 0..g.c_out {
            let oplane = &gout[co * op..(co + 1) * op];
            gb[co] += oplane.iter().sum::<f64>();
            for ci in 0..g.c_in {
                gw[co * g.c_in + ci] += dot(oplane, &x[ci * ip..(ci + 1) * ip]);
            }
        }
        return;
    }
    for co in 0..g.c_out {
        let oplane = &gout[co * op..(co + 1) * op];
        gb[co] += oplane.iter().sum::<f64>();
        for ci in 0..g.c_in {
            let iplane = &x[ci * ip..(ci + 1) * ip];
            let wbase = (co * g.c_in + ci) * kk;
            for kh in 0..g.k {
                for kw in 0..g.k {
                    gw[wbase + kh * g.k + kw] += dot_tap(oplane, iplane, g, kh, kw);
                }
            }
        }
    }
}

pub fn depthwise_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.k * g.k);
    for c in 0..g.c_out {
        let oplane = &mut out[c * op..(c + 1) * op];
        oplane.fill(b[c]);
        let iplane = &x[c * ip..(c + 1) * ip];
        for kh in 0..g.k {
            for kw in 0..g.k {
                accum_tap(oplane, iplane, g, kh, kw, w[c * kk + kh * g.k + kw]);
            }
        }
    }
}

pub fn depthwise_backward_input(gout: &[f64], w: &[f64], g: &ConvGeom, gin: &mut [f64]) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.k * g.k);
    for c in 0..g.c_out {
        let gplane = &mut gin[c * ip..(c + 1) * ip];
        let oplane = &gout[c * op..(c + 1) * op];
        for kh in 0..g.k {
            for kw in 0..g.k {
                scatter_tap(gplane, oplane, g, kh, kw, w[c * kk + kh * g.k + kw]);
            }
        }
    }
}

pub fn depthwise_backward_params(
    gout: &[f64],
    x: &[f64],
    g: &ConvGeom,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.k * g.k);
    for c in 0..g.c_out {
        let oplane = &gout[c * op..(c + 1) * op];
        gb[c] += oplane.iter().sum::<f64>();
        let iplane = &x[c * ip..(c + 1) * ip];
        for kh in 0..g.k {
            for kw in 0..g.k {
                gw[c * kk + kh * g.k + kw] += dot_tap(oplane, iplane, g, kh, kw);
            }
        }
    }
}

/// `out[j] = b[j] + sum_i x[i] * w[i, j]` for one row.
pub fn dense_forward_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let d_out = b.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let wrow = &w[i * d_out..(i + 1) * d_out];
        for (o, &wij) in out.iter_mut().zip(wrow) {
            *o += xi * wij;
        }
    }
}

pub fn dense_backward_input_row(gout: &[f64], w: &[f64], gin: &mut [f64]) {
    let d_out = gout.len();
    for (i, gi) in gin.iter_mut().enumerate() {
        let wrow = &w[i * d_out..(i + 1) * d_out];
        *gi += wrow.iter().zip(gout).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_formula() {
        assert_eq!(ConvGeom::out_extent(8, 3, 2, 1), Some(4));
        assert_eq!(ConvGeom::out_extent(16, 3, 2, 0), Some(7));
        assert_eq!(ConvGeom::out_extent(2, 5, 1, 1), None);
        assert_eq!(ConvGeom::out_extent(5, 3, 0, 1), None);
    }

    #[test]
    fn valid_range_covers_padding() {
        // n=5, k=3, pad=1, stride=1 -> 5 outputs; tap 0 misses output 0.
        assert_eq!(ConvGeom::valid(0, 1, 1, 5, 5), (1, 5));
        assert_eq!(ConvGeom::valid(1, 1, 1, 5, 5), (0, 5));
        assert_eq!(ConvGeom::valid(2, 1, 1, 5, 5), (0, 4));
        // stride 2: outputs 0..3, input o*2 + tap - 1
        assert_eq!(ConvGeom::valid(0, 1, 2, 5, 3), (1, 3));
        assert_eq!(ConvGeom::valid(2, 1, 2, 5, 3), (0, 2));
    }
}
