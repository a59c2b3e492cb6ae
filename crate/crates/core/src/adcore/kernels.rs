//! Raw numeric kernels shared by the graph ops. All buffers are row-major.

use rayon::prelude::*;

use super::Real;

/// Geometry of a 3-D convolution over an `[N, C, T, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeom {
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = self.input[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `o` along one axis with `0 <= o*stride + k - pad < in_len`.
#[inline]
fn valid_range(
    out_len: usize,
    stride: usize,
    k: usize,
    pad: usize,
    in_len: usize,
) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if in_len + pad <= k {
        0
    } else {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

pub fn conv3d_forward<F: Real>(x: &[F], w: &[F], g: &Conv3dGeom) -> Vec<F> {
    let out_dims = g.output().expect("validated geometry");
    let out_vol: usize = out_dims.iter().product();
    let in_vol = g.in_volume();
    let k_vol = g.kernel_volume();
    let mut out = vec![F::zero(); g.batch * g.out_channels * out_vol];
    out.par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(idx, o)| {
            let n = idx / g.out_channels;
            let co = idx % g.out_channels;
            for ci in 0..g.in_channels {
                let xin = &x[(n * g.in_channels + ci) * in_vol..][..in_vol];
                let wk = &w[(co * g.in_channels + ci) * k_vol..][..k_vol];
                conv_accumulate(o, xin, wk, g, out_dims, |o, i, wv| *o += wv * i);
            }
        });
    out
}

/// Visits every (output, input, weight) triple of one channel pair.
#[inline]
fn conv_accumulate<F: Real>(
    out: &mut [F],
    xin: &[F],
    wk: &[F],
    g: &Conv3dGeom,
    od: [usize; 3],
    f: impl Fn(&mut F, F, F),
) {
    let [t_in, h_in, w_in] = g.input;
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    for kt in 0..kt_n {
        let (t_lo, t_hi) = valid_range(od[0], st, kt, pt, t_in);
        for kh in 0..kh_n {
            let (h_lo, h_hi) = valid_range(od[1], sh, kh, ph, h_in);
            for kw in 0..kw_n {
                let (w_lo, w_hi) = valid_range(od[2], sw, kw, pw, w_in);
                let wv = wk[(kt * kh_n + kh) * kw_n + kw];
                for to in t_lo..t_hi {
                    let ti = to * st + kt - pt;
                    for ho in h_lo..h_hi {
                        let hi = ho * sh + kh - ph;
                        let in_row = &xin[(ti * h_in + hi) * w_in..][..w_in];
                        let out_row = &mut out[(to * od[1] + ho) * od[2]..][..od[2]];
                        for wo in w_lo..w_hi {
                            f(&mut out_row[wo], in_row[wo * sw + kw - pw], wv);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input.
pub fn conv3d_backward_input<F: Real>(gout: &[F], w: &[F], g: &Conv3dGeom) -> Vec<F> {
    let od = g.output().expect("validated geometry");
    let out_vol: usize = od.iter().product();
    let in_vol = g.in_volume();
    let k_vol = g.kernel_volume();
    let [t_in, h_in, w_in] = g.input;
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let mut gx = vec![F::zero(); g.batch * g.in_channels * in_vol];
    gx.par_chunks_mut(in_vol).enumerate().for_each(|(idx, gi)| {
        let n = idx / g.in_channels;
        let ci = idx % g.in_channels;
        for co in 0..g.out_channels {
            let go = &gout[(n * g.out_channels + co) * out_vol..][..out_vol];
            let wk = &w[(co * g.in_channels + ci) * k_vol..][..k_vol];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = valid_range(od[0], st, kt, pt, t_in);
                for kh in 0..kh_n {
                    let (h_lo, h_hi) = valid_range(od[1], sh, kh, ph, h_in);
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = valid_range(od[2], sw, kw, pw, w_in);
                        let wv = wk[(kt * kh_n + kh) * kw_n + kw];
                        for to in t_lo..t_hi {
                            let ti = to * st + kt - pt;
                            for ho in h_lo..h_hi {
                                let hi = ho * sh + kh - ph;
                                let g_row = &go[(to * od[1] + ho) * od[2]..][..od[2]];
                                let in_row = &mut gi[(ti * h_in + hi) * w_in..][..w_in];
                                for wo in w_lo..w_hi {
                                    in_row[wo * sw + kw - pw] += wv * g_row[wo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient with respect to the kernel.
pub fn conv3d_backward_kernel<F: Real>(gout: &[F], x: &[F], g: &Conv3dGeom) -> Vec<F> {
    let od = g.output().expect("validated geometry");
    let out_vol: usize = od.iter().product();
    let in_vol = g.in_volume();
    let k_vol = g.kernel_volume();
    let [t_in, h_in, w_in] = g.input;
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let mut gw = vec![F::zero(); g.out_channels * g.in_channels * k_vol];
    gw.par_chunks_mut(k_vol).enumerate().for_each(|(idx, gk)| {
        let co = idx / g.in_channels;
        let ci = idx % g.in_channels;
        for n in 0..g.batch {
            let go = &gout[(n * g.out_channels + co) * out_vol..][..out_vol];
            let xin = &x[(n * g.in_channels + ci) * in_vol..][..in_vol];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = valid_range(od[0], st, kt, pt, t_in);
                for kh in 0..kh_n {
                    let (h_lo, h_hi) = valid_range(od[1], sh, kh, ph, h_in);
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = valid_range(od[2], sw, kw, pw, w_in);
                        let mut acc = F::zero();
                        for to in t_lo..t_hi {
                            let ti = to * st + kt - pt;
                            for ho in h_lo..h_hi {
                                let hi = ho * sh + kh - ph;
                                let g_row = &go[(to * od[1] + ho) * od[2]..][..od[2]];
                                let in_row = &xin[(ti * h_in + hi) * w_in..][..w_in];
                                for wo in w_lo..w_hi {
                                    acc += g_row[wo] * in_row[wo * sw + kw - pw];
                                }
                            }
                        }
                        gk[(kt * kh_n + kh) * kw_n + kw] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]` -> `[m, n]`.
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m, k]`, `b: [n, k]` -> `[m, n]`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}
