//! Independent reference implementations used only by tests.

use super::Tensor;

/// Direct convolution, written independently of the kernel code.
pub(crate) fn conv3d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, t, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let ot = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let xi = |b: usize, c: usize, a: isize, y: isize, z: isize| -> f64 {
        if a < 0 || y < 0 || z < 0 || a >= t as isize || y >= h as isize || z >= wd as isize {
            0.0
        } else {
            x.data()[(((b * cin + c) * t + a as usize) * h + y as usize) * wd + z as usize]
        }
    };
    let mut out = vec![0.0; n * cout * ot * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for a in 0..ot {
                for y in 0..oh {
                    for z in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for i in 0..kt {
                                for j in 0..kh {
                                    for k in 0..kw {
                                        let wv = w.data()
                                            [(((co * cin + ci) * kt + i) * kh + j) * kw + k];
                                        s += wv
                                            * xi(
                                                b,
                                                ci,
                                                (a * stride[0] + i) as isize - pad[0] as isize,
                                                (y * stride[1] + j) as isize - pad[1] as isize,
                                                (z * stride[2] + k) as isize - pad[2] as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out[(((b * cout + co) * ot + a) * oh + y) * ow + z] = s;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ot, oh, ow], out).unwrap()
}
