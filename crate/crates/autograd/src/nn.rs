//! Image-shaped operations on `[N, C, H, W]` tensors.

use crate::array::{gemm, Array};
use crate::var::Var;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        let (c, h, w) = (x[1], x[2], x[3]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Visit `(col_index, input_index)` for every in-bounds tap of row `r`.
    #[inline]
    fn for_row(&self, r: usize, mut f: impl FnMut(usize, usize)) {
        let kx = r % self.k;
        let ky = (r / self.k) % self.k;
        let ch = r / (self.k * self.k);
        for oy in 0..self.ho {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            let base_in = (ch * self.h + iy as usize) * self.w;
            for ox in 0..self.wo {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f(oy * self.wo + ox, base_in + ix as usize);
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let n = self.cols();
        for r in 0..self.rows() {
            let row = &mut cols[r * n..(r + 1) * n];
            self.for_row(r, |j, i| row[j] = x[i]);
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let n = self.cols();
        for r in 0..self.rows() {
            let row = &cols[r * n..(r + 1) * n];
            self.for_row(r, |j, i| dx[i] += row[j]);
        }
    }
}

/// Plain (non-recording) 2-D cross-correlation. `w` is `[O, C, k, k]`.
pub fn conv2d_forward(x: &Array, w: &Array, stride: usize, pad: usize) -> Array {
    assert_eq!(x.ndim(), 4, "conv2d input must be NCHW, got {:?}", x.shape());
    assert_eq!(w.ndim(), 4, "conv2d weight must be OCkk");
    assert_eq!(x.shape()[1], w.shape()[1], "conv2d channel mismatch");
    assert_eq!(w.shape()[2], w.shape()[3], "square kernels only");
    let n = x.shape()[0];
    let o = w.shape()[0];
    let g = ConvGeom::new(x.shape(), w.shape()[2], stride, pad);
    let mut out = Array::zeros(&[n, o, g.ho, g.wo]);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * g.cols();
    for b in 0..n {
        g.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
        gemm(
            o,
            g.rows(),
            g.cols(),
            w.data(),
            (g.rows() as isize, 1),
            &cols,
            (g.cols() as isize, 1),
            &mut out.data_mut()[b * out_sz..(b + 1) * out_sz],
            false,
        );
    }
    out
}

fn conv2d_backward(x: &Array, w: &Array, gout: &Array, stride: usize, pad: usize, need_x: bool, need_w: bool) -> (Option<Array>, Option<Array>) {
    let n = x.shape()[0];
    let o = w.shape()[0];
    let g = ConvGeom::new(x.shape(), w.shape()[2], stride, pad);
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * g.cols();
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut dx = need_x.then(|| Array::zeros(x.shape()));
    let mut dw = need_w.then(|| Array::zeros(w.shape()));
    for b in 0..n {
        let gb = &gout.data()[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
            // dW += G_b · colsᵀ
            gemm(
                o,
                g.cols(),
                g.rows(),
                gb,
                (g.cols() as isize, 1),
                &cols,
                (1, g.cols() as isize),
                dw.data_mut(),
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · G_b
            gemm(
                g.rows(),
                o,
                g.cols(),
                w.data(),
                (1, g.rows() as isize),
                gb,
                (g.cols() as isize, 1),
                &mut cols,
                false,
            );
            g.col2im(&cols, &mut dx.data_mut()[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dw)
}

/// Index/weight taps of a normalized `[1, 2, 1]` filter followed by
/// stride-2 subsampling along one axis of length `len`.
fn blur_down_taps(len: usize) -> Vec<Vec<(usize, f64)>> {
    let out = len.div_ceil(2);
    (0..out)
        .map(|o| {
            let centre = 2 * o as isize;
            let taps: Vec<(usize, f64)> = [(-1isize, 1.0), (0, 2.0), (1, 1.0)]
                .iter()
                .filter_map(|&(d, wt)| {
                    let i = centre + d;
                    (i >= 0 && (i as usize) < len).then_some((i as usize, wt))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter().map(|(i, wt)| (i, wt / total)).collect()
        })
        .collect()
}

/// Separable blur-and-decimate with border renormalization (one level of a
/// Gaussian pyramid).
pub fn blur_down2_forward(x: &Array) -> Array {
    let [n, c, h, w] = dims4(x);
    let ty = blur_down_taps(h);
    let tx = blur_down_taps(w);
    let (ho, wo) = (ty.len(), tx.len());
    let mut out = Array::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for (oy, rt) in ty.iter().enumerate() {
            for (ox, ct) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, wy) in rt {
                    for &(ix, wx) in ct {
                        acc += wy * wx * xd[(p * h + iy) * w + ix];
                    }
                }
                od[(p * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn dims4(x: &Array) -> [usize; 4] {
    assert_eq!(x.ndim(), 4, "expected NCHW, got {:?}", x.shape());
    [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]]
}

impl Var {
    /// 2-D cross-correlation with a `[O, C, k, k]` kernel.
    pub fn conv2d(&self, weight: &Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(), weight.value(), stride, pad);
        Var::from_op(
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, p, _| {
                let (dx, dw) = conv2d_backward(
                    p[0].value(),
                    p[1].value(),
                    g,
                    stride,
                    pad,
                    p[0].requires_grad(),
                    p[1].requires_grad(),
                );
                vec![dx, dw]
            }),
        )
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&self) -> Var {
        let [n, c, h, w] = dims4(self.value());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value().data();
        let out = Array::from_fn(&[n, c, ho, wo], |i| {
            let ox = i % wo;
            let oy = (i / wo) % ho;
            let p = i / (wo * ho);
            let b = (p * h + 2 * oy) * w + 2 * ox;
            0.25 * (x[b] + x[b + 1] + x[b + w] + x[b + w + 1])
        });
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let gd = g.data();
                vec![Some(Array::from_fn(&[n, c, h, w], |i| {
                    let ix = i % w;
                    let iy = (i / w) % h;
                    let p = i / (w * h);
                    0.25 * gd[(p * ho + iy / 2) * wo + ix / 2]
                }))]
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self) -> Var {
        let [n, c, h, w] = dims4(self.value());
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value().data();
        let out = Array::from_fn(&[n, c, ho, wo], |i| {
            let ox = i % wo;
            let oy = (i / wo) % ho;
            let p = i / (wo * ho);
            x[(p * h + oy / 2) * w + ox / 2]
        });
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut gx = Array::zeros(&[n, c, h, w]);
                let gxd = gx.data_mut();
                for (i, &v) in gd.iter().enumerate() {
                    let ox = i % wo;
                    let oy = (i / wo) % ho;
                    let p = i / (wo * ho);
                    gxd[(p * h + oy / 2) * w + ox / 2] += v;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// One Gaussian-pyramid level: `[1,2,1]` blur then stride-2 decimation.
    pub fn blur_down2(&self) -> Var {
        let [n, c, h, w] = dims4(self.value());
        Var::from_op(
            blur_down2_forward(self.value()),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let ty = blur_down_taps(h);
                let tx = blur_down_taps(w);
                let (ho, wo) = (ty.len(), tx.len());
                let gd = g.data();
                let mut gx = Array::zeros(&[n, c, h, w]);
                let gxd = gx.data_mut();
                for p in 0..n * c {
                    for (oy, rt) in ty.iter().enumerate() {
                        for (ox, ct) in tx.iter().enumerate() {
                            let gv = gd[(p * ho + oy) * wo + ox];
                            for &(iy, wy) in rt {
                                for &(ix, wx) in ct {
                                    gxd[(p * h + iy) * w + ix] += wy * wx * gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_array};

    fn naive_conv(x: &Array, w: &Array, stride: usize, pad: usize) -> Array {
        let [n, c, h, wd] = dims4(x);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Array::from_fn(&[n, o, ho, wo], |i| {
            let ox = i % wo;
            let oy = (i / wo) % ho;
            let oc = (i / (wo * ho)) % o;
            let b = i / (wo * ho * o);
            let mut acc = 0.0;
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        acc += w.data()[((oc * c + ic) * k + ky) * k + kx]
                            * x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = random_array(&[2, 3, 7, 6], 11);
        let w = random_array(&[4, 3, 3, 3], 12);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d_forward(&x, &w, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let x = random_array(&[2, 2, 5, 5], 13);
        let w = random_array(&[3, 2, 3, 3], 14);
        check_gradients(&[x.clone(), w.clone()], |v| v[0].conv2d(&v[1], 1, 1).square().sum(), 1e-6);
        check_gradients(&[x, w], |v| v[0].conv2d(&v[1], 2, 1).square().sum(), 1e-6);
    }

    #[test]
    fn pooling_gradients() {
        let x = random_array(&[1, 2, 4, 6], 15);
        check_gradients(std::slice::from_ref(&x), |v| v[0].avg_pool2().upsample2().square().sum(), 1e-6);
        check_gradients(&[x], |v| v[0].blur_down2().square().sum(), 1e-6);
        let odd = random_array(&[1, 1, 5, 3], 16);
        check_gradients(&[odd], |v| v[0].blur_down2().square().sum(), 1e-6);
    }

    #[test]
    fn blur_down_preserves_constants() {
        let x = Array::full(&[1, 2, 7, 8], 0.3);
        let y = blur_down2_forward(&x);
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
