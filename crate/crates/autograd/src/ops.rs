//! Differentiable elementwise, broadcasting, reduction and shape operations.

use crate::array::{gemm, numel, Array};
use crate::var::Var;

/// Equal-rank broadcasting; a rank-0 scalar broadcasts against anything.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    if a.is_empty() {
        return b.to_vec();
    }
    if b.is_empty() {
        return a.to_vec();
    }
    assert_eq!(
        a.len(),
        b.len(),
        "broadcasting requires equal rank: {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "incompatible broadcast {a:?} vs {b:?}"
            );
            x.max(y)
        })
        .collect()
}

/// Strides of `shape` as seen from `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        return vec![0; out.len()];
    }
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

fn for_each_index(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    while o < n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..nd - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        // advance the outer multi-index
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sum `grad` down to `shape` over the axes where `shape` was broadcast.
pub fn sum_to_shape(grad: &Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(shape, grad.shape());
    let zero = vec![0; grad.ndim()];
    let mut out = Array::zeros(shape);
    let g = grad.data();
    let od = out.data_mut();
    for_each_index(grad.shape(), &strides, &zero, |o, i, _| od[i] += g[o]);
    out
}

fn broadcast_binary(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = Array::zeros(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_index(&out_shape, &sa, &sb, |o, ia, ib| od[o] = f(ad[ia], bd[ib]));
    out
}

fn unary(x: &Var, value: Array, dfdx: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, p, out| {
            let x = p[0].value();
            let mut gx = g.clone();
            for ((gv, &xv), &yv) in gx.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                *gv *= dfdx(xv, yv);
            }
            vec![Some(gx)]
        }),
    )
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![
                    Some(sum_to_shape(g, p[0].shape())),
                    Some(sum_to_shape(g, p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![
                    Some(sum_to_shape(g, p[0].shape())),
                    Some(sum_to_shape(&g.map(|v| -v), p[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let (a, b) = (p[0].value(), p[1].value());
                let ga = p[0]
                    .requires_grad()
                    .then(|| sum_to_shape(&broadcast_binary(g, b, |g, b| g * b), a.shape()));
                let gb = p[1]
                    .requires_grad()
                    .then(|| sum_to_shape(&broadcast_binary(g, a, |g, a| g * a), b.shape()));
                vec![ga, gb]
            }),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a / b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, out| {
                let (a, b) = (p[0].value(), p[1].value());
                let ga = p[0]
                    .requires_grad()
                    .then(|| sum_to_shape(&broadcast_binary(g, b, |g, b| g / b), a.shape()));
                let gb = p[1].requires_grad().then(|| {
                    // d(a/b)/db = -out / b
                    let g_out = g.zip_map(out, |g, o| g * o);
                    sum_to_shape(&broadcast_binary(&g_out, b, |go, b| -go / b), b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(
            self.value().map(|v| v * s),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(
            self.value().map(|v| v + s),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn exp(&self) -> Var {
        unary(self, self.value().map(f64::exp), |_, y| y)
    }

    pub fn ln(&self) -> Var {
        unary(self, self.value().map(f64::ln), |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        unary(self, self.value().map(f64::sqrt), |_, y| 0.5 / y)
    }

    pub fn powf(&self, p: f64) -> Var {
        unary(self, self.value().map(|v| v.powf(p)), move |x, _| {
            p * x.powf(p - 1.0)
        })
    }

    pub fn square(&self) -> Var {
        unary(self, self.value().map(|v| v * v), |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var {
        unary(self, self.value().map(f64::abs), |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, self.value().map(sigmoid), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        unary(self, self.value().map(f64::tanh), |_, y| 1.0 - y * y)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var {
        unary(self, self.value().map(softplus), |x, _| sigmoid(x))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        unary(
            self,
            self.value().map(|v| if v >= 0.0 { v } else { slope * v }),
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        unary(self, self.value().map(|v| v.clamp(lo, hi)), move |x, _| {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn sum(&self) -> Var {
        Var::from_op(
            Array::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(|g, p, _| vec![Some(Array::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = Array::zeros(&out_shape);
        {
            let x = self.value().data();
            let od = out.data_mut();
            for o in 0..outer {
                for d in 0..dim {
                    let base = (o * dim + d) * inner;
                    for i in 0..inner {
                        od[o * inner + i] += x[base + i];
                    }
                }
            }
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Array::zeros(&shape);
                let gd = g.data();
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for d in 0..dim {
                        let base = (o * dim + d) * inner;
                        gxd[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.shape().to_vec();
        Var::from_op(
            self.value().clone().reshaped(shape),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.clone().reshaped(&old))]),
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        Var::from_op(
            self.value().t(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.t())]),
        )
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let (a, b) = (self.value(), other.value());
        assert!(a.ndim() == 2 && b.ndim() == 2 && a.shape()[1] == b.shape()[0],
            "matmul shapes {:?} x {:?}", a.shape(), b.shape());
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Array::zeros(&[m, n]);
        gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), out.data_mut(), false);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].value(), p[1].value());
                let ga = p[0].requires_grad().then(|| {
                    // dA = G · Bᵀ
                    let mut ga = Array::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize), ga.data_mut(), false);
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    // dB = Aᵀ · G
                    let mut gb = Array::zeros(&[k, n]);
                    gemm(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1), gb.data_mut(), false);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Var {
        let arrays: Vec<&Array> = parts.iter().map(|p| p.value()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            Array::concat(&arrays, axis),
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, p, _| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(p)
                    .map(|(&len, parent)| {
                        let s = start;
                        start += len;
                        parent.requires_grad().then(|| g.slice_axis(axis, s, len))
                    })
                    .collect()
            }),
        )
    }

    /// `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape().to_vec();
        Var::from_op(
            self.value().slice_axis(axis, start, len),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut parts = Vec::new();
                let mut before = shape.clone();
                before[axis] = start;
                let mut after = shape.clone();
                after[axis] = shape[axis] - start - len;
                let zb = Array::zeros(&before);
                let za = Array::zeros(&after);
                if start > 0 {
                    parts.push(&zb);
                }
                parts.push(g);
                if after[axis] > 0 {
                    parts.push(&za);
                }
                vec![Some(Array::concat(&parts, axis))]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
