//! Primitive tensor operations with recorded backward passes.
//!
//! Shape violations panic with the op name and offending shapes; any
//! non-finite output panics with a [`NumericFailure`] payload. Both are hard
//! errors by contract.

use std::panic::panic_any;

use super::graph::{record, recording_enabled, tracks_grad, BackwardFn};
use super::tensor::{strides_of, NumericFailure, Tensor};

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const LAYER_NORM_EPS: f64 = 1e-8;

fn ensure_finite(op: &'static str, values: &[f64]) {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        panic_any(NumericFailure {
            op,
            detail: format!("element {} is {}", pos, values[pos]),
        });
    }
}

/// Build the output tensor and record the node when gradients flow.
fn finish<F>(op: &'static str, inputs: Vec<Tensor>, shape: Vec<usize>, values: Vec<f64>, backward: F) -> Tensor
where
    F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
{
    ensure_finite(op, &values);
    let tracked = recording_enabled() && inputs.iter().any(tracks_grad);
    let out = Tensor::from_op(shape, values, tracked);
    if tracked {
        let backward: BackwardFn = Box::new(backward);
        record(inputs, backward, &out);
    }
    out
}

// ── broadcasting ─────────────────────────────────────────────────────

/// Trailing-axis broadcast: missing leading axes count as extent 1.
/// Returns the output shape plus per-input strides (0 on broadcast axes).
fn broadcast_meta(op: &'static str, a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let rank = a.len().max(b.len());
    let mut shape = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "{op}: shapes {a:?} and {b:?} do not broadcast"
        );
        shape[i] = da.max(db);
    }
    let stride_for = |s: &[usize]| {
        let native = strides_of(s);
        let mut eff = vec![0usize; rank];
        for i in 0..rank {
            if i + s.len() >= rank {
                let j = i + s.len() - rank;
                eff[i] = if s[j] == 1 && shape[i] != 1 { 0 } else { native[j] };
            }
        }
        eff
    };
    (shape.clone(), stride_for(a), stride_for(b))
}

/// Sum `grad` (of `from` shape) down to `to` shape, undoing broadcast.
fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    let rank = from.len();
    let mut padded = vec![1usize; rank];
    padded[rank - to.len()..].copy_from_slice(to);
    let to_strides = {
        let native = strides_of(&padded);
        let mut eff = vec![0usize; rank];
        for i in 0..rank {
            eff[i] = if padded[i] == 1 && from[i] != 1 { 0 } else { native[i] };
        }
        eff
    };
    let mut idx = vec![0usize; rank];
    for &g in grad {
        let mut off = 0;
        for i in 0..rank {
            off += idx[i] * to_strides[i];
        }
        out[off] += g;
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < from[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

fn binary_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<usize>, Vec<f64>) {
    let (shape, sa, sb) = broadcast_meta(op, a.shape(), b.shape());
    let numel: usize = shape.iter().product();
    let av = a.values();
    let bv = b.values();
    // Fast path: identical shapes.
    if a.shape() == b.shape() {
        let vals = av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect();
        return (shape, vals);
    }
    let mut vals = Vec::with_capacity(numel);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..numel {
        vals.push(f(av[oa], bv[ob]));
        for i in (0..rank).rev() {
            idx[i] += 1;
            oa += sa[i];
            ob += sb[i];
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
            oa -= sa[i] * shape[i];
            ob -= sb[i] * shape[i];
        }
    }
    (shape, vals)
}

/// Value of `b` broadcast against `a`'s slot for every output element.
fn broadcast_gather(shape: &[usize], strides: &[usize], src: &[f64]) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src[off]);
        for i in (0..rank).rev() {
            idx[i] += 1;
            off += strides[i];
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
            off -= strides[i] * shape[i];
        }
    }
    out
}

// ── lane iteration for axis ops ──────────────────────────────────────

/// Decompose a shape around `axis` into (outer, n, inner) so that lane
/// elements sit at `o*n*inner + i*inner + r`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {} out of range for shape {:?}", axis, shape);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ── matmul kernels ───────────────────────────────────────────────────

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tensor {
    // ── arithmetic ───────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (shape, vals) = binary_elementwise("add", self, other, |x, y| x + y);
        let (a, b) = (self.clone(), other.clone());
        let out_shape = shape.clone();
        finish("add", vec![a.clone(), b.clone()], shape, vals, move |g| {
            vec![
                Some(reduce_to_shape(g, &out_shape, a.shape())),
                Some(reduce_to_shape(g, &out_shape, b.shape())),
            ]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (shape, vals) = binary_elementwise("sub", self, other, |x, y| x - y);
        let (a, b) = (self.clone(), other.clone());
        let out_shape = shape.clone();
        finish("sub", vec![a.clone(), b.clone()], shape, vals, move |g| {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![
                Some(reduce_to_shape(g, &out_shape, a.shape())),
                Some(reduce_to_shape(&neg, &out_shape, b.shape())),
            ]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (shape, vals) = binary_elementwise("mul", self, other, |x, y| x * y);
        let (a, b) = (self.clone(), other.clone());
        let out_shape = shape.clone();
        finish("mul", vec![a.clone(), b.clone()], shape, vals, move |g| {
            let (_, sa, sb) = broadcast_meta("mul", a.shape(), b.shape());
            let av = broadcast_gather(&out_shape, &sa, &a.values());
            let bv = broadcast_gather(&out_shape, &sb, &b.values());
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(&gi, &y)| gi * y).collect();
            let gb: Vec<f64> = g.iter().zip(&av).map(|(&gi, &x)| gi * x).collect();
            vec![
                Some(reduce_to_shape(&ga, &out_shape, a.shape())),
                Some(reduce_to_shape(&gb, &out_shape, b.shape())),
            ]
        })
    }

    /// Multiply by a plain constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let vals = self.values().iter().map(|&x| x * c).collect();
        let shape = self.shape().to_vec();
        finish("scale", vec![self.clone()], shape, vals, move |g| {
            vec![Some(g.iter().map(|&gi| gi * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let vals = self.values().iter().map(|&x| x + c).collect();
        let shape = self.shape().to_vec();
        finish("add_scalar", vec![self.clone()], shape, vals, |g| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Contraction over the last axis of `self` and the second-to-last of
    /// `rhs`. Leading (batch) axes must match exactly, or `rhs` may be rank 2
    /// and is then shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (ls, rs) = (self.shape(), rhs.shape());
        assert!(ls.len() >= 2 && rs.len() >= 2, "matmul: ranks must be >= 2, got {ls:?} x {rs:?}");
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        assert_eq!(k, k2, "matmul: inner extents differ: {ls:?} x {rs:?}");
        let batch_dims = &ls[..ls.len() - 2];
        let shared_rhs = rs.len() == 2;
        if !shared_rhs {
            assert_eq!(batch_dims, &rs[..rs.len() - 2], "matmul: batch extents differ: {ls:?} x {rs:?}");
        }
        let batch: usize = batch_dims.iter().product();
        let mut out_shape = batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let av = self.values();
        let bv = rhs.values();
        let mut vals = vec![0.0; batch * m * n];
        for t in 0..batch {
            let a = &av[t * m * k..(t + 1) * m * k];
            let b = if shared_rhs { &bv[..] } else { &bv[t * k * n..(t + 1) * k * n] };
            mm_nn(a, b, m, k, n, &mut vals[t * m * n..(t + 1) * m * n]);
        }
        drop(av);
        drop(bv);

        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        finish("matmul", vec![lhs_t.clone(), rhs_t.clone()], out_shape, vals, move |g| {
            let av = lhs_t.values();
            let bv = rhs_t.values();
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for t in 0..batch {
                let gt = &g[t * m * n..(t + 1) * m * n];
                let a = &av[t * m * k..(t + 1) * m * k];
                let b = if shared_rhs { &bv[..] } else { &bv[t * k * n..(t + 1) * k * n] };
                mm_nt(gt, b, m, n, k, &mut ga[t * m * k..(t + 1) * m * k]);
                let gbt = if shared_rhs { &mut gb[..] } else { &mut gb[t * k * n..(t + 1) * k * n] };
                mm_tn(a, gt, m, k, n, gbt);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Swap two axes (materialized).
    pub fn transpose(&self, ax0: usize, ax1: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            ax0 < shape.len() && ax1 < shape.len(),
            "transpose: axes ({ax0},{ax1}) out of range for {shape:?}"
        );
        let mut out_shape = shape.clone();
        out_shape.swap(ax0, ax1);
        let vals = permute_two_axes(&self.values(), &shape, ax0, ax1);
        let me = self.clone();
        finish("transpose", vec![me], out_shape.clone(), vals, move |g| {
            vec![Some(permute_two_axes(g, &out_shape, ax0, ax1))]
        })
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Tensor {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape: {:?} ({} values) into {:?} ({} values)",
            self.shape(),
            self.numel(),
            new_shape,
            numel
        );
        let vals = self.to_vec();
        finish("reshape", vec![self.clone()], new_shape.to_vec(), vals, |g| vec![Some(g.to_vec())])
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let (outer, n, inner) = lanes(&shape, axis);
        assert!(
            start < end && end <= n,
            "slice: range {start}..{end} invalid for axis {axis} of {shape:?}"
        );
        let width = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let src = self.values();
        let mut vals = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            vals.extend_from_slice(&src[base..base + width * inner]);
        }
        drop(src);
        let in_numel = self.numel();
        finish("slice", vec![self.clone()], out_shape, vals, move |g| {
            let mut gi = vec![0.0; in_numel];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                gi[base..base + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(gi)]
        })
    }

    /// Partition one axis into the given extents (a sequence of slices).
    pub fn split(&self, axis: usize, extents: &[usize]) -> Vec<Tensor> {
        let total: usize = extents.iter().sum();
        assert_eq!(
            total,
            self.shape()[axis],
            "split: extents {extents:?} do not cover axis {axis} of {:?}",
            self.shape()
        );
        let mut parts = Vec::with_capacity(extents.len());
        let mut at = 0;
        for &e in extents {
            parts.push(self.slice(axis, at, at + e));
            at += e;
        }
        parts
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let (outer, n, inner) = lanes(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let src = self.values();
        let mut vals = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = o * n * inner + i * inner;
                for r in 0..inner {
                    vals[o * inner + r] += src[base + r];
                }
            }
        }
        drop(src);
        finish("sum", vec![self.clone()], out_shape, vals, move |g| {
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    let base = o * n * inner + i * inner;
                    gi[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gi)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Reduce one axis by maximum; gradient routes to the first maximal
    /// index of each lane.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let (outer, n, inner) = lanes(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let src = self.values();
        let mut vals = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = o * n * inner + i * inner;
                for r in 0..inner {
                    let v = src[base + r];
                    let slot = o * inner + r;
                    if v > vals[slot] {
                        vals[slot] = v;
                        argmax[slot] = base + r;
                    }
                }
            }
        }
        drop(src);
        let in_numel = self.numel();
        finish("max", vec![self.clone()], out_shape, vals, move |g| {
            let mut gi = vec![0.0; in_numel];
            for (slot, &src_idx) in argmax.iter().enumerate() {
                gi[src_idx] += g[slot];
            }
            vec![Some(gi)]
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        let n = self.numel();
        finish("sum_all", vec![self.clone()], vec![], vec![total], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    // ── elementwise nonlinearities ───────────────────────────────────

    pub fn exp(&self) -> Tensor {
        let vals: Vec<f64> = self.values().iter().map(|&x| x.exp()).collect();
        let shape = self.shape().to_vec();
        let saved = vals.clone();
        finish("exp", vec![self.clone()], shape, vals, move |g| {
            vec![Some(g.iter().zip(&saved).map(|(&gi, &y)| gi * y).collect())]
        })
    }

    pub fn ln(&self) -> Tensor {
        let vals: Vec<f64> = self.values().iter().map(|&x| x.ln()).collect();
        let shape = self.shape().to_vec();
        let me = self.clone();
        finish("log", vec![me.clone()], shape, vals, move |g| {
            let x = me.values();
            vec![Some(g.iter().zip(x.iter()).map(|(&gi, &xi)| gi / xi).collect())]
        })
    }

    pub fn sqrt(&self) -> Tensor {
        let vals: Vec<f64> = self.values().iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape().to_vec();
        let saved = vals.clone();
        finish("sqrt", vec![self.clone()], shape, vals, move |g| {
            vec![Some(g.iter().zip(&saved).map(|(&gi, &y)| gi / (2.0 * y)).collect())]
        })
    }

    pub fn relu(&self) -> Tensor {
        let vals: Vec<f64> = self.values().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape().to_vec();
        let me = self.clone();
        finish("relu", vec![me.clone()], shape, vals, move |g| {
            let x = me.values();
            vec![Some(
                g.iter().zip(x.iter()).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect(),
            )]
        })
    }

    /// Tanh-form Gaussian error linear unit.
    pub fn gelu(&self) -> Tensor {
        let f = |x: f64| {
            let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };
        let vals: Vec<f64> = self.values().iter().map(|&x| f(x)).collect();
        let shape = self.shape().to_vec();
        let me = self.clone();
        finish("gelu", vec![me.clone()], shape, vals, move |g| {
            let x = me.values();
            let grads = g
                .iter()
                .zip(x.iter())
                .map(|(&gi, &xi)| {
                    let u = SQRT_2_OVER_PI * (xi + GELU_COEF * xi * xi * xi);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xi * xi);
                    gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(grads)]
        })
    }

    // ── normalizations ───────────────────────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let (outer, n, inner) = lanes(&shape, axis);
        let src = self.values();
        let mut vals = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + r;
                let mut m = f64::NEG_INFINITY;
                for i in 0..n {
                    m = m.max(src[at(i)]);
                }
                let mut z = 0.0;
                for i in 0..n {
                    let e = (src[at(i)] - m).exp();
                    vals[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    vals[at(i)] /= z;
                }
            }
        }
        drop(src);
        let saved = vals.clone();
        finish("softmax", vec![self.clone()], shape, vals, move |g| {
            let mut gi = vec![0.0; g.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| o * n * inner + i * inner + r;
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += g[at(i)] * saved[at(i)];
                    }
                    for i in 0..n {
                        gi[at(i)] = saved[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    /// Normalize each lane along `axis` to zero mean and unit variance
    /// (population, eps 1e-8). Affine scale/shift live outside this op.
    pub fn layer_norm(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let (outer, n, inner) = lanes(&shape, axis);
        let src = self.values();
        let mut vals = vec![0.0; src.len()];
        let mut inv_stds = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + r;
                let mut mean = 0.0;
                for i in 0..n {
                    mean += src[at(i)];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for i in 0..n {
                    let d = src[at(i)] - mean;
                    var += d * d;
                }
                var /= n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_stds[o * inner + r] = inv;
                for i in 0..n {
                    vals[at(i)] = (src[at(i)] - mean) * inv;
                }
            }
        }
        drop(src);
        let saved = vals.clone();
        finish("layer_norm", vec![self.clone()], shape, vals, move |g| {
            let mut gi = vec![0.0; g.len()];
            let nf = n as f64;
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| o * n * inner + i * inner + r;
                    let inv = inv_stds[o * inner + r];
                    let mut g_mean = 0.0;
                    let mut gy_mean = 0.0;
                    for i in 0..n {
                        g_mean += g[at(i)];
                        gy_mean += g[at(i)] * saved[at(i)];
                    }
                    g_mean /= nf;
                    gy_mean /= nf;
                    for i in 0..n {
                        gi[at(i)] = inv * (g[at(i)] - g_mean - saved[at(i)] * gy_mean);
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    // ── convolutions and pooling ─────────────────────────────────────

    /// 2-D convolution, stride 1, same padding. Input `B×H×W×Cin`,
    /// kernel `KH×KW×Cin×Cout` with odd spatial extents.
    pub fn conv2d(&self, kernel: &Tensor) -> Tensor {
        let is = self.shape().to_vec();
        let ks = kernel.shape().to_vec();
        assert!(is.len() == 4 && ks.len() == 4, "conv2d: need B×H×W×Cin and KH×KW×Cin×Cout, got {is:?}, {ks:?}");
        let (b, h, w, cin) = (is[0], is[1], is[2], is[3]);
        let (kh, kw, kci, cout) = (ks[0], ks[1], ks[2], ks[3]);
        assert_eq!(cin, kci, "conv2d: channel mismatch between {is:?} and {ks:?}");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got {ks:?}");
        let (ph, pw) = (kh / 2, kw / 2);

        let iv = self.values();
        let kv = kernel.values();
        let mut vals = vec![0.0; b * h * w * cout];
        for bi in 0..b {
            for oy in 0..h {
                for ox in 0..w {
                    let out_base = ((bi * h + oy) * w + ox) * cout;
                    for ky in 0..kh {
                        let iy = (oy + ky).wrapping_sub(ph);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx).wrapping_sub(pw);
                            if ix >= w {
                                continue;
                            }
                            let in_base = ((bi * h + iy) * w + ix) * cin;
                            let k_base = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let x = iv[in_base + ci];
                                if x == 0.0 {
                                    continue;
                                }
                                let krow = &kv[k_base + ci * cout..k_base + (ci + 1) * cout];
                                let orow = &mut vals[out_base..out_base + cout];
                                for (o, &kc) in orow.iter_mut().zip(krow) {
                                    *o += x * kc;
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(iv);
        drop(kv);

        let (input, kern) = (self.clone(), kernel.clone());
        finish("conv2d", vec![input.clone(), kern.clone()], vec![b, h, w, cout], vals, move |g| {
            let iv = input.values();
            let kv = kern.values();
            let mut gi = vec![0.0; iv.len()];
            let mut gk = vec![0.0; kv.len()];
            for bi in 0..b {
                for oy in 0..h {
                    for ox in 0..w {
                        let out_base = ((bi * h + oy) * w + ox) * cout;
                        let grow = &g[out_base..out_base + cout];
                        for ky in 0..kh {
                            let iy = (oy + ky).wrapping_sub(ph);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx).wrapping_sub(pw);
                                if ix >= w {
                                    continue;
                                }
                                let in_base = ((bi * h + iy) * w + ix) * cin;
                                let k_base = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let x = iv[in_base + ci];
                                    let krow = &kv[k_base + ci * cout..k_base + (ci + 1) * cout];
                                    let gkrow = &mut gk[k_base + ci * cout..k_base + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for ((&gv, &kc), gkc) in grow.iter().zip(krow).zip(gkrow) {
                                        acc += gv * kc;
                                        *gkc += gv * x;
                                    }
                                    gi[in_base + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gi), Some(gk)]
        })
    }

    /// 3-D convolution, stride 1, same padding in all three axes. Input
    /// `B×H×W×D×Cin`, kernel `KH×KW×KD×Cin×Cout` with odd extents.
    pub fn conv3d(&self, kernel: &Tensor) -> Tensor {
        let is = self.shape().to_vec();
        let ks = kernel.shape().to_vec();
        assert!(
            is.len() == 5 && ks.len() == 5,
            "conv3d: need B×H×W×D×Cin and KH×KW×KD×Cin×Cout, got {is:?}, {ks:?}"
        );
        let (b, h, w, d, cin) = (is[0], is[1], is[2], is[3], is[4]);
        let (kh, kw, kd, kci, cout) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
        assert_eq!(cin, kci, "conv3d: channel mismatch between {is:?} and {ks:?}");
        assert!(kh % 2 == 1 && kw % 2 == 1 && kd % 2 == 1, "conv3d: kernel extents must be odd, got {ks:?}");
        let (ph, pw, pd) = (kh / 2, kw / 2, kd / 2);

        let iv = self.values();
        let kv = kernel.values();
        let mut vals = vec![0.0; b * h * w * d * cout];
        for bi in 0..b {
            for oy in 0..h {
                for ox in 0..w {
                    for ky in 0..kh {
                        let iy = (oy + ky).wrapping_sub(ph);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx).wrapping_sub(pw);
                            if ix >= w {
                                continue;
                            }
                            for oz in 0..d {
                                let out_base = (((bi * h + oy) * w + ox) * d + oz) * cout;
                                for kz in 0..kd {
                                    let iz = (oz + kz).wrapping_sub(pd);
                                    if iz >= d {
                                        continue;
                                    }
                                    let in_base = (((bi * h + iy) * w + ix) * d + iz) * cin;
                                    let k_base = ((ky * kw + kx) * kd + kz) * cin * cout;
                                    for ci in 0..cin {
                                        let x = iv[in_base + ci];
                                        if x == 0.0 {
                                            continue;
                                        }
                                        let krow = &kv[k_base + ci * cout..k_base + (ci + 1) * cout];
                                        let orow = &mut vals[out_base..out_base + cout];
                                        for (o, &kc) in orow.iter_mut().zip(krow) {
                                            *o += x * kc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(iv);
        drop(kv);

        let (input, kern) = (self.clone(), kernel.clone());
        finish("conv3d", vec![input.clone(), kern.clone()], vec![b, h, w, d, cout], vals, move |g| {
            let iv = input.values();
            let kv = kern.values();
            let mut gi = vec![0.0; iv.len()];
            let mut gk = vec![0.0; kv.len()];
            for bi in 0..b {
                for oy in 0..h {
                    for ox in 0..w {
                        for ky in 0..kh {
                            let iy = (oy + ky).wrapping_sub(ph);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx).wrapping_sub(pw);
                                if ix >= w {
                                    continue;
                                }
                                for oz in 0..d {
                                    let out_base = (((bi * h + oy) * w + ox) * d + oz) * cout;
                                    let grow = &g[out_base..out_base + cout];
                                    for kz in 0..kd {
                                        let iz = (oz + kz).wrapping_sub(pd);
                                        if iz >= d {
                                            continue;
                                        }
                                        let in_base = (((bi * h + iy) * w + ix) * d + iz) * cin;
                                        let k_base = ((ky * kw + kx) * kd + kz) * cin * cout;
                                        for ci in 0..cin {
                                            let x = iv[in_base + ci];
                                            let krow = &kv[k_base + ci * cout..k_base + (ci + 1) * cout];
                                            let gkrow = &mut gk[k_base + ci * cout..k_base + (ci + 1) * cout];
                                            let mut acc = 0.0;
                                            for ((&gv, &kc), gkc) in grow.iter().zip(krow).zip(gkrow) {
                                                acc += gv * kc;
                                                *gkc += gv * x;
                                            }
                                            gi[in_base + ci] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gi), Some(gk)]
        })
    }

    /// Spatial max pooling over `B×H×W×C`, odd kernel, stride 1, same
    /// padding (window clipped at borders). Gradient routes to the first
    /// maximal tap in scan order.
    pub fn maxpool2d(&self, kernel: usize) -> Tensor {
        let is = self.shape().to_vec();
        assert_eq!(is.len(), 4, "maxpool2d: need B×H×W×C, got {is:?}");
        assert!(kernel % 2 == 1, "maxpool2d: kernel must be odd, got {kernel}");
        let (b, h, w, c) = (is[0], is[1], is[2], is[3]);
        let p = kernel / 2;
        let iv = self.values();
        let mut vals = vec![f64::NEG_INFINITY; iv.len()];
        let mut argmax = vec![0usize; iv.len()];
        for bi in 0..b {
            for oy in 0..h {
                for ox in 0..w {
                    let out_base = ((bi * h + oy) * w + ox) * c;
                    for ky in 0..kernel {
                        let iy = (oy + ky).wrapping_sub(p);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox + kx).wrapping_sub(p);
                            if ix >= w {
                                continue;
                            }
                            let in_base = ((bi * h + iy) * w + ix) * c;
                            for ci in 0..c {
                                let v = iv[in_base + ci];
                                if v > vals[out_base + ci] {
                                    vals[out_base + ci] = v;
                                    argmax[out_base + ci] = in_base + ci;
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(iv);
        let in_numel = self.numel();
        finish("maxpool2d", vec![self.clone()], is, vals, move |g| {
            let mut gi = vec![0.0; in_numel];
            for (slot, &src_idx) in argmax.iter().enumerate() {
                gi[src_idx] += g[slot];
            }
            vec![Some(gi)]
        })
    }
}

/// Concatenate along one axis; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty(), "concat: no inputs");
    let first = parts[0].shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), first.len(), "concat: rank mismatch: {:?} vs {:?}", s, first);
        for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
            if i != axis {
                assert_eq!(a, b, "concat: extent mismatch off axis {axis}: {s:?} vs {first:?}");
            }
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let (outer, _, inner) = lanes(&out_shape, axis);
    let mut vals = vec![0.0; outer * axis_total * inner];
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let mut at = 0;
    for (p, &width) in parts.iter().zip(&widths) {
        let src = p.values();
        for o in 0..outer {
            let dst = (o * axis_total + at) * inner;
            let s = o * width * inner;
            vals[dst..dst + width * inner].copy_from_slice(&src[s..s + width * inner]);
        }
        at += width;
    }
    let inputs: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    finish("concat", inputs, out_shape, vals, move |g| {
        let mut grads = Vec::with_capacity(widths.len());
        let mut at = 0;
        for &width in &widths {
            let mut gp = vec![0.0; outer * width * inner];
            for o in 0..outer {
                let src = (o * axis_total + at) * inner;
                gp[o * width * inner..(o + 1) * width * inner]
                    .copy_from_slice(&g[src..src + width * inner]);
            }
            grads.push(Some(gp));
            at += width;
        }
        grads
    })
}

fn permute_two_axes(src: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return src.to_vec();
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut map = vec![0usize; shape.len()];
    for (i, m) in map.iter_mut().enumerate() {
        *m = if i == ax0 { ax1 } else if i == ax1 { ax0 } else { i };
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for &v in src.iter() {
        let mut off = 0;
        for i in 0..rank {
            off += idx[i] * out_strides[map[i]];
        }
        out[off] = v;
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    let _ = in_strides;
    out
}

/// Primitive identifiers for the generic dispatcher. The enum mirrors the
/// engine's contract surface; model code calls the tensor methods directly.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose { ax0: usize, ax1: usize },
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    /// Splits the axis into `extents` and yields part `index`.
    Split { axis: usize, extents: Vec<usize>, index: usize },
    Slice { axis: usize, start: usize, end: usize },
    Sum { axis: usize },
    Mean { axis: usize },
    Max { axis: usize },
    Exp,
    Log,
    Sqrt,
    Relu,
    Gelu,
    Softmax { axis: usize },
    LayerNorm { axis: usize },
    Conv2d,
    Conv3d,
    MaxPool2d { kernel: usize },
}

/// Apply one primitive to a list of inputs. Panics on arity or shape
/// violations (naming the op), and on non-finite outputs.
pub fn apply_primitive(op: &Primitive, inputs: &[&Tensor]) -> Tensor {
    let unary = |name: &str| {
        assert_eq!(inputs.len(), 1, "{name}: expected 1 input, got {}", inputs.len());
        inputs[0]
    };
    let binary = |name: &str| {
        assert_eq!(inputs.len(), 2, "{name}: expected 2 inputs, got {}", inputs.len());
        (inputs[0], inputs[1])
    };
    match op {
        Primitive::Add => { let (a, b) = binary("add"); a.add(b) }
        Primitive::Sub => { let (a, b) = binary("sub"); a.sub(b) }
        Primitive::Mul => { let (a, b) = binary("mul"); a.mul(b) }
        Primitive::MatMul => { let (a, b) = binary("matmul"); a.matmul(b) }
        Primitive::Transpose { ax0, ax1 } => unary("transpose").transpose(*ax0, *ax1),
        Primitive::Reshape { shape } => unary("reshape").reshape(shape),
        Primitive::Concat { axis } => concat(inputs, *axis),
        Primitive::Split { axis, extents, index } => {
            let mut parts = unary("split").split(*axis, extents);
            parts.swap_remove(*index)
        }
        Primitive::Slice { axis, start, end } => unary("slice").slice(*axis, *start, *end),
        Primitive::Sum { axis } => unary("sum").sum_axis(*axis),
        Primitive::Mean { axis } => unary("mean").mean_axis(*axis),
        Primitive::Max { axis } => unary("max").max_axis(*axis),
        Primitive::Exp => unary("exp").exp(),
        Primitive::Log => unary("log").ln(),
        Primitive::Sqrt => unary("sqrt").sqrt(),
        Primitive::Relu => unary("relu").relu(),
        Primitive::Gelu => unary("gelu").gelu(),
        Primitive::Softmax { axis } => unary("softmax").softmax(*axis),
        Primitive::LayerNorm { axis } => unary("layer_norm").layer_norm(*axis),
        Primitive::Conv2d => { let (a, b) = binary("conv2d"); a.conv2d(b) }
        Primitive::Conv3d => { let (a, b) = binary("conv3d"); a.conv3d(b) }
        Primitive::MaxPool2d { kernel } => unary("maxpool2d").maxpool2d(*kernel),
    }
}
