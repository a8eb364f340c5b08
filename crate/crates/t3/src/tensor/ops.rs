//! Elementwise, reduction, shape, and attention-adjacent tensor ops.
//!
//! Broadcasting is right-aligned with unit-dimension stretching, which covers
//! bias adds, positional embeddings, keepdim-reduced statistics, and channel
//! affine terms. Nothing wider is supported on purpose.

use super::{Elem, Tensor};

/// Right-aligned broadcast shape of two operand shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} are not broadcast-compatible"
        );
        out[i] = da.max(db);
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `shape` equals `out_shape` except that the trailing `k` axes are all 1
/// (the keepdim-statistic pattern). Returns the collapsed tail length.
fn trailing_ones_tail(shape: &[usize], out_shape: &[usize]) -> Option<usize> {
    if shape.len() != out_shape.len() {
        return None;
    }
    let mut split = shape.len();
    while split > 0 && shape[split - 1] == 1 && out_shape[split - 1] != 1 {
        split -= 1;
    }
    if shape[..split] == out_shape[..split] && shape[split..].iter().all(|&d| d == 1) {
        Some(out_shape[split..].iter().product())
    } else {
        None
    }
}

/// Expand `data` of `shape` to `out_shape` (right-aligned broadcast).
fn expand_to<E: Elem>(data: &[E], shape: &[usize], out_shape: &[usize]) -> Vec<E> {
    if shape == out_shape {
        return data.to_vec();
    }
    let out_n: usize = out_shape.iter().product();
    // Fast path: operand is a contiguous suffix of the output shape.
    if shape.len() <= out_shape.len() && out_shape[out_shape.len() - shape.len()..] == *shape {
        let n = data.len();
        if n == 1 {
            return vec![data[0]; out_n];
        }
        let mut out = Vec::with_capacity(out_n);
        for _ in 0..out_n / n {
            out.extend_from_slice(data);
        }
        return out;
    }
    // Fast path: keepdim statistics ([B,T,1] under [B,T,D]).
    if let Some(tail) = trailing_ones_tail(shape, out_shape) {
        let mut out = Vec::with_capacity(out_n);
        for &v in data {
            out.extend(std::iter::repeat(v).take(tail));
        }
        return out;
    }
    // General path via padded strides.
    let nd = out_shape.len();
    let mut padded = vec![1usize; nd];
    padded[nd - shape.len()..].copy_from_slice(shape);
    let in_strides = strides(&padded);
    let mut out = Vec::with_capacity(out_n);
    let mut coords = vec![0usize; nd];
    for _ in 0..out_n {
        let mut idx = 0;
        for d in 0..nd {
            if padded[d] != 1 {
                idx += coords[d] * in_strides[d];
            }
        }
        out.push(data[idx]);
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad` (of `grad_shape`) back down to `target_shape`.
fn reduce_to_shape<E: Elem>(grad: &[E], grad_shape: &[usize], target_shape: &[usize]) -> Vec<E> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_n: usize = target_shape.iter().product();
    // Fast path: target is a contiguous suffix.
    if target_shape.len() <= grad_shape.len()
        && grad_shape[grad_shape.len() - target_shape.len()..] == *target_shape
    {
        let mut out = vec![E::zero(); target_n];
        for chunk in grad.chunks(target_n) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o = *o + *g;
            }
        }
        return out;
    }
    // Fast path: keepdim statistics (sum the collapsed tail).
    if let Some(tail) = trailing_ones_tail(target_shape, grad_shape) {
        let mut out = Vec::with_capacity(target_n);
        for chunk in grad.chunks(tail) {
            out.push(chunk.iter().fold(E::zero(), |a, &v| a + v));
        }
        return out;
    }
    let nd = grad_shape.len();
    let mut padded = vec![1usize; nd];
    padded[nd - target_shape.len()..].copy_from_slice(target_shape);
    let t_strides = strides(&padded);
    let mut out = vec![E::zero(); target_n];
    let mut coords = vec![0usize; nd];
    for g in grad {
        let mut idx = 0;
        for d in 0..nd {
            if padded[d] != 1 {
                idx += coords[d] * t_strides[d];
            }
        }
        out[idx] = out[idx] + *g;
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

impl<E: Elem> Tensor<E> {
    // ── binary elementwise ──────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(&ls, &rs);
        let data = if ls == rs {
            self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x + y).collect()))
        } else {
            let a = self.with_data(|a| expand_to(a, &ls, &out_shape));
            let b = rhs.with_data(|b| expand_to(b, &rs, &out_shape));
            a.iter().zip(&b).map(|(&x, &y)| x + y).collect()
        };
        let (gs, ls2, rs2) = (out_shape.clone(), ls, rs);
        Tensor::make_output(
            "add",
            &[self, rhs],
            data,
            out_shape,
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(g, &gs, &ls2)),
                    Some(reduce_to_shape(g, &gs, &rs2)),
                ]
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(&ls, &rs);
        let data = if ls == rs {
            self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x - y).collect()))
        } else {
            let a = self.with_data(|a| expand_to(a, &ls, &out_shape));
            let b = rhs.with_data(|b| expand_to(b, &rs, &out_shape));
            a.iter().zip(&b).map(|(&x, &y)| x - y).collect()
        };
        let (gs, ls2, rs2) = (out_shape.clone(), ls, rs);
        Tensor::make_output(
            "sub",
            &[self, rhs],
            data,
            out_shape,
            Box::new(move |g| {
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                vec![
                    Some(reduce_to_shape(g, &gs, &ls2)),
                    Some(reduce_to_shape(&neg, &gs, &rs2)),
                ]
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(&ls, &rs);
        let a_exp = self.with_data(|a| expand_to(a, &ls, &out_shape));
        let b_exp = rhs.with_data(|b| expand_to(b, &rs, &out_shape));
        let data: Vec<E> = a_exp.iter().zip(&b_exp).map(|(&x, &y)| x * y).collect();
        let (gs, ls2, rs2) = (out_shape.clone(), ls, rs);
        Tensor::make_output(
            "mul",
            &[self, rhs],
            data,
            out_shape,
            Box::new(move |g| {
                let da: Vec<E> = g.iter().zip(&b_exp).map(|(&gv, &b)| gv * b).collect();
                let db: Vec<E> = g.iter().zip(&a_exp).map(|(&gv, &a)| gv * a).collect();
                vec![
                    Some(reduce_to_shape(&da, &gs, &ls2)),
                    Some(reduce_to_shape(&db, &gs, &rs2)),
                ]
            }),
        )
    }

    /// Division with the denominator guarded by a fixed epsilon.
    pub fn div(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let eps = E::eps_guard();
        let (ls, rs) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(&ls, &rs);
        let a_exp = self.with_data(|a| expand_to(a, &ls, &out_shape));
        let b_exp: Vec<E> = rhs
            .with_data(|b| expand_to(b, &rs, &out_shape))
            .iter()
            .map(|&v| v + eps)
            .collect();
        let data: Vec<E> = a_exp.iter().zip(&b_exp).map(|(&x, &y)| x / y).collect();
        let (gs, ls2, rs2) = (out_shape.clone(), ls, rs);
        Tensor::make_output(
            "div",
            &[self, rhs],
            data,
            out_shape,
            Box::new(move |g| {
                let da: Vec<E> = g.iter().zip(&b_exp).map(|(&gv, &b)| gv / b).collect();
                let db: Vec<E> = g
                    .iter()
                    .zip(a_exp.iter().zip(&b_exp))
                    .map(|(&gv, (&a, &b))| -gv * a / (b * b))
                    .collect();
                vec![
                    Some(reduce_to_shape(&da, &gs, &ls2)),
                    Some(reduce_to_shape(&db, &gs, &rs2)),
                ]
            }),
        )
    }

    // ── unary elementwise ───────────────────────────────────────────────

    fn unary(
        &self,
        name: &'static str,
        fwd: impl Fn(E) -> E,
        // dy/dx as a function of (x, y)
        dydx: impl Fn(E, E) -> E + 'static,
    ) -> Tensor<E> {
        let x = self.to_vec();
        let y: Vec<E> = x.iter().map(|&v| fwd(v)).collect();
        let shape = self.shape();
        let y_saved = y.clone();
        Tensor::make_output(
            name,
            &[self],
            y,
            shape,
            Box::new(move |g| {
                let dx: Vec<E> = g
                    .iter()
                    .zip(x.iter().zip(&y_saved))
                    .map(|(&gv, (&xv, &yv))| gv * dydx(xv, yv))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn neg_t(&self) -> Tensor<E> {
        self.unary("neg", |x| -x, |_, _| -E::one())
    }

    pub fn exp(&self) -> Tensor<E> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    /// Natural log with the argument guarded by a fixed epsilon.
    pub fn log(&self) -> Tensor<E> {
        let eps = E::eps_guard();
        self.unary("log", move |x| (x + eps).ln(), move |x, _| E::one() / (x + eps))
    }

    /// Square root with the argument guarded by a fixed epsilon.
    pub fn sqrt_t(&self) -> Tensor<E> {
        let eps = E::eps_guard();
        self.unary(
            "sqrt",
            move |x| (x + eps).sqrt(),
            move |_, y| E::one() / (E::from_f64(2.0) * y),
        )
    }

    pub fn powi_t(&self, n: i32) -> Tensor<E> {
        self.unary(
            "powi",
            move |x| x.powi(n),
            move |x, _| E::from_f64(n as f64) * x.powi(n - 1),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let three = E::from_f64(3.0);
        self.unary(
            "gelu",
            move |x| {
                let inner = c * (x + k * x.powi(3));
                half * x * (E::one() + inner.tanh_approx())
            },
            move |x, _| {
                let inner = c * (x + k * x.powi(3));
                let t = inner.tanh_approx();
                let sech2 = E::one() - t * t;
                let d_inner = c * (E::one() + three * k * x * x);
                half * (E::one() + t) + half * x * sech2 * d_inner
            },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        self.unary("scale", move |x| x * ce, move |_, _| ce)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        self.unary("add_scalar", move |x| x + ce, |_, _| E::one())
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<E> {
        let s = self.with_data(|d| d.iter().fold(E::zero(), |acc, &v| acc + v));
        let n = self.numel();
        Tensor::make_output(
            "sum_all",
            &[self],
            vec![s],
            vec![1],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.numel();
        let inv = E::from_f64(1.0 / n as f64);
        let s = self.with_data(|d| d.iter().fold(E::zero(), |acc, &v| acc + v)) * inv;
        Tensor::make_output(
            "mean_all",
            &[self],
            vec![s],
            vec![1],
            Box::new(move |g| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    /// Sum over the trailing `k` axes. With `keepdim` the reduced axes stay
    /// as size-1 dimensions.
    pub fn sum_trailing(&self, k: usize, keepdim: bool) -> Tensor<E> {
        let shape = self.shape();
        assert!(k >= 1 && k < shape.len(), "sum_trailing: invalid axis count {k} for {shape:?}");
        let tail: usize = shape[shape.len() - k..].iter().product();
        let lead: usize = shape[..shape.len() - k].iter().product();
        let data = self.with_data(|d| {
            let mut out = Vec::with_capacity(lead);
            for i in 0..lead {
                let row = &d[i * tail..(i + 1) * tail];
                out.push(row.iter().fold(E::zero(), |acc, &v| acc + v));
            }
            out
        });
        let mut out_shape: Vec<usize> = shape[..shape.len() - k].to_vec();
        if keepdim {
            out_shape.extend(std::iter::repeat(1).take(k));
        }
        let n = self.numel();
        Tensor::make_output(
            "sum_trailing",
            &[self],
            data,
            out_shape,
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(n);
                for i in 0..lead {
                    dx.extend(std::iter::repeat(g[i]).take(tail));
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over the trailing `k` axes.
    pub fn mean_trailing(&self, k: usize, keepdim: bool) -> Tensor<E> {
        let shape = self.shape();
        let tail: usize = shape[shape.len() - k..].iter().product();
        let inv = 1.0 / tail as f64;
        self.sum_trailing(k, keepdim).scale(inv)
    }

    /// Population variance over the trailing `k` axes (keepdim).
    pub fn var_trailing(&self, k: usize) -> Tensor<E> {
        let m = self.mean_trailing(k, true);
        let d = self.sub(&m);
        d.mul(&d).mean_trailing(k, true)
    }

    // ── softmax / losses ────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor<E> {
        let shape = self.shape();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        let lanes = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut mx = E::neg_infinity();
                for l in 0..lanes {
                    mx = mx.max(out[base + l * inner]);
                }
                let mut denom = E::zero();
                for l in 0..lanes {
                    let e = (out[base + l * inner] - mx).exp_approx();
                    out[base + l * inner] = e;
                    denom = denom + e;
                }
                let inv = E::one() / denom;
                for l in 0..lanes {
                    out[base + l * inner] = out[base + l * inner] * inv;
                }
            }
        }
        let saved = out.clone();
        Tensor::make_output(
            "softmax",
            &[self],
            out,
            shape,
            Box::new(move |g| {
                // ds_i = s_i * (g_i - sum_j g_j s_j) per lane
                let mut dx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lanes * inner + i;
                        let mut dot = E::zero();
                        for l in 0..lanes {
                            let idx = base + l * inner;
                            dot = dot + g[idx] * saved[idx];
                        }
                        for l in 0..lanes {
                            let idx = base + l * inner;
                            dx[idx] = saved[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean cross-entropy between logits `[B, C]` and class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Tensor<E> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "cross_entropy expects [B, C] logits, got {shape:?}");
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(targets.len(), b, "cross_entropy: {b} rows but {} targets", targets.len());
        assert!(targets.iter().all(|&t| t < c), "cross_entropy: target class out of range");
        let logits = self.to_vec();
        let mut total = E::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &logits[i * c..(i + 1) * c];
            let mx = row.iter().fold(E::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().fold(E::zero(), |a, &v| a + (v - mx).exp()).ln() + mx;
            total = total + (lse - row[t]);
        }
        let inv_b = E::from_f64(1.0 / b as f64);
        let loss = total * inv_b;
        let targets = targets.to_vec();
        Tensor::make_output(
            "cross_entropy",
            &[self],
            vec![loss],
            vec![1],
            Box::new(move |g| {
                let mut dx = vec![E::zero(); b * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &logits[i * c..(i + 1) * c];
                    let mx = row.iter().fold(E::neg_infinity(), |a, &v| a.max(v));
                    let denom = row.iter().fold(E::zero(), |a, &v| a + (v - mx).exp());
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / denom;
                        let onehot = if j == t { E::one() } else { E::zero() };
                        dx[i * c + j] = g[0] * (p - onehot) * inv_b;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Tensor<E> {
        let n: usize = new_shape.iter().product();
        assert_eq!(
            n,
            self.numel(),
            "reshape: cannot view {:?} as {:?}",
            self.shape(),
            new_shape
        );
        let data = self.to_vec();
        Tensor::make_output(
            "reshape",
            &[self],
            data,
            new_shape.to_vec(),
            Box::new(move |g| vec![Some(g.to_vec())]),
        )
    }

    /// Reorder axes; `perm` is a permutation of `0..ndim`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<E> {
        let shape = self.shape();
        let nd = shape.len();
        assert_eq!(perm.len(), nd, "permute: {perm:?} does not match rank of {shape:?}");
        let mut seen = vec![false; nd];
        for &p in perm {
            assert!(p < nd && !seen[p], "permute: {perm:?} is not a permutation");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let data = self.with_data(|d| permute_copy(d, &out_shape, &perm_strides, n));
        // Backward permutes the gradient with the inverse permutation.
        let mut inv = vec![0usize; nd];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let out_strides_full = strides(&out_shape);
        let inv_strides: Vec<usize> = inv.iter().map(|&p| out_strides_full[p]).collect();
        let in_shape = shape.clone();
        Tensor::make_output(
            "permute",
            &[self],
            data,
            out_shape,
            Box::new(move |g| vec![Some(permute_copy(g, &in_shape, &inv_strides, n))]),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Tensor<E> {
        let nd = self.shape().len();
        assert!(nd >= 2, "transpose_last requires rank >= 2");
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        let shape = self.shape();
        assert!(axis < shape.len(), "narrow: axis {axis} out of range for {shape:?}");
        assert!(
            start + len <= shape[axis],
            "narrow: range {start}..{} exceeds axis size {}",
            start + len,
            shape[axis]
        );
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let axis_n = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = self.with_data(|d| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * axis_n * inner + start * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
            out
        });
        let full_n = self.numel();
        Tensor::make_output(
            "narrow",
            &[self],
            data,
            out_shape,
            Box::new(move |g| {
                let mut dx = vec![E::zero(); full_n];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * axis_n * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        assert!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch {s:?} vs {first:?}");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: shapes {s:?} and {first:?} differ outside axis {axis}"
                );
            }
            axis_total += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        let part_data: Vec<Vec<E>> = parts.iter().map(|p| p.to_vec()).collect();
        let part_axis: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        for o in 0..outer {
            for (pd, &pa) in part_data.iter().zip(&part_axis) {
                let base = o * pa * inner;
                data.extend_from_slice(&pd[base..base + pa * inner]);
            }
        }
        let part_axis2 = part_axis.clone();
        Tensor::make_output(
            "concat",
            parts,
            data,
            out_shape,
            Box::new(move |g| {
                let mut grads: Vec<Vec<E>> = part_axis2
                    .iter()
                    .map(|&pa| Vec::with_capacity(outer * pa * inner))
                    .collect();
                let mut cursor = 0;
                for _o in 0..outer {
                    for (gi, &pa) in grads.iter_mut().zip(&part_axis2) {
                        gi.extend_from_slice(&g[cursor..cursor + pa * inner]);
                        cursor += pa * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Prepend a batch axis of size `batch` by repetition.
    pub fn expand_batch(&self, batch: usize) -> Tensor<E> {
        let shape = self.shape();
        let n = self.numel();
        let mut out_shape = Vec::with_capacity(shape.len() + 1);
        out_shape.push(batch);
        out_shape.extend_from_slice(&shape);
        let data = self.with_data(|d| {
            let mut out = Vec::with_capacity(batch * n);
            for _ in 0..batch {
                out.extend_from_slice(d);
            }
            out
        });
        Tensor::make_output(
            "expand_batch",
            &[self],
            data,
            out_shape,
            Box::new(move |g| {
                let mut dx = vec![E::zero(); n];
                for b in 0..batch {
                    for i in 0..n {
                        dx[i] = dx[i] + g[b * n + i];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Select rows per sample: `[B, T, D]` gathered with `idx[b]` lists of
    /// equal length K gives `[B, K, D]`.
    pub fn gather_rows(&self, idx: &[Vec<usize>]) -> Tensor<E> {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "gather_rows expects [B, T, D], got {shape:?}");
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(idx.len(), b, "gather_rows: {} index lists for batch {b}", idx.len());
        let k = idx[0].len();
        assert!(idx.iter().all(|v| v.len() == k), "gather_rows: ragged index lists");
        assert!(
            idx.iter().flatten().all(|&i| i < t),
            "gather_rows: index beyond {t} rows"
        );
        let data = self.with_data(|src| {
            let mut out = Vec::with_capacity(b * k * d);
            for (bi, rows) in idx.iter().enumerate() {
                for &r in rows {
                    let base = (bi * t + r) * d;
                    out.extend_from_slice(&src[base..base + d]);
                }
            }
            out
        });
        let idx_owned: Vec<Vec<usize>> = idx.to_vec();
        Tensor::make_output(
            "gather_rows",
            &[self],
            data,
            vec![b, k, d],
            Box::new(move |g| {
                let mut dx = vec![E::zero(); b * t * d];
                for (bi, rows) in idx_owned.iter().enumerate() {
                    for (j, &r) in rows.iter().enumerate() {
                        let src = (bi * k + j) * d;
                        let dst = (bi * t + r) * d;
                        for off in 0..d {
                            dx[dst + off] = dx[dst + off] + g[src + off];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Scatter rows of `self` (`[B, K, D]`) into a `[B, t_out, D]` sequence;
    /// slots not covered by `idx[b]` are filled with the `fill` vector `[D]`.
    pub fn scatter_rows(&self, idx: &[Vec<usize>], t_out: usize, fill: &Tensor<E>) -> Tensor<E> {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "scatter_rows expects [B, K, D], got {shape:?}");
        let (b, k, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(fill.shape(), vec![d], "scatter_rows: fill must be [{d}]");
        assert_eq!(idx.len(), b);
        assert!(idx.iter().all(|v| v.len() == k), "scatter_rows: ragged index lists");
        for rows in idx {
            let mut seen = vec![false; t_out];
            for &r in rows {
                assert!(r < t_out, "scatter_rows: index {r} beyond {t_out} slots");
                assert!(!seen[r], "scatter_rows: duplicate target row {r}");
                seen[r] = true;
            }
        }
        let fill_v = fill.to_vec();
        let data = self.with_data(|src| {
            let mut out = Vec::with_capacity(b * t_out * d);
            for bi in 0..b {
                let mut rows: Vec<Option<usize>> = vec![None; t_out];
                for (j, &r) in idx[bi].iter().enumerate() {
                    rows[r] = Some(j);
                }
                for slot in rows {
                    match slot {
                        Some(j) => {
                            let base = (bi * k + j) * d;
                            out.extend_from_slice(&src[base..base + d]);
                        }
                        None => out.extend_from_slice(&fill_v),
                    }
                }
            }
            out
        });
        let idx_owned: Vec<Vec<usize>> = idx.to_vec();
        Tensor::make_output(
            "scatter_rows",
            &[self, fill],
            data,
            vec![b, t_out, d],
            Box::new(move |g| {
                let mut d_src = vec![E::zero(); b * k * d];
                let mut d_fill = vec![E::zero(); d];
                for bi in 0..b {
                    let mut taken = vec![false; t_out];
                    for (j, &r) in idx_owned[bi].iter().enumerate() {
                        taken[r] = true;
                        let src = (bi * t_out + r) * d;
                        let dst = (bi * k + j) * d;
                        d_src[dst..dst + d].copy_from_slice(&g[src..src + d]);
                    }
                    for (r, was_taken) in taken.iter().enumerate() {
                        if !was_taken {
                            let src = (bi * t_out + r) * d;
                            for off in 0..d {
                                d_fill[off] = d_fill[off] + g[src + off];
                            }
                        }
                    }
                }
                vec![Some(d_src), Some(d_fill)]
            }),
        )
    }
}

fn permute_copy<E: Elem>(src: &[E], out_shape: &[usize], src_strides_in_out_order: &[usize], n: usize) -> Vec<E> {
    let nd = out_shape.len();
    // Block fast path: a contiguous tail of axes keeps stride order, so the
    // innermost region is one memcpy (covers attention head split/merge).
    let mut block = 1usize;
    let mut split = nd;
    while split > 0 && src_strides_in_out_order[split - 1] == block {
        block *= out_shape[split - 1];
        split -= 1;
    }
    let mut out = Vec::with_capacity(n);
    let outer: usize = out_shape[..split].iter().product();
    let mut coords = vec![0usize; split];
    for _ in 0..outer {
        let mut idx = 0;
        for d in 0..split {
            idx += coords[d] * src_strides_in_out_order[d];
        }
        out.extend_from_slice(&src[idx..idx + block]);
        for d in (0..split).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Mean squared error between a prediction and a constant target.
pub fn mse<E: Elem>(pred: &Tensor<E>, target: &Tensor<E>) -> Tensor<E> {
    let d = pred.sub(target);
    d.mul(&d).mean_all()
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff_check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape)
    }

    #[test]
    fn gelu_at_zero() {
        let x = Tensor::<f64>::from_vec(vec![0.0], &[1]);
        assert_eq!(x.gelu().item(), 0.0);
    }

    #[test]
    fn mean_simple() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]);
        assert!((x.mean_all().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 0.0], &[2]);
        let s = x.softmax(0);
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
        let big = Tensor::<f64>::from_vec(vec![1000.0, 1000.0], &[2]);
        let s = big.softmax(0);
        assert!((s.to_vec()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randn(&[4, 7], 3);
        let s = x.softmax(1);
        let v = s.to_vec();
        for r in 0..4 {
            let sum: f64 = v[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn broadcast_bias_add() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::<f64>::from_vec(vec![10.0, 20.0], &[2]);
        assert_eq!(x.add(&b).to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_keepdim_stat() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0, 5.0, 7.0], &[2, 2]);
        let m = x.mean_trailing(1, true);
        assert_eq!(m.shape(), vec![2, 1]);
        let centered = x.sub(&m);
        assert_eq!(centered.to_vec(), vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn grad_exp_matches_finite_difference() {
        for seed in 0..5 {
            let x = randn(&[6], seed).requires_grad();
            let err = finite_diff_check(|| x.exp().sum_all(), &x, 1e-5);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_gelu_matches_finite_difference() {
        for seed in 0..5 {
            let x = randn(&[6], seed + 10).requires_grad();
            let err = finite_diff_check(|| x.gelu().sum_all(), &x, 1e-5);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_softmax_jacobian() {
        for seed in 0..5 {
            let x = randn(&[5], seed + 20).requires_grad();
            let w = randn(&[5], seed + 100);
            let err = finite_diff_check(|| x.softmax(0).mul(&w).sum_all(), &x, 1e-5);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_div_and_log() {
        for seed in 0..5 {
            let x = randn(&[4], seed + 30).add_scalar(3.0).requires_grad();
            let y = randn(&[4], seed + 40).add_scalar(3.0);
            let err = finite_diff_check(|| x.div(&y).log().sum_all(), &x, 1e-6);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_broadcast_mul() {
        for seed in 0..3 {
            let x = randn(&[2, 3, 4], seed + 50).requires_grad();
            let g = randn(&[4], seed + 60).requires_grad();
            let err_x = finite_diff_check(|| x.mul(&g).sum_all(), &x, 1e-5);
            let err_g = finite_diff_check(|| x.mul(&g).sum_all(), &g, 1e-5);
            assert!(err_x < 1e-4 && err_g < 1e-4, "errs {err_x} {err_g}");
        }
    }

    #[test]
    fn grad_reductions_and_shapes() {
        let x = randn(&[3, 4], 70).requires_grad();
        let err = finite_diff_check(
            || x.permute(&[1, 0]).reshape(&[2, 6]).mean_trailing(1, false).sum_all(),
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_narrow_concat() {
        let x = randn(&[2, 5, 3], 80).requires_grad();
        let err = finite_diff_check(
            || {
                let head = x.narrow(1, 0, 2);
                let tail = x.narrow(1, 2, 3);
                Tensor::concat(&[&tail, &head], 1).powi_t(2).sum_all()
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_gather_scatter() {
        let x = randn(&[2, 4, 3], 90).requires_grad();
        let fill = randn(&[3], 91).requires_grad();
        let idx = vec![vec![2usize, 0], vec![1, 3]];
        let f = || {
            let picked = x.gather_rows(&idx);
            picked.scatter_rows(&idx, 4, &fill).powi_t(2).sum_all()
        };
        let ex = finite_diff_check(f, &x, 1e-5);
        let ef = finite_diff_check(f, &fill, 1e-5);
        assert!(ex < 1e-4 && ef < 1e-4, "errs {ex} {ef}");
    }

    #[test]
    fn grad_cross_entropy() {
        for seed in 0..5 {
            let x = randn(&[3, 4], seed + 200).requires_grad();
            let targets = vec![1usize, 3, 0];
            let err = finite_diff_check(|| x.cross_entropy(&targets), &x, 1e-6);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Tensor::<f64>::zeros(&[2, 6]);
        let loss = x.cross_entropy(&[0, 5]).item();
        assert!((loss - (6.0f64).ln()).abs() < 1e-9, "got {loss}");
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn broadcast_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        let _ = a.add(&b);
    }

    #[test]
    fn expand_batch_and_grad() {
        let x = randn(&[2, 3], 300).requires_grad();
        let err = finite_diff_check(|| x.expand_batch(4).powi_t(2).sum_all(), &x, 1e-5);
        assert!(err < 1e-4, "rel err {err}");
    }
}
