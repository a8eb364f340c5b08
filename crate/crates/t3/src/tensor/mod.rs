//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable op records a graph node holding its inputs and a
//! backward closure. `backward()` on a scalar loss walks the graph in reverse
//! topological order and accumulates gradients into every tensor that
//! requires them. Gradients accumulate additively across calls; callers zero
//! them explicitly between steps.
//!
//! The element type is generic: training runs in `f32`, gradient checking
//! instantiates the same code with `f64`.

mod check;
mod conv;
mod matmul;
mod ops;

pub use check::{finite_diff_check, finite_diff_check_sampled};
pub use ops::mse;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Scalar element of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Elem:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Guard added to denominators and log/sqrt arguments.
    fn eps_guard() -> Self {
        Self::from_f64(1e-12)
    }

    /// exp for bulk activation math. The f32 implementation trades the last
    /// bit of precision for vectorizable polynomial evaluation; f64 stays
    /// exact so the gradient-check oracle is unaffected.
    fn exp_approx(self) -> Self {
        self.exp()
    }

    /// tanh counterpart of [`Elem::exp_approx`].
    fn tanh_approx(self) -> Self {
        self.tanh()
    }
}

/// exp(x) for f32 via 2^(x*log2(e)) with a degree-5 polynomial for the
/// fractional part; relative error around 1e-7.
#[inline]
fn fast_exp_f32(x: f32) -> f32 {
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    let x = x.clamp(-87.0, 88.0);
    let y = x * LOG2_E;
    let n = y.round();
    let f = y - n;
    // 2^f on [-0.5, 0.5]
    let p = 1.000000119e0
        + f * (6.931469440e-1
            + f * (2.402212024e-1
                + f * (5.550713092e-2 + f * (9.675540961e-3 + f * 1.327647245e-3))));
    // scale by 2^n through the exponent bits
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// tanh(x) for f32 as the odd rational polynomial used by vectorized math
/// libraries; relative error below 1e-6.
#[inline]
fn fast_tanh_f32(x: f32) -> f32 {
    let x = x.clamp(-7.905_311, 7.905_311);
    let x2 = x * x;
    let p = x * (4.893_525_6e-3
        + x2 * (6.372_619_3e-4
            + x2 * (1.485_722_4e-5
                + x2 * (5.122_297_1e-8
                    + x2 * (-8.604_671_5e-11 + x2 * (2.000_187_9e-13 + x2 * -2.760_768_5e-16))))));
    let q = 4.893_525_2e-3 + x2 * (2.268_434_6e-3 + x2 * (1.185_347_1e-4 + x2 * 1.198_258_4e-6));
    p / q
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn exp_approx(self) -> Self {
        fast_exp_f32(self)
    }
    fn tanh_approx(self) -> Self {
        fast_tanh_f32(self)
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

static FORCE_SINGLE_THREAD: AtomicBool = AtomicBool::new(false);

/// Force all internally parallel ops onto one thread. Row-partitioned kernels
/// are bit-identical either way; this pins the behavior for reproducibility
/// runs (`T3_DETERMINISTIC=1`).
pub fn set_single_thread(on: bool) {
    FORCE_SINGLE_THREAD.store(on, Ordering::Relaxed);
}

pub(crate) fn single_thread() -> bool {
    FORCE_SINGLE_THREAD.load(Ordering::Relaxed)
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording any graph nodes (evaluation mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Backward closure: maps the upstream gradient to one gradient per input
/// (`None` for inputs that do not require grad).
type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>>>;

struct Node<E: Elem> {
    #[allow(dead_code)]
    op_name: &'static str,
    inputs: Vec<Tensor<E>>,
    backward_fn: BackwardFn<E>,
}

struct Inner<E: Elem> {
    id: u64,
    data: Vec<E>,
    shape: Vec<usize>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    node: Option<Node<E>>,
}

/// Reference-counted handle to a tensor. Clones share storage and gradient.
pub struct Tensor<E: Elem = f32> {
    inner: Rc<RefCell<Inner<E>>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) with resampling of draws beyond 2*std.
    TruncNormal(f64),
    Uniform(f64, f64),
}

impl<E: Elem> Tensor<E> {
    fn from_parts(data: Vec<E>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<E>>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: next_id(),
                data,
                shape,
                grad: None,
                requires_grad,
                node,
            })),
        }
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Self {
        validate_shape(shape);
        Self::from_parts(data, shape.to_vec(), false, None)
    }

    pub fn scalar(v: E) -> Self {
        Self::from_parts(vec![v], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape(shape);
        let n: usize = shape.iter().product();
        Self::from_parts(vec![E::zero(); n], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        validate_shape(shape);
        let n: usize = shape.iter().product();
        Self::from_parts(vec![E::one(); n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        validate_shape(shape);
        let n: usize = shape.iter().product();
        Self::from_parts(vec![v; n], shape.to_vec(), false, None)
    }

    /// Deterministic initialization for a fixed seed.
    pub fn init(shape: &[usize], scheme: Init, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(shape, scheme, &mut rng)
    }

    /// Initialization drawing from a caller-owned stream.
    pub fn init_with(shape: &[usize], scheme: Init, rng: &mut ChaCha8Rng) -> Self {
        validate_shape(shape);
        let n: usize = shape.iter().product();
        let data: Vec<E> = match scheme {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::TruncNormal(std) => {
                assert!(std > 0.0, "truncated normal requires std > 0, got {std}");
                let dist = Normal::new(0.0f64, std).expect("valid normal");
                (0..n)
                    .map(|_| loop {
                        let v = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            return E::from_f64(v);
                        }
                    })
                    .collect()
            }
            Init::Uniform(a, b) => {
                assert!(a < b, "uniform bounds must satisfy a < b, got [{a}, {b})");
                (0..n).map(|_| E::from_f64(rng.gen_range(a..b))).collect()
            }
        };
        Self::from_parts(data, shape.to_vec(), false, None)
    }

    /// Mark this tensor as a trainable leaf.
    pub fn requires_grad(self) -> Self {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.borrow().data.clone()
    }

    /// Borrow the raw data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.data.len(),
            1,
            "item() requires a scalar tensor, shape is {:?}",
            inner.shape
        );
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Mutate the stored values in place (optimizer updates).
    pub fn apply_update(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.borrow_mut().data)
    }

    /// Replace the stored values; the length must match.
    pub fn set_data(&self, data: Vec<E>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            data.len(),
            inner.data.len(),
            "set_data length {} does not match tensor numel {}",
            data.len(),
            inner.data.len()
        );
        inner.data = data;
    }

    /// A gradient-free leaf copy of this tensor's current values.
    pub fn detach(&self) -> Tensor<E> {
        let inner = self.inner.borrow();
        Tensor::from_parts(inner.data.clone(), inner.shape.clone(), false, None)
    }

    /// Convert element type (used to lift f32 batches into f64 checks).
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        let inner = self.inner.borrow();
        let data = inner.data.iter().map(|v| F::from_f64(v.as_f64())).collect();
        Tensor::from_parts(data, inner.shape.clone(), false, None)
    }

    pub(crate) fn make_output(
        op_name: &'static str,
        inputs: &[&Tensor<E>],
        data: Vec<E>,
        shape: Vec<usize>,
        backward_fn: BackwardFn<E>,
    ) -> Tensor<E> {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad_flag());
        if track {
            let node = Node {
                op_name,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward_fn,
            };
            Tensor::from_parts(data, shape, true, Some(node))
        } else {
            Tensor::from_parts(data, shape, false, None)
        }
    }

    fn accumulate_grad(&self, g: &[E]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.data.len());
        match &mut inner.grad {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are accumulated into
    /// every reachable tensor with `requires_grad`.
    pub fn backward(&self) {
        {
            let inner = self.inner.borrow();
            assert_eq!(
                inner.data.len(),
                1,
                "backward requires a scalar loss, shape is {:?}",
                inner.shape
            );
        }
        // Iterative post-order DFS; reversed it yields a deterministic
        // topological order for a fixed forward trace.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let id = t.id();
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(id) {
                continue;
            }
            let has_node = t.inner.borrow().node.is_some();
            if has_node {
                stack.push((t.clone(), true));
                let inner = t.inner.borrow();
                if let Some(node) = &inner.node {
                    for input in node.inputs.iter().rev() {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        // Flowing gradients live in a side table so that repeated backward
        // calls each seed the root with exactly 1 and leaf grads accumulate
        // additively across calls.
        let mut flows: std::collections::HashMap<u64, Vec<E>> =
            std::collections::HashMap::new();
        flows.insert(self.id(), vec![E::one()]);
        if self.inner.borrow().node.is_none() {
            if self.requires_grad_flag() {
                self.accumulate_grad(&[E::one()]);
            }
            return;
        }
        for t in order.iter().rev() {
            let upstream = match flows.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            t.accumulate_grad(&upstream);
            let grads = {
                let inner = t.inner.borrow();
                let node = inner.node.as_ref().expect("topo order holds only nodes");
                (node.backward_fn)(&upstream)
            };
            let inner = t.inner.borrow();
            let node = inner.node.as_ref().unwrap();
            assert_eq!(grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if input.inner.borrow().node.is_some() {
                    match flows.entry(input.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&g) {
                                *a = *a + *b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                    }
                } else if input.requires_grad_flag() {
                    input.accumulate_grad(&g);
                }
            }
        }
    }
}

fn validate_shape(shape: &[usize]) {
    assert!(!shape.is_empty(), "tensor shape must be non-empty");
    assert!(
        shape.iter().all(|&d| d > 0),
        "tensor shape {shape:?} contains a zero-sized dimension"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_zeros() {
        let t = Tensor::<f32>::init(&[2, 2], Init::Zeros, 0);
        assert_eq!(t.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn init_trunc_normal_bounded() {
        let t = Tensor::<f32>::init(&[3], Init::TruncNormal(0.02), 7);
        for v in t.to_vec() {
            assert!(v.abs() <= 0.04, "value {v} beyond 2*std");
        }
    }

    #[test]
    fn init_uniform_deterministic() {
        let a = Tensor::<f32>::init(&[4], Init::Uniform(0.0, 1.0), 1);
        let b = Tensor::<f32>::init(&[4], Init::Uniform(0.0, 1.0), 1);
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    #[should_panic(expected = "zero-sized dimension")]
    fn init_rejects_zero_dim() {
        let _ = Tensor::<f32>::zeros(&[2, 0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).requires_grad();
        let loss = x.sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).requires_grad();
        let loss = x.sum_all();
        loss.backward();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).requires_grad();
        let y = x.scale(2.0);
        y.backward();
    }

    #[test]
    fn sum_of_paths() {
        // grad of (f + g) equals grad f + grad g on shared leaves
        let x = Tensor::<f64>::from_vec(vec![1.5, -0.5], &[2]).requires_grad();
        let f = x.scale(3.0).sum_all();
        let g = x.mul(&x).sum_all();
        let total = f.add(&g);
        total.backward();
        let got = x.grad().unwrap();

        let x2 = Tensor::<f64>::from_vec(vec![1.5, -0.5], &[2]).requires_grad();
        x2.scale(3.0).sum_all().backward();
        let gf = x2.grad().unwrap();
        x2.zero_grad();
        x2.mul(&x2).sum_all().backward();
        let gg = x2.grad().unwrap();
        for i in 0..2 {
            assert!((got[i] - (gf[i] + gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_skips_graph() {
        let x = Tensor::<f64>::from_vec(vec![1.0], &[1]).requires_grad();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad_flag());
    }
}

#[cfg(test)]
mod fast_math_tests {
    use super::*;

    #[test]
    fn fast_exp_close_to_std() {
        for i in -800..=800 {
            let x = i as f32 * 0.1;
            let (a, b) = (fast_exp_f32(x), x.exp());
            let rel = ((a - b) / b.max(f32::MIN_POSITIVE)).abs();
            assert!(rel < 3e-6, "exp({x}): {a} vs {b} rel {rel}");
        }
    }

    #[test]
    fn fast_tanh_close_to_std() {
        for i in -900..=900 {
            let x = i as f32 * 0.01;
            let (a, b) = (fast_tanh_f32(x), x.tanh());
            assert!((a - b).abs() < 2e-6, "tanh({x}): {a} vs {b}");
        }
    }
}
