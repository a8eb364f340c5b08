//! Batched matrix multiplication with hand-written kernels.
//!
//! Supported operand layouts: `[.., m, k] x [.., k, n]` with identical batch
//! dimensions, or a 2-D right operand shared across the batch (the weight
//! case). Work is split over output rows; every element is produced by one
//! thread with a fixed accumulation order, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use super::{single_thread, Elem, Tensor};

// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[m,n] = A[m,k] * B[k,n], one output row.
fn row_ab<E: Elem>(a_row: &[E], b: &[E], n: usize, out: &mut [E]) {
    for v in out.iter_mut() {
        *v = E::zero();
    }
    for (p, &a_ip) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o = *o + a_ip * bv;
        }
    }
}

/// C[m,k] = A[m,n] * B[k,n]^T, one output row (dot products of rows).
fn row_abt<E: Elem>(a_row: &[E], b: &[E], k: usize, n: usize, out: &mut [E]) {
    for (j, o) in out.iter_mut().enumerate().take(k) {
        let b_row = &b[j * n..(j + 1) * n];
        let mut acc = E::zero();
        for (&x, &y) in a_row.iter().zip(b_row) {
            acc = acc + x * y;
        }
        *o = acc;
    }
}

/// C[k,n] += A[m,k]^T * G[m,n] for one batch, sequential.
fn atb_accumulate<E: Elem>(a: &[E], g: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o = *o + a_ip * gv;
            }
        }
    }
}

fn run_rows<E: Elem>(out: &mut [E], n: usize, work: usize, f: impl Fn(usize, &mut [E]) + Sync)
where
    E: Send,
{
    if work < PAR_THRESHOLD || single_thread() {
        for (r, row) in out.chunks_mut(n).enumerate() {
            f(r, row);
        }
    } else {
        out.par_chunks_mut(n).enumerate().for_each(|(r, row)| f(r, row));
    }
}

/// Plain data-level batched product; `batch` leading groups share `b` when
/// `b_batched` is false.
fn batched_ab<E: Elem>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<E> {
    let mut out = vec![E::zero(); batch * m * n];
    let work = batch * m * k * n;
    run_rows(&mut out, n, work, |r, row| {
        let (bi, i) = (r / m, r % m);
        let a_row = &a[(bi * m + i) * k..(bi * m + i) * k + k];
        let b_slice = if b_batched { &b[bi * k * n..(bi + 1) * k * n] } else { b };
        row_ab(a_row, b_slice, n, row);
    });
    out
}

fn batched_abt<E: Elem>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
    b_batched: bool,
) -> Vec<E> {
    // a: [batch, m, n], b: [batch?, k, n]  ->  [batch, m, k]
    let mut out = vec![E::zero(); batch * m * k];
    let work = batch * m * k * n;
    run_rows(&mut out, k, work, |r, row| {
        let (bi, i) = (r / m, r % m);
        let a_row = &a[(bi * m + i) * n..(bi * m + i) * n + n];
        let b_slice = if b_batched { &b[bi * k * n..(bi + 1) * k * n] } else { b };
        row_abt(a_row, b_slice, k, n, row);
    });
    out
}


/// dB for a shared (2-D) right operand: `a^T @ g` summed over all batch
/// rows, parallelized over output rows.
fn shared_db<E: Elem>(a: &[E], g: &[E], rows: usize, k: usize, n: usize) -> Vec<E> {
    let mut db = vec![E::zero(); k * n];
    let work = rows * k * n;
    run_rows(&mut db, n, work, |p, out_row| {
        for i in 0..rows {
            let coef = a[i * k + p];
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + coef * gv;
            }
        }
    });
    db
}

impl<E: Elem> Tensor<E> {
    /// Batched matrix product. The right operand must either carry the same
    /// batch dimensions as the left or be a plain 2-D matrix.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let ls = self.shape();
        let rs = rhs.shape();
        assert!(
            ls.len() >= 2 && rs.len() >= 2,
            "matmul requires rank >= 2 operands, got {ls:?} and {rs:?}"
        );
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (rk, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        assert_eq!(
            k, rk,
            "matmul: inner dimensions disagree between {ls:?} and {rs:?}"
        );
        let lbatch = &ls[..ls.len() - 2];
        let rbatch = &rs[..rs.len() - 2];
        let b_batched = !rbatch.is_empty();
        assert!(
            !b_batched || lbatch == rbatch,
            "matmul: batch dimensions disagree between {ls:?} and {rs:?}"
        );
        let batch: usize = lbatch.iter().product::<usize>().max(1);

        let a_data = self.to_vec();
        let b_data = rhs.to_vec();
        let out = batched_ab(&a_data, &b_data, batch, m, k, n, b_batched);
        let mut out_shape = lbatch.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let lhs_t = self.clone();
        let rhs_t = rhs.clone();
        Tensor::make_output(
            "matmul",
            &[self, rhs],
            out,
            out_shape,
            Box::new(move |g| {
                let a = lhs_t.to_vec();
                let b = rhs_t.to_vec();
                // dA = G * B^T  (per batch)
                let da = batched_abt(g, &b, batch, m, n, k, b_batched);
                // dB = A^T * G, summed over the batch when B is shared.
                let db = if b_batched {
                    let mut db = vec![E::zero(); batch * k * n];
                    let work = batch * m * k * n;
                    run_rows(&mut db, k * n, work, |bi, chunk| {
                        atb_accumulate(
                            &a[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            chunk,
                        );
                    });
                    db
                } else {
                    shared_db(&a, g, batch * m, k, n)
                };
                vec![Some(da), Some(db)]
            }),
        )
    }
}

impl<E: Elem> Tensor<E> {
    /// `a.matmul_nt(b)` computes `a x b^T` without materializing the
    /// transpose: `[.., m, n] x [.., k, n] -> [.., m, k]`. This is the
    /// attention-score layout (rows of both operands are contiguous).
    pub fn matmul_nt(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let ls = self.shape();
        let rs = rhs.shape();
        assert!(
            ls.len() >= 2 && rs.len() >= 2,
            "matmul_nt requires rank >= 2 operands, got {ls:?} and {rs:?}"
        );
        let (m, n) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k, rn) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        assert_eq!(
            n, rn,
            "matmul_nt: inner dimensions disagree between {ls:?} and {rs:?}"
        );
        let lbatch = &ls[..ls.len() - 2];
        let rbatch = &rs[..rs.len() - 2];
        let b_batched = !rbatch.is_empty();
        assert!(
            !b_batched || lbatch == rbatch,
            "matmul_nt: batch dimensions disagree between {ls:?} and {rs:?}"
        );
        let batch: usize = lbatch.iter().product::<usize>().max(1);

        let a_data = self.to_vec();
        let b_data = rhs.to_vec();
        let out = batched_abt(&a_data, &b_data, batch, m, n, k, b_batched);
        let mut out_shape = lbatch.to_vec();
        out_shape.push(m);
        out_shape.push(k);

        let lhs_t = self.clone();
        let rhs_t = rhs.clone();
        Tensor::make_output(
            "matmul_nt",
            &[self, rhs],
            out,
            out_shape,
            Box::new(move |g| {
                let a = lhs_t.to_vec();
                let b = rhs_t.to_vec();
                // c = a b^T: da = g @ b, db = g^T @ a
                let da = batched_ab(g, &b, batch, m, k, n, b_batched);
                let db = if b_batched {
                    let mut db = vec![E::zero(); batch * k * n];
                    let work = batch * m * k * n;
                    run_rows(&mut db, k * n, work, |bi, chunk| {
                        atb_accumulate(
                            &g[bi * m * k..(bi + 1) * m * k],
                            &a[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            chunk,
                        );
                    });
                    db
                } else {
                    shared_db(g, &a, batch * m, k, n)
                };
                vec![Some(da), Some(db)]
            }),
        )
    }
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
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn identity_product() {
        let eye = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(eye.matmul(&x).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&b).to_vec(), vec![11.0]);
    }

    #[test]
    fn batched_against_flat() {
        let a = randn(&[3, 2, 4], 1);
        let b = randn(&[3, 4, 5], 2);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), vec![3, 2, 5]);
        let av = a.to_vec();
        let bv = b.to_vec();
        let cv = c.to_vec();
        for bi in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for p in 0..4 {
                        acc += av[bi * 8 + i * 4 + p] * bv[bi * 20 + p * 5 + j];
                    }
                    assert!((cv[bi * 10 + i * 5 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_matches_finite_difference() {
        for seed in 0..5 {
            let a = randn(&[4, 5], seed).requires_grad();
            let b = randn(&[5, 3], seed + 50).requires_grad();
            let w = randn(&[4, 3], seed + 99);
            let f = || a.matmul(&b).mul(&w).sum_all();
            let ea = finite_diff_check(f, &a, 1e-5);
            let eb = finite_diff_check(f, &b, 1e-5);
            assert!(ea < 1e-4 && eb < 1e-4, "seed {seed}: errs {ea} {eb}");
        }
    }

    #[test]
    fn grad_batched_shared_weight() {
        let x = randn(&[2, 3, 4], 7).requires_grad();
        let w = randn(&[4, 6], 8).requires_grad();
        let f = || x.matmul(&w).powi_t(2).sum_all();
        let ex = finite_diff_check(f, &x, 1e-5);
        let ew = finite_diff_check(f, &w, 1e-5);
        assert!(ex < 1e-4 && ew < 1e-4, "errs {ex} {ew}");
    }

    #[test]
    fn grad_batched_both() {
        let q = randn(&[2, 3, 4], 9).requires_grad();
        let k = randn(&[2, 4, 3], 10).requires_grad();
        let f = || q.matmul(&k).powi_t(2).sum_all();
        let eq = finite_diff_check(f, &q, 1e-5);
        let ek = finite_diff_check(f, &k, 1e-5);
        assert!(eq < 1e-4 && ek < 1e-4, "errs {eq} {ek}");
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn rejects_mismatched_inner() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let _ = a.matmul(&b);
    }
}
