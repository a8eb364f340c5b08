//! 3x3 same-padding convolution, the only configuration the pose head needs.

use super::{Elem, Tensor};

impl<E: Elem> Tensor<E> {
    /// `x [B,C,H,W] * kernel [O,C,3,3]` with stride 1 and zero padding 1, so
    /// spatial size is preserved.
    pub fn conv2d(&self, kernel: &Tensor<E>) -> Tensor<E> {
        let xs = self.shape();
        let ks = kernel.shape();
        assert_eq!(xs.len(), 4, "conv2d expects [B,C,H,W] input, got {xs:?}");
        assert_eq!(ks.len(), 4, "conv2d expects [O,C,3,3] kernel, got {ks:?}");
        assert!(
            ks[2] == 3 && ks[3] == 3,
            "conv2d kernel must be 3x3, got {ks:?}"
        );
        assert_eq!(
            xs[1], ks[1],
            "conv2d: input channels disagree between {xs:?} and {ks:?}"
        );
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ks[0];
        let x = self.to_vec();
        let k = kernel.to_vec();

        let mut out = vec![E::zero(); b * o * h * w];
        for bi in 0..b {
            for oi in 0..o {
                for ci in 0..c {
                    let kbase = (oi * c + ci) * 9;
                    let xbase = (bi * c + ci) * h * w;
                    let obase = (bi * o + oi) * h * w;
                    for y in 0..h {
                        for xp in 0..w {
                            let mut acc = out[obase + y * w + xp];
                            for dy in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx in 0..3usize {
                                    let sx = xp as isize + dx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + k[kbase + dy * 3 + dx]
                                            * x[xbase + sy as usize * w + sx as usize];
                                }
                            }
                            out[obase + y * w + xp] = acc;
                        }
                    }
                }
            }
        }

        let xt = self.clone();
        let kt = kernel.clone();
        Tensor::make_output(
            "conv2d",
            &[self, kernel],
            out,
            vec![b, o, h, w],
            Box::new(move |g| {
                let x = xt.to_vec();
                let k = kt.to_vec();
                let mut dx = vec![E::zero(); b * c * h * w];
                let mut dk = vec![E::zero(); o * c * 9];
                for bi in 0..b {
                    for oi in 0..o {
                        let gbase = (bi * o + oi) * h * w;
                        for ci in 0..c {
                            let kbase = (oi * c + ci) * 9;
                            let xbase = (bi * c + ci) * h * w;
                            for y in 0..h {
                                for xp in 0..w {
                                    let gv = g[gbase + y * w + xp];
                                    for dy in 0..3usize {
                                        let sy = y as isize + dy as isize - 1;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for dxp in 0..3usize {
                                            let sx = xp as isize + dxp as isize - 1;
                                            if sx < 0 || sx >= w as isize {
                                                continue;
                                            }
                                            let xi = xbase + sy as usize * w + sx as usize;
                                            dx[xi] = dx[xi] + k[kbase + dy * 3 + dxp] * gv;
                                            dk[kbase + dy * 3 + dxp] =
                                                dk[kbase + dy * 3 + dxp] + x[xi] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dk)]
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
    fn identity_kernel_passes_input_through() {
        let x = randn(&[1, 2, 4, 4], 1);
        let mut k = vec![0.0f64; 2 * 2 * 9];
        // center tap of the matching channel only
        k[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
        k[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
        let kernel = Tensor::from_vec(k, &[2, 2, 3, 3]);
        assert_eq!(x.conv2d(&kernel).to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_center_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&k).to_vec();
        assert_eq!(y[4], 9.0); // center sees the full 3x3 window
        assert_eq!(y[0], 4.0); // corner sees a 2x2 window
    }

    #[test]
    fn grad_matches_finite_difference() {
        for seed in 0..5 {
            let x = randn(&[1, 2, 4, 4], seed).requires_grad();
            let k = randn(&[3, 2, 3, 3], seed + 30).requires_grad();
            let f = || x.conv2d(&k).powi_t(2).sum_all();
            let ex = finite_diff_check(f, &x, 1e-5);
            let ek = finite_diff_check(f, &k, 1e-5);
            assert!(ex < 1e-4 && ek < 1e-4, "seed {seed}: errs {ex} {ek}");
        }
    }

    #[test]
    #[should_panic(expected = "input channels disagree")]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let _ = x.conv2d(&k);
    }
}
