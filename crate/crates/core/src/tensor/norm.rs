use super::{numel, Float, Tensor};
use crate::error::{config_err, shape_err, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl<F: Float> Tensor<F> {
    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<F>> {
        let r = self.rank();
        if r == 0 {
            return Err(shape_err!("softmax of a rank-0 tensor"));
        }
        let n = self.shape()[r - 1];
        let xd = self.data();
        let mut out = vec![F::zero(); self.numel()];
        for (row, dst) in xd.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - mx).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let y = std::sync::Arc::new(out.clone());
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self], move |g| {
            let mut gx = vec![F::zero(); y.len()];
            for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Group normalization of `[N, C, ...]` with per-channel `gain` and `shift`.
    pub fn group_norm(&self, groups: usize, gain: &Tensor<F>, shift: &Tensor<F>) -> Result<Tensor<F>> {
        self.group_norm_eps(groups, gain, shift, F::from_f64c(GROUP_NORM_EPS))
    }

    pub fn group_norm_eps(
        &self,
        groups: usize,
        gain: &Tensor<F>,
        shift: &Tensor<F>,
        eps: F,
    ) -> Result<Tensor<F>> {
        if self.rank() < 2 {
            return Err(shape_err!("group_norm needs [N, C, ...], got {:?}", self.shape()));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return Err(config_err!("{c} channels not divisible into {groups} groups"));
        }
        if gain.shape() != [c] || shift.shape() != [c] {
            return Err(shape_err!(
                "group_norm affine params {:?}/{:?} for {c} channels",
                gain.shape(),
                shift.shape()
            ));
        }
        let spatial = numel(&self.shape()[2..]);
        let cpg = c / groups;
        let m = cpg * spatial;
        let mf = F::from_usize(m);
        let xd = self.data();
        let (gd, sd) = (gain.data(), shift.data());
        let mut xhat = vec![F::zero(); self.numel()];
        let mut rstd = vec![F::zero(); n * groups];
        let mut out = vec![F::zero(); self.numel()];
        for b in 0..n {
            for gi in 0..groups {
                let base = (b * c + gi * cpg) * spatial;
                let xs = &xd[base..base + m];
                let mean = xs.iter().copied().sum::<F>() / mf;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
                let r = F::one() / (var + eps).sqrt();
                rstd[b * groups + gi] = r;
                for (j, &v) in xs.iter().enumerate() {
                    let ch = gi * cpg + j / spatial;
                    let h = (v - mean) * r;
                    xhat[base + j] = h;
                    out[base + j] = h * gd[ch] + sd[ch];
                }
            }
        }
        let needs = [self.requires_grad(), gain.requires_grad(), shift.requires_grad()];
        let gain_d = gain.data_arc();
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, gain, shift], move |g| {
            let mut gx = needs[0].then(|| vec![F::zero(); xhat.len()]);
            let mut ggain = needs[1].then(|| vec![F::zero(); c]);
            let mut gshift = needs[2].then(|| vec![F::zero(); c]);
            for b in 0..n {
                for gi in 0..groups {
                    let base = (b * c + gi * cpg) * spatial;
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for j in 0..m {
                        let ch = gi * cpg + j / spatial;
                        let gv = g[base + j];
                        let h = xhat[base + j];
                        if let Some(gg) = ggain.as_mut() {
                            gg[ch] += gv * h;
                        }
                        if let Some(gs) = gshift.as_mut() {
                            gs[ch] += gv;
                        }
                        let d = gv * gain_d[ch];
                        sum_d += d;
                        sum_dx += d * h;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let r = rstd[b * groups + gi];
                        for j in 0..m {
                            let ch = gi * cpg + j / spatial;
                            let d = g[base + j] * gain_d[ch];
                            gx[base + j] = r / mf * (mf * d - sum_d - xhat[base + j] * sum_dx);
                        }
                    }
                }
            }
            vec![gx, ggain, gshift]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform() {
        let x = Tensor::<f64>::full(&[2, 5], 0.7);
        let y = x.softmax_last().unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn group_norm_constant_input_yields_shift() {
        let x = Tensor::<f64>::full(&[1, 4, 3, 3], 2.5);
        let gain = Tensor::<f64>::full(&[4], 3.0);
        let shift = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let y = x.group_norm(2, &gain, &shift).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert!((v - (1 + i / 9) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 8, 4, 4], &mut rng).scale(3.0).add_scalar(1.5);
        let y = x
            .group_norm(4, &Tensor::ones(&[8]), &Tensor::zeros(&[8]))
            .unwrap();
        for grp in y.data().chunks(2 * 16) {
            let mean = grp.iter().sum::<f64>() / grp.len() as f64;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / grp.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        let err = x.group_norm(4, &Tensor::ones(&[6]), &Tensor::zeros(&[6]));
        assert!(matches!(err, Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[2, 4, 3, 2], &mut rng);
        let gain = Tensor::<f64>::randn(&[4], &mut rng);
        let shift = Tensor::<f64>::randn(&[4], &mut rng);
        let w = Tensor::<f64>::randn(&[2, 4, 3, 2], &mut rng);
        let err = grad_check(
            |t| {
                let y = t[0].group_norm(2, &t[1], &t[2])?;
                Ok(y.mul(&w)?.softmax_last()?.mul(&w)?.sum())
            },
            &[x, gain, shift],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
