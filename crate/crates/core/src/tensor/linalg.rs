use super::float::{gemm, Mat};
use super::{numel, Float, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct BView {
    shared: bool,
    size: usize,
    rows: usize,
    cols: usize,
    trans: bool,
}

impl BView {
    fn mat<'a, F>(&self, data: &'a [F], i: usize) -> Mat<'a, F> {
        let off = if self.shared { 0 } else { i * self.size };
        let m = Mat::new(&data[off..off + self.size], self.rows, self.cols);
        if self.trans {
            m.t()
        } else {
            m
        }
    }
}

impl<F: Float> Tensor<F> {
    fn bmm(&self, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
        let a = self;
        if a.rank() < 2 || b.rank() < 2 {
            return Err(shape_err!("matmul needs rank >= 2: {:?} x {:?}", a.shape(), b.shape()));
        }
        let ra = a.rank();
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let rb = b.rank();
        let (kb, n) = if trans_b {
            (b.shape()[rb - 1], b.shape()[rb - 2])
        } else {
            (b.shape()[rb - 2], b.shape()[rb - 1])
        };
        let batch = numel(&a.shape()[..ra - 2]);
        let shared_b = rb == 2;
        if k != kb || (!shared_b && a.shape()[..ra - 2] != b.shape()[..rb - 2]) {
            return Err(shape_err!(
                "matmul{} {:?} x {:?}",
                if trans_b { "_t" } else { "" },
                a.shape(),
                b.shape()
            ));
        }
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let b_rows = if trans_b { n } else { k };
        let b_cols = if trans_b { k } else { n };
        let bview = BView { shared: shared_b, size: k * n, rows: b_rows, cols: b_cols, trans: trans_b };
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k),
                bview.mat(&bd, i),
                &mut out[i * m * n..(i + 1) * m * n],
                F::one(),
                F::zero(),
            );
        }
        let mut shape = a.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        let nb = b.numel();
        Ok(Tensor::from_op(out, shape, &[a, b], move |g| {
            let ga = need_a.then(|| {
                let mut ga = vec![F::zero(); batch * m * k];
                for i in 0..batch {
                    // dA = G * B^T  (B as used in the forward product)
                    gemm(
                        Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                        bview.mat(&bd, i).t(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        F::one(),
                        F::zero(),
                    );
                }
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![F::zero(); nb];
                for i in 0..batch {
                    let off = if shared_b { 0 } else { i * k * n };
                    let beta = if shared_b && i > 0 { F::one() } else { F::zero() };
                    let gi = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let ai = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
                    if trans_b {
                        // stored B is [n, k]: dB = G^T A
                        gemm(gi.t(), ai, &mut gb[off..off + k * n], F::one(), beta);
                    } else {
                        gemm(ai.t(), gi, &mut gb[off..off + k * n], F::one(), beta);
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Batched `self @ other`; `other` is either batched like `self` or a plain matrix.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.bmm(other, false)
    }

    /// Batched `self @ other^T` over the last two axes.
    pub fn matmul_t(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.bmm(other, true)
    }

    /// `x @ weight^T + bias` over the last axis. `weight` is `[out, in]`.
    pub fn linear(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let x = self;
        if weight.rank() != 2 || x.rank() == 0 || x.shape()[x.rank() - 1] != weight.shape()[1] {
            return Err(shape_err!(
                "linear: input {:?} with weight {:?}",
                x.shape(),
                weight.shape()
            ));
        }
        let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = bias {
            if b.shape() != [out_f] {
                return Err(shape_err!("linear bias {:?}, expected [{out_f}]", b.shape()));
            }
        }
        let rows = x.numel() / in_f;
        let (xd, wd) = (x.data_arc(), weight.data_arc());
        let mut out = vec![F::zero(); rows * out_f];
        if let Some(b) = bias {
            for r in 0..rows {
                out[r * out_f..(r + 1) * out_f].copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        gemm(
            Mat::new(&xd, rows, in_f),
            Mat::new(&wd, out_f, in_f).t(),
            &mut out,
            F::one(),
            beta,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let needs = [
            x.requires_grad(),
            weight.requires_grad(),
            bias.is_some_and(|b| b.requires_grad()),
        ];
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(out, shape, &inputs, move |g| {
            let gm = Mat::new(g, rows, out_f);
            let gx = needs[0].then(|| {
                let mut gx = vec![F::zero(); rows * in_f];
                gemm(gm, Mat::new(&wd, out_f, in_f), &mut gx, F::one(), F::zero());
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![F::zero(); out_f * in_f];
                gemm(gm.t(), Mat::new(&xd, rows, in_f), &mut gw, F::one(), F::zero());
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![F::zero(); out_f];
                    for r in 0..rows {
                        for (acc, &v) in gb.iter_mut().zip(&g[r * out_f..(r + 1) * out_f]) {
                            *acc += v;
                        }
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

/// `softmax(q k^T / sqrt(d)) v` for `q: [N, L, d]`, `k: [N, S, d]`, `v: [N, S, dv]`.
pub fn scaled_dot_attention<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
) -> Result<Tensor<F>> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(shape_err!(
            "attention expects rank-3 q/k/v, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let (n, _, d) = (q.dim(0), q.dim(1), q.dim(2));
    if k.dim(0) != n || v.dim(0) != n || k.dim(2) != d || k.dim(1) != v.dim(1) {
        return Err(shape_err!(
            "attention dims: q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let scale = F::one() / F::from_usize(d).sqrt();
    let scores = q.matmul_t(k)?.scale(scale);
    scores.softmax_last()?.matmul(v)
}
