//! Elementwise, reduction and layout operations.

use std::sync::Arc;

use super::{numel, strides_of, Float, Tensor};
use crate::error::{shape_err, Result};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `input` viewed in the index space of `out` (0 on broadcast axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - input.len();
    let s = strides_of(input);
    (0..out.len())
        .map(|i| {
            if i < off || input[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = shape.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer = numel(&shape[..r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ia;
            pb += ib;
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply<F: Float>(self, a: F, b: F) -> F {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    #[inline]
    fn da<F: Float>(self, _a: F, b: F) -> F {
        match self {
            BinOp::Add | BinOp::Sub => F::one(),
            BinOp::Mul => b,
            BinOp::Div => F::one() / b,
        }
    }

    #[inline]
    fn db<F: Float>(self, a: F, b: F) -> F {
        match self {
            BinOp::Add => F::one(),
            BinOp::Sub => -F::one(),
            BinOp::Mul => a,
            BinOp::Div => -a / (b * b),
        }
    }
}

#[derive(Clone, Copy)]
enum UnOp {
    Neg,
    Square,
    Sqrt,
    Exp,
    Silu,
    Sigmoid,
    Tanh,
    Relu,
}

impl UnOp {
    #[inline]
    fn apply<F: Float>(self, x: F) -> F {
        match self {
            UnOp::Neg => -x,
            UnOp::Square => x * x,
            UnOp::Sqrt => x.sqrt(),
            UnOp::Exp => x.exp(),
            UnOp::Silu => x / (F::one() + (-x).exp()),
            UnOp::Sigmoid => F::one() / (F::one() + (-x).exp()),
            UnOp::Tanh => x.tanh(),
            UnOp::Relu => x.max(F::zero()),
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn deriv<F: Float>(self, x: F, y: F) -> F {
        let one = F::one();
        match self {
            UnOp::Neg => -one,
            UnOp::Square => x + x,
            UnOp::Sqrt => one / (y + y),
            UnOp::Exp => y,
            UnOp::Silu => {
                let s = one / (one + (-x).exp());
                s * (one + x * (one - s))
            }
            UnOp::Sigmoid => y * (one - y),
            UnOp::Tanh => one - y * y,
            UnOp::Relu => {
                if x > F::zero() {
                    one
                } else {
                    F::zero()
                }
            }
        }
    }
}

impl<F: Float> Tensor<F> {
    fn binary(&self, other: &Tensor<F>, op: BinOp) -> Result<Tensor<F>> {
        let (ad, bd) = (self.data_arc(), other.data_arc());
        if self.shape() == other.shape() {
            let out: Vec<F> = ad.iter().zip(bd.iter()).map(|(&a, &b)| op.apply(a, b)).collect();
            let (ra, rb) = (self.requires_grad(), other.requires_grad());
            return Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, other], move |g| {
                let ga = ra.then(|| {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&g, (&a, &b))| g * op.da(a, b))
                        .collect()
                });
                let gb = rb.then(|| {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&g, (&a, &b))| g * op.db(a, b))
                        .collect()
                });
                vec![ga, gb]
            }));
        }

        let shape = broadcast_shape(self.shape(), other.shape())?;
        let sa = broadcast_strides(self.shape(), &shape);
        let sb = broadcast_strides(other.shape(), &shape);
        let mut out = vec![F::zero(); numel(&shape)];
        walk2(&shape, &sa, &sb, |o, ia, ib| out[o] = op.apply(ad[ia], bd[ib]));
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let (na, nb) = (self.numel(), other.numel());
        let oshape = shape.clone();
        Ok(Tensor::from_op(out, shape, &[self, other], move |g| {
            let mut ga = ra.then(|| vec![F::zero(); na]);
            let mut gb = rb.then(|| vec![F::zero(); nb]);
            walk2(&oshape, &sa, &sb, |o, ia, ib| {
                let (a, b) = (ad[ia], bd[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += g[o] * op.da(a, b);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += g[o] * op.db(a, b);
                }
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinOp::Div)
    }

    fn unary(&self, op: UnOp) -> Tensor<F> {
        let xd = self.data_arc();
        let out: Vec<F> = xd.iter().map(|&x| op.apply(x)).collect();
        let yd = Arc::new(out.clone());
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |g| {
            let gx = g
                .iter()
                .zip(xd.iter().zip(yd.iter()))
                .map(|(&g, (&x, &y))| g * op.deriv(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary(UnOp::Neg)
    }

    pub fn square(&self) -> Tensor<F> {
        self.unary(UnOp::Square)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        self.unary(UnOp::Sqrt)
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary(UnOp::Exp)
    }

    pub fn silu(&self) -> Tensor<F> {
        self.unary(UnOp::Silu)
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary(UnOp::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.unary(UnOp::Tanh)
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(UnOp::Relu)
    }

    pub fn scale(&self, s: F) -> Tensor<F> {
        let out = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |g| {
            vec![Some(g.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: F) -> Tensor<F> {
        let out = self.data().iter().map(|&x| x + s).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], |g| vec![Some(g.to_vec())])
    }

    pub fn sum(&self) -> Tensor<F> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![1], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = self.numel();
        let inv = F::one() / F::from_usize(n.max(1));
        let s: F = self.data().iter().copied().sum();
        Tensor::from_op(vec![s * inv], vec![1], &[self], move |g| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&self, target: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape() != target.shape() {
            return Err(shape_err!(
                "mse between {:?} and {:?}",
                self.shape(),
                target.shape()
            ));
        }
        let (ad, bd) = (self.data_arc(), target.data_arc());
        let n = F::from_usize(self.numel().max(1));
        let s: F = ad.iter().zip(bd.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let (ra, rb) = (self.requires_grad(), target.requires_grad());
        Ok(Tensor::from_op(vec![s / n], vec![1], &[self, target], move |g| {
            let k = (g[0] + g[0]) / n;
            let diff = || ad.iter().zip(bd.iter()).map(move |(&a, &b)| (a - b) * k);
            let ga = ra.then(|| diff().collect());
            let gb = rb.then(|| diff().map(|v| -v).collect());
            vec![ga, gb]
        }))
    }

    /// Same data, new shape. Shares storage with `self`.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            ));
        }
        Ok(Tensor::from_op_shared(self.data_arc(), shape.to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("invalid permutation {:?} for rank {}", axes, r));
        }
        let in_strides = strides_of(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zero = vec![0; r];
        let xd = self.data();
        let mut out = vec![F::zero(); self.numel()];
        walk2(&out_shape, &src, &zero, |o, i, _| out[o] = xd[i]);
        let n = self.numel();
        Ok(Tensor::from_op(out, out_shape.clone(), &[self], move |g| {
            let mut gx = vec![F::zero(); n];
            walk2(&out_shape, &src, &zero, |o, i, _| gx[i] = g[o]);
            vec![Some(gx)]
        }))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(shape_err!(
                "narrow({axis}, {start}, {len}) on shape {:?}",
                self.shape()
            ));
        }
        let outer = numel(&self.shape()[..axis]);
        let inner = numel(&self.shape()[axis + 1..]);
        let full = self.shape()[axis];
        let xd = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(out, shape, &[self], move |g| {
            let mut gx = vec![F::zero(); n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| shape_err!("stack of nothing"))?;
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let lifted = parts.iter().map(|p| {
            if p.shape() != first.shape() {
                return Err(shape_err!("stack: {:?} vs {:?}", first.shape(), p.shape()));
            }
            p.reshape(&shape)
        });
        let lifted = lifted.collect::<Result<Vec<_>>>()?;
        Tensor::concat(&lifted.iter().collect::<Vec<_>>(), 0)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let r = first.rank();
        if axis >= r {
            return Err(shape_err!("concat axis {axis} on rank {r}"));
        }
        for p in parts {
            let ok = p.rank() == r
                && (0..r).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(shape_err!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                ));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(out, shape, parts, move |g| {
            let mut grads: Vec<Option<Vec<F>>> = needs
                .iter()
                .zip(&sizes)
                .map(|(&n, &s)| n.then(|| Vec::with_capacity(outer * s * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &s) in grads.iter_mut().zip(&sizes) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[pos..pos + s * inner]);
                    }
                    pos += s * inner;
                }
            }
            grads
        }))
    }

    /// Rows of a `[V, D]` table selected by `indices`, shaped `[n, D]`.
    pub fn embedding(&self, indices: &[usize]) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(shape_err!("embedding table must be [V, D], got {:?}", self.shape()));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(crate::error::Error::Bounds(format!(
                "embedding index {bad} outside table of {v} rows"
            )));
        }
        let td = self.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(out, vec![indices.len(), d], &[self], move |g| {
            let mut gt = vec![F::zero(); v * d];
            for (row, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[row * d + j];
                }
            }
            vec![Some(gt)]
        }))
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<F>> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err!("upsample needs rank >= 2, got {:?}", self.shape()));
        }
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        let planes = numel(&self.shape()[..r - 2]);
        let xd = self.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); planes * h2 * w2];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        Ok(Tensor::from_op(out, shape, &[self], move |g| {
            let mut gx = vec![F::zero(); planes * h * w];
            for p in 0..planes {
                let gs = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let gd = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for x in 0..w2 {
                        gd[(y / 2) * w + x / 2] += gs[y * w2 + x];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64s(data, shape).unwrap()
    }

    #[test]
    fn broadcast_add_bias() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        assert_eq!(x.add(&b).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let c = t(&[100.0, 200.0], &[2, 1]);
        assert_eq!(
            x.add(&c).unwrap().data(),
            &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]
        );
        assert!(x.add(&t(&[1.0, 2.0], &[2])).is_err());
    }

    #[test]
    fn permute_transposes() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 2, 1).unwrap().data(), b.data());
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[2, 3, 4], &mut rng);
        let b = Tensor::<f64>::randn(&[3, 1], &mut rng).add_scalar(3.0);
        let w = Tensor::<f64>::randn(&[2, 3, 4], &mut rng);
        let err = grad_check(
            |x| {
                let y = x[0].mul(&x[1])?.add(&x[0].silu())?.div(&x[1])?;
                let z = y.sub(&x[0].sigmoid())?.add(&x[0].tanh().square())?;
                z.mul(&w).map(|v| v.sum())
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn layout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[2, 3, 2, 2], &mut rng);
        let b = Tensor::<f64>::randn(&[2, 1, 2, 2], &mut rng);
        let table = Tensor::<f64>::randn(&[5, 4], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 4, 4, 2], &mut rng);
        let err = grad_check(
            |x| {
                let c = Tensor::concat(&[&x[0], &x[1]], 1)?; // [2,4,2,2]
                let p = c.permute(&[1, 3, 2, 0])?.narrow(0, 1, 3)?; // [3,2,2,2]
                let u = p.upsample_nearest2x()?; // [3,2,4,4]
                let e = x[2].embedding(&[4, 0, 4])?; // [3,4]
                let s = u.reshape(&[3, 2, 4, 4])?.narrow(1, 0, 1)?.reshape(&[3, 4, 4])?;
                let mixed = s.mul(&e.reshape(&[3, 4, 1])?)?;
                Ok(mixed.mul(&w.narrow(3, 0, 1)?.reshape(&[3, 4, 4])?)?.sum().add(&x[0].mse(&x[0].scale(0.5))?)?)
            },
            &[a, b, table],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
