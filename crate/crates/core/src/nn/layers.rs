use super::{Init, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

fn fan_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// `k×k` convolution with "same" padding.
    pub fn new(init: &mut Init, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let b = fan_bound(cin * k * k);
        Ok(Conv2d {
            weight: init.uniform("weight", &[cout, cin, k, k], b)?,
            bias: init.uniform("bias", &[cout], b)?,
            stride,
            padding: k / 2,
        })
    }

    pub fn zeroed(init: &mut Init, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Conv2d {
            weight: init.zeros("weight", &[cout, cin, k, k])?,
            bias: init.zeros("bias", &[cout])?,
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.conv2d(ps.get(self.weight), Some(ps.get(self.bias)), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: [usize; 3],
}

impl Conv3d {
    pub fn new(init: &mut Init, cin: usize, cout: usize, k: [usize; 3], zero: bool) -> Result<Self> {
        let shape = [cout, cin, k[0], k[1], k[2]];
        let (weight, bias) = if zero {
            (init.zeros("weight", &shape)?, init.zeros("bias", &[cout])?)
        } else {
            let b = fan_bound(cin * k.iter().product::<usize>());
            (init.uniform("weight", &shape, b)?, init.uniform("bias", &[cout], b)?)
        };
        Ok(Conv3d { weight, bias, padding: [k[0] / 2, k[1] / 2, k[2] / 2] })
    }

    /// Input `[B, C, T, H, W]`.
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.conv3d(ps.get(self.weight), Some(ps.get(self.bias)), self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, cin: usize, cout: usize) -> Result<Self> {
        let b = fan_bound(cin);
        Ok(Linear {
            weight: init.uniform("weight", &[cout, cin], b)?,
            bias: init.uniform("bias", &[cout], b)?,
        })
    }

    pub fn zeroed(init: &mut Init, cin: usize, cout: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.zeros("weight", &[cout, cin])?,
            bias: init.zeros("bias", &[cout])?,
        })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.linear(ps.get(self.weight), Some(ps.get(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(crate::error::config_err!(
                "{channels} channels not divisible into {groups} groups"
            ));
        }
        Ok(GroupNorm {
            gain: init.ones("gain", &[channels])?,
            shift: init.zeros("shift", &[channels])?,
            groups,
        })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.group_norm(self.groups, ps.get(self.gain), ps.get(self.shift))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new(init: &mut Init, rows: usize, dim: usize, zero: bool) -> Result<Self> {
        let table = if zero {
            init.zeros("table", &[rows, dim])?
        } else {
            let t = Tensor::<f32>::randn(&[rows, dim], init.rng()).scale(0.02_f32.sqrt());
            init.param("table", t)?
        };
        Ok(Embedding { table, rows })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, idx: &[usize]) -> Result<Tensor<F>> {
        ps.get(self.table).embedding(idx)
    }
}

/// Sinusoidal embedding `[cos(t·f_i), sin(t·f_i)]` with geometric frequencies.
pub fn timestep_embedding<F: Float>(ts: &[f64], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); ts.len() * dim];
    for (row, &t) in out.chunks_mut(dim).zip(ts) {
        for i in 0..half {
            let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
            row[i] = F::from_f64c((t * f).cos());
            row[half + i] = F::from_f64c((t * f).sin());
        }
    }
    Tensor::from_vec(out, &[ts.len(), dim]).expect("embedding extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_shapes_and_counts() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut ps, &mut rng);
        let c = Conv2d::new(&mut init.sub("c"), 3, 8, 3, 2).unwrap();
        let l = Linear::zeroed(&mut init.sub("l"), 8, 4).unwrap();
        let t = Conv3d::new(&mut init.sub("t"), 8, 8, [3, 1, 1], true).unwrap();
        assert_eq!(ps.count(None), 8 * 27 + 8 + 8 * 4 + 4 + 8 * 8 * 3 + 8);
        let x = Tensor::<f32>::ones(&[2, 3, 8, 8]);
        let y = c.forward(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
        let z = l.forward(&ps, &Tensor::ones(&[5, 8])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let v = t.forward(&ps, &Tensor::ones(&[1, 8, 4, 2, 2])).unwrap();
        assert_eq!(v.shape(), &[1, 8, 4, 2, 2]);
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding::<f64>(&[0.0], 8);
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
