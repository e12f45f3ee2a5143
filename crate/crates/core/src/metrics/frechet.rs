use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::tensor::Tensor;

pub const MIN_FRECHET_SAMPLES: usize = 32;

/// Fixed, untrained conv net mapping a video `[T, 3, H, W]` to a feature
/// vector: mean frame features followed by mean absolute temporal change.
pub struct FeatureNet {
    ps: ParamStore,
    convs: Vec<Conv2d>,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut ps, &mut rng);
        let widths = [3, 8, 16, 16];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut init.sub(&format!("c{i}")), w[0], w[1], 3, 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureNet { ps, convs })
    }

    pub fn dim(&self) -> usize {
        2 * 16
    }

    pub fn features(&self, video: &Tensor<f32>) -> Result<Vec<f64>> {
        let _g = crate::tensor::no_grad();
        let mut h = video.clone();
        for c in &self.convs {
            h = c.forward(&self.ps, &h)?.tanh();
        }
        let (t, c) = (h.dim(0), h.dim(1));
        let plane = h.numel() / (t * c);
        let pooled: Vec<Vec<f64>> = h
            .data()
            .chunks(c * plane)
            .map(|f| f.chunks(plane).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64).collect())
            .collect();
        let mut out = vec![0.0; 2 * c];
        for f in &pooled {
            for (o, v) in out.iter_mut().zip(f) {
                *o += v / t as f64;
            }
        }
        if t > 1 {
            for w in pooled.windows(2) {
                for k in 0..c {
                    out[c + k] += (w[1][k] - w[0][k]).abs() / (t - 1) as f64;
                }
            }
        }
        Ok(out)
    }
}

fn moments(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
    let mut centred = m;
    for j in 0..d {
        let mu = mean[j];
        centred.column_mut(j).apply(|v| *v -= mu);
    }
    let cov = centred.transpose() * &centred / (n.max(2) - 1) as f64;
    (mean, cov)
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let top = e.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = 1e-9 * top.max(1e-12);
    if let Some(&bad) = e.eigenvalues.iter().find(|&&v| v < -tol.max(1e-10)) {
        return Err(Error::Numerical(format!(
            "{what} is not positive semi-definite: eigenvalue {bad:.3e} (largest magnitude {top:.3e})"
        )));
    }
    Ok(e)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m, what)?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * s * e.eigenvectors.transpose())
}

/// `Tr((A B)^{1/2})` via `Tr((A^{1/2} B A^{1/2})^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = sqrt_psd(a, "covariance")?;
    let inner = &ra * b * &ra;
    Ok(psd_eigen(&inner, "covariance product")?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Gaussian Fréchet distance between two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 || a[0].len() != b[0].len() {
        return Err(Error::Dataset("Fréchet distance needs two same-width sets of at least 2 samples".into()));
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    // both orders, so the result is exactly symmetric
    let cross = trace_sqrt_product(&ca, &cb)? + trace_sqrt_product(&cb, &ca)?;
    let d = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - cross;
    Ok(d.max(0.0))
}

/// FFD-toy between two sets of videos using a [`FeatureNet`] built from `seed`.
pub fn frechet_feature_distance(a: &[Tensor<f32>], b: &[Tensor<f32>], seed: u64) -> Result<f64> {
    if a.len() < MIN_FRECHET_SAMPLES || b.len() < MIN_FRECHET_SAMPLES {
        return Err(Error::Dataset(format!(
            "FFD-toy needs at least {MIN_FRECHET_SAMPLES} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let net = FeatureNet::new(seed)?;
    let fa = a.iter().map(|v| net.features(v)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|v| net.features(v)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&fa, &fb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_set(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z + shift }).collect::<Vec<f64>>())
            .collect()
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = normal_set(64, 5, 0.0, 0);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn unit_shift_in_one_dimension() {
        let a = normal_set(20000, 1, 0.0, 1);
        let b = normal_set(20000, 1, 1.0, 2);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 0.05, "d = {d}");
    }

    #[test]
    fn symmetric_and_order_free() {
        let a = normal_set(50, 4, 0.0, 3);
        let b = normal_set(50, 4, 0.3, 4);
        assert_eq!(frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        let mut r = a.clone();
        r.reverse();
        let d0 = frechet_distance(&a, &b).unwrap();
        assert!((frechet_distance(&r, &b).unwrap() - d0).abs() < 1e-9 * d0.max(1.0));
    }

    #[test]
    fn sample_size_is_enforced() {
        let v = vec![Tensor::<f32>::zeros(&[2, 3, 16, 16]); 8];
        assert!(matches!(frechet_feature_distance(&v, &v, 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn indefinite_matrix_reports_diagnostics() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let e = sqrt_psd(&m, "test").unwrap_err();
        assert!(matches!(e, Error::Numerical(ref s) if s.contains("eigenvalue")));
    }
}
