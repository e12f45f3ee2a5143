//! Reconstruction metrics, a toy Fréchet feature distance and pass counters.

mod frechet;

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Tensor};

pub use frechet::{frechet_distance, frechet_feature_distance, FeatureNet, MIN_FRECHET_SAMPLES};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;

fn same_shape<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric inputs {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n)
}

/// `10·log10(max² / mse)`, capped at 100 dB.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr<F: Float>(a: &Tensor<F>, b: &Tensor<F>, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(crate::error::config_err!("max_val must be positive"));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// Mean SSIM over every `H×W` plane of `[..., H, W]` inputs with a 7×7
/// uniform window (valid positions only) and stabilisers `(0.01·L)²`, `(0.03·L)²`.
pub fn ssim<F: Float>(a: &Tensor<F>, b: &Tensor<F>, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let r = a.rank();
    if r < 2 || a.dim(r - 2) < SSIM_WINDOW || a.dim(r - 1) < SSIM_WINDOW {
        return Err(shape_err!("ssim needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {:?}", a.shape()));
    }
    let (h, w) = (a.dim(r - 2), a.dim(r - 1));
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let win = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (ad, bd) = (a.to_f64_vec(), b.to_f64_vec());
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in ad.chunks(h * w).zip(bd.chunks(h * w)) {
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    let row = (y + dy) * w + x;
                    for i in row..row + SSIM_WINDOW {
                        let (u, v) = (pa[i], pb[i]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / win, sb / win);
                let va = saa / win - ma * ma;
                let vb = sbb / win - mb * mb;
                let cov = sab / win - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Counts network forward passes and the batch items (frames) they carried.
#[derive(Debug, Default)]
pub struct PassCounter {
    passes: AtomicU64,
    frames: AtomicU64,
}

impl PassCounter {
    pub fn record(&self, frames: usize) {
        self.passes.fetch_add(1, Ordering::Relaxed);
        self.frames.fetch_add(frames as u64, Ordering::Relaxed);
    }

    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn frames(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.passes.store(0, Ordering::Relaxed);
        self.frames.store(0, Ordering::Relaxed);
    }
}

/// One evaluated configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// Toy Fréchet feature distance; `NaN` when not computed.
    pub ffd_toy: f64,
    pub network_passes: u64,
    pub frame_passes: u64,
    pub wall_time_s: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.psnr, self.ssim, self.mse, self.wall_time_s];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validity(format!("non-finite metric in `{}`", self.name)));
        }
        Ok(())
    }
}

/// Writes rows under a header as CSV.
pub fn write_csv<P: AsRef<Path>>(path: P, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(header).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one CSV line (used for streaming loss curves).
pub fn append_line(file: &mut std::fs::File, fields: &[String]) -> Result<()> {
    writeln!(file, "{}", fields.join(","))?;
    Ok(())
}

pub fn write_reports<P: AsRef<Path>>(path: P, reports: &[MetricReport]) -> Result<()> {
    let header = ["name", "psnr", "ssim", "mse", "ffd_toy", "network_passes", "frame_passes", "wall_time_s"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                format!("{:.4}", r.psnr),
                format!("{:.5}", r.ssim),
                format!("{:.6e}", r.mse),
                format!("{:.5}", r.ffd_toy),
                r.network_passes.to_string(),
                r.frame_passes.to_string(),
                format!("{:.3}", r.wall_time_s),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f32>::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let c = Tensor::<f32>::full(&[8, 8], 0.3);
        assert_eq!(ssim(&c, &c, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn psnr_formula() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let a = Tensor::<f64>::zeros(&[100]);
        let b = Tensor::<f64>::full(&[100], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_independent_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!(s.abs() < 0.1, "ssim {s}");
        assert!(ssim(&a, &b.narrow(0, 0, 2).unwrap(), 1.0).is_err());
    }

    #[test]
    fn counter_counts() {
        let c = PassCounter::default();
        c.record(3);
        c.record(5);
        assert_eq!((c.passes(), c.frames()), (2, 8));
        c.reset();
        assert_eq!((c.passes(), c.frames()), (0, 0));
    }
}
