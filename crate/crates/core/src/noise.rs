//! Corruption of clean images: additive white Gaussian noise and Poisson
//! (shot) noise.
//!
//! Images live in `[0, 1]`; Gaussian `sigma` is quoted on the 0–255 scale.
//! Noisy values are never clipped here. Clipping happens only when writing
//! PNGs or computing PSNR/SSIM.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{config_err, Result};
use crate::rng::{derive_seed, fill_normal, stream};

const GAUSSIAN_TAG: u64 = 0x6A55;
const POISSON_TAG: u64 = 0x9015;
const EPOCH_TAG: u64 = 0xE90C;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseSpec {
    /// `sigma` in `(0, 255]` on the 0–255 intensity scale.
    Gaussian { sigma: f64, seed: u64 },
    /// `peak` in `(0, 255]`: a clean value `v` becomes `Poisson(v * peak) / peak`.
    Poisson { peak: f64, seed: u64 },
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec::Gaussian { sigma, seed }
    }

    pub fn poisson(peak: f64, seed: u64) -> Self {
        NoiseSpec::Poisson { peak, seed }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            NoiseSpec::Gaussian { seed, .. } | NoiseSpec::Poisson { seed, .. } => seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            NoiseSpec::Gaussian { sigma, .. } => NoiseSpec::Gaussian { sigma, seed },
            NoiseSpec::Poisson { peak, .. } => NoiseSpec::Poisson { peak, seed },
        }
    }

    /// Spec whose per-sample streams are fresh for training epoch `epoch`.
    pub fn for_epoch(self, epoch: u64) -> Self {
        let seed = derive_seed(self.seed(), &[EPOCH_TAG, epoch]);
        self.with_seed(seed)
    }

    /// Short label such as `gaussian50` or `poisson255`.
    pub fn label(&self) -> String {
        match *self {
            NoiseSpec::Gaussian { sigma, .. } => format!("gaussian{sigma}"),
            NoiseSpec::Poisson { peak, .. } => format!("poisson{peak}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            NoiseSpec::Gaussian { sigma, .. } => ("sigma", sigma),
            NoiseSpec::Poisson { peak, .. } => ("peak", peak),
        };
        if !(v > 0.0 && v <= 255.0) {
            return Err(config_err!("noise {name} must lie in (0, 255], got {v}"));
        }
        Ok(())
    }

    /// Seed used for sample `index`.
    pub fn sample_seed(&self, index: u64) -> u64 {
        derive_seed(self.seed(), &[index])
    }
}

/// `y = x + n`, `n ~ N(0, (sigma / 255)^2)` i.i.d. per element.
pub fn add_gaussian_noise(clean: &Image, sigma: f64, seed: u64) -> Result<Image> {
    NoiseSpec::gaussian(sigma, seed).validate()?;
    let mut rng = stream(seed, &[GAUSSIAN_TAG]);
    let mut noise = vec![0.0; clean.data().len()];
    fill_normal(&mut rng, sigma / 255.0, &mut noise);
    let mut out = clean.clone();
    for (v, n) in out.data_mut().iter_mut().zip(&noise) {
        *v += n;
    }
    Ok(out)
}

/// Each element becomes `k / peak` with `k ~ Poisson(clean * peak)`.
pub fn add_poisson_noise(clean: &Image, peak: f64, seed: u64) -> Result<Image> {
    NoiseSpec::poisson(peak, seed).validate()?;
    let mut rng = stream(seed, &[POISSON_TAG]);
    let mut out = clean.clone();
    for v in out.data_mut() {
        let lambda = v.max(0.0) * peak;
        *v = if lambda > 0.0 {
            let dist = Poisson::new(lambda).map_err(|e| config_err!("poisson rate {lambda}: {e}"))?;
            let k: f64 = dist.sample(&mut rng);
            k / peak
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Corrupt sample `index` with a seed derived from `(spec.seed, index)`.
pub fn corrupt(clean: &Image, spec: &NoiseSpec, index: u64) -> Result<Image> {
    let seed = spec.sample_seed(index);
    match *spec {
        NoiseSpec::Gaussian { sigma, .. } => add_gaussian_noise(clean, sigma, seed),
        NoiseSpec::Poisson { peak, .. } => add_poisson_noise(clean, peak, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(size: usize, v: f64) -> Image {
        Image::filled(size, size, v)
    }

    fn moments(a: &[f64]) -> (f64, f64) {
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn vanishing_sigma_is_identity() {
        let img = gray(8, 0.3);
        let y = add_gaussian_noise(&img, 1e-12, 5).unwrap();
        assert!(y.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn gaussian_residual_statistics() {
        let img = gray(256, 0.5);
        for sigma in [10.0, 25.0, 30.0, 50.0] {
            let y = add_gaussian_noise(&img, sigma, 42).unwrap();
            let resid: Vec<f64> = y.data().iter().zip(img.data()).map(|(a, b)| a - b).collect();
            let (mean, var) = moments(&resid);
            let s = sigma / 255.0;
            assert!(mean.abs() <= 3.0 * s / (resid.len() as f64).sqrt(), "sigma {sigma}: mean {mean}");
            assert!((var.sqrt() - s).abs() <= 0.01 * s, "sigma {sigma}: std {}", var.sqrt());
        }
    }

    #[test]
    fn gaussian_is_deterministic_per_seed_and_unclipped() {
        let img = gray(16, 0.98);
        let a = add_gaussian_noise(&img, 50.0, 1).unwrap();
        assert_eq!(a, add_gaussian_noise(&img, 50.0, 1).unwrap());
        assert_ne!(a, add_gaussian_noise(&img, 50.0, 2).unwrap());
        assert!(a.data().iter().any(|&v| v > 1.0));
    }

    #[test]
    fn poisson_statistics_and_lattice() {
        let img = gray(200, 0.5);
        let y = add_poisson_noise(&img, 255.0, 9).unwrap();
        let (mean, var) = moments(y.data());
        assert!((mean - 0.5).abs() <= 0.01 * 0.5, "mean {mean}");
        assert!((var - 0.5 / 255.0).abs() <= 0.05 * 0.5 / 255.0, "var {var}");
        for &v in y.data() {
            let k = v * 255.0;
            assert!(v >= 0.0 && (k - k.round()).abs() < 1e-9);
        }
        assert_eq!(y, add_poisson_noise(&img, 255.0, 9).unwrap());
    }

    #[test]
    fn poisson_of_zero_is_zero() {
        let y = add_poisson_noise(&gray(8, 0.0), 255.0, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = corrupt(&gray(8, 0.0), &NoiseSpec::poisson(100.0, 4), 7).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_parameters_are_config_errors() {
        let img = gray(4, 0.5);
        assert!(matches!(add_gaussian_noise(&img, 0.0, 0), Err(crate::Error::Config(_))));
        assert!(matches!(add_gaussian_noise(&img, -3.0, 0), Err(crate::Error::Config(_))));
        assert!(matches!(add_poisson_noise(&img, 0.0, 0), Err(crate::Error::Config(_))));
        assert!(NoiseSpec::gaussian(300.0, 0).validate().is_err());
    }

    #[test]
    fn corrupt_dispatches_with_derived_seed() {
        let img = gray(16, 0.4);
        let spec = NoiseSpec::gaussian(25.0, 77);
        let via = corrupt(&img, &spec, 3).unwrap();
        let direct = add_gaussian_noise(&img, 25.0, spec.sample_seed(3)).unwrap();
        assert_eq!(via, direct);
    }

    #[test]
    fn distinct_indices_give_uncorrelated_noise() {
        let img = gray(64, 0.5);
        let spec = NoiseSpec::gaussian(30.0, 5);
        let r = |i| -> Vec<f64> {
            let y = corrupt(&img, &spec, i).unwrap();
            y.data().iter().zip(img.data()).map(|(a, b)| a - b).collect()
        };
        let (a, b) = (r(0), r(1));
        let (ma, va) = moments(&a);
        let (mb, vb) = moments(&b);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.02, "rho {rho}");
    }

    #[test]
    fn epoch_specs_change_the_stream() {
        let spec = NoiseSpec::gaussian(25.0, 5);
        assert_ne!(spec.for_epoch(0).seed(), spec.for_epoch(1).seed());
        assert_eq!(spec.for_epoch(3), spec.for_epoch(3));
    }

    #[test]
    fn spec_serialization_is_strict() {
        let g: NoiseSpec = toml::from_str("kind = \"gaussian\"\nsigma = 50.0\nseed = 1\n").unwrap();
        assert_eq!(g, NoiseSpec::gaussian(50.0, 1));
        assert!(toml::from_str::<NoiseSpec>("kind = \"gaussian\"\npeak = 50.0\nseed = 1\n").is_err());
        assert!(toml::from_str::<NoiseSpec>("kind = \"poisson\"\npeak = 5.0\nsigma = 2.0\nseed = 1\n").is_err());
    }
}
