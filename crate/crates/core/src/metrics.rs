//! Denoising (PSNR, SSIM) and segmentation (mIoU, pixel accuracy, mean
//! accuracy) metrics.

use std::fmt::Write as _;

use crate::data::{Image, LabelMap, IMAGE_CHANNELS};
use crate::error::{data_err, usage_err, Result};
use crate::IGNORE_LABEL;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(1 / MSE)` over all elements of both images clamped to `[0, 1]`.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    same_shape(reference, test)?;
    let n = reference.data().len() as f64;
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a.clamp(0.0, 1.0) - b.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    })
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(usage_err!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalised 1-d Gaussian taps; the 2-d window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable 'valid' filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * wo + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM, 11x11 Gaussian window (std 1.5), dynamic range 1,
/// valid borders, averaged over the three channels.
pub fn ssim(reference: &Image, test: &Image) -> Result<f64> {
    same_shape(reference, test)?;
    let (h, w) = (reference.height(), reference.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(usage_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let taps = ssim_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..IMAGE_CHANNELS {
        let x: Vec<f64> = reference.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let y: Vec<f64> = test.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, exx, eyy, exy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / IMAGE_CHANNELS as f64)
}

/// `N x N` counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, prediction: &LabelMap, truth: &LabelMap) -> Result<()> {
        if prediction.data().len() != truth.data().len() {
            return Err(usage_err!("prediction and truth sizes differ"));
        }
        for (&p, &t) in prediction.data().iter().zip(truth.data()) {
            if t == IGNORE_LABEL {
                continue;
            }
            if p as usize >= self.n || t as usize >= self.n {
                return Err(data_err!(
                    "class id out of range: truth {t}, prediction {p}, classes {}",
                    self.n
                ));
            }
            self.counts[t as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(usage_err!("cannot merge {}-class and {}-class matrices", self.n, other.n));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row(&self, c: usize) -> u64 {
        (0..self.n).map(|j| self.get(c, j)).sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, c)).sum()
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(usage_err!("confusion matrix is empty"));
        }
        Ok(())
    }

    /// Mean IoU over classes that appear in truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        self.nonempty()?;
        let ious: Vec<f64> = (0..self.n)
            .filter_map(|c| {
                let d = self.get(c, c);
                let union = self.row(c) + self.col(c) - d;
                (union > 0).then(|| d as f64 / union as f64)
            })
            .collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        let trace: u64 = (0..self.n).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    /// Mean per-class recall over classes present in the truth.
    pub fn mean_accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        let accs: Vec<f64> = (0..self.n)
            .filter_map(|c| {
                let r = self.row(c);
                (r > 0).then(|| self.get(c, c) as f64 / r as f64)
            })
            .collect();
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Aggregated metrics for one cascade unit over one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub unit_index: usize,
    pub sample_count: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

impl MetricsRecord {
    pub fn set_segmentation(&mut self, cm: &ConfusionMatrix) -> Result<()> {
        self.miou = Some(cm.miou()?);
        self.pixel_accuracy = Some(cm.pixel_accuracy()?);
        self.mean_accuracy = Some(cm.mean_accuracy()?);
        Ok(())
    }

    /// `(name, value)` pairs in a fixed order, skipping absent metrics.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("miou", self.miou),
            ("pixel_accuracy", self.pixel_accuracy),
            ("mean_accuracy", self.mean_accuracy),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

pub const CSV_HEADER: &str = "experiment,unit,metric,value";

/// Rows `experiment,unit,metric,value` with values to 6 decimal places.
pub fn csv_rows(experiment: &str, records: &[MetricsRecord]) -> String {
    let mut s = String::new();
    for r in records {
        for (name, v) in r.entries() {
            let _ = writeln!(s, "{experiment},{},{name},{v:.6}", r.unit_index);
        }
    }
    s
}

/// One parsed CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub experiment: String,
    pub unit: usize,
    pub metric: String,
    pub value: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.is_empty() || line == CSV_HEADER {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || data_err!("metrics line {}: malformed `{line}`", no + 1);
        if parts.len() != 4 {
            return Err(bad());
        }
        rows.push(MetricRow {
            experiment: parts[0].to_string(),
            unit: parts[1].parse().map_err(|_| bad())?,
            metric: parts[2].to_string(),
            value: parts[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = stream(seed, &[]);
        let mut img = Image::filled(size, size, 0.0);
        img.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        img
    }

    /// Smooth non-constant test image.
    fn smooth_image(size: usize) -> Image {
        let mut img = Image::filled(size, size, 0.0);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let v = 0.5
                        + 0.3 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos())
                        + 0.1 * ((x + y) as f64 * 0.05).sin();
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    /// Direct 2-d window SSIM, no separability.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let taps = ssim_taps();
        let (h, w) = (a.height(), a.width());
        let k = SSIM_WINDOW;
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let wt = taps[dy] * taps[dx];
                            let p = a.get(c, y0 + dy, x0 + dx).clamp(0.0, 1.0);
                            let q = b.get(c, y0 + dy, x0 + dx).clamp(0.0, 1.0);
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn psnr_cap_and_constant_offset() {
        let img = Image::filled(8, 8, 0.4);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
        let off = Image::filled(8, 8, 0.5);
        assert!((psnr(&img, &off).unwrap() - 20.0).abs() < 1e-6);
        assert!(psnr(&img, &Image::filled(4, 8, 0.5)).is_err());
    }

    #[test]
    fn psnr_matches_direct_summation() {
        let (a, b) = (random_image(16, 1), random_image(16, 2));
        let mut sum = 0.0;
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    sum += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
                }
            }
        }
        let want = 10.0 * (1.0 / (sum / (3.0 * 256.0))).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let base = Image::filled(8, 8, 0.2);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let p = psnr(&base, &Image::filled(8, 8, 0.2 + 0.03 * k as f64)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_oracle() {
        let img = smooth_image(24);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        let other = random_image(24, 3);
        assert!((ssim(&img, &other).unwrap() - ssim_oracle(&img, &other)).abs() < 1e-12);
        assert!(ssim(&Image::filled(10, 30, 0.1), &Image::filled(10, 30, 0.1)).is_err());
    }

    #[test]
    fn ssim_of_negative_contrast_is_low() {
        let img = smooth_image(32);
        let mut neg = img.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        let v = ssim(&img, &neg).unwrap();
        // golden value from the direct-window oracle
        assert!((v - ssim_oracle(&img, &neg)).abs() < 1e-12);
        assert!((v - -0.6966093).abs() < 1e-6, "{v}");
        assert!(v < 0.5);
    }

    #[test]
    fn ssim_falls_with_noise_level() {
        let img = smooth_image(32);
        let vals: Vec<f64> = [10.0, 25.0, 50.0]
            .iter()
            .map(|&s| ssim(&img, &crate::noise::add_gaussian_noise(&img, s, 8).unwrap()).unwrap())
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn ssim_is_invariant_to_joint_flips() {
        let (a, b) = (smooth_image(20), random_image(20, 4));
        let flip = |img: &Image| {
            let mut out = img.clone();
            for c in 0..3 {
                for y in 0..20 {
                    for x in 0..20 {
                        out.set(c, y, x, img.get(c, 19 - y, 19 - x));
                    }
                }
            }
            out
        };
        let d = ssim(&a, &b).unwrap() - ssim(&flip(&a), &flip(&b)).unwrap();
        assert!(d.abs() < 1e-12);
    }

    fn labels(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, v).unwrap()
    }

    #[test]
    fn confusion_basic_cases() {
        let truth = labels(2, 2, vec![0, 1, 1, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(0, 1), cm.get(1, 0)), (2, 2, 0, 0));
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.mean_accuracy().unwrap(), 1.0);

        let before = cm.clone();
        cm.accumulate(&truth, &labels(2, 2, vec![IGNORE_LABEL; 4])).unwrap();
        assert_eq!(cm, before);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(2, 2, vec![0; 4]), &truth).unwrap();
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.5);
        assert_eq!(cm.miou().unwrap(), 0.25);
        assert_eq!(cm.mean_accuracy().unwrap(), 0.5);
    }

    #[test]
    fn confusion_errors() {
        assert!(ConfusionMatrix::new(3).miou().is_err());
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&labels(1, 2, vec![0, 2]), &labels(1, 2, vec![0, 1])),
            Err(crate::Error::Data(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let r = MetricsRecord {
            unit_index: 2,
            sample_count: 4,
            psnr: Some(27.123_456_789),
            miou: Some(0.5),
            ..Default::default()
        };
        let text = csv_rows("run/test", &[r]);
        assert_eq!(text, "run/test,2,psnr,27.123457\nrun/test,2,miou,0.500000\n");
        let rows = parse_csv(&format!("{CSV_HEADER}\n{text}")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].unit, 2);
        assert!(parse_csv("a,b\n").is_err());
    }
}
