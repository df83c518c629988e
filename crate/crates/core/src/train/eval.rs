use std::path::Path;

use rayon::prelude::*;

use crate::cascade::{BlockVariant, Cascade};
use crate::data::{
    images_to_tensor, probs_to_tensor, save_image, save_label_colored, tensor_to_images, tensor_to_probs, Image, Sample,
};
use crate::error::{usage_err, Error, Result};
use crate::metrics::{psnr, ssim, ConfusionMatrix, MetricsRecord};
use crate::noise::{corrupt, NoiseSpec};

#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub batch_size: usize,
    /// Report PSNR/SSIM of denoised outputs (and of the noisy input as unit 0).
    pub denoising: bool,
    pub segmentation: bool,
    /// Write `<index>_u<unit>_<kind>.png` files here.
    pub dump_dir: Option<&'a Path>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            batch_size: 8,
            denoising: true,
            segmentation: true,
            dump_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Unit 0: the network input itself.
    pub input: MetricsRecord,
    /// One record per block, unit index `1..=n`.
    pub units: Vec<MetricsRecord>,
}

impl EvalReport {
    /// Input record (when it carries metrics) followed by the units.
    pub fn records(&self) -> Vec<MetricsRecord> {
        let mut v = Vec::with_capacity(self.units.len() + 1);
        if !self.input.entries().is_empty() {
            v.push(self.input.clone());
        }
        v.extend(self.units.iter().cloned());
        v
    }

    pub fn unit(&self, index: usize) -> Option<&MetricsRecord> {
        self.units.iter().find(|r| r.unit_index == index)
    }
}

/// Per-unit sums over one batch.
struct Partial {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    has_den: Vec<bool>,
    cms: Vec<Option<ConfusionMatrix>>,
}

/// Run the whole cascade on `samples` (corrupted by `noise`, or clean when
/// `None`) and aggregate per-unit metrics. PSNR and SSIM are averaged over
/// images; segmentation scores come from one confusion matrix per unit.
///
/// Batches run in parallel; their partial sums are merged in batch order,
/// so results do not depend on the thread count.
pub fn evaluate(cascade: &Cascade, samples: &[Sample], noise: Option<&NoiseSpec>, classes: usize, opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(usage_err!("nothing to evaluate"));
    }
    if let Some(dir) = opts.dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = cascade.len();
    let partials: Vec<Partial> = samples
        .par_chunks(opts.batch_size.max(1))
        .map(|chunk| eval_batch(cascade, chunk, noise, classes, opts))
        .collect::<Result<_>>()?;

    let mut psnr_sum = vec![0.0; n + 1];
    let mut ssim_sum = vec![0.0; n + 1];
    let mut has_den = vec![false; n + 1];
    let mut cms: Vec<Option<ConfusionMatrix>> = vec![None; n + 1];
    for p in partials {
        for u in 0..=n {
            psnr_sum[u] += p.psnr[u];
            ssim_sum[u] += p.ssim[u];
            has_den[u] |= p.has_den[u];
            if let Some(cm) = &p.cms[u] {
                match &mut cms[u] {
                    Some(total) => total.merge(cm)?,
                    slot => *slot = Some(cm.clone()),
                }
            }
        }
    }
    let count = samples.len() as f64;
    let record = |u: usize| -> Result<MetricsRecord> {
        let mut r = MetricsRecord {
            unit_index: u,
            sample_count: samples.len(),
            ..Default::default()
        };
        if has_den[u] {
            r.psnr = Some(psnr_sum[u] / count);
            r.ssim = Some(ssim_sum[u] / count);
        }
        if let Some(cm) = &cms[u] {
            r.set_segmentation(cm)?;
        }
        Ok(r)
    };
    Ok(EvalReport {
        input: record(0)?,
        units: (1..=n).map(record).collect::<Result<_>>()?,
    })
}

fn eval_batch(cascade: &Cascade, chunk: &[Sample], noise: Option<&NoiseSpec>, classes: usize, opts: &EvalOptions) -> Result<Partial> {
    let n = cascade.len();
    let mut p = Partial {
        psnr: vec![0.0; n + 1],
        ssim: vec![0.0; n + 1],
        has_den: vec![false; n + 1],
        cms: vec![None; n + 1],
    };
    let inputs: Vec<Image> = chunk
        .iter()
        .map(|s| match noise {
            Some(n) => corrupt(&s.clean, n, s.index),
            None => Ok(s.clean.clone()),
        })
        .collect::<Result<_>>()?;
    let y = images_to_tensor(&inputs)?;
    let gt = if cascade.blocks.iter().any(|b| b.variant == BlockVariant::GtCondition) {
        let maps: Vec<_> = chunk.iter().map(|s| s.label.one_hot(classes)).collect();
        Some(probs_to_tensor(&maps)?)
    } else {
        None
    };
    let out = cascade.forward(&y, gt.as_ref(), None)?;
    for (k, s) in chunk.iter().enumerate() {
        if opts.denoising && noise.is_some() {
            p.psnr[0] += psnr(&s.clean, &inputs[k])?;
            p.ssim[0] += ssim(&s.clean, &inputs[k])?;
            p.has_den[0] = true;
        }
        if let Some(dir) = opts.dump_dir {
            save_image(&inputs[k], dir.join(format!("{:05}_u0_noisy.png", s.index)))?;
        }
    }
    for u in 0..n {
        if let Some(d) = &out.denoised[u] {
            let imgs = tensor_to_images(d)?;
            for (k, s) in chunk.iter().enumerate() {
                if opts.denoising {
                    p.psnr[u + 1] += psnr(&s.clean, &imgs[k])?;
                    p.ssim[u + 1] += ssim(&s.clean, &imgs[k])?;
                    p.has_den[u + 1] = true;
                }
                if let Some(dir) = opts.dump_dir {
                    save_image(&imgs[k], dir.join(format!("{:05}_u{}_denoised.png", s.index, u + 1)))?;
                }
            }
        }
        if let Some(probs) = &out.probs[u] {
            for (k, m) in tensor_to_probs(probs)?.iter().enumerate() {
                let s = &chunk[k];
                let pred = m.argmax();
                if opts.segmentation {
                    p.cms[u + 1]
                        .get_or_insert_with(|| ConfusionMatrix::new(classes))
                        .accumulate(&pred, &s.label)?;
                }
                if let Some(dir) = opts.dump_dir {
                    save_label_colored(&pred, dir.join(format!("{:05}_u{}_seg.png", s.index, u + 1)))?;
                }
            }
        }
    }
    Ok(p)
}
