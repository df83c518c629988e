//! Images, label maps, probability maps and the synthetic dataset.

mod io;
mod manifest;
mod synth;

pub use io::{load_image, load_label, save_image, save_label, save_label_colored, PALETTE};
pub use manifest::{split_dataset, Dataset, DatasetManifest, ManifestEntry, Sample};
pub use synth::{generate_dataset, generate_sample, class_names, MAX_CLASSES};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;
use crate::IGNORE_LABEL;

/// Three-channel image stored planar (`[C, H, W]`), nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const IMAGE_CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != IMAGE_CHANNELS * height * width {
            return Err(config_err!(
                "image {height}x{width} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; IMAGE_CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Square window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Image {
        let mut out = Image::filled(size, size, 0.0);
        for c in 0..IMAGE_CHANNELS {
            for dy in 0..size {
                for dx in 0..size {
                    out.set(c, dy, dx, self.get(c, y + dy, x + dx));
                }
            }
        }
        out
    }

    /// Replicate or truncate the channels to `n`, giving an image-shaped
    /// stand-in for a probability map.
    pub fn as_condition(&self, n: usize) -> ProbMap {
        let plane = self.height * self.width;
        let data = (0..n)
            .flat_map(|c| {
                let src = c % IMAGE_CHANNELS;
                self.data[src * plane..(src + 1) * plane].iter().copied()
            })
            .collect();
        ProbMap {
            height: self.height,
            width: self.width,
            classes: n,
            data,
        }
    }
}

/// Per-pixel class ids in `0..N`, or [`IGNORE_LABEL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(config_err!(
                "label map {height}x{width} cannot hold {} values",
                data.len()
            ));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn crop(&self, y: usize, x: usize, size: usize) -> LabelMap {
        let data = (0..size)
            .flat_map(|dy| {
                let row = (y + dy) * self.width + x;
                self.data[row..row + size].iter().copied()
            })
            .collect();
        LabelMap {
            height: size,
            width: size,
            data,
        }
    }

    /// One-hot probability map; ignored pixels get an all-zero column.
    pub fn one_hot(&self, classes: usize) -> ProbMap {
        let plane = self.height * self.width;
        let mut data = vec![0.0; classes * plane];
        for (px, &l) in self.data.iter().enumerate() {
            if l != IGNORE_LABEL && (l as usize) < classes {
                data[l as usize * plane + px] = 1.0;
            }
        }
        ProbMap {
            height: self.height,
            width: self.width,
            classes,
            data,
        }
    }
}

/// Per-pixel class distribution stored planar (`[N, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * height * width || classes == 0 {
            return Err(config_err!(
                "probability map {classes}x{height}x{width} cannot hold {} values",
                data.len()
            ));
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Most probable class per pixel; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|px| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * plane + px] > self.data[best * plane + px] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn crop(&self, y: usize, x: usize, size: usize) -> ProbMap {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.classes * size * size);
        for c in 0..self.classes {
            for dy in 0..size {
                let row = c * plane + (y + dy) * self.width + x;
                data.extend_from_slice(&self.data[row..row + size]);
            }
        }
        ProbMap {
            height: size,
            width: size,
            classes: self.classes,
            data,
        }
    }
}

/// Stack images into a `[B, 3, H, W]` tensor.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut count = 0;
    for img in images {
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(config_err!("cannot batch images of different sizes"))
            }
            _ => {}
        }
        data.extend_from_slice(&img.data);
        count += 1;
    }
    let (h, w) = dims.ok_or_else(|| config_err!("cannot batch zero images"))?;
    Tensor::new(vec![count, IMAGE_CHANNELS, h, w], data)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let [b, c, h, w] = t.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(config_err!("expected {IMAGE_CHANNELS} image channels, got {c}"));
    }
    Ok((0..b)
        .map(|i| Image {
            height: h,
            width: w,
            data: t.data()[i * c * h * w..(i + 1) * c * h * w].to_vec(),
        })
        .collect())
}

pub fn probs_to_tensor<'a>(maps: impl IntoIterator<Item = &'a ProbMap>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut count = 0;
    for m in maps {
        match dims {
            None => dims = Some((m.classes, m.height, m.width)),
            Some(d) if d != (m.classes, m.height, m.width) => {
                return Err(config_err!("cannot batch probability maps of different shapes"))
            }
            _ => {}
        }
        data.extend_from_slice(&m.data);
        count += 1;
    }
    let (n, h, w) = dims.ok_or_else(|| config_err!("cannot batch zero maps"))?;
    Tensor::new(vec![count, n, h, w], data)
}

pub fn tensor_to_probs(t: &Tensor) -> Result<Vec<ProbMap>> {
    let [b, n, h, w] = t.dims4()?;
    Ok((0..b)
        .map(|i| ProbMap {
            height: h,
            width: w,
            classes: n,
            data: t.data()[i * n * h * w..(i + 1) * n * h * w].to_vec(),
        })
        .collect())
}

/// Concatenated `[B, H, W]` labels for the cross-entropy loss.
pub fn labels_to_vec<'a>(labels: impl IntoIterator<Item = &'a LabelMap>) -> Vec<u8> {
    labels.into_iter().flat_map(|l| l.data.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_towards_lowest_class() {
        let p = ProbMap::new(1, 3, 3, vec![0.4, 0.2, 0.1, 0.4, 0.3, 0.45, 0.2, 0.5, 0.45]).unwrap();
        assert_eq!(p.argmax().data(), &[0, 2, 1]);
    }

    #[test]
    fn one_hot_round_trips_through_argmax() {
        let l = LabelMap::new(2, 2, vec![0, 3, 1, 2]).unwrap();
        let p = l.one_hot(4);
        assert_eq!(p.argmax(), l);
        let per_pixel: Vec<f64> = (0..4).map(|px| (0..4).map(|c| p.data()[c * 4 + px]).sum()).collect();
        assert_eq!(per_pixel, vec![1.0; 4]);
    }

    #[test]
    fn image_condition_replicates_channels() {
        let img = Image::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let c = img.as_condition(4);
        assert_eq!(c.data(), &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.1, 0.2]);
        assert_eq!(img.as_condition(2).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn batching_round_trips() {
        let a = Image::filled(2, 3, 0.25);
        let b = Image::filled(2, 3, 0.75);
        let t = images_to_tensor([&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        assert_eq!(tensor_to_images(&t).unwrap(), vec![a, b]);
        assert!(images_to_tensor([&Image::filled(2, 3, 0.0), &Image::filled(3, 3, 0.0)]).is_err());
    }

    #[test]
    fn crops_select_the_window() {
        let mut img = Image::filled(4, 4, 0.0);
        img.set(1, 2, 3, 0.9);
        let c = img.crop(1, 2, 2);
        assert_eq!(c.get(1, 1, 1), 0.9);
        let l = LabelMap::new(4, 4, (0..16).collect()).unwrap();
        assert_eq!(l.crop(1, 2, 2).data(), &[6, 7, 10, 11]);
    }
}
