use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{data_err, Error, Result};

use super::{Image, LabelMap};

/// Class colours for segmentation dumps, indexed by class id.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
];
const IGNORE_COLOR: [u8; 3] = [255, 255, 255];

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// 8-bit value for an intensity: clamp to `[0, 1]`, then round half up.
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Decode an 8-bit RGB PNG, mapping byte `b` to `b / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynimg = open(path)?;
    if !matches!(dynimg, image::DynamicImage::ImageRgb8(_)) {
        return Err(data_err!("{} is not an 8-bit RGB image", path.display()));
    }
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::filled(h, w, 0.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

/// Encode as an 8-bit RGB PNG. Values are clamped to `[0, 1]` first.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = Rgb([0, 1, 2].map(|c| quantize(img.get(c, y, x))));
    }
    write(|p| out.save(p), path.as_ref())
}

pub fn load_label(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let dynimg = open(path)?;
    if !matches!(dynimg, image::DynamicImage::ImageLuma8(_)) {
        return Err(data_err!("{} is not an 8-bit grayscale label map", path.display()));
    }
    let gray = dynimg.to_luma8();
    LabelMap::new(
        gray.height() as usize,
        gray.width() as usize,
        gray.into_raw(),
    )
}

pub fn save_label(label: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let out = GrayImage::from_fn(label.width() as u32, label.height() as u32, |x, y| {
        Luma([label.data()[y as usize * label.width() + x as usize]])
    });
    write(|p| out.save(p), path.as_ref())
}

/// Colour-coded label map using [`PALETTE`]; ignored pixels are white.
pub fn save_label_colored(label: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let out = RgbImage::from_fn(label.width() as u32, label.height() as u32, |x, y| {
        let l = label.data()[y as usize * label.width() + x as usize] as usize;
        Rgb(PALETTE.get(l).copied().unwrap_or(IGNORE_COLOR))
    });
    write(|p| out.save(p), path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_endpoints_and_rounding() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(7.0), 255);
        for b in 0..=255u8 {
            assert_eq!(quantize(b as f64 / 255.0), b);
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(5, 7, 0.0);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let p = dir.path().join("nested/a.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back, img);
        let bytes = std::fs::read(&p).unwrap();
        save_image(&back, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);

        let l = LabelMap::new(3, 2, vec![0, 1, 2, 3, 255, 0]).unwrap();
        let lp = dir.path().join("l.png");
        save_label(&l, &lp).unwrap();
        assert_eq!(load_label(&lp).unwrap(), l);
        assert!(load_image(&lp).is_err());
    }

    #[test]
    fn malformed_files_report_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not a png").unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("junk.png"), "{err}");
        let err = load_image(dir.path().join("missing.png")).unwrap_err().to_string();
        assert!(err.contains("missing.png"), "{err}");
    }
}
