//! PNG / binary PGM images and kernel files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::kernel::BlurKernel;
use crate::scalar::Real;

/// How color inputs are mapped into buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    /// Collapse to one luminance channel.
    Luma,
    /// Keep the color channels (alpha dropped).
    Rgb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    Png,
    Pgm,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => Ok(FileFormat::Png),
            Some("pgm") | Some("pnm") => Ok(FileFormat::Pgm),
            other => Err(Error::UnsupportedFormat(format!("image extension {other:?}"))),
        }
    }
}

/// Loads an 8-bit PNG or PGM into `[0, 1]` intensities.
pub fn load_image<T: Real>(path: impl AsRef<Path>, mode: ColorMode) -> Result<ImageBuffer<T>> {
    let path = path.as_ref();
    let decoded = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let scale = |v: u8| T::lit(v as f64 / 255.0);
    let img = match decoded {
        DynamicImage::ImageLuma8(buf) => ImageBuffer::new(w, h, buf.into_raw().into_iter().map(scale).collect())?,
        DynamicImage::ImageLumaA8(buf) => ImageBuffer::new(w, h, buf.into_raw().chunks_exact(2).map(|p| scale(p[0])).collect())?,
        DynamicImage::ImageRgb8(buf) => ImageBuffer::with_channels(w, h, 3, buf.into_raw().into_iter().map(scale).collect())?,
        DynamicImage::ImageRgba8(buf) => ImageBuffer::with_channels(
            w,
            h,
            3,
            buf.into_raw().chunks_exact(4).flat_map(|p| [scale(p[0]), scale(p[1]), scale(p[2])]).collect(),
        )?,
        other => return Err(Error::UnsupportedFormat(format!("unsupported bit depth ({:?}) in {}", other.color(), path.display()))),
    };
    Ok(match mode {
        ColorMode::Luma => img.to_luma(),
        ColorMode::Rgb => img,
    })
}

fn quantize<T: Real>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an image, clamping to `[0, 1]` and quantizing to 8 bits.
///
/// PGM output is always single channel; color buffers are converted to luminance.
pub fn save_image<T: Real>(path: impl AsRef<Path>, img: &ImageBuffer<T>) -> Result<()> {
    let path = path.as_ref();
    let format = FileFormat::from_path(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    match format {
        FileFormat::Png => {
            let color = match img.channels() {
                1 => ExtendedColorType::L8,
                2 => ExtendedColorType::La8,
                3 => ExtendedColorType::Rgb8,
                4 => ExtendedColorType::Rgba8,
                c => return Err(Error::UnsupportedFormat(format!("{c} channels"))),
            };
            let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
            image::save_buffer_with_format(path, &bytes, w, h, color, ImageFormat::Png)?;
        }
        FileFormat::Pgm => {
            let luma = img.to_luma();
            let bytes: Vec<u8> = luma.data().iter().map(|&v| quantize(v)).collect();
            let mut out = BufWriter::new(fs::File::create(path)?);
            PnmEncoder::new(&mut out).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary)).write_image(
                &bytes,
                w,
                h,
                ExtendedColorType::L8,
            )?;
            out.flush()?;
        }
    }
    Ok(())
}

/// Reads a kernel from plain text (`.txt`) or an image (peak-scaled, renormalized).
pub fn load_kernel<T: Real>(path: impl AsRef<Path>) -> Result<BlurKernel<T>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") | Some("pgm") | Some("pnm") => {
            let img: ImageBuffer<T> = load_image(path, ColorMode::Luma)?;
            if img.width() != img.height() {
                return Err(Error::InvalidKernel(format!("kernel image {}x{} is not square", img.width(), img.height())));
            }
            BlurKernel::normalized(img.width(), img.into_data())
        }
        _ => BlurKernel::from_text(&fs::read_to_string(path)?),
    }
}

/// Writes a kernel as plain text, or as an image scaled so the peak is white.
pub fn save_kernel<T: Real>(path: impl AsRef<Path>, k: &BlurKernel<T>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") | Some("pgm") | Some("pnm") => {
            let peak = k.weights().iter().copied().fold(T::zero(), T::max);
            let img = k.as_image().map(|v| v / peak);
            save_image(path, &img)
        }
        _ => Ok(fs::write(path, k.to_text())?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::<f64>::from_fn(64, 64, |x, y| (x + y) as f64 / 126.0);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            save_image(&p, &img).unwrap();
            let back: ImageBuffer<f64> = load_image(&p, ColorMode::Luma).unwrap();
            let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1.0 / 255.0, "{name}: {err}");
        }
    }

    #[test]
    fn rgb_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let rgb = ImageBuffer::<f64>::with_channels(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        save_image(&p, &rgb).unwrap();
        let luma: ImageBuffer<f64> = load_image(&p, ColorMode::Luma).unwrap();
        assert_eq!(luma.channels(), 1);
        assert!(luma.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let kept: ImageBuffer<f64> = load_image(&p, ColorMode::Rgb).unwrap();
        assert_eq!(kept.channels(), 3);
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        save_image(&p, &ImageBuffer::<f64>::filled(32, 32, 0.5)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image::<f64>(&p, ColorMode::Luma).is_err());
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let raw: Vec<u8> = vec![0, 1, 2, 3, 4, 5, 6, 7];
        image::save_buffer_with_format(&p, &raw, 2, 2, ExtendedColorType::L16, ImageFormat::Png).unwrap();
        let err = load_image::<f64>(&p, ColorMode::Luma).unwrap_err();
        assert!(err.to_string().contains("bit depth"));
    }

    #[test]
    fn kernel_files() {
        let dir = tempfile::tempdir().unwrap();
        let k = BlurKernel::<f64>::gaussian(7, 1.3);
        let txt = dir.path().join("k.txt");
        save_kernel(&txt, &k).unwrap();
        let back: BlurKernel<f64> = load_kernel(&txt).unwrap();
        assert!(k.weights().iter().zip(back.weights()).all(|(a, b)| (a - b).abs() < 1e-12));
        let pgm = dir.path().join("k.pgm");
        save_kernel(&pgm, &k).unwrap();
        let img_back: BlurKernel<f64> = load_kernel(&pgm).unwrap();
        assert_eq!(img_back.size(), 7);
        assert!(k.weights().iter().zip(img_back.weights()).all(|(a, b)| (a - b).abs() < 5e-3));
    }
}
