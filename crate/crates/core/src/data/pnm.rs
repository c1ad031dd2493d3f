//! 8-bit PGM/PPM reading and writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

/// Grayscale image scaled to `[0, 1]`.
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let g = img.to_luma8();
    Ok(Gray { width: g.width() as usize, height: g.height() as usize, pixels: g.as_raw().iter().map(|&b| b as f32 / 255.0).collect() })
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, width: usize, height: usize, bytes: &[u8], subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    PnmEncoder::new(&mut w).with_subtype(subtype).write_image(bytes, width as u32, height as u32, color)?;
    w.flush()?;
    Ok(())
}

/// Binary P5.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::Dimension(format!("PGM buffer does not match {width}x{height}")));
    }
    encode(path, width, height, &bytes, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

pub fn write_pgm_f32(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    write_pgm(path, width, height, pixels.iter().map(|&v| to_u8(v)).collect())
}

/// Binary P6.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Dimension(format!("PPM buffer does not match {width}x{height}")));
    }
    encode(path, width, height, &rgb, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}
