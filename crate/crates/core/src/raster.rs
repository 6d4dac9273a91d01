//! Floating-point RGB images, boolean masks and their on-disk encodings
//! (binary PPM/PGM by default, PNG for viewing).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `[0, 1]`.
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Image {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: [f64; 3]) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.pixels.iter().flat_map(|p| p.map(quantize)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer sized from image")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img
                .pixels()
                .map(|p| [p[0], p[1], p[2]].map(|v| v as f64 / 255.0))
                .collect(),
        }
    }

    /// Same image after an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(&self.to_rgb8())
    }

    /// Writes binary PPM, or PNG when the extension is `.png`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb8();
        if has_extension(path, "png") {
            return rgb
                .save_with_format(path, ImageFormat::Png)
                .map_err(|e| encode_error(path, e));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(rgb.as_raw(), rgb.width(), rgb.height(), ExtendedColorType::Rgb8)
            .map_err(|e| encode_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = open(path)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn encode_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Corrupt {
            path: path.into(),
            detail: other.to_string(),
        },
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let file = File::open(path).map_err(|e| Error::MissingInput {
        path: path.into(),
        detail: e.to_string(),
    })?;
    let format = if has_extension(path, "png") { ImageFormat::Png } else { ImageFormat::Pnm };
    image::load(BufReader::new(file), format).map_err(|e| encode_error(path, e))
}

/// Boolean per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_gray8(&self) -> GrayImage {
        let bytes = self.values.iter().map(|&v| if v { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer sized from mask")
    }

    /// Writes binary PGM (white = true).
    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray8(), path)
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let img = open(path)?.to_luma8();
        Ok(Mask {
            width: img.width() as usize,
            height: img.height() as usize,
            values: img.pixels().map(|p| p[0] >= 128).collect(),
        })
    }
}

/// Writes a grayscale image in `[0, 1]` as binary PGM (or PNG by extension).
pub fn save_gray_values(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let bytes = values.iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch(format!("{} values for {width}x{height}", values.len())))?;
    save_gray(&img, path)
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    if has_extension(path, "png") {
        return img.save_with_format(path, ImageFormat::Png).map_err(|e| encode_error(path, e));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| encode_error(path, e))
}
