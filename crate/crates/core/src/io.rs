//! Raw little-endian file formats and PNG export.
//!
//! Every raw file starts with a 16-byte header: 4-byte magic, `u32` width,
//! `u32` height and a `u32` element flag (0 = f32, 1 = f64, 2 = u32 counts).
//! Sinogram and count files append the geometry as JSON text, preceded by its
//! byte length as a `u32`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{format_err, invalid, Result};
use crate::geometry::{ScanGeometry, Sinogram};
use crate::image::ImageGrid;
use crate::real::{Precision, Real};

pub const IMAGE_MAGIC: &[u8; 4] = b"TLIM";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"TLSN";
pub const COUNTS_MAGIC: &[u8; 4] = b"TLCT";
pub(crate) const COUNTS_FLAG: u32 = 2;

pub(crate) fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], width: u32, height: u32, flag: u32) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&flag.to_le_bytes());
}

/// Cursor over a byte buffer that turns short reads into format errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len);
        match end {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => format_err(format!(
                "truncated file: wanted {len} bytes at offset {}, have {}",
                self.pos,
                self.buf.len()
            )),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn header(&mut self, magic: &[u8; 4]) -> Result<(usize, usize, u32)> {
        let m = self.take(4)?;
        if m != magic {
            return format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            ));
        }
        let w = self.u32()? as usize;
        let h = self.u32()? as usize;
        let flag = self.u32()?;
        Ok((w, h, flag))
    }

    /// Reads `count` floats stored with `flag` precision, converting to `T`.
    pub(crate) fn floats<T: Real>(&mut self, count: usize, flag: u32) -> Result<Vec<T>> {
        let Some(prec) = Precision::from_flag(flag) else {
            return format_err(format!("unknown precision flag {flag}"));
        };
        let width = prec.byte_width();
        let bytes = self.take(count.checked_mul(width).ok_or_else(|| {
            crate::error::Error::Format("element count overflows".into())
        })?)?;
        Ok(bytes
            .chunks_exact(width)
            .map(|c| match prec {
                Precision::F32 => T::of(f32::read_le(c) as f64),
                Precision::F64 if T::PRECISION == Precision::F64 => T::read_le(c),
                Precision::F64 => T::of(f64::read_le(c)),
            })
            .collect())
    }

    pub(crate) fn json_block<V: serde::de::DeserializeOwned>(&mut self) -> Result<V> {
        let len = self.u32()? as usize;
        let text = self.take(len)?;
        serde_json::from_slice(text).or_else(|e| format_err(format!("bad JSON block: {e}")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return format_err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub(crate) fn push_json_block<V: serde::Serialize>(out: &mut Vec<u8>, value: &V) {
    let text = serde_json::to_vec(value).expect("serializable");
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
}

pub fn encode_image<T: Real>(image: &ImageGrid<T>) -> Vec<u8> {
    let n = image.size() as u32;
    let mut out = Vec::with_capacity(16 + image.data().len() * T::PRECISION.byte_width());
    write_header(&mut out, IMAGE_MAGIC, n, n, T::PRECISION.flag());
    for &v in image.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes an image file. The pixel size is not stored in the header and is
/// supplied by the caller.
pub fn decode_image<T: Real>(bytes: &[u8], pixel_size: f64) -> Result<ImageGrid<T>> {
    let mut r = Reader::new(bytes);
    let (w, h, flag) = r.header(IMAGE_MAGIC)?;
    if w != h {
        return format_err(format!("image header is not square: {w}x{h}"));
    }
    if w == 0 {
        return format_err("image header has zero size");
    }
    let data = r.floats::<T>(w * h, flag)?;
    r.finish()?;
    ImageGrid::new(w, h, pixel_size, data).map_err(|e| crate::error::Error::Format(e.to_string()))
}

pub fn write_image_raw<T: Real>(image: &ImageGrid<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_image(image))?;
    Ok(())
}

/// Reads a raw image with unit pixel size. Use [`read_image_raw_with_pixel_size`]
/// when the physical spacing matters.
pub fn read_image_raw<T: Real>(path: impl AsRef<Path>) -> Result<ImageGrid<T>> {
    read_image_raw_with_pixel_size(path, 1.0)
}

pub fn read_image_raw_with_pixel_size<T: Real>(
    path: impl AsRef<Path>,
    pixel_size: f64,
) -> Result<ImageGrid<T>> {
    decode_image(&fs::read(path)?, pixel_size)
}

pub fn encode_sinogram<T: Real>(sino: &Sinogram<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(
        &mut out,
        SINOGRAM_MAGIC,
        sino.n_detectors() as u32,
        sino.n_angles() as u32,
        T::PRECISION.flag(),
    );
    for &v in sino.data() {
        v.write_le(&mut out);
    }
    push_json_block(&mut out, sino.geometry());
    out
}

pub fn decode_sinogram<T: Real>(bytes: &[u8]) -> Result<Sinogram<T>> {
    let mut r = Reader::new(bytes);
    let (w, h, flag) = r.header(SINOGRAM_MAGIC)?;
    let data = r.floats::<T>(w * h, flag)?;
    let geometry: ScanGeometry = r.json_block()?;
    r.finish()?;
    if geometry.n_detectors() != w || geometry.n_angles() != h {
        return format_err("sinogram header disagrees with its geometry block");
    }
    Sinogram::new(geometry, data).map_err(|e| crate::error::Error::Format(e.to_string()))
}

pub fn write_sinogram_raw<T: Real>(sino: &Sinogram<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_sinogram(sino))?;
    Ok(())
}

pub fn read_sinogram_raw<T: Real>(path: impl AsRef<Path>) -> Result<Sinogram<T>> {
    decode_sinogram(&fs::read(path)?)
}

/// Maps `[display_min, display_max]` linearly onto 0..=255 (round half up,
/// clamped outside the window) and writes an 8-bit grayscale PNG.
pub fn export_png<T: Real>(
    image: &ImageGrid<T>,
    path: impl AsRef<Path>,
    display_min: f64,
    display_max: f64,
) -> Result<()> {
    let pixels = to_gray8(image, display_min, display_max)?;
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    writer
        .finish()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(())
}

pub fn to_gray8<T: Real>(image: &ImageGrid<T>, display_min: f64, display_max: f64) -> Result<Vec<u8>> {
    if !(display_min < display_max) || !display_min.is_finite() || !display_max.is_finite() {
        return invalid(format!(
            "display window must satisfy min < max, got [{display_min}, {display_max}]"
        ));
    }
    let span = display_max - display_min;
    Ok(image
        .data()
        .iter()
        .map(|v| {
            let t = ((v.as_f64() - display_min) / span * 255.0).clamp(0.0, 255.0);
            (t + 0.5).floor().min(255.0) as u8
        })
        .collect())
}
