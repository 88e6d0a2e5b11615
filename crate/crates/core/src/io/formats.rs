//! Binary feature and depth maps, and 8-bit PNG images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::losses::FeatureMap;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;
pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";

/// Little-endian cursor that reports the byte offset of any failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated {what}: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn dims(v: u32, offset: usize, name: &str) -> Result<usize> {
    if v == 0 {
        return Err(Error::Format {
            offset: offset as u64,
            message: format!("{name} must be positive"),
        });
    }
    Ok(v as usize)
}

pub fn encode_feature_map(f: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + f.data().len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    for v in [
        FMAP_VERSION,
        f.height() as u32,
        f.width() as u32,
        f.channels() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(f.normalized as u8);
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(FMAP_MAGIC)?;
    let version = r.u32("version")?;
    if version != FMAP_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let h = dims(r.u32("height")?, 8, "height")?;
    let w = dims(r.u32("width")?, 12, "width")?;
    let c = dims(r.u32("channels")?, 16, "channels")?;
    let flag = r.take(1, "flag")?[0];
    if flag > 1 {
        return Err(Error::Format {
            offset: 20,
            message: format!("normalized flag must be 0 or 1, got {flag}"),
        });
    }
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format {
            offset: 8,
            message: "dimensions overflow".into(),
        })?;
    let data = r.f32s(count, "feature data")?;
    r.finish()?;
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: (21 + 4 * i) as u64,
            message: "non-finite feature value".into(),
        });
    }
    FeatureMap::new(w, h, c, data, flag == 1)
}

pub fn encode_depth_map(d: &DepthMap) -> Result<Vec<u8>> {
    if d.channels() != 1 {
        return Err(Error::shape("single-channel depth", d.shape_string()));
    }
    let mut out = Vec::with_capacity(12 + d.len() * 4);
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&(d.height() as u32).to_le_bytes());
    out.extend_from_slice(&(d.width() as u32).to_le_bytes());
    for v in d.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth_map(bytes: &[u8]) -> Result<DepthMap> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(DMAP_MAGIC)?;
    let h = dims(r.u32("height")?, 4, "height")?;
    let w = dims(r.u32("width")?, 8, "width")?;
    let count = h.checked_mul(w).ok_or_else(|| Error::Format {
        offset: 4,
        message: "dimensions overflow".into(),
    })?;
    let data = r.f32s(count, "depth data")?;
    r.finish()?;
    Image::from_vec(
        w,
        h,
        1,
        data.into_iter()
            .map(|v| if v.is_finite() { v as f64 } else { 0.0 })
            .collect(),
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    decode_feature_map(&read_file(path)?)
}

pub fn save_feature_map(path: &Path, f: &FeatureMap) -> Result<()> {
    write_file(path, &encode_feature_map(f))
}

pub fn load_depth_map(path: &Path) -> Result<DepthMap> {
    decode_depth_map(&read_file(path)?)
}

pub fn save_depth_map(path: &Path, d: &DepthMap) -> Result<()> {
    write_file(path, &encode_depth_map(d)?)
}

/// Loads an 8-bit grey, RGB or RGBA PNG as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Format {
                offset: 0,
                message: format!("{}: unsupported colour type {other:?}", path.display()),
            })
        }
    };
    let bytes = &buf[..info.buffer_size()];
    Ok(Image::from_fn(w, h, 3, |x, y, c| {
        let base = (y * w + x) * stride;
        let v = if stride < 3 {
            bytes[base]
        } else {
            bytes[base + c]
        };
        v as f64 / 255.0
    }))
}

/// Writes a 1- or 3-channel image, clamped to `[0, 1]` and quantized to 8 bits.
pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::InvalidInput(format!(
                "cannot write a {c}-channel image as PNG"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        image.width() as u32,
        image.height() as u32,
    );
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let other = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(other)?;
    writer.write_image_data(&quantize(image)).map_err(other)?;
    writer.finish().map_err(other)?;
    Ok(())
}

pub fn quantize(image: &Image) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// The image as it reads back after an 8-bit PNG round trip.
pub fn quantized(image: &Image) -> Image {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Writes `text` and flushes so that the file is complete when this returns.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}
