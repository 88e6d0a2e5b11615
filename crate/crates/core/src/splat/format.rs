//! Binary Gaussian set files: magic, version, count, then 14 little-endian
//! `f32` per Gaussian in [`Gaussian::to_array`] order.

use std::io::{Read, Write};

use super::{Gaussian, GaussianSet};
use crate::error::{Error, Result};

pub const GSPT_MAGIC: &[u8; 4] = b"GSPT";
pub const GSPT_VERSION: u32 = 1;

pub fn write_gaussians(set: &GaussianSet, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(GSPT_MAGIC)?;
    out.write_all(&GSPT_VERSION.to_le_bytes())?;
    out.write_all(&(set.len() as u32).to_le_bytes())?;
    for g in set.iter() {
        for v in g.to_array() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_gaussians(input: &mut impl Read) -> Result<GaussianSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })?;
    if bytes.len() < 12 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated header".into(),
        });
    }
    if &bytes[0..4] != GSPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", &bytes[0..4]),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GSPT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + count * 14 * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "expected {expected} bytes for {count} gaussians, found {}",
                bytes.len()
            ),
        });
    }
    let mut gaussians = Vec::with_capacity(count);
    for (i, chunk) in bytes[12..].chunks_exact(56).enumerate() {
        let mut a = [0.0; 14];
        for (j, v) in a.iter_mut().enumerate() {
            let f = f32::from_le_bytes(chunk[4 * j..4 * j + 4].try_into().unwrap());
            if !f.is_finite() {
                return Err(Error::Format {
                    offset: (12 + i * 56 + 4 * j) as u64,
                    message: "non-finite value".into(),
                });
            }
            *v = f as f64;
        }
        gaussians.push(Gaussian::from_array(&a));
    }
    Ok(GaussianSet::new(gaussians))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn round_trip_at_f32_precision() {
        let set = GaussianSet::new(vec![
            Gaussian::isotropic(
                Vector3::new(0.1, -0.2, 3.0),
                0.05,
                0.3,
                Vector3::new(0.25, 0.5, 1.0),
            ),
            Gaussian::isotropic(
                Vector3::new(1.0, 2.0, 4.0),
                0.5,
                0.9,
                Vector3::new(0.0, 0.75, 0.125),
            ),
        ]);
        let mut buf = Vec::new();
        write_gaussians(&set, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 2 * 56);
        let back = read_gaussians(&mut buf.as_slice()).unwrap();
        for (a, b) in set.iter().zip(back.iter()) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(
            read_gaussians(&mut &b"GSP"[..]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_gaussians(&mut &b"XXXX\x01\0\0\0\0\0\0\0"[..]),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            read_gaussians(&mut &b"GSPT\x02\0\0\0\0\0\0\0"[..]),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(matches!(
            read_gaussians(&mut &b"GSPT\x01\0\0\0\x01\0\0\0"[..]),
            Err(Error::Format { offset: 12, .. })
        ));
    }
}
