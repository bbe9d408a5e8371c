//! File-level wrappers around the byte codecs, plus portable graymap output.

use std::fs;
use std::path::Path;

use mvdream_core::checkpoint::Checkpoint;
use mvdream_core::replay::ReplayBuffer;

use crate::error::{HarnessError, Result};

pub fn save_replay(buffer: &ReplayBuffer, path: &Path) -> Result<()> {
    fs::write(path, buffer.encode()).map_err(|e| HarnessError::io(path, e))
}

pub fn load_replay(path: &Path) -> Result<ReplayBuffer> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(ReplayBuffer::decode(&bytes)?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(Checkpoint::decode(&bytes)?)
}

/// Binary (P5) graymap with maxval 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Graymap {
    /// Quantizes intensities in `[0, 1]` (values outside are clamped).
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), width * height, "graymap extent mismatch");
        let pixels = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self { width, height, pixels }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HarnessError::Config(format!("graymap: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a P5 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        if data.len() != width * height {
            return Err(bad("raster size does not match the header"));
        }
        Ok(Self {
            width,
            height,
            pixels: data.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graymap_round_trip() {
        let values: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let img = Graymap::from_unit(4, 3, &values);
        assert_eq!(img.pixels[0], 0);
        assert_eq!(img.pixels[11], 255);
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(Graymap::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn graymap_rejects_bad_input() {
        assert!(Graymap::decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(Graymap::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Graymap::decode(b"P5\n2").is_err());
    }

    #[test]
    fn graymap_header_comments() {
        let img = Graymap::decode(b"P5\n# note\n1 1\n255\n\x07").unwrap();
        assert_eq!(img.pixels, vec![7]);
    }
}
