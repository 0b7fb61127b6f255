//! Line-delimited JSON records and the raw RGB image container.
//!
//! Image layout: magic `DTXI`, then width, height and camera index as
//! little-endian `u32`, then `width * height * 3` bytes.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dtx_core::tokenizer::RgbImage;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"DTXI";
pub const IMAGE_HEADER_LEN: usize = 16;

pub fn write_image<W: Write>(mut w: W, img: &RgbImage, camera: u32) -> Result<()> {
    let mut header = [0u8; IMAGE_HEADER_LEN];
    header[..4].copy_from_slice(IMAGE_MAGIC);
    header[4..8].copy_from_slice(&(img.width as u32).to_le_bytes());
    header[8..12].copy_from_slice(&(img.height as u32).to_le_bytes());
    header[12..].copy_from_slice(&camera.to_le_bytes());
    w.write_all(&header)?;
    w.write_all(&img.data)?;
    Ok(())
}

/// Image and camera index.
pub fn read_image<R: Read>(mut r: R) -> Result<(RgbImage, u32)> {
    let mut header = [0u8; IMAGE_HEADER_LEN];
    r.read_exact(&mut header)?;
    if &header[..4] != IMAGE_MAGIC {
        return Err(Error::Format("bad image magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let (width, height, camera) = (word(4) as usize, word(8) as usize, word(12));
    let mut data = vec![0u8; width * height * 3];
    r.read_exact(&mut data)?;
    Ok((RgbImage::new(width, height, data)?, camera))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
