//! Line-oriented corpus files: one JSON object per sample with the gray
//! levels packed as lowercase hex.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::render::{Sample, TextInstance};
use crate::error::{OclipError, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    seed: u64,
    image: String,
    instances: Vec<TextInstance>,
}

pub fn write_sample<W: Write>(mut writer: W, sample: &Sample) -> Result<()> {
    let rec = Record {
        seed: sample.seed,
        image: hex::encode(&sample.pixels),
        instances: sample.instances.clone(),
    };
    serde_json::to_writer(&mut writer, &rec)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn write_corpus<W: Write>(mut writer: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        write_sample(&mut writer, s)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn parse_sample(line: &str) -> Result<Sample> {
    let rec: Record = serde_json::from_str(line)?;
    let pixels =
        hex::decode(&rec.image).map_err(|e| OclipError::Format(format!("image hex: {e}")))?;
    let size = (pixels.len() as f64).sqrt().round() as usize;
    if size == 0 || size * size != pixels.len() {
        return Err(OclipError::Format(format!(
            "image of {} bytes is not a square canvas",
            pixels.len()
        )));
    }
    for inst in &rec.instances {
        let b = inst.bbox;
        if b[0] >= b[2] || b[1] >= b[3] || b[2] > size || b[3] > size {
            return Err(OclipError::Format(format!(
                "box {b:?} outside {size}x{size} canvas"
            )));
        }
    }
    Ok(Sample {
        seed: rec.seed,
        size,
        pixels,
        instances: rec.instances,
    })
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            parse_sample(&line).map_err(|e| OclipError::Format(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
