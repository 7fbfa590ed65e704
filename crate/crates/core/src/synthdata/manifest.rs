use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{OclipError, Result};

/// One OCR-extracted text with its detector and recognizer confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub text: String,
    pub det_conf: f64,
    pub rec_conf: f64,
}

impl ManifestRecord {
    pub fn is_well_formed(&self) -> bool {
        (0.0..=1.0).contains(&self.det_conf) && (0.0..=1.0).contains(&self.rec_conf)
    }
}

fn check_threshold(name: &str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(OclipError::Usage(format!(
            "{name} threshold {t} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Records whose detection and recognition confidences both clear their
/// (inclusive) thresholds, in input order. Images left without any record
/// disappear from the output.
pub fn filter_manifest(
    records: &[ManifestRecord],
    det_threshold: f64,
    rec_threshold: f64,
) -> Result<Vec<ManifestRecord>> {
    check_threshold("detection", det_threshold)?;
    check_threshold("recognition", rec_threshold)?;
    Ok(records
        .iter()
        .filter(|r| r.det_conf >= det_threshold && r.rec_conf >= rec_threshold)
        .cloned()
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterSummary {
    pub kept: usize,
    pub dropped: usize,
    pub malformed: usize,
    pub images_kept: usize,
    pub images_dropped: usize,
}

/// Parses one record per line. Blank lines are ignored; unparsable lines
/// and records with confidences outside [0, 1] are counted and skipped.
pub fn read_manifest<R: BufRead>(reader: R) -> Result<(Vec<ManifestRecord>, usize)> {
    let mut records = Vec::new();
    let mut malformed = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestRecord>(&line) {
            Ok(r) if r.is_well_formed() => records.push(r),
            _ => {
                log::warn!("skipping malformed manifest line: {line}");
                malformed += 1;
            }
        }
    }
    Ok((records, malformed))
}

pub fn write_manifest<W: Write>(mut writer: W, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Streams a manifest through [`filter_manifest`].
pub fn filter_manifest_stream<R: BufRead, W: Write>(
    reader: R,
    writer: W,
    det_threshold: f64,
    rec_threshold: f64,
) -> Result<FilterSummary> {
    let (records, malformed) = read_manifest(reader)?;
    let kept = filter_manifest(&records, det_threshold, rec_threshold)?;
    write_manifest(writer, &kept)?;
    let all: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let survivors: BTreeSet<&str> = kept.iter().map(|r| r.image_id.as_str()).collect();
    Ok(FilterSummary {
        kept: kept.len(),
        dropped: records.len() - kept.len(),
        malformed,
        images_kept: survivors.len(),
        images_dropped: all.len() - survivors.len(),
    })
}
