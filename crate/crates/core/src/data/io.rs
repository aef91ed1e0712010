//! On-disk formats.
//!
//! Bag file (little-endian): magic `FBAG1`, u32 instance count M, u32
//! feature dimension, then M * d_in f32 values row-major.
//!
//! Manifest: CSV with header
//! `bag_id,site_id,split,task,label,censorship,time,path`; survival-only
//! columns are empty for classification. Survival cut points live in a
//! `cuts.json` sidecar (`{"cuts": [t1, t2, t3]}`) next to the manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetManifest, FeatureBag, ManifestRecord, SplitKind};
use crate::Task;

pub const BAG_MAGIC: &[u8; 5] = b"FBAG1";

const MANIFEST_HEADER: [&str; 8] = [
    "bag_id",
    "site_id",
    "split",
    "task",
    "label",
    "censorship",
    "time",
    "path",
];

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a bag's feature matrix.
pub fn save_bag(bag: &FeatureBag, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<(), DataError> {
        out.write_all(bytes).map_err(|e| io_err(path, e))
    };
    write(&mut out, BAG_MAGIC)?;
    write(&mut out, &(bag.features.nrows() as u32).to_le_bytes())?;
    write(&mut out, &(bag.features.ncols() as u32).to_le_bytes())?;
    for &value in bag.features.iter() {
        write(&mut out, &value.to_le_bytes())?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Read a bag file back into its feature matrix.
pub fn load_bag_features(path: &Path) -> Result<Array2<f32>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mismatch = |detail: &str| DataError::HeaderMismatch {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 5];
    reader
        .read_exact(&mut magic)
        .map_err(|_| mismatch("file shorter than header"))?;
    if &magic != BAG_MAGIC {
        return Err(mismatch("wrong magic bytes"));
    }
    let mut u32_buf = [0u8; 4];
    reader
        .read_exact(&mut u32_buf)
        .map_err(|_| mismatch("file shorter than header"))?;
    let rows = u32::from_le_bytes(u32_buf) as usize;
    reader
        .read_exact(&mut u32_buf)
        .map_err(|_| mismatch("file shorter than header"))?;
    let cols = u32::from_le_bytes(u32_buf) as usize;
    if rows == 0 || cols == 0 {
        return Err(mismatch("zero dimension in header"));
    }

    let mut payload = vec![0u8; rows * cols * 4];
    reader
        .read_exact(&mut payload)
        .map_err(|_| mismatch("payload shorter than header promises"))?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(mismatch("trailing bytes after payload"));
    }

    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinitePayload {
            path: path.display().to_string(),
        });
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| mismatch(&format!("shape error: {e}")))
}

#[derive(Serialize, Deserialize)]
struct CutsSidecar {
    cuts: Vec<f64>,
}

fn cuts_path(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("cuts.json")
}

/// Write the manifest CSV (and `cuts.json` for survival datasets).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    manifest.validate()?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| DataError::InvalidManifest(format!("csv write: {e}"));

    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in &manifest.records {
        writer
            .write_record([
                r.bag_id.as_str(),
                &r.site_id.to_string(),
                r.split.as_str(),
                &r.task.to_string(),
                &r.label.to_string(),
                &r.censored.map(|c| (c as u8).to_string()).unwrap_or_default(),
                &r.time.map(|t| t.to_string()).unwrap_or_default(),
                r.path.as_str(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;

    if let Some(cuts) = &manifest.cuts {
        let sidecar = cuts_path(path);
        let json = serde_json::to_string_pretty(&CutsSidecar { cuts: cuts.clone() })
            .expect("cuts serialize");
        std::fs::write(&sidecar, json).map_err(|e| io_err(&sidecar, e))?;
    }
    Ok(())
}

/// Read a manifest CSV plus its cuts sidecar (required for survival).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));

    let headers = reader
        .headers()
        .map_err(|e| DataError::ManifestParse {
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(DataError::ManifestParse {
            line: 1,
            detail: format!("unexpected header {:?}", headers),
        });
    }

    let mut records = Vec::new();
    let mut task: Option<Task> = None;
    for result in reader.records() {
        let record = result.map_err(|e| DataError::ManifestParse {
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or_default(),
            detail: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or_default();
        let parse_err = |detail: String| DataError::ManifestParse { line, detail };

        let field = |i: usize| record.get(i).unwrap_or_default();
        let row_task = match field(3) {
            "classification" => Task::Classification,
            "survival" => Task::Survival,
            other => return Err(parse_err(format!("unknown task {other:?}"))),
        };
        match task {
            None => task = Some(row_task),
            Some(t) if t != row_task => {
                return Err(parse_err("mixed tasks in one manifest".into()))
            }
            _ => {}
        }

        let censored = match field(5) {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => return Err(parse_err(format!("bad censorship flag {other:?}"))),
        };
        let time = match field(6) {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad time: {e}")))?,
            ),
        };
        records.push(ManifestRecord {
            bag_id: field(0).to_string(),
            site_id: field(1)
                .parse()
                .map_err(|e| parse_err(format!("bad site_id: {e}")))?,
            split: SplitKind::parse(field(2))
                .ok_or_else(|| parse_err(format!("bad split {:?}", field(2))))?,
            task: row_task,
            label: field(4)
                .parse()
                .map_err(|e| parse_err(format!("bad label: {e}")))?,
            censored,
            time,
            path: field(7).to_string(),
        });
    }

    let task = task.ok_or_else(|| DataError::InvalidManifest("empty manifest".into()))?;
    let cuts = if task == Task::Survival {
        let sidecar = cuts_path(path);
        let json = std::fs::read_to_string(&sidecar).map_err(|e| io_err(&sidecar, e))?;
        let parsed: CutsSidecar = serde_json::from_str(&json)
            .map_err(|e| DataError::InvalidManifest(format!("cuts.json: {e}")))?;
        Some(parsed.cuts)
    } else {
        None
    };

    let manifest = DatasetManifest {
        task,
        records,
        cuts,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Persist a full dataset: bag files under `<dir>/bags/`, `manifest.csv`,
/// and `cuts.json` when present. Returns the manifest with paths filled in.
pub fn save_dataset(
    bags: &[FeatureBag],
    manifest: &DatasetManifest,
    dir: &Path,
) -> Result<DatasetManifest, DataError> {
    let bag_dir = dir.join("bags");
    std::fs::create_dir_all(&bag_dir).map_err(|e| io_err(&bag_dir, e))?;

    let by_id: std::collections::HashMap<&str, &FeatureBag> =
        bags.iter().map(|b| (b.bag_id.as_str(), b)).collect();

    let mut saved = manifest.clone();
    for record in &mut saved.records {
        let bag = by_id
            .get(record.bag_id.as_str())
            .ok_or_else(|| DataError::MissingBags {
                bag_ids: vec![record.bag_id.clone()],
            })?;
        let rel = format!("bags/{}.fbag", record.bag_id);
        save_bag(bag, &dir.join(&rel))?;
        record.path = rel;
    }
    save_manifest(&saved, &dir.join("manifest.csv"))?;
    Ok(saved)
}

/// Load a dataset given its manifest path. Bag paths resolve relative to the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();

    let mut missing = Vec::new();
    let mut bags = Vec::new();
    for record in &manifest.records {
        let path = base.join(&record.path);
        if !path.is_file() {
            missing.push(record.bag_id.clone());
            continue;
        }
        let features = load_bag_features(&path)?;
        let label = match manifest.task {
            Task::Classification => super::BagLabel::Class(record.label),
            Task::Survival => super::BagLabel::Survival(crate::loss::SurvivalLabel {
                bin: record.label,
                censored: record.censored.expect("validated"),
                time: record.time.expect("validated"),
            }),
        };
        bags.push(FeatureBag {
            bag_id: record.bag_id.clone(),
            site_id: record.site_id,
            features,
            label,
        });
    }
    if !missing.is_empty() {
        return Err(DataError::MissingBags { bag_ids: missing });
    }
    Dataset::assemble(&manifest, bags)
}
