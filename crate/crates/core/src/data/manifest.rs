//! Speech manifests: UTF-8 TSV with header `path\tspeaker\tlabel\tsplit`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Partitioned, Split};
use crate::dsp::{mfcc, MfccConfig, Utterance};
use crate::error::{Error, Result};

pub const HEADER: &str = "path\tspeaker\tlabel\tsplit";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// As written in the manifest (relative paths resolve against its directory).
    pub path: String,
    pub speaker: String,
    pub label: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub id: String,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reject repeated paths: across splits (overlap), with conflicting
    /// labels, or plain duplicates.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, (usize, &ManifestEntry)> = HashMap::new();
        let mut problems = Vec::new();
        for (row, e) in self.entries.iter().enumerate() {
            if let Some((first_row, first)) = seen.get(e.path.as_str()) {
                let what = if first.split != e.split {
                    format!("appears in splits {} and {}", first.split, e.split)
                } else if first.label != e.label {
                    format!("has inconsistent labels {:?} and {:?}", first.label, e.label)
                } else {
                    "is duplicated".to_string()
                };
                problems.push(format!(
                    "row {}: {} {what} (first at row {})",
                    row + 2,
                    e.path,
                    first_row + 2
                ));
            } else {
                seen.insert(&e.path, (row, e));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.path,
                e.speaker,
                e.label.as_deref().unwrap_or(""),
                e.split
            );
        }
        s
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    if header != HEADER {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            failures: vec![format!("row 1: expected header {HEADER:?}, found {header:?}")],
        });
    }
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            failures.push(format!(
                "row {row}: expected 4 tab-separated columns, found {}",
                cols.len()
            ));
            continue;
        }
        let split = match cols[3].parse::<Split>() {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("row {row}: {e}"));
                continue;
            }
        };
        if cols[0].is_empty() || cols[1].is_empty() {
            failures.push(format!("row {row}: empty path or speaker"));
            continue;
        }
        entries.push(ManifestEntry {
            path: cols[0].to_string(),
            speaker: cols[1].to_string(),
            label: (!cols[2].is_empty()).then(|| cols[2].to_string()),
            split,
        });
    }
    if !failures.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            failures,
        });
    }
    let id = path
        .parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "speech".into());
    Ok(DatasetManifest {
        id,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = parse_manifest(&text, path)?;
    m.validate()?;
    Ok(m)
}

/// Read every WAV listed in the manifest and compute static MFCCs, in
/// manifest order. All per-row failures are collected before aborting.
pub fn load_speech_manifest(path: &Path, cfg: &MfccConfig) -> Result<(DatasetManifest, Vec<Utterance>)> {
    let manifest = read_manifest(path)?;
    let results: Vec<Result<Utterance>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let wave = super::wav::read_wav(&manifest.resolve(e), &e.speaker, e.label.clone())?;
            mfcc(&wave, cfg)
        })
        .collect();
    let mut utts = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (row, r) in results.into_iter().enumerate() {
        match r {
            Ok(u) => utts.push(u),
            Err(e) => failures.push(format!("row {}: {e}", row + 2)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            failures,
        });
    }
    Ok((manifest, utts))
}

/// Group loaded utterances by their manifest split, preserving order.
pub fn partition(manifest: &DatasetManifest, utts: Vec<Utterance>) -> Partitioned<Utterance> {
    let mut out = Partitioned::default();
    for (e, u) in manifest.entries.iter().zip(utts) {
        out.get_mut(e.split).push(u);
    }
    out
}
