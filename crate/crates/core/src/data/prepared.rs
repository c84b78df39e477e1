//! On-disk layout of a prepared paired dataset.
//!
//! ```text
//! dataset.txt                 id = <dataset id>
//! manifest.tsv                speech manifest (see `manifest`)
//! speech/<split>/<n>.wav      16-bit PCM (synthetic data only)
//! images-<split>.idx          IDX images
//! labels-<split>.idx          IDX labels: indices into image-classes.txt
//! image-classes.txt           one image class name per line
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use super::idx::{encode_images, encode_labels, load_idx, write_file, IdxOptions};
use super::manifest::{load_speech_manifest, partition, DatasetManifest, ManifestEntry};
use super::synthetic::SyntheticCorpus;
use super::wav::write_wav;
use super::{ImageItem, PairedDataset, Partitioned, Split};
use crate::dsp::MfccConfig;
use crate::error::{Error, Result};

const CLASSES_FILE: &str = "image-classes.txt";

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_images(dir: &Path, images: &Partitioned<ImageItem>) -> Result<()> {
    let classes: Vec<String> = Split::ALL
        .iter()
        .flat_map(|&s| images.get(s))
        .filter_map(|i| i.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() > 256 {
        return Err(Error::invalid(format!(
            "{} image classes exceed the IDX label range",
            classes.len()
        )));
    }
    for split in Split::ALL {
        let items = images.get(split);
        let labels: Vec<u8> = items
            .iter()
            .map(|i| {
                let l = i
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::invalid("prepared images must be labelled"))?;
                Ok(classes.binary_search(l).expect("collected above") as u8)
            })
            .collect::<Result<_>>()?;
        write_file(&dir.join(format!("images-{split}.idx")), &encode_images(items))?;
        write_file(&dir.join(format!("labels-{split}.idx")), &encode_labels(&labels))?;
    }
    write_text(&dir.join(CLASSES_FILE), &(classes.join("\n") + "\n"))
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    write_text(&dir.join("manifest.tsv"), &manifest.to_tsv())?;
    write_text(&dir.join("dataset.txt"), &format!("id = {}\n", manifest.id))
}

/// Materialise a synthetic corpus: WAV files, manifest and IDX images.
pub fn write_synthetic(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    let mut entries = Vec::new();
    for split in Split::ALL {
        let sub = dir.join("speech").join(split.to_string());
        mkdir(&sub)?;
        for (i, w) in corpus.waves.get(split).iter().enumerate() {
            let rel = format!("speech/{split}/{i:05}.wav");
            write_wav(&dir.join(&rel), w)?;
            entries.push(ManifestEntry {
                path: rel,
                speaker: w.speaker_id.clone(),
                label: w.label.clone(),
                split,
            });
        }
    }
    write_manifest(
        dir,
        &DatasetManifest {
            id: corpus.id.clone(),
            root: dir.to_path_buf(),
            entries,
        },
    )?;
    write_images(dir, &corpus.images)
}

/// Materialise an external dataset: the speech manifest is rewritten with
/// absolute paths; images are re-encoded.
pub fn write_external(dir: &Path, manifest: &DatasetManifest, images: &Partitioned<ImageItem>) -> Result<()> {
    mkdir(dir)?;
    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let abs = manifest.resolve(e);
            let abs = abs.canonicalize().map_err(|err| Error::io(&abs, err))?;
            Ok(ManifestEntry {
                path: abs.to_string_lossy().into_owned(),
                ..e.clone()
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(
        dir,
        &DatasetManifest {
            id: manifest.id.clone(),
            root: dir.to_path_buf(),
            entries,
        },
    )?;
    write_images(dir, images)
}

/// Load a prepared dataset, computing MFCCs for every utterance.
pub fn load_prepared(dir: &Path, mfcc_cfg: &MfccConfig) -> Result<PairedDataset> {
    let (manifest, utts) = load_speech_manifest(&dir.join("manifest.tsv"), mfcc_cfg)?;
    let id_path = dir.join("dataset.txt");
    let id_text = std::fs::read_to_string(&id_path).map_err(|e| Error::io(&id_path, e))?;
    let id = id_text
        .lines()
        .find_map(|l| l.strip_prefix("id = "))
        .ok_or_else(|| Error::Format {
            path: id_path.clone(),
            offset: 0,
            msg: "missing `id = …` line".into(),
        })?
        .to_string();
    let classes_path = dir.join(CLASSES_FILE);
    let classes: Vec<String> = std::fs::read_to_string(&classes_path)
        .map_err(|e| Error::io(&classes_path, e))?
        .lines()
        .map(str::to_string)
        .collect();
    let mut images = Partitioned::default();
    for split in Split::ALL {
        let labels_path = dir.join(format!("labels-{split}.idx"));
        let items = load_idx(
            &dir.join(format!("images-{split}.idx")),
            Some(&labels_path),
            IdxOptions::default(),
        )?;
        *images.get_mut(split) = items
            .into_iter()
            .map(|mut item| {
                let idx: usize = item.label.as_deref().and_then(|l| l.parse().ok()).unwrap_or(usize::MAX);
                let name = classes.get(idx).ok_or_else(|| Error::Format {
                    path: labels_path.clone(),
                    offset: 0,
                    msg: format!("label index {idx} outside {CLASSES_FILE}"),
                })?;
                item.label = Some(name.clone());
                Ok(item)
            })
            .collect::<Result<_>>()?;
    }
    Ok(PairedDataset {
        id,
        speech: partition(&manifest, utts),
        images,
    })
}
