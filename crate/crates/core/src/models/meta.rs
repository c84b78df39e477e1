//! Model persistence: FSM1 parameters plus a `key = value` sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::autodiff::checkpoint;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::models::{Architecture, EncoderModel, ProvenanceStep, SpeechArch, VisionArch};
use crate::scalar::Scalar;

/// Parameter and metadata paths for a model stem: `<stem>.fsm`,
/// `<stem>.meta`.
pub fn model_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".fsm"), with(".meta"))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl<T: Scalar> EncoderModel<T> {
    pub fn metadata(&self) -> String {
        let mut out = vec![
            format!("modality = {}", self.modality()),
            format!("objective = {}", self.objective),
        ];
        match self.arch {
            Architecture::Vision(a) => {
                out.push(format!("arch.filters = {}", join(&a.filters)));
                out.push(format!("arch.embedding_dim = {}", a.embedding_dim));
            }
            Architecture::Speech(a) => {
                out.push(format!("arch.input_dim = {}", a.input_dim));
                out.push(format!("arch.hidden = {}", a.hidden));
                out.push(format!("arch.layers = {}", a.layers));
                out.push(format!("arch.embedding_dim = {}", a.embedding_dim));
            }
        }
        if !self.classes.is_empty() {
            out.push(format!("classes = {}", self.classes.join(",")));
        }
        if let Some(h) = &self.config_hash {
            out.push(format!("config_hash = {h}"));
        }
        for (i, p) in self.provenance.iter().enumerate() {
            out.push(format!("provenance.{i}.phase = {}", p.phase));
            out.push(format!("provenance.{i}.dataset = {}", p.dataset_id));
            out.push(format!(
                "provenance.{i}.pairs = {}",
                p.pair_source.as_deref().unwrap_or("-")
            ));
            out.push(format!("provenance.{i}.seed = {}", p.seed));
            out.push(format!("provenance.{i}.epochs = {}", p.epochs));
        }
        out.join("\n") + "\n"
    }

    /// Write `<stem>.fsm` and `<stem>.meta`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(c) = self.classes.iter().find(|c| c.contains(',') || c.contains('\n')) {
            return Err(Error::invalid(format!("class name {c:?} cannot be stored in metadata")));
        }
        let (params, meta) = model_paths(stem);
        checkpoint::save(&self.params, &params)?;
        std::fs::write(&meta, self.metadata()).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params_path, meta_path) = model_paths(stem);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let kv = parse_kv(&text, &meta_path)?;
        let bad = |msg: String| Error::Format {
            path: meta_path.clone(),
            offset: 0,
            msg,
        };
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| bad(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad number for {k}"))) };
        let modality: Modality = get("modality")?.parse()?;
        let objective = get("objective")?.parse()?;
        let arch = match modality {
            Modality::Vision => {
                let f: Vec<usize> = get("arch.filters")?
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad(format!("bad filter count {s:?}"))))
                    .collect::<Result<_>>()?;
                let filters: [usize; 3] = f.try_into().map_err(|_| bad("arch.filters needs 3 entries".into()))?;
                Architecture::Vision(VisionArch {
                    filters,
                    embedding_dim: num("arch.embedding_dim")?,
                })
            }
            Modality::Speech => Architecture::Speech(SpeechArch {
                input_dim: num("arch.input_dim")?,
                hidden: num("arch.hidden")?,
                layers: num("arch.layers")?,
                embedding_dim: num("arch.embedding_dim")?,
            }),
        };
        let classes: Vec<String> = kv
            .get("classes")
            .map(|c| c.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        let mut model = EncoderModel::<T>::new(arch, objective, classes, 0)?;
        let loaded = checkpoint::load::<T>(&params_path)?;
        model
            .params
            .copy_values_from(&loaded)
            .map_err(|e| bad(format!("checkpoint does not match metadata: {e}")))?;
        model.config_hash = kv.get("config_hash").cloned();
        let mut i = 0;
        while let Some(phase) = kv.get(&format!("provenance.{i}.phase")) {
            let field = |f: &str| get(&format!("provenance.{i}.{f}"));
            let pairs = field("pairs")?;
            model.provenance.push(ProvenanceStep {
                phase: phase.clone(),
                dataset_id: field("dataset")?.to_string(),
                pair_source: (pairs != "-").then(|| pairs.to_string()),
                seed: field("seed")?.parse().map_err(|_| bad("bad provenance seed".into()))?,
                epochs: field("epochs")?
                    .parse()
                    .map_err(|_| bad("bad provenance epochs".into()))?,
            });
            i += 1;
        }
        Ok(model)
    }
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub(crate) fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: i as u64 + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
