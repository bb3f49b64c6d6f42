use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{digest, hex, NamedTensor, TensorData, TensorRecord};
use crate::kv::{finish, parse_kv};
use crate::numcore::{BnRunning, DiffTensor, ParamStore};
use crate::synthdata::SceneSpec;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"XALNCKPT";

/// Trained parameters together with the configuration that built them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub spec: SceneSpec,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn config_text(model: &ModelConfig, spec: &SceneSpec) -> String {
        format!("{}{}", model.to_kv(), spec.to_kv().lines().map(|l| format!("scene.{l}\n")).collect::<String>())
    }

    pub fn config_digest(model: &ModelConfig, spec: &SceneSpec) -> String {
        hex(&digest(&Self::config_text(model, spec)))
    }

    /// Digest of the model and scene configuration.
    pub fn digest(&self) -> String {
        Self::config_digest(&self.model, &self.spec)
    }

    /// Rebuilds the model structure; parameter shapes are checked against a fresh init.
    pub fn build(&self) -> Result<Model> {
        let (model, fresh) = Model::init::<f32>(&self.model, &self.spec, 0)?;
        for (name, t) in fresh.iter() {
            match self.store.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                other => {
                    return Err(Error::Invalid(format!(
                        "checkpoint parameter {name}: expected {:?}, found {:?}",
                        t.shape(),
                        other.map(|p| p.shape().to_vec())
                    )))
                }
            }
        }
        if fresh.len() != self.store.len() {
            return Err(Error::Invalid(format!("checkpoint has {} parameters, model {}", self.store.len(), fresh.len())));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = Checkpoint::config_text(&ckpt.model, &ckpt.spec);
    let mut tensors = vec![NamedTensor::new("config", &[text.len()], TensorData::U8(text.clone().into_bytes()))?];
    for (name, t) in ckpt.store.iter() {
        tensors.push(NamedTensor::new(&format!("param.{name}"), t.shape(), TensorData::F32(t.data().to_vec()))?);
    }
    for (name, r) in ckpt.store.running_iter() {
        tensors.push(NamedTensor::new(&format!("running_mean.{name}"), &[r.mean.len()], TensorData::F64(r.mean.clone()))?);
        tensors.push(NamedTensor::new(&format!("running_var.{name}"), &[r.var.len()], TensorData::F64(r.var.clone()))?);
    }
    TensorRecord {
        magic: CHECKPOINT_MAGIC,
        digest: digest(&text),
        tensors,
    }
    .write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let rec = TensorRecord::read(path, &CHECKPOINT_MAGIC)?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let text = match rec.get("config").map(|t| &t.data) {
        Some(TensorData::U8(b)) => String::from_utf8(b.clone()).map_err(|_| bad("config is not UTF-8".into()))?,
        _ => return Err(bad("missing config".into())),
    };
    let found = digest(&text);
    if found != rec.digest {
        return Err(Error::DigestMismatch {
            expected: hex(&rec.digest),
            found: hex(&found),
        });
    }
    let mut map = parse_kv(&text)?;
    let mut scene = map
        .keys()
        .filter_map(|k| k.strip_prefix("scene.").map(|s| (k.clone(), s.to_string())))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|(k, s)| (s, map.remove(&k).expect("key listed")))
        .collect();
    let spec = SceneSpec::from_kv(&mut scene)?;
    finish(scene)?;
    let model = ModelConfig::from_kv(&mut map)?;
    finish(map)?;
    let mut store = ParamStore::new();
    let mut means = Vec::new();
    for t in &rec.tensors {
        if let Some(name) = t.name.strip_prefix("param.") {
            let TensorData::F32(v) = &t.data else {
                return Err(bad(format!("{} is not f32", t.name)));
            };
            store.insert(name, DiffTensor::new(&t.shape, v.clone())?)?;
        } else if let Some(name) = t.name.strip_prefix("running_mean.") {
            means.push((name.to_string(), &t.data));
        }
    }
    for (name, mean) in means {
        let var = rec.get(&format!("running_var.{name}")).map(|t| &t.data);
        match (mean, var) {
            (TensorData::F64(m), Some(TensorData::F64(v))) if m.len() == v.len() => store.set_running(
                &name,
                BnRunning {
                    mean: m.clone(),
                    var: v.clone(),
                },
            ),
            _ => return Err(bad(format!("bad running statistics for {name}"))),
        }
    }
    let ckpt = Checkpoint { model, spec, store };
    ckpt.build()?;
    Ok(ckpt)
}
