//! Trained-model persistence: network weights, batch-norm running statistics
//! and the fitted preprocessing pipeline in one binary file.

use std::path::Path;

use crate::container::{kv_text, parse_kv_text, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{build_unet_ablation, parse_list, Model, UNetConfig};
use crate::preprocessing::{GammaPlacement, GammaTransform, LinearNormalizer, Pipeline};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub pipeline: Pipeline<T>,
    /// Free-form provenance echoed into the header (loss, epoch, seed, ...).
    pub meta: Vec<(String, String)>,
}

impl<T: Scalar> Checkpoint<T> {
    fn header(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> =
            self.model.config().to_kv().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
        let g = &self.pipeline.gamma;
        let applies: Vec<String> = g.applies_to().iter().map(|c| c.to_string()).collect();
        kv.push(("pipeline.gamma_mode".into(), g.mode().to_string()));
        kv.push(("pipeline.gamma_channels".into(), applies.join(",")));
        kv.push(("pipeline.placement".into(), self.pipeline.placement.to_string()));
        kv.extend(self.meta.iter().map(|(k, v)| (format!("meta.{k}"), v.clone())));
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs: Vec<(String, Tensor<T>)> =
            self.model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let vec_tensor = |v: &[T]| Tensor::new(vec![v.len()], v.to_vec()).expect("1-d");
        for (i, s) in self.model.norm_states().iter().enumerate() {
            blobs.push((format!("norm{i}.running_mean"), vec_tensor(&s.running_mean)));
            blobs.push((format!("norm{i}.running_var"), vec_tensor(&s.running_var)));
        }
        let p = &self.pipeline;
        blobs.push(("pipeline.gamma".into(), vec_tensor(&[p.gamma.raw_gamma(), p.gamma.theta()])));
        blobs.push(("pipeline.input_mean".into(), vec_tensor(p.input_norm.mean())));
        blobs.push(("pipeline.input_std".into(), vec_tensor(p.input_norm.std())));
        blobs.push(("pipeline.target_mean".into(), vec_tensor(p.target_norm.mean())));
        blobs.push(("pipeline.target_std".into(), vec_tensor(p.target_norm.std())));

        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&kv_text(&self.header()));
        w.u32(blobs.len() as u32);
        for (name, t) in &blobs {
            w.str(name);
            w.tensor(t);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let header = parse_kv_text(&r.str()?)?;
        let mut cfg = UNetConfig::desk(1);
        let mut meta = Vec::new();
        let (mut mode, mut channels, mut placement) = (None, Vec::new(), None);
        for (k, v) in &header {
            if let Some(key) = k.strip_prefix("model.") {
                cfg.set(key, v)?;
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.push((key.to_string(), v.clone()));
            } else {
                match k.as_str() {
                    "pipeline.gamma_mode" => mode = Some(v.parse()?),
                    "pipeline.gamma_channels" => channels = parse_list(k, v)?,
                    "pipeline.placement" => placement = Some(v.parse::<GammaPlacement>()?),
                    _ => return Err(Error::Format(format!("unknown checkpoint header key `{k}`"))),
                }
            }
        }
        let missing = |what: &str| Error::Format(format!("checkpoint header lacks {what}"));
        let mode = mode.ok_or_else(|| missing("pipeline.gamma_mode"))?;
        let placement = placement.ok_or_else(|| missing("pipeline.placement"))?;

        let n = r.u32()? as usize;
        let mut blobs = std::collections::HashMap::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let t: Tensor<T> = r.tensor()?;
            if blobs.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate blob `{name}`")));
            }
        }
        r.finish()?;
        let mut take = |name: &str| blobs.remove(name).ok_or_else(|| Error::Format(format!("missing blob `{name}`")));

        let mut model: Model<T> = build_unet_ablation(&cfg, 0)?;
        for p in model.params_mut() {
            let t = take(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("blob `{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        for (i, s) in model.norm_states_mut().iter_mut().enumerate() {
            s.running_mean = take(&format!("norm{i}.running_mean"))?.into_data();
            s.running_var = take(&format!("norm{i}.running_var"))?.into_data();
        }
        let g = take("pipeline.gamma")?.into_data();
        let [gamma, theta] = g[..] else {
            return Err(Error::Format("pipeline.gamma must hold two values".into()));
        };
        let pipeline = Pipeline {
            gamma: GammaTransform::from_parts(mode, gamma, theta, channels),
            placement,
            input_norm: LinearNormalizer::new(take("pipeline.input_mean")?.into_data(), take("pipeline.input_std")?.into_data())?,
            target_norm: LinearNormalizer::new(take("pipeline.target_mean")?.into_data(), take("pipeline.target_std")?.into_data())?,
        };
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::Format(format!("unexpected blob `{extra}`")));
        }
        Ok(Checkpoint { model, pipeline, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
