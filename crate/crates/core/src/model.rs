//! The assembled multimodal model: image encoder, the two resamplers, the
//! language decoder and the diffusion decoder over one parameter store, plus
//! checkpoint I/O.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;

use crate::config::ModelConfig;
use crate::datamodel::{sha256_hex, ImageRecord};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lm::Decoder;
use crate::params::ParamStore;
use crate::rng::Seed;
use crate::sequence::Tokenizer;
use crate::vision::{mask_aware_extract_batch, Connectors, ImageEncoder};

/// Parameter groups, tagged by the first segment of each parameter name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Vfm,
    Llm,
    Dm,
    Connectors,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Vfm, ParamGroup::Llm, ParamGroup::Dm, ParamGroup::Connectors];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Vfm => "vfm.",
            ParamGroup::Llm => "llm.",
            ParamGroup::Dm => "dm.",
            ParamGroup::Connectors => "conn.",
        }
    }

    pub fn of(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| name.starts_with(g.prefix()))
            .ok_or_else(|| Error::Config(format!("parameter {name} carries no group tag")))
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub encoder: ImageEncoder,
    pub connectors: Connectors,
    pub decoder: Decoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(cfg: &ModelConfig, tokenizer: Tokenizer, seed: Seed) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed.stream("init"), cfg.dtype()?);
        let root = store.root();
        let encoder = ImageEncoder::new(&root.pp("vfm"), cfg)?;
        let connectors = Connectors::new(&root.pp("conn"), cfg)?;
        let decoder = Decoder::new(&root.pp("llm"), cfg, tokenizer.vocab_size())?;
        let denoiser = Denoiser::new(&root.pp("dm"), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            schedule: NoiseSchedule::scaled_linear(cfg.timesteps)?,
            store,
            tokenizer,
            encoder,
            connectors,
            decoder,
            denoiser,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// (I, 3, H, W) pixel batch.
    pub fn pixel_batch(&self, records: &[&ImageRecord]) -> Result<Tensor> {
        let imgs = records
            .iter()
            .map(|r| r.pixels.to_chw(self.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&imgs, 0)?)
    }

    /// Mask-aware visual tokens, (I, N, C).
    pub fn visual_tokens(&self, records: &[&ImageRecord]) -> Result<Tensor> {
        let tokens = self.encoder.forward(&self.pixel_batch(records)?)?;
        if records.iter().all(|r| r.mask.is_none()) {
            return Ok(tokens);
        }
        let masks: Vec<_> = records.iter().map(|r| r.effective_mask()).collect();
        mask_aware_extract_batch(&tokens, &masks, self.encoder.grid())
    }

    /// Encoder-side resampled tokens e_n, (I, M_enc, C). These fill the
    /// `<IMG>` slots and condition the consistency loss.
    pub fn image_tokens(&self, records: &[&ImageRecord]) -> Result<Tensor> {
        self.connectors.encoder_side.forward(&self.visual_tokens(records)?)
    }

    /// Generation condition from decoder states up to and including `<SOI>`: (M_llm, C).
    pub fn context_condition(&self, prefix_states: &Tensor) -> Result<Tensor> {
        Ok(self
            .connectors
            .llm_side
            .forward(&prefix_states.unsqueeze(0)?)?
            .squeeze(0)?)
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.cfg)?.as_bytes()))
    }

    /// Writes parameters plus `extra` tensors (e.g. optimizer moments) and
    /// string metadata to one safetensors container.
    pub fn save(
        &self,
        path: &Path,
        extra: &BTreeMap<String, Tensor>,
        metadata: BTreeMap<String, String>,
    ) -> Result<()> {
        let mut tensors: BTreeMap<String, Tensor> = self
            .store
            .vars()
            .into_iter()
            .map(|(k, v)| (format!("param/{k}"), v.as_tensor().clone()))
            .collect();
        for (k, v) in extra {
            tensors.insert(k.clone(), v.clone());
        }
        let mut meta: HashMap<String, String> = metadata.into_iter().collect();
        meta.insert("model_config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("config_hash".into(), self.config_hash()?);
        meta.insert("tokenizer".into(), serde_json::to_string(&self.tokenizer)?);
        save_tensors(path, &tensors, meta)
    }

    /// Rebuilds a model from a checkpoint. Returns the model, the non-parameter
    /// tensors and the metadata.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
        let (tensors, meta) = load_tensors(path)?;
        let cfg: ModelConfig = serde_json::from_str(
            meta.get("model_config")
                .ok_or_else(|| Error::Data(format!("{}: no model config", path.display())))?,
        )?;
        let tok: Tokenizer = serde_json::from_str(
            meta.get("tokenizer")
                .ok_or_else(|| Error::Data(format!("{}: no tokenizer", path.display())))?,
        )?;
        let model = Model::new(&cfg, tok.reindex(), Seed(0))?;
        let mut params = BTreeMap::new();
        let mut extra = BTreeMap::new();
        for (k, v) in tensors {
            match k.strip_prefix("param/") {
                Some(name) => {
                    params.insert(name.to_string(), v);
                }
                None => {
                    extra.insert(k, v);
                }
            }
        }
        model.store.load(&params)?;
        Ok((model, extra, meta))
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: HashMap<String, String>) -> Result<()> {
    let encoded = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.dims().to_vec(), tensor_bytes(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let views = encoded
        .iter()
        .map(|(k, dims, (dt, bytes))| {
            TensorView::new(*dt, dims.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Data(format!("{k}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_tensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Data(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(bad)?;
    let meta: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
    let st = SafeTensors::deserialize(&buf).map_err(bad)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data = view.data();
        let t = match view.dtype() {
            StDtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            StDtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            other => return Err(Error::Data(format!("{name}: unsupported dtype {other:?}"))),
        };
        out.insert(name, t);
    }
    Ok((out, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_parameter_is_tagged() {
        let m = Model::new(&ModelConfig::tiny(), Tokenizer::new(["a", "b"]), Seed(1)).unwrap();
        for (name, _) in m.store.vars() {
            ParamGroup::of(&name).unwrap();
        }
        assert!(ParamGroup::of("stray.weight").is_err());
        for g in ParamGroup::ALL {
            assert!(m.store.vars().iter().any(|(n, _)| n.starts_with(g.prefix())));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let m = Model::new(&ModelConfig::tiny(), Tokenizer::new(["cat", "dog"]), Seed(3)).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("opt/x".to_string(), Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap());
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "s1".to_string());
        m.save(&path, &extra, meta).unwrap();
        let (m2, extra2, meta2) = Model::load(&path).unwrap();
        assert_eq!(meta2["stage"], "s1");
        assert_eq!(extra2["opt/x"].to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
        assert_eq!(m2.tokenizer.word_id("dog"), m.tokenizer.word_id("dog"));
        let (a, b) = (m.store.snapshot().unwrap(), m2.store.snapshot().unwrap());
        for (k, v) in &a {
            let d = (v - &b[k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(d, 0.0, "{k}");
        }
    }
}
