//! Stand-ins for the pretrained language and diffusion models.
//!
//! Both are trained on "descriptor slots": the `<IMG>` run after `<SOI>` is
//! filled with the decoder's own word embeddings of the image's shape, color
//! and texture instead of visual tokens. The language model learns to caption
//! and to answer yes/no questions from such slots; the diffusion model learns
//! to draw the image from them. Stage-one training later has to map real
//! pixels into this space.

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Element, ImageRecord, InterleavedDocument};
use crate::diffusion::{denoising_loss, randn, DiffusionCondition, NoiseDraw};
use crate::error::{Error, Result};
use crate::lm::{pad_batch, pad_rows};
use crate::model::{Model, ParamGroup};
use crate::nn::scalar;
use crate::rng::{Seed, StreamRng};
use crate::robustvqa::yesno_question;
use crate::sequence::{assemble, PackedSequence};
use crate::synth::{caption, ShapeSpec, SynthSample, OOD_COLORS, OOD_TEXTURES, SHAPES, TRAIN_COLORS, TRAIN_TEXTURES};
use crate::training::{AdamW, Stage, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoundationOptions {
    pub lm_steps: usize,
    pub dm_steps: usize,
    pub batch_size: usize,
    pub lm_lr: f64,
    pub dm_lr: f64,
    /// Fraction of language examples that are yes/no questions (rest are captions).
    pub qa_fraction: f64,
    /// Standard deviation of Gaussian noise added to slot tokens, relative to
    /// the mean word-embedding norm, for the language model only.
    pub slot_noise: f64,
    /// Shuffle the three descriptors within the slot.
    pub permute_slots: bool,
    pub null_drop: f64,
}

impl Default for FoundationOptions {
    fn default() -> Self {
        Self {
            lm_steps: 3000,
            dm_steps: 1500,
            batch_size: 16,
            lm_lr: 3e-3,
            dm_lr: 2e-3,
            qa_fraction: 0.8,
            slot_noise: 0.1,
            permute_slots: true,
            null_drop: 0.1,
        }
    }
}

/// Token ids of (shape, color, texture).
pub fn descriptor_ids(model: &Model, spec: &ShapeSpec) -> Result<[u32; 3]> {
    let id = |w: &str| {
        model
            .tokenizer
            .word_id(w)
            .ok_or_else(|| Error::Config(format!("descriptor {w:?} missing from vocabulary")))
    };
    Ok([id(&spec.shape)?, id(&spec.color)?, id(&spec.texture)?])
}

/// Detached (M_enc, C) slot: the descriptors' word embeddings, cycled to fill
/// the slot, optionally shuffled and perturbed.
pub fn slot_tokens(model: &Model, spec: &ShapeSpec, permute: bool, noise: f64, rng: &mut StreamRng) -> Result<Tensor> {
    let mut ids = descriptor_ids(model, spec)?.to_vec();
    if permute {
        ids.shuffle(rng);
    }
    let m = model.cfg.m_enc;
    let ids: Vec<u32> = (0..m).map(|j| ids[j % ids.len()]).collect();
    let e = model.decoder.embed_tokens(&ids)?.detach();
    if noise <= 0.0 {
        return Ok(e);
    }
    let scale = mean_embedding_norm(model)? / (model.cfg.channels as f64).sqrt();
    let z = randn(rng, e.dims(), e.dtype())?;
    Ok((e + (z * (noise * scale))?)?)
}

pub fn mean_embedding_norm(model: &Model) -> Result<f64> {
    let t = model.decoder.word_embeddings();
    scalar(&t.sqr()?.sum(D::Minus1)?.sqrt()?.mean_all()?)
}

fn optimizer_stage(lr_clip: f64) -> StageConfig {
    let mut s = StageConfig::preset(Stage::S3);
    s.betas = [0.9, 0.99];
    s.eps = 1e-8;
    s.weight_decay = 0.0;
    s.grad_clip = lr_clip;
    s
}

fn group_params(model: &Model, group: ParamGroup, lr: f64) -> Vec<(String, candle_core::Var, f64)> {
    model
        .store
        .vars()
        .into_iter()
        .filter(|(n, _)| n.starts_with(group.prefix()))
        .map(|(n, v)| (n, v, lr))
        .collect()
}

fn lm_example(model: &Model, spec: &ShapeSpec, opts: &FoundationOptions, rng: &mut StreamRng) -> Result<(PackedSequence, Tensor)> {
    // Pixels never reach the language model here; the slot carries descriptors.
    let r = model.cfg.resolution;
    let img = Element::Image(ImageRecord::new(crate::datamodel::Image::filled(r, r, 0.5)));
    let elements = if rng.random::<f64>() < opts.qa_fraction {
        let positive = rng.random::<bool>();
        let label = if positive {
            spec.shape.clone()
        } else {
            let others: Vec<&str> = SHAPES.iter().copied().filter(|x| *x != spec.shape).collect();
            others[rng.random_range(0..others.len())].to_string()
        };
        let answer = if positive { "yes" } else { "no" };
        vec![img, Element::Text(format!("{} {answer}", yesno_question(&label)))]
    } else {
        let text = Element::Text(caption(spec, 0.0, rng));
        if rng.random::<bool>() {
            vec![img, text]
        } else {
            vec![text, img]
        }
    };
    let qa = elements.len() == 2 && matches!(elements[0], Element::Image(_)) && matches!(&elements[1], Element::Text(t) if t.ends_with(" yes") || t.ends_with(" no"));
    let doc = InterleavedDocument::new("lm", elements);
    let mut seq = assemble(&doc, &model.tokenizer, model.tokenizer.special(), model.cfg.m_enc)?;
    if qa {
        // Supervise only the answer so the binding between the slot and the
        // asked label carries the whole loss.
        let last = seq.len() - 1;
        for (i, m) in seq.ntp_mask.iter_mut().enumerate() {
            *m = (i == last) as u8;
        }
    }
    let slot = slot_tokens(model, spec, opts.permute_slots, opts.slot_noise, rng)?;
    Ok((seq, slot))
}

/// Every shape × color × texture combination, in and out of distribution.
pub fn descriptor_grid() -> Vec<ShapeSpec> {
    let mut out = Vec::new();
    for shape in SHAPES {
        for color in TRAIN_COLORS.iter().chain(&OOD_COLORS) {
            for texture in TRAIN_TEXTURES.iter().chain(&OOD_TEXTURES) {
                out.push(ShapeSpec {
                    shape: shape.into(),
                    color: color.to_string(),
                    texture: texture.to_string(),
                });
            }
        }
    }
    out
}

/// Trains only the language-model group on descriptor-slot text. Returns the
/// per-step loss.
pub fn pretrain_language(model: &Model, specs: &[ShapeSpec], opts: &FoundationOptions, seed: Seed) -> Result<Vec<f64>> {
    let stage = optimizer_stage(1.0);
    let mut opt = AdamW::new();
    let mut losses = Vec::with_capacity(opts.lm_steps);
    for step in 0..opts.lm_steps {
        let mut rng = seed.indexed("lm", step as u64);
        let mut seqs = Vec::new();
        let mut rows = Vec::new();
        for _ in 0..opts.batch_size {
            let spec = &specs[rng.random_range(0..specs.len())];
            let (seq, slot) = lm_example(model, spec, opts, &mut rng)?;
            rows.push(model.decoder.embed_sequence(&seq, &[slot])?);
            seqs.push(seq);
        }
        let refs: Vec<&PackedSequence> = seqs.iter().collect();
        let (ids, masks, k) = pad_batch(&refs, model.tokenizer.special().pad);
        let padded = rows.iter().map(|r| pad_rows(r, k)).collect::<Result<Vec<_>>>()?;
        let states = model.decoder.decode(&Tensor::stack(&padded, 0)?)?;
        let (loss, _) = model.decoder.ntp_loss(&states, &ids, &masks)?;
        let grads = loss.backward()?;
        let lr = opts.lm_lr * cosine(step, opts.lm_steps);
        opt.update(&group_params(model, ParamGroup::Llm, lr), &grads, &stage)?;
        losses.push(scalar(&loss)?);
    }
    Ok(losses)
}

fn cosine(step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    0.5 * (1.0 + (std::f64::consts::PI * (step - warm) as f64 / (total - warm).max(1) as f64).cos())
}

/// Trains only the diffusion group to draw images from descriptor slots,
/// with the null condition substituted at rate `null_drop`.
pub fn pretrain_diffusion(model: &Model, samples: &[SynthSample], opts: &FoundationOptions, seed: Seed) -> Result<Vec<f64>> {
    let stage = optimizer_stage(1.0);
    let mut opt = AdamW::new();
    let mut losses = Vec::with_capacity(opts.dm_steps);
    for step in 0..opts.dm_steps {
        let mut rng = seed.indexed("dm", step as u64);
        let mut conds = Vec::new();
        let mut recs = Vec::new();
        for _ in 0..opts.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            conds.push(if rng.random::<f64>() < opts.null_drop {
                DiffusionCondition::null()
            } else {
                DiffusionCondition::llm_context(slot_tokens(model, &s.spec, opts.permute_slots, 0.0, &mut rng)?)
            });
            recs.push(ImageRecord::new(s.image.clone()));
        }
        let rec_refs: Vec<&ImageRecord> = recs.iter().collect();
        let pixels = model.pixel_batch(&rec_refs)?;
        let cond_refs: Vec<&DiffusionCondition> = conds.iter().collect();
        let cond = model.denoiser.condition_tokens(&cond_refs)?;
        let draw = NoiseDraw::sample(&model.schedule, pixels.dims(), pixels.dtype(), &mut rng)?;
        let loss = denoising_loss(&model.denoiser, &model.schedule, &pixels, &cond, &draw)?;
        let grads = loss.backward()?;
        let lr = opts.dm_lr * cosine(step, opts.dm_steps);
        opt.update(&group_params(model, ParamGroup::Dm, lr), &grads, &stage)?;
        losses.push(scalar(&loss)?);
    }
    Ok(losses)
}
