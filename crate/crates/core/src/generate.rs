//! Autoregressive multimodal inference. Text tokens are sampled from the
//! decoder; when the emitted token is `<SOI>`, the diffusion decoder draws an
//! image conditioned on the resampled context, and that image's visual
//! tokens are placed back into the context before decoding resumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImageRecord, InterleavedDocument};
use crate::diffusion::{sample, DiffusionCondition};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::scalar;
use crate::rng::Seed;
use crate::sequence::{assemble, EmbeddingSlot, ImageEntry, PackedSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    pub max_images: usize,
    /// 0 selects the most likely token.
    pub temperature: f64,
    pub top_k: usize,
    pub guidance_scale: f64,
    pub sample_steps: usize,
    /// Tokens emitted verbatim before free decoding begins.
    pub forced_tokens: Vec<u32>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_tokens: 32,
            max_images: 1,
            temperature: 1.0,
            top_k: 50,
            guidance_scale: 3.0,
            sample_steps: 50,
            forced_tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    /// Generated ids, including `<SOI>` and the `<IMG>` runs of generated images.
    pub tokens: Vec<u32>,
    pub text: String,
    pub images: Vec<Image>,
    pub sampler_calls: usize,
}

/// Top-k / temperature choice over one logit row.
pub fn choose_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> u32 {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if temperature <= 0.0 || order.len() == 1 {
        return order[0] as u32;
    }
    order.truncate(top_k.max(1));
    let top = logits[order[0]];
    let w: Vec<f64> = order.iter().map(|&i| ((logits[i] - top) / temperature).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (k, wi) in w.iter().enumerate() {
        if u < *wi {
            return order[k] as u32;
        }
        u -= wi;
    }
    *order.last().unwrap() as u32
}

struct Context {
    seq: PackedSequence,
}

impl Context {
    fn push_image(&mut self, model: &Model, image: Image, soi_position: usize) {
        let special = model.tokenizer.special();
        let m = model.cfg.m_enc;
        self.seq.embedding_slots.push(EmbeddingSlot {
            position: self.seq.len(),
            image_index: self.seq.image_entries.len(),
        });
        self.seq.token_ids.extend(std::iter::repeat_n(special.img, m));
        self.seq.ntp_mask.extend(std::iter::repeat_n(0u8, m));
        self.seq.image_entries.push(ImageEntry {
            record: ImageRecord::new(image),
            is_first_in_sequence: soi_position == 0,
            condition_dropped: false,
            soi_position,
        });
    }

    fn states(&self, model: &Model) -> Result<candle_core::Tensor> {
        let recs: Vec<&ImageRecord> = self.seq.image_entries.iter().map(|e| &e.record).collect();
        let imgs = if recs.is_empty() {
            Vec::new()
        } else {
            let t = model.image_tokens(&recs)?;
            (0..recs.len()).map(|i| t.get(i)).collect::<candle_core::Result<Vec<_>>>()?
        };
        let e = model.decoder.embed_sequence(&self.seq, &imgs)?;
        Ok(model.decoder.decode(&e)?.0.squeeze(0)?)
    }
}

/// Continues `prompt` under `opts`. Randomness: text draws use the `text`
/// stream, image `i` uses stream `image` index `i`.
pub fn generate(model: &Model, prompt: &InterleavedDocument, opts: &GenerateOptions, seed: Seed) -> Result<Transcript> {
    let special = model.tokenizer.special();
    let mut ctx = Context {
        seq: assemble(prompt, &model.tokenizer, special, model.cfg.m_enc)?,
    };
    if ctx.seq.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut text_rng = seed.stream("text");
    let mut out = Transcript {
        tokens: Vec::new(),
        text: String::new(),
        images: Vec::new(),
        sampler_calls: 0,
    };
    let mut emitted = 0;
    while emitted < opts.max_tokens && ctx.seq.len() < model.decoder.max_len() {
        let states = ctx.states(model)?;
        let tok = match opts.forced_tokens.get(emitted) {
            Some(&t) => t,
            None => {
                let last = states.get(states.dim(0)? - 1)?;
                let logits: Vec<f64> = model.decoder.logits(&last)?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
                let mut logits = logits;
                logits[special.img as usize] = f64::NEG_INFINITY;
                logits[special.pad as usize] = f64::NEG_INFINITY;
                if out.images.len() >= opts.max_images {
                    logits[special.soi as usize] = f64::NEG_INFINITY;
                }
                choose_token(&logits, opts.temperature, opts.top_k, &mut text_rng)
            }
        };
        emitted += 1;
        if tok == special.eos {
            out.tokens.push(tok);
            break;
        }
        if tok == special.soi {
            if out.images.len() >= opts.max_images {
                break;
            }
            let soi_position = ctx.seq.len();
            ctx.seq.token_ids.push(tok);
            ctx.seq.ntp_mask.push(1);
            out.tokens.push(tok);
            if ctx.seq.len() + model.cfg.m_enc > model.decoder.max_len() {
                break;
            }
            let states = ctx.states(model)?;
            let cond = DiffusionCondition::llm_context(model.context_condition(&states)?);
            let mut img_rng = seed.indexed("image", out.images.len() as u64);
            let image = sample(
                &model.denoiser,
                &model.schedule,
                &cond,
                opts.sample_steps.min(model.schedule.len()),
                opts.guidance_scale,
                model.dtype(),
                &mut img_rng,
            )?;
            out.sampler_calls += 1;
            ctx.push_image(model, image.clone(), soi_position);
            out.tokens.extend(std::iter::repeat_n(special.img, model.cfg.m_enc));
            out.images.push(image);
            continue;
        }
        if tok as usize >= model.tokenizer.vocab_size() {
            return Err(Error::InvalidArgument(format!("token {tok} outside vocabulary")));
        }
        ctx.seq.token_ids.push(tok);
        ctx.seq.ntp_mask.push(1);
        out.tokens.push(tok);
    }
    let text_ids: Vec<u32> = out
        .tokens
        .iter()
        .copied()
        .filter(|&t| t != special.img && t != special.eos)
        .collect();
    out.text = model.tokenizer.decode(&text_ids);
    Ok(out)
}

/// Partial-noise reconstruction of `image`, conditioned on its own encoder
/// tokens. Uses the `reconstruct` stream.
pub fn reconstruct(model: &Model, image: &Image, noise_frac: f64, seed: Seed) -> Result<Image> {
    let rec = ImageRecord::new(image.clone());
    let tokens = model.image_tokens(&[&rec])?.get(0)?;
    let cond = DiffusionCondition::encoder_tokens(tokens, None);
    crate::diffusion::reconstruct_partial(
        &model.denoiser,
        &model.schedule,
        image,
        noise_frac,
        &cond,
        model.dtype(),
        &mut seed.stream("reconstruct"),
    )
}

/// Greedy answer to a question about `image`: the prompt is the image
/// followed by the question text; no images are generated.
pub fn answer_question(model: &Model, image: &Image, question: &str, max_tokens: usize) -> Result<String> {
    let prompt = InterleavedDocument::new(
        "q",
        vec![
            crate::datamodel::Element::Image(ImageRecord::new(image.clone())),
            crate::datamodel::Element::Text(question.to_string()),
        ],
    );
    let opts = GenerateOptions {
        max_tokens,
        max_images: 0,
        temperature: 0.0,
        ..Default::default()
    };
    Ok(generate(model, &prompt, &opts, Seed(0))?.text)
}

/// Log-probability margin of "yes" over "no" as the next token after the
/// question; positive means the model prefers "yes".
pub fn yes_no_margin(model: &Model, image: &Image, question: &str) -> Result<f64> {
    let (yes, no) = match (model.tokenizer.word_id("yes"), model.tokenizer.word_id("no")) {
        (Some(y), Some(n)) => (y, n),
        _ => return Err(Error::Config("vocabulary lacks yes/no".into())),
    };
    let prompt = InterleavedDocument::new(
        "q",
        vec![
            crate::datamodel::Element::Image(ImageRecord::new(image.clone())),
            crate::datamodel::Element::Text(question.to_string()),
        ],
    );
    let ctx = Context {
        seq: assemble(&prompt, &model.tokenizer, model.tokenizer.special(), model.cfg.m_enc)?,
    };
    let states = ctx.states(model)?;
    let last = states.get(states.dim(0)? - 1)?;
    let logits = model.decoder.logits(&last)?;
    Ok(scalar(&logits.get(yes as usize)?)? - scalar(&logits.get(no as usize)?)?)
}
