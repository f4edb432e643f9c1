//! Causal multimodal decoder and the next-text-prediction loss.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{causal_bias, log_softmax_last, Attention, Embedding, LayerNorm, Linear, Mlp};
use crate::params::{Builder, Init};
use crate::sequence::PackedSequence;

static EMPTY_MASK_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of times `ntp_loss` saw an all-zero mask.
pub fn empty_mask_warnings() -> usize {
    EMPTY_MASK_WARNINGS.load(Ordering::Relaxed)
}

/// Decoder outputs aligned 1:1 with input positions, (B, K, C).
#[derive(Debug, Clone)]
pub struct HiddenStates(pub Tensor);

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    tok: Embedding,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Option<Linear>,
    channels: usize,
    vocab: usize,
}

impl Decoder {
    pub fn new(b: &Builder, cfg: &ModelConfig, vocab: usize) -> Result<Self> {
        let c = cfg.channels;
        let blocks = (0..cfg.lm_layers)
            .map(|i| {
                let bb = b.pp(format!("layer{i}"));
                Ok(Block {
                    ln1: LayerNorm::new(&bb.pp("ln1"), c)?,
                    attn: Attention::new(&bb.pp("attn"), c, c, cfg.heads)?,
                    ln2: LayerNorm::new(&bb.pp("ln2"), c)?,
                    mlp: Mlp::new(&bb.pp("mlp"), c, 4 * c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok: Embedding::new(&b.pp("tok"), vocab, c)?,
            pos: b.get((cfg.max_len, c), "pos", Init::Normal(0.02))?,
            blocks,
            ln_f: LayerNorm::new(&b.pp("ln_f"), c)?,
            head: if cfg.tie_head {
                None
            } else {
                Some(Linear::no_bias(&b.pp("head"), c, vocab)?)
            },
            channels: c,
            vocab,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.pos.dim(0).unwrap_or(0)
    }

    pub fn word_embeddings(&self) -> &Tensor {
        self.tok.table()
    }

    /// Word-embedding lookup, (K, C).
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        self.tok.lookup(ids)
    }

    /// Word embeddings everywhere except the `<IMG>` runs, which take the
    /// image tokens in slot order. Returns (K, C).
    pub fn embed_sequence(&self, seq: &PackedSequence, images: &[Tensor]) -> Result<Tensor> {
        if images.len() != seq.embedding_slots.len() {
            return Err(Error::Shape(format!(
                "{} image embeddings for {} slots",
                images.len(),
                seq.embedding_slots.len()
            )));
        }
        let mut slots = seq.embedding_slots.clone();
        slots.sort_by_key(|s| s.position);
        let mut parts: Vec<Tensor> = Vec::new();
        let mut cursor = 0usize;
        for slot in &slots {
            let img = images
                .get(slot.image_index)
                .ok_or_else(|| Error::Shape(format!("slot refers to missing image {}", slot.image_index)))?;
            let (m, c) = img.dims2()?;
            if c != self.channels {
                return Err(Error::Shape(format!("image tokens have width {c}, decoder {}", self.channels)));
            }
            if slot.position < cursor || slot.position + m > seq.len() {
                return Err(Error::Shape(format!("slot at {} with {m} tokens does not fit", slot.position)));
            }
            if slot.position > cursor {
                parts.push(self.embed_tokens(&seq.token_ids[cursor..slot.position])?);
            }
            parts.push(img.clone());
            cursor = slot.position + m;
        }
        if cursor < seq.len() {
            parts.push(self.embed_tokens(&seq.token_ids[cursor..])?);
        }
        if parts.is_empty() {
            return Err(Error::Shape("empty sequence".into()));
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Causal decoding of (K, C) or (B, K, C) inputs.
    pub fn decode(&self, e: &Tensor) -> Result<HiddenStates> {
        let x = if e.rank() == 2 { e.unsqueeze(0)? } else { e.clone() };
        let (_, k, c) = x.dims3()?;
        if k == 0 {
            return Err(Error::Shape("decode needs at least one position".into()));
        }
        if k > self.max_len() || c != self.channels {
            return Err(Error::Shape(format!(
                "decode input ({k}, {c}) exceeds ({}, {})",
                self.max_len(),
                self.channels
            )));
        }
        let mut h = x.broadcast_add(&self.pos.narrow(0, 0, k)?)?;
        let bias = causal_bias(k, h.dtype(), h.device())?;
        for blk in &self.blocks {
            let n = blk.ln1.forward(&h)?;
            h = (&h + blk.attn.forward(&n, &n, Some(&bias))?)?;
            h = (&h + blk.mlp.forward(&blk.ln2.forward(&h)?)?)?;
        }
        Ok(HiddenStates(self.ln_f.forward(&h)?))
    }

    /// Vocabulary logits for any (.., C) states.
    pub fn logits(&self, states: &Tensor) -> Result<Tensor> {
        match &self.head {
            Some(h) => h.forward(states),
            None => {
                let dims = states.dims().to_vec();
                let rows = states.elem_count() / self.channels;
                let l = states.reshape((rows, self.channels))?.matmul(&self.tok.table().t()?)?;
                let mut out = dims;
                *out.last_mut().unwrap() = self.vocab;
                Ok(l.reshape(out)?)
            }
        }
    }

    /// Mean negative log-likelihood of `token_ids[b][i]` predicted from
    /// `states[b][i-1]`, over positions with `ntp_mask[b][i] == 1`.
    /// Returns the loss and the number of contributing positions; an all-zero
    /// mask yields 0 and increments the warning counter.
    pub fn ntp_loss(&self, states: &HiddenStates, token_ids: &[Vec<u32>], ntp_mask: &[Vec<u8>]) -> Result<(Tensor, usize)> {
        let s = &states.0;
        let (_, k, _) = s.dims3()?;
        if k < 2 {
            EMPTY_MASK_WARNINGS.fetch_add(1, Ordering::Relaxed);
            return Ok((Tensor::zeros((), s.dtype(), s.device())?, 0));
        }
        let logits = self.logits(&s.narrow(1, 0, k - 1)?)?;
        next_token_nll(&logits, token_ids, ntp_mask)
    }
}

/// Masked next-token cross entropy. `logits[b][i]` scores `token_ids[b][i+1]`;
/// `logits` is (B, K-1, V) while ids and masks have length K.
pub fn next_token_nll(logits: &Tensor, token_ids: &[Vec<u32>], ntp_mask: &[Vec<u8>]) -> Result<(Tensor, usize)> {
    let (b, km1, vocab) = logits.dims3()?;
    let k = km1 + 1;
    if token_ids.len() != b || ntp_mask.len() != b {
        return Err(Error::Shape("batch size mismatch in ntp_loss".into()));
    }
    let mut onehot = vec![0f32; b * km1 * vocab];
    let mut weights = vec![0f32; b * km1];
    let mut count = 0usize;
    for bi in 0..b {
        if token_ids[bi].len() != k || ntp_mask[bi].len() != k {
            return Err(Error::Shape("token/mask length differs from states".into()));
        }
        for i in 1..k {
            if ntp_mask[bi][i] == 1 {
                let row = bi * km1 + (i - 1);
                let t = token_ids[bi][i] as usize;
                if t >= vocab {
                    return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary")));
                }
                onehot[row * vocab + t] = 1.0;
                weights[row] = 1.0;
                count += 1;
            }
        }
    }
    let dev = logits.device();
    let dt = logits.dtype();
    if count == 0 {
        EMPTY_MASK_WARNINGS.fetch_add(1, Ordering::Relaxed);
        return Ok((Tensor::zeros((), dt, dev)?, 0));
    }
    let logp = log_softmax_last(logits)?;
    let onehot = Tensor::from_vec(onehot, (b, km1, vocab), dev)?.to_dtype(dt)?;
    let picked = (logp * onehot)?.sum(2)?;
    let w = Tensor::from_vec(weights, (b, km1), dev)?.to_dtype(dt)?;
    let loss = ((picked * w)?.sum_all()?.neg()? / count as f64)?;
    Ok((loss, count))
}

/// Pads sequences on the right; returns padded ids and masks plus the common length.
pub fn pad_batch(seqs: &[&PackedSequence], pad_id: u32) -> (Vec<Vec<u32>>, Vec<Vec<u8>>, usize) {
    let k = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len());
    let mut masks = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut i = s.token_ids.clone();
        let mut m = s.ntp_mask.clone();
        i.resize(k, pad_id);
        m.resize(k, 0);
        ids.push(i);
        masks.push(m);
    }
    (ids, masks, k)
}

/// Right-pads a (K, C) embedding to `len` rows with zeros.
pub fn pad_rows(e: &Tensor, len: usize) -> Result<Tensor> {
    let (k, c) = e.dims2()?;
    if k == len {
        return Ok(e.clone());
    }
    let pad = Tensor::zeros((len - k, c), e.dtype(), e.device())?;
    Ok(Tensor::cat(&[e, &pad], 0)?)
}
