//! Image encoder, mask-aware region extraction, and the two resamplers.

use std::str::FromStr;

use candle_core::{DType, Tensor};

use crate::config::ModelConfig;
use crate::datamodel::{Image, Mask};
use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, LayerNorm, Linear, Mlp};
use crate::params::{Builder, Init};

/// Visual tokens of one image, N×C in row-major grid order.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    /// Pixel extent of the source image.
    pub image_size: (usize, usize),
}

/// Fixed-count token set, M×C.
#[derive(Debug, Clone)]
pub struct ResampledTokens {
    pub tokens: Tensor,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(b: &Builder, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&b.pp("conv1"), ch, ch, 3, 1, 1)?,
            conv2: Conv2d::new(&b.pp("conv2"), ch, ch, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Small strided convolutional encoder: a 4×4/4 patch stem followed by
/// residual stages with 2×2/2 downsampling until the configured stride.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stem: Conv2d,
    stem_block: ResBlock,
    stages: Vec<(Conv2d, ResBlock)>,
    proj: Linear,
    pos: Tensor,
    resolution: usize,
    stride: usize,
    channels: usize,
}

impl ImageEncoder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.encoder_width;
        let mut stages = Vec::new();
        let mut s = 4;
        let mut i = 0;
        while s < cfg.encoder_stride {
            let sb = b.pp(format!("stage{i}"));
            stages.push((Conv2d::new(&sb.pp("down"), w, w, 2, 2, 0)?, ResBlock::new(&sb.pp("block"), w)?));
            s *= 2;
            i += 1;
        }
        Ok(Self {
            stem: Conv2d::new(&b.pp("stem"), 3, w, 4, 4, 0)?,
            stem_block: ResBlock::new(&b.pp("stem_block"), w)?,
            stages,
            proj: Linear::new(&b.pp("proj"), w, cfg.channels)?,
            pos: b.get((cfg.num_visual_tokens(), cfg.channels), "pos", Init::Normal(0.02))?,
            resolution: cfg.resolution,
            stride: cfg.encoder_stride,
            channels: cfg.channels,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.resolution / self.stride, self.resolution / self.stride)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `pixels`: (B, 3, H, W) in `[0, 1]`; returns (B, N, C).
    pub fn forward(&self, pixels: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = pixels.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "encoder expects (B, 3, {r}, {r}), got (_, {c}, {h}, {w})",
                r = self.resolution
            )));
        }
        let x = ((pixels - 0.5)? * 2.0)?;
        let mut x = self.stem_block.forward(&self.stem.forward(&x)?.gelu()?)?;
        for (down, block) in &self.stages {
            x = block.forward(&down.forward(&x)?.gelu()?)?;
        }
        let (b, ch, gh, gw) = x.dims4()?;
        let tokens = x.reshape((b, ch, gh * gw))?.transpose(1, 2)?.contiguous()?;
        Ok(self.proj.forward(&tokens)?.broadcast_add(&self.pos)?)
    }

    /// Encodes one H×W×3 image.
    pub fn encode_image(&self, image: &Image, dtype: DType) -> Result<ImageEmbedding> {
        if image.height() != self.resolution || image.width() != self.resolution {
            return Err(Error::Shape(format!(
                "encoder expects {r}x{r}x3 pixels, got {}x{}x3",
                image.height(),
                image.width(),
                r = self.resolution
            )));
        }
        let x = image.to_chw(dtype)?.unsqueeze(0)?;
        Ok(ImageEmbedding {
            tokens: self.forward(&x)?.squeeze(0)?,
            grid: self.grid(),
            image_size: (image.height(), image.width()),
        })
    }
}

/// Area-averages `mask` onto the token grid and thresholds at 0.5.
/// Returns one 0/1 value per grid cell in row-major order.
pub fn downsample_mask(mask: &Mask, grid: (usize, usize)) -> Result<Vec<f32>> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || mask.height() % gh != 0 || mask.width() % gw != 0 {
        return Err(Error::Shape(format!(
            "mask {}x{} does not tile a {gh}x{gw} grid",
            mask.height(),
            mask.width()
        )));
    }
    let (ch, cw) = (mask.height() / gh, mask.width() / gw);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut on = 0usize;
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    on += mask.get(y, x) as usize;
                }
            }
            let frac = on as f64 / (ch * cw) as f64;
            out.push(if frac >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// Multiplies each visual token by its grid cell's mask value.
pub fn mask_aware_extract(e: &ImageEmbedding, mask: &Mask) -> Result<ImageEmbedding> {
    if (mask.height(), mask.width()) != e.image_size {
        return Err(Error::Shape(format!(
            "mask shape mismatch: {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            e.image_size.0,
            e.image_size.1
        )));
    }
    let cells = downsample_mask(mask, e.grid)?;
    let n = cells.len();
    let m = Tensor::from_vec(cells, (n, 1), e.tokens.device())?.to_dtype(e.tokens.dtype())?;
    Ok(ImageEmbedding {
        tokens: e.tokens.broadcast_mul(&m)?,
        grid: e.grid,
        image_size: e.image_size,
    })
}

/// Batched form: `tokens` (B, N, C), one mask per image.
pub fn mask_aware_extract_batch(tokens: &Tensor, masks: &[Mask], grid: (usize, usize)) -> Result<Tensor> {
    let (b, n, _) = tokens.dims3()?;
    if masks.len() != b {
        return Err(Error::Shape(format!("{} masks for {b} images", masks.len())));
    }
    let mut cells = Vec::with_capacity(b * n);
    for m in masks {
        cells.extend(downsample_mask(m, grid)?);
    }
    let m = Tensor::from_vec(cells, (b, n, 1), tokens.device())?.to_dtype(tokens.dtype())?;
    Ok(tokens.broadcast_mul(&m)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResamplerId {
    /// Reads decoder hidden states; conditions next-image prediction.
    LlmSide,
    /// Reads encoder tokens; its output is the image's visual-token set.
    EncoderSide,
}

impl FromStr for ResamplerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm_side" => Ok(Self::LlmSide),
            "encoder_side" => Ok(Self::EncoderSide),
            other => Err(Error::InvalidArgument(format!("unknown resampler id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
struct ResamplerBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// Learned queries cross-attending to the concatenation of inputs and latents.
#[derive(Debug, Clone)]
pub struct Resampler {
    queries: Tensor,
    blocks: Vec<ResamplerBlock>,
    ln_out: LayerNorm,
}

impl Resampler {
    pub fn new(b: &Builder, dim: usize, queries: usize, depth: usize, heads: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                let bb = b.pp(format!("block{i}"));
                Ok(ResamplerBlock {
                    ln_q: LayerNorm::new(&bb.pp("ln_q"), dim)?,
                    ln_kv: LayerNorm::new(&bb.pp("ln_kv"), dim)?,
                    attn: Attention::new(&bb.pp("attn"), dim, dim, heads)?,
                    ln_mlp: LayerNorm::new(&bb.pp("ln_mlp"), dim)?,
                    mlp: Mlp::new(&bb.pp("mlp"), dim, 2 * dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries: b.get((queries, dim), "queries", Init::Normal(1.0))?,
            blocks,
            ln_out: LayerNorm::new(&b.pp("ln_out"), dim)?,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.dim(0).unwrap_or(0)
    }

    /// `x`: (B, N, C) with N ≥ 1; returns (B, M, C).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        if n == 0 {
            return Err(Error::Shape("resampler needs at least one input token".into()));
        }
        let m = self.num_queries();
        let mut lat = self.queries.unsqueeze(0)?.broadcast_as((b, m, c))?.contiguous()?;
        for blk in &self.blocks {
            let q = blk.ln_q.forward(&lat)?;
            let kv = Tensor::cat(&[&blk.ln_kv.forward(x)?, &q], 1)?;
            lat = (&lat + blk.attn.forward(&q, &kv, None)?)?;
            lat = (&lat + blk.mlp.forward(&blk.ln_mlp.forward(&lat)?)?)?;
        }
        self.ln_out.forward(&lat)
    }
}

/// The two independently parameterized resamplers.
#[derive(Debug, Clone)]
pub struct Connectors {
    pub llm_side: Resampler,
    pub encoder_side: Resampler,
}

impl Connectors {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            llm_side: Resampler::new(&b.pp("llm_side"), cfg.channels, cfg.m_llm, cfg.resampler_depth, cfg.heads)?,
            encoder_side: Resampler::new(
                &b.pp("encoder_side"),
                cfg.channels,
                cfg.m_enc,
                cfg.resampler_depth,
                cfg.heads,
            )?,
        })
    }

    pub fn get(&self, which: ResamplerId) -> &Resampler {
        match which {
            ResamplerId::LlmSide => &self.llm_side,
            ResamplerId::EncoderSide => &self.encoder_side,
        }
    }

    /// Maps N×C tokens to the chosen resampler's M×C output.
    pub fn resample(&self, tokens: &Tensor, which: ResamplerId) -> Result<ResampledTokens> {
        let x = match tokens.rank() {
            2 => tokens.unsqueeze(0)?,
            _ => return Err(Error::Shape(format!("expected N×C tokens, got {:?}", tokens.dims()))),
        };
        Ok(ResampledTokens {
            tokens: self.get(which).forward(&x)?.squeeze(0)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::Seed;
    use candle_core::Device;

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn setup(cfg: &ModelConfig) -> (ParamStore, ImageEncoder, Connectors) {
        let store = ParamStore::new(Seed(11).stream("init"), cfg.dtype().unwrap());
        let enc = ImageEncoder::new(&store.root().pp("vfm"), cfg).unwrap();
        let conn = Connectors::new(&store.root().pp("conn"), cfg).unwrap();
        (store, enc, conn)
    }

    #[test]
    fn encoder_shape_arithmetic() {
        let cfg = ModelConfig {
            resolution: 64,
            encoder_stride: 16,
            channels: 128,
            encoder_width: 8,
            dtype: "f32".into(),
            ..ModelConfig::default()
        };
        let (_, enc, _) = setup(&cfg);
        let e = enc.encode_image(&Image::filled(64, 64, 0.3), DType::F32).unwrap();
        assert_eq!(e.tokens.dims(), &[16, 128]);
        assert_eq!(e.grid, (4, 4));
    }

    #[test]
    fn encoder_is_deterministic_and_not_degenerate() {
        let cfg = ModelConfig::tiny();
        let (_, enc, _) = setup(&cfg);
        let a = enc.encode_image(&Image::filled(16, 16, 0.0), DType::F64).unwrap();
        let a2 = enc.encode_image(&Image::filled(16, 16, 0.0), DType::F64).unwrap();
        let b = enc.encode_image(&Image::filled(16, 16, 1.0), DType::F64).unwrap();
        assert_eq!(max_abs(&(&a.tokens - &a2.tokens).unwrap()), 0.0);
        assert!(max_abs(&(&a.tokens - &b.tokens).unwrap()) > 1e-6);
    }

    #[test]
    fn encoder_rejects_wrong_shape() {
        let cfg = ModelConfig::tiny();
        let (_, enc, _) = setup(&cfg);
        assert!(enc.encode_image(&Image::filled(8, 16, 0.5), DType::F64).is_err());
    }

    fn embedding(vals: Vec<f64>) -> ImageEmbedding {
        ImageEmbedding {
            tokens: Tensor::from_vec(vals, (16, 3), &Device::Cpu).unwrap(),
            grid: (4, 4),
            image_size: (16, 16),
        }
    }

    #[test]
    fn mask_identity_annihilation_and_half() {
        let vals: Vec<f64> = (0..48).map(|i| i as f64 * 0.37 - 3.0).collect();
        let e = embedding(vals.clone());
        let ones = mask_aware_extract(&e, &Mask::ones(16, 16)).unwrap();
        assert_eq!(ones.tokens.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vals);
        let zeros = mask_aware_extract(&e, &Mask::zeros(16, 16)).unwrap();
        assert_eq!(max_abs(&zeros.tokens), 0.0);

        let left = Mask::from_fn(16, 16, |_, x| x < 8);
        let out = mask_aware_extract(&e, &left).unwrap().tokens.to_vec2::<f64>().unwrap();
        // brute force: token index r*4+c keeps its value iff c < 2
        for r in 0..4 {
            for c in 0..4 {
                for k in 0..3 {
                    let want = if c < 2 { vals[(r * 4 + c) * 3 + k] } else { 0.0 };
                    assert_eq!(out[r * 4 + c][k], want);
                }
            }
        }
    }

    #[test]
    fn mask_threshold_is_area_half() {
        // A 4x4 cell with exactly 8 of 16 pixels on rounds up to 1; 7 rounds down.
        let m8 = Mask::from_fn(4, 4, |y, _| y < 2);
        assert_eq!(downsample_mask(&m8, (1, 1)).unwrap(), vec![1.0]);
        let m7 = Mask::from_fn(4, 4, |y, x| y < 2 && !(y == 0 && x == 0));
        assert_eq!(downsample_mask(&m7, (1, 1)).unwrap(), vec![0.0]);
    }

    #[test]
    fn mask_shape_mismatch_errors() {
        let e = embedding(vec![0.0; 48]);
        assert!(mask_aware_extract(&e, &Mask::ones(8, 8)).is_err());
    }

    #[test]
    fn resampler_output_count_is_fixed() {
        let cfg = ModelConfig { dtype: "f32".into(), channels: 128, ..ModelConfig::default() };
        let (_, _, conn) = setup(&cfg);
        for n in [1usize, 4, 16, 256] {
            let x = Tensor::ones((n, 128), DType::F32, &Device::Cpu).unwrap();
            let out = conn.resample(&x, ResamplerId::LlmSide).unwrap();
            assert_eq!(out.tokens.dims(), &[8, 128]);
        }
    }

    #[test]
    fn resamplers_have_independent_parameters() {
        let cfg = ModelConfig::tiny();
        let (_, _, conn) = setup(&cfg);
        let x = Tensor::arange(0f64, 64.0, &Device::Cpu).unwrap().reshape((2, 32)).unwrap();
        let a = conn.resample(&x, ResamplerId::LlmSide).unwrap();
        let b = conn.resample(&x, ResamplerId::EncoderSide).unwrap();
        assert!(max_abs(&(&a.tokens - &b.tokens).unwrap()) > 1e-6);
    }

    #[test]
    fn unknown_resampler_id() {
        assert!("llm_side".parse::<ResamplerId>().is_ok());
        assert!("decoder".parse::<ResamplerId>().is_err());
    }
}
