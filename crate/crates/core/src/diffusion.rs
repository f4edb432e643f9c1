//! Noise schedule, conditional noise-prediction network, the two denoising
//! losses, guided ancestral sampling and partial-noise reconstruction.
//!
//! Pixels enter and leave in `[0, 1]`; the network works on `2x - 1`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Attention, Conv2d, LayerNorm, Linear, Mlp};
use crate::params::{Builder, Init};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Linear betas from `start` to `end` inclusive.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument("schedule needs at least two steps".into()));
        }
        let betas = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// The 1e-4..2e-2 linear range defined for 1000 steps, rescaled by
    /// 1000/T so a short chain still ends near pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps as f64;
        Self::linear(steps, 1e-4 * scale, (2e-2 * scale).min(0.999))
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `sqrt(ab[t]) x0 + sqrt(1 - ab[t]) eps` with one t for the whole tensor.
    pub fn add_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        if x0.dims() != eps.dims() {
            return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims())));
        }
        let ab = self.alpha_bar[t];
        Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// Per-sample timesteps along the leading axis.
    pub fn add_noise_batch(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        let b = x0.dim(0)?;
        if ts.len() != b || x0.dims() != eps.dims() {
            return Err(Error::Shape("add_noise_batch: shape mismatch".into()));
        }
        for &t in ts {
            self.check(t)?;
        }
        let mut shape = vec![b];
        shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
        let sa: Vec<f64> = ts.iter().map(|&t| self.alpha_bar[t].sqrt()).collect();
        let sb: Vec<f64> = ts.iter().map(|&t| (1.0 - self.alpha_bar[t]).sqrt()).collect();
        let sa = Tensor::from_vec(sa, shape.clone(), x0.device())?.to_dtype(x0.dtype())?;
        let sb = Tensor::from_vec(sb, shape, x0.device())?.to_dtype(x0.dtype())?;
        Ok((x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    /// Resampled decoder context preceding the image.
    LlmContext,
    /// The image's own visual tokens.
    EncoderTokens,
    Null,
}

#[derive(Debug, Clone)]
pub struct DiffusionCondition {
    /// M×C tokens; `None` for the null condition.
    pub tokens: Option<Tensor>,
    pub source: ConditionSource,
    /// Identifier of the image the tokens were computed from, when known.
    pub origin: Option<String>,
}

impl DiffusionCondition {
    pub fn llm_context(tokens: Tensor) -> Self {
        Self {
            tokens: Some(tokens),
            source: ConditionSource::LlmContext,
            origin: None,
        }
    }

    pub fn encoder_tokens(tokens: Tensor, origin: Option<String>) -> Self {
        Self {
            tokens: Some(tokens),
            source: ConditionSource::EncoderTokens,
            origin,
        }
    }

    pub fn null() -> Self {
        Self {
            tokens: None,
            source: ConditionSource::Null,
            origin: None,
        }
    }
}

#[derive(Debug, Clone)]
struct DmBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

/// Conditional noise predictor: a patch-conv encoder, transformer blocks with
/// cross-attention to the condition tokens (whose mean is also added to the
/// timestep embedding), and a linear patch decoder
/// followed by a 3×3 refinement conv.
#[derive(Debug, Clone)]
pub struct Denoiser {
    stem: Conv2d,
    pos: Tensor,
    time1: Linear,
    time2: Linear,
    cond_proj: Linear,
    cond_pool: Linear,
    null_cond: Tensor,
    blocks: Vec<DmBlock>,
    ln_out: LayerNorm,
    out: Linear,
    refine: Conv2d,
    width: usize,
    patch: usize,
    resolution: usize,
    channels: usize,
}

impl Denoiser {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dm_width;
        let p = cfg.dm_patch;
        let g = cfg.resolution / p;
        let blocks = (0..cfg.dm_depth)
            .map(|i| {
                let bb = b.pp(format!("block{i}"));
                Ok(DmBlock {
                    ln1: LayerNorm::new(&bb.pp("ln1"), d)?,
                    self_attn: Attention::new(&bb.pp("self_attn"), d, d, cfg.heads)?,
                    ln2: LayerNorm::new(&bb.pp("ln2"), d)?,
                    cross_attn: Attention::new(&bb.pp("cross_attn"), d, d, cfg.heads)?,
                    ln3: LayerNorm::new(&bb.pp("ln3"), d)?,
                    mlp: Mlp::new(&bb.pp("mlp"), d, 4 * d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem: Conv2d::new(&b.pp("stem"), 3, d, p, p, 0)?,
            pos: b.get((g * g, d), "pos", Init::Normal(0.02))?,
            time1: Linear::new(&b.pp("time1"), d, d)?,
            time2: Linear::new(&b.pp("time2"), d, d)?,
            cond_proj: Linear::new(&b.pp("cond_proj"), cfg.channels, d)?,
            cond_pool: Linear::new(&b.pp("cond_pool"), d, d)?,
            null_cond: b.get((1, cfg.channels), "null_cond", Init::Normal(1.0))?,
            blocks,
            ln_out: LayerNorm::new(&b.pp("ln_out"), d)?,
            out: Linear::new(&b.pp("out"), d, 3 * p * p)?,
            refine: Conv2d::new(&b.pp("refine"), 3, 3, 3, 1, 1)?,
            width: d,
            patch: p,
            resolution: cfg.resolution,
            channels: cfg.channels,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Stacks per-sample conditions into (B, M, C). Null conditions use the
    /// learned null token, repeated to the batch's token count; attention over
    /// identical tokens equals attention over one.
    pub fn condition_tokens(&self, conds: &[&DiffusionCondition]) -> Result<Tensor> {
        let m = conds
            .iter()
            .filter_map(|c| c.tokens.as_ref())
            .map(|t| t.dim(0))
            .next()
            .transpose()?
            .unwrap_or(1);
        let rows = conds
            .iter()
            .map(|c| match &c.tokens {
                Some(t) => {
                    let (tm, tc) = t.dims2()?;
                    if tm != m || tc != self.channels {
                        return Err(Error::Shape(format!(
                            "condition tokens ({tm}, {tc}) do not match ({m}, {})",
                            self.channels
                        )));
                    }
                    Ok(t.clone())
                }
                None => Ok(self.null_cond.broadcast_as((m, self.channels))?.contiguous()?),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    /// `x_t`: (B, 3, H, W) in model space; `cond`: (B, M, C). Returns predicted noise.
    pub fn forward(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "denoiser expects (B, 3, {r}, {r}), got {:?}",
                x_t.dims(),
                r = self.resolution
            )));
        }
        if ts.len() != b || cond.dim(0)? != b {
            return Err(Error::Shape("denoiser batch mismatch".into()));
        }
        let (p, d) = (self.patch, self.width);
        let (gh, gw) = (h / p, w / p);
        let tokens = self.stem.forward(x_t)?.reshape((b, d, gh * gw))?.transpose(1, 2)?;
        let temb = timestep_embedding(ts, d, x_t.dtype(), x_t.device())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?.unsqueeze(1)?;
        let ctx = self.cond_proj.forward(cond)?;
        // The pooled condition also shifts every token, next to the timestep.
        let pooled = self.cond_pool.forward(&ctx.mean_keepdim(1)?)?;
        let mut x = tokens.broadcast_add(&self.pos)?.broadcast_add(&(temb + pooled)?)?;
        for blk in &self.blocks {
            let n = blk.ln1.forward(&x)?;
            x = (&x + blk.self_attn.forward(&n, &n, None)?)?;
            x = (&x + blk.cross_attn.forward(&blk.ln2.forward(&x)?, &ctx, None)?)?;
            x = (&x + blk.mlp.forward(&blk.ln3.forward(&x)?)?)?;
        }
        let patches = self.out.forward(&self.ln_out.forward(&x)?)?;
        let img = patches
            .reshape((b, gh, gw, 3, p, p))?
            .permute(vec![0, 3, 1, 4, 2, 5])?
            .contiguous()?
            .reshape((b, 3, h, w))?;
        Ok((&img + self.refine.forward(&img)?)?)
    }

    pub fn predict_noise(&self, x_t: &Tensor, ts: &[usize], conds: &[&DiffusionCondition]) -> Result<Tensor> {
        let cond = self.condition_tokens(conds)?;
        self.forward(x_t, ts, &cond)
    }
}

pub fn to_model_space(pixels: &Tensor) -> Result<Tensor> {
    Ok(((pixels * 2.0)? - 1.0)?)
}

pub fn to_pixel_space(x: &Tensor) -> Result<Tensor> {
    Ok(((x + 1.0)? * 0.5)?.clamp(0.0, 1.0)?)
}

/// One (t, eps) draw per image.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(sched: &NoiseSchedule, shape: &[usize], dtype: DType, rng: &mut R) -> Result<Self> {
        let b = shape[0];
        let ts = (0..b).map(|_| rng.random_range(0..sched.len())).collect();
        let eps = randn(rng, shape, dtype)?;
        Ok(Self { ts, eps })
    }
}

/// Mean squared error between the drawn noise and the network's prediction.
/// `pixels`: (B, 3, H, W) in `[0, 1]`; `cond`: (B, M, C).
pub fn denoising_loss(
    dm: &Denoiser,
    sched: &NoiseSchedule,
    pixels: &Tensor,
    cond: &Tensor,
    draw: &NoiseDraw,
) -> Result<Tensor> {
    let x0 = to_model_space(pixels)?;
    let x_t = sched.add_noise_batch(&x0, &draw.ts, &draw.eps)?;
    let pred = dm.forward(&x_t, &draw.ts, cond)?;
    Ok((pred - &draw.eps)?.sqr()?.mean_all()?)
}

fn check_sources(conds: &[&DiffusionCondition], allowed: &[ConditionSource], what: &str) -> Result<()> {
    if let Some(c) = conds.iter().find(|c| !allowed.contains(&c.source)) {
        return Err(Error::InvalidArgument(format!("{what} got a {:?} condition", c.source)));
    }
    Ok(())
}

/// Next-image prediction loss: conditioned on decoder context (or null when
/// the condition was dropped).
pub fn nip_loss<R: Rng + ?Sized>(
    dm: &Denoiser,
    sched: &NoiseSchedule,
    pixels: &Tensor,
    conds: &[&DiffusionCondition],
    rng: &mut R,
) -> Result<Tensor> {
    check_sources(conds, &[ConditionSource::LlmContext, ConditionSource::Null], "nip_loss")?;
    let draw = NoiseDraw::sample(sched, pixels.dims(), pixels.dtype(), rng)?;
    denoising_loss(dm, sched, pixels, &dm.condition_tokens(conds)?, &draw)
}

/// Consistency loss: the same denoiser conditioned on each image's own
/// visual tokens. `origins` names the image behind each row of `pixels`.
pub fn csr_loss<R: Rng + ?Sized>(
    dm: &Denoiser,
    sched: &NoiseSchedule,
    pixels: &Tensor,
    origins: &[Option<String>],
    conds: &[&DiffusionCondition],
    rng: &mut R,
) -> Result<Tensor> {
    check_sources(conds, &[ConditionSource::EncoderTokens], "csr_loss")?;
    for (i, (c, o)) in conds.iter().zip(origins).enumerate() {
        if let (Some(a), Some(b)) = (&c.origin, o) {
            if a != b {
                return Err(Error::InvalidArgument(format!(
                    "csr_loss row {i}: condition from image {a} paired with image {b}"
                )));
            }
        }
    }
    let draw = NoiseDraw::sample(sched, pixels.dims(), pixels.dtype(), rng)?;
    denoising_loss(dm, sched, pixels, &dm.condition_tokens(conds)?, &draw)
}

/// Classifier-free guidance combination. Scale 1 returns the conditional
/// prediction and scale 0 the unconditional one, without arithmetic.
pub fn guide(eps_cond: &Tensor, eps_null: Option<&Tensor>, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    let eps_null = eps_null.ok_or_else(|| Error::InvalidArgument("guidance needs the null prediction".into()))?;
    if scale == 0.0 {
        return Ok(eps_null.clone());
    }
    Ok((eps_null + ((eps_cond - eps_null)? * scale)?)?)
}

fn guided_eps(dm: &Denoiser, x: &Tensor, t: usize, cond: &DiffusionCondition, scale: f64) -> Result<Tensor> {
    let null = DiffusionCondition::null();
    if scale == 1.0 {
        return dm.predict_noise(x, &[t], &[cond]);
    }
    if scale == 0.0 {
        return dm.predict_noise(x, &[t], &[&null]);
    }
    let both = Tensor::cat(&[x, x], 0)?;
    let eps = dm.predict_noise(&both, &[t, t], &[cond, &null])?;
    guide(&eps.narrow(0, 0, 1)?, Some(&eps.narrow(0, 1, 1)?), scale)
}

/// Ancestral denoising over the increasing timestep list `ts`, starting from
/// `x` at `ts.last()`. Returns the final clean estimate in model space.
fn denoise_chain<R: Rng + ?Sized>(
    dm: &Denoiser,
    sched: &NoiseSchedule,
    mut x: Tensor,
    ts: &[usize],
    cond: &DiffusionCondition,
    guidance: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let ab = sched.alpha_bar();
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let ab_t = ab[t];
        let ab_prev = if i > 0 { ab[ts[i - 1]] } else { 1.0 };
        let eps = guided_eps(dm, &x, t, cond, guidance)?;
        let x0_hat = ((&x - (eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?.clamp(-1.0, 1.0)?;
        if i == 0 {
            return Ok(x0_hat);
        }
        let beta = 1.0 - ab_t / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
        let mean = ((x0_hat * c0)? + (&x * ct)?)?;
        let z = randn(rng, x.dims(), x.dtype())?;
        x = (mean + (z * var.sqrt())?)?;
    }
    Err(Error::InvalidArgument("empty timestep list".into()))
}

fn single(cond: &DiffusionCondition) -> Result<()> {
    if let Some(t) = &cond.tokens {
        t.dims2()?;
    }
    Ok(())
}

/// Evenly spaced timesteps 0..T-1 (inclusive) of length `steps`.
pub fn respaced_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!("steps must be in 1..={total}, got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| ((i as f64) * (total - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Generates one image from pure noise with classifier-free guidance.
pub fn sample<R: Rng + ?Sized>(
    dm: &Denoiser,
    sched: &NoiseSchedule,
    cond: &DiffusionCondition,
    steps: usize,
    guidance: f64,
    dtype: DType,
    rng: &mut R,
) -> Result<Image> {
    single(cond)?;
    let ts = respaced_timesteps(sched.len(), steps)?;
    let r = dm.resolution();
    let x = randn(rng, &[1, 3, r, r], dtype)?;
    let out = denoise_chain(dm, sched, x, &ts, cond, guidance, rng)?;
    Image::from_chw(&to_pixel_space(&out)?.squeeze(0)?)
}

/// Timestep reached by noising a fraction `noise_frac` of the chain.
pub fn partial_start(total: usize, noise_frac: f64) -> Result<usize> {
    if !(noise_frac > 0.0 && noise_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("noise_frac must lie in (0, 1], got {noise_frac}")));
    }
    Ok((noise_frac * (total - 1) as f64).floor() as usize)
}

/// Noises `image` to `floor(noise_frac (T-1))` and denoises back to step 0
/// under `cond` (unguided).
pub fn reconstruct_partial<R: Rng + ?Sized>(
    dm: &Denoiser,
    sched: &NoiseSchedule,
    image: &Image,
    noise_frac: f64,
    cond: &DiffusionCondition,
    dtype: DType,
    rng: &mut R,
) -> Result<Image> {
    single(cond)?;
    let t_star = partial_start(sched.len(), noise_frac)?;
    let x0 = to_model_space(&image.to_chw(dtype)?.unsqueeze(0)?)?;
    let eps = randn(rng, x0.dims(), dtype)?;
    let x = sched.add_noise(&x0, t_star, &eps)?;
    let ts: Vec<usize> = (0..=t_star).collect();
    let out = denoise_chain(dm, sched, x, &ts, cond, 1.0, rng)?;
    Image::from_chw(&to_pixel_space(&out)?.squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::Seed;

    fn dm() -> (ModelConfig, Denoiser) {
        let cfg = ModelConfig::tiny();
        let store = ParamStore::new(Seed(21).stream("init"), DType::F64);
        let d = Denoiser::new(&store.root().pp("dm"), &cfg).unwrap();
        (cfg, d)
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar()[0] > 0.99);
        assert!(*s.alpha_bar().last().unwrap() < 1e-3);
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = NoiseSchedule::from_betas(vec![0.36, 0.5]).unwrap();
        assert!((s.alpha_bar()[0] - 0.64).abs() < 1e-15);
        let x0 = Tensor::ones((2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let out = s.add_noise(&x0, 0, &x0).unwrap();
        for v in vals(&out) {
            assert!((v - 1.4).abs() < 1e-12);
        }
        let zero = x0.zeros_like().unwrap();
        let out = s.add_noise(&x0, 0, &zero).unwrap();
        for v in vals(&out) {
            assert!((v - 0.8).abs() < 1e-12);
        }
        assert!(s.add_noise(&x0, 2, &zero).is_err());
    }

    #[test]
    fn add_noise_identity_when_alpha_bar_is_one() {
        let s = NoiseSchedule::from_betas(vec![1e-300, 0.5]).unwrap();
        let x0 = Tensor::new(&[0.3f64, -0.2, 0.9], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[5.0f64, 5.0, 5.0], &Device::Cpu).unwrap();
        assert_eq!(vals(&s.add_noise(&x0, 0, &eps).unwrap()), vals(&x0));
    }

    #[test]
    fn predict_noise_shape_and_condition_sensitivity() {
        let (cfg, d) = dm();
        let mut rng = Seed(1).stream("x");
        let x = randn(&mut rng, &[1, 3, 16, 16], DType::F64).unwrap();
        let toks = randn(&mut rng, &[cfg.m_llm, cfg.channels], DType::F64).unwrap();
        let c = DiffusionCondition::llm_context(toks);
        let null = DiffusionCondition::null();
        let a = d.predict_noise(&x, &[5], &[&c]).unwrap();
        let a2 = d.predict_noise(&x, &[5], &[&c]).unwrap();
        let n = d.predict_noise(&x, &[5], &[&null]).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert_eq!(vals(&a), vals(&a2));
        assert_ne!(vals(&a), vals(&n));
    }

    #[test]
    fn null_tokens_repeat_equivalence() {
        let (cfg, d) = dm();
        let mut rng = Seed(2).stream("x");
        let x = randn(&mut rng, &[1, 3, 16, 16], DType::F64).unwrap();
        let null = DiffusionCondition::null();
        let one = d.predict_noise(&x, &[3], &[&null]).unwrap();
        let rep = d.null_cond.broadcast_as((cfg.m_llm, cfg.channels)).unwrap().contiguous().unwrap();
        let many = d.forward(&x, &[3], &rep.unsqueeze(0).unwrap()).unwrap();
        let diff = vals(&(one - many).unwrap()).into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn guidance_identities() {
        let mut rng = Seed(3).stream("g");
        let c = randn(&mut rng, &[1, 3, 4, 4], DType::F32).unwrap();
        let n = randn(&mut rng, &[1, 3, 4, 4], DType::F32).unwrap();
        assert_eq!(vals(&guide(&c, Some(&n), 1.0).unwrap()), vals(&c));
        assert_eq!(vals(&guide(&c, Some(&n), 0.0).unwrap()), vals(&n));
        let g = vals(&guide(&c, Some(&n), 3.0).unwrap());
        let (cv, nv) = (vals(&c), vals(&n));
        for i in 0..g.len() {
            assert!((g[i] - (nv[i] + 3.0 * (cv[i] - nv[i]))).abs() < 1e-5);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_clipped() {
        let (cfg, d) = dm();
        let s = NoiseSchedule::scaled_linear(cfg.timesteps).unwrap();
        let toks = randn(&mut Seed(4).stream("c"), &[cfg.m_llm, cfg.channels], DType::F64).unwrap();
        let c = DiffusionCondition::llm_context(toks);
        let a = sample(&d, &s, &c, 10, 3.0, DType::F64, &mut Seed(9).stream("s")).unwrap();
        let b = sample(&d, &s, &c, 10, 3.0, DType::F64, &mut Seed(9).stream("s")).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(sample(&d, &s, &c, cfg.timesteps + 1, 1.0, DType::F64, &mut Seed(9).stream("s")).is_err());
    }

    #[test]
    fn partial_start_index() {
        assert_eq!(partial_start(100, 0.65).unwrap(), 64);
        assert_eq!(partial_start(100, 1.0).unwrap(), 99);
        assert_eq!(partial_start(100, 0.001).unwrap(), 0);
        assert!(partial_start(100, 0.0).is_err());
        assert!(partial_start(100, 1.5).is_err());
    }

    #[test]
    fn respacing() {
        assert_eq!(respaced_timesteps(100, 1).unwrap(), vec![99]);
        assert_eq!(respaced_timesteps(10, 10).unwrap(), (0..10).collect::<Vec<_>>());
        let ts = respaced_timesteps(100, 5).unwrap();
        assert_eq!(ts, vec![0, 25, 50, 74, 99]);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        // The loss is the MSE between eps and the prediction; feeding eps back
        // as the prediction must give exactly zero.
        let mut rng = Seed(5).stream("x");
        let eps = randn(&mut rng, &[2, 3, 4, 4], DType::F64).unwrap();
        let l = (eps.clone() - &eps).unwrap().sqr().unwrap().mean_all().unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn csr_rejects_mismatched_origin_and_wrong_source() {
        let (cfg, d) = dm();
        let s = NoiseSchedule::scaled_linear(cfg.timesteps).unwrap();
        let px = Tensor::full(0.5f64, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let toks = Tensor::zeros((cfg.m_enc, cfg.channels), DType::F64, &Device::Cpu).unwrap();
        let c = DiffusionCondition::encoder_tokens(toks.clone(), Some("a".into()));
        let mut rng = Seed(1).stream("csr");
        assert!(csr_loss(&d, &s, &px, &[Some("b".into())], &[&c], &mut rng).is_err());
        assert!(csr_loss(&d, &s, &px, &[Some("a".into())], &[&c], &mut rng).is_ok());
        let wrong = DiffusionCondition::llm_context(toks);
        assert!(csr_loss(&d, &s, &px, &[None], &[&wrong], &mut rng).is_err());
        assert!(nip_loss(&d, &s, &px, &[&c], &mut rng).is_err());
    }
}
