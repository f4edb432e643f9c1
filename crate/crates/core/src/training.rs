//! Stage objectives, parameter freezing, AdamW, the learning-rate schedule,
//! the training step and the stage driver with metrics and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::diffusion::{csr_loss, nip_loss, DiffusionCondition};
use crate::error::{Error, Result};
use crate::lm::{pad_batch, pad_rows};
use crate::model::{Model, ParamGroup};
use crate::nn::scalar;
use crate::rng::{Seed, StreamRng};
use crate::sequence::{mark_condition_dropout, PackedSequence, DEFAULT_CONDITION_DROP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "1" => Ok(Stage::S1),
            "s2" | "2" => Ok(Stage::S2),
            "s3" | "3" => Ok(Stage::S3),
            _ => Err(Error::InvalidArgument(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrGroups {
    /// Image encoder and diffusion decoder.
    pub encoder_decoder: f64,
    pub language_model: f64,
    /// Resamplers.
    pub others: f64,
}

/// `true` means frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeFlags {
    pub vfm: bool,
    pub llm: bool,
    pub dm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub lambda: f64,
    /// Extra multiplier on the consistency term; 0 gives the no-feedback baseline.
    pub csr_scale: f64,
    pub lr_groups: LrGroups,
    pub freeze: FreezeFlags,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub input_resolution: usize,
    pub grad_clip: f64,
    pub condition_drop: f64,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    pub max_nonfinite_streak: usize,
    /// Evaluate loss terms even when their weight is zero (for logging).
    pub evaluate_disabled_losses: bool,
}

impl StageConfig {
    /// Published per-stage hyperparameters.
    pub fn preset(stage: Stage) -> Self {
        let (lr, freeze, warmup, batch, betas, eps, res) = match stage {
            Stage::S1 => (
                LrGroups {
                    encoder_decoder: 2e-5,
                    language_model: 1e-4,
                    others: 1e-4,
                },
                FreezeFlags {
                    vfm: false,
                    llm: true,
                    dm: true,
                },
                1000,
                4,
                [0.9, 0.995],
                1e-6,
                256,
            ),
            Stage::S2 | Stage::S3 => (
                LrGroups {
                    encoder_decoder: 1e-5,
                    language_model: 1e-6,
                    others: 1e-5,
                },
                FreezeFlags {
                    vfm: true,
                    llm: false,
                    dm: true,
                },
                500,
                if stage == Stage::S2 { 16 } else { 2 },
                [0.9, 0.999],
                1e-8,
                448,
            ),
        };
        Self {
            stage,
            lambda: 5.0,
            csr_scale: 1.0,
            lr_groups: lr,
            freeze,
            warmup_steps: warmup,
            total_steps: 10_000,
            batch_size: batch,
            betas,
            eps,
            weight_decay: 0.05,
            input_resolution: res,
            grad_clip: 1.0,
            condition_drop: DEFAULT_CONDITION_DROP,
            checkpoint_every: 0,
            max_nonfinite_streak: 3,
            evaluate_disabled_losses: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if !(self.csr_scale >= 0.0 && self.csr_scale.is_finite()) {
            return Err(Error::Config("csr_scale must be non-negative".into()));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(0.0..1.0).contains(&self.betas[0]) || !(0.0..1.0).contains(&self.betas[1]) || self.eps <= 0.0 {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_drop) {
            return Err(Error::Config("condition_drop must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Weights of (nip, csr) in the stage objective.
    pub fn loss_weights(&self) -> (f64, f64) {
        match self.stage {
            Stage::S1 => (self.lambda, self.lambda * self.csr_scale),
            Stage::S2 => (0.0, self.lambda * self.csr_scale),
            Stage::S3 => (0.0, 0.0),
        }
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Vfm | ParamGroup::Dm => self.lr_groups.encoder_decoder,
            ParamGroup::Llm => self.lr_groups.language_model,
            ParamGroup::Connectors => self.lr_groups.others,
        }
    }

    /// Warmup then cosine decay, as a multiplier on the group peak rates.
    pub fn lr_factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// `L_S1 = ntp + λ nip + λ csr`, `L_S2 = ntp + λ csr`, `L_S3 = ntp`.
pub fn stage_loss(stage: &StageConfig, ntp: f64, nip: f64, csr: f64) -> Result<f64> {
    for (name, v) in [("ntp", ntp), ("nip", nip), ("csr", csr)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step: 0,
            });
        }
    }
    let (wn, wc) = stage.loss_weights();
    let mut total = ntp;
    if wn != 0.0 {
        total += wn * nip;
    }
    if wc != 0.0 {
        total += wc * csr;
    }
    Ok(total)
}

pub fn trainable_groups(stage: &StageConfig) -> BTreeSet<ParamGroup> {
    let mut g = BTreeSet::from([ParamGroup::Connectors]);
    if !stage.freeze.vfm {
        g.insert(ParamGroup::Vfm);
    }
    if !stage.freeze.llm {
        g.insert(ParamGroup::Llm);
    }
    if !stage.freeze.dm {
        g.insert(ParamGroup::Dm);
    }
    g
}

/// Names of the parameters that receive updates; every name must carry a group tag.
pub fn apply_freeze<'a>(stage: &StageConfig, names: impl IntoIterator<Item = &'a str>) -> Result<Vec<String>> {
    let groups = trainable_groups(stage);
    let mut out = Vec::new();
    for n in names {
        if groups.contains(&ParamGroup::of(n)?) {
            out.push(n.to_string());
        }
    }
    Ok(out)
}

/// Decoupled-weight-decay Adam with per-parameter moments.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("opt/m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("opt/v/{k}"), t.clone());
        }
        out
    }

    pub fn from_state(tensors: &BTreeMap<String, Tensor>, step: u64) -> Self {
        let mut s = Self {
            step,
            ..Self::default()
        };
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("opt/m/") {
                s.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("opt/v/") {
                s.v.insert(n.to_string(), t.clone());
            }
        }
        s
    }

    /// Clips the joint gradient norm of `params` to `clip` (when positive),
    /// then applies one update with per-parameter rates. Returns the
    /// pre-clipping norm.
    pub fn update(
        &mut self,
        params: &[(String, Var, f64)],
        grads: &GradStore,
        stage: &StageConfig,
    ) -> Result<f64> {
        let mut gs = Vec::with_capacity(params.len());
        let mut sq = 0.0;
        for (_, var, _) in params {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            sq += scalar(&g.sqr()?.sum_all()?)?;
            gs.push(g);
        }
        let norm = sq.sqrt();
        let scale = if stage.grad_clip > 0.0 && norm > stage.grad_clip {
            stage.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let [b1, b2] = stage.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((name, var, lr), g) in params.iter().zip(gs) {
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let m = match self.m.get(name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            if *lr != 0.0 {
                let p = var.as_tensor();
                let decayed = (p * (1.0 - lr * stage.weight_decay))?;
                let step = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + stage.eps)?)?;
                var.set(&(decayed - (step * *lr)?)?)?;
            }
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCounts {
    /// Supervised text positions.
    pub ntp: usize,
    /// Images contributing to next-image prediction.
    pub nip: usize,
    /// Images contributing to the consistency term.
    pub csr: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub ntp: f64,
    pub nip: f64,
    pub csr: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub counts: LossCounts,
}

/// Differentiable loss terms of one batch; `None` when not evaluated.
pub struct LossTerms {
    pub ntp: Tensor,
    pub nip: Option<Tensor>,
    pub csr: Option<Tensor>,
    pub counts: LossCounts,
}

/// Independent rng streams per loss component, so switching one term off
/// leaves the draws of the others untouched.
pub struct StepRngs {
    pub nip: StreamRng,
    pub csr: StreamRng,
}

impl StepRngs {
    pub fn new(seed: Seed, step: usize) -> Self {
        Self {
            nip: seed.indexed("nip", step as u64),
            csr: seed.indexed("csr", step as u64),
        }
    }
}

/// Forward pass of one batch under the stage's objective.
pub fn compute_losses(
    model: &Model,
    batch: &[PackedSequence],
    stage: &StageConfig,
    rngs: &mut StepRngs,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (wn, wc) = stage.loss_weights();
    let eval_all = stage.evaluate_disabled_losses;
    let want_nip = stage.stage == Stage::S1 && (wn != 0.0 || eval_all);
    let want_csr = stage.stage != Stage::S3 && (wc != 0.0 || eval_all);

    // (sequence, image) for every image in the batch, in order.
    let mut locs = Vec::new();
    let mut records = Vec::new();
    for (b, seq) in batch.iter().enumerate() {
        for (i, e) in seq.image_entries.iter().enumerate() {
            locs.push((b, i));
            records.push(&e.record);
        }
    }
    let image_tokens = if records.is_empty() {
        None
    } else {
        Some(model.image_tokens(&records)?)
    };

    let mut rows = Vec::with_capacity(batch.len());
    let mut cursor = 0;
    for seq in batch {
        let n = seq.image_entries.len();
        let imgs = (cursor..cursor + n)
            .map(|j| Ok(image_tokens.as_ref().unwrap().get(j)?))
            .collect::<Result<Vec<_>>>()?;
        cursor += n;
        rows.push(model.decoder.embed_sequence(seq, &imgs)?);
    }
    let refs: Vec<&PackedSequence> = batch.iter().collect();
    let (ids, masks, k) = pad_batch(&refs, model.tokenizer.special().pad);
    let padded = rows.iter().map(|r| pad_rows(r, k)).collect::<Result<Vec<_>>>()?;
    let states = model.decoder.decode(&Tensor::stack(&padded, 0)?)?;
    let (ntp, ntp_count) = model.decoder.ntp_loss(&states, &ids, &masks)?;
    let mut counts = LossCounts {
        ntp: ntp_count,
        ..Default::default()
    };

    let nip = if want_nip {
        let mut conds = Vec::new();
        let mut idx = Vec::new();
        for (j, &(b, i)) in locs.iter().enumerate() {
            let e = &batch[b].image_entries[i];
            if e.is_first_in_sequence {
                continue;
            }
            conds.push(if e.condition_dropped {
                DiffusionCondition::null()
            } else {
                let prefix = states.0.get(b)?.narrow(0, 0, e.soi_position + 1)?;
                DiffusionCondition::llm_context(model.context_condition(&prefix)?)
            });
            idx.push(j as u32);
        }
        counts.nip = idx.len();
        if idx.is_empty() {
            None
        } else {
            let pixels = select(&model.pixel_batch(&records)?, &idx)?;
            let refs: Vec<&DiffusionCondition> = conds.iter().collect();
            Some(nip_loss(&model.denoiser, &model.schedule, &pixels, &refs, &mut rngs.nip)?)
        }
    } else {
        None
    };

    let csr = match (&image_tokens, want_csr) {
        (Some(tokens), true) => {
            let origins: Vec<Option<String>> = locs.iter().map(|(b, i)| Some(format!("{b}:{i}"))).collect();
            let conds = (0..locs.len())
                .map(|j| Ok(DiffusionCondition::encoder_tokens(tokens.get(j)?, origins[j].clone())))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DiffusionCondition> = conds.iter().collect();
            counts.csr = conds.len();
            let pixels = model.pixel_batch(&records)?;
            Some(csr_loss(&model.denoiser, &model.schedule, &pixels, &origins, &refs, &mut rngs.csr)?)
        }
        _ => None,
    };
    Ok(LossTerms { ntp, nip, csr, counts })
}

fn select(t: &Tensor, idx: &[u32]) -> Result<Tensor> {
    if idx.len() == t.dim(0)? && idx.iter().enumerate().all(|(a, &b)| a as u32 == b) {
        return Ok(t.clone());
    }
    let ix = Tensor::new(idx, t.device())?;
    Ok(t.index_select(&ix, 0)?)
}

impl LossTerms {
    /// Differentiable stage objective.
    pub fn total(&self, stage: &StageConfig) -> Result<Tensor> {
        let (wn, wc) = stage.loss_weights();
        let mut total = self.ntp.clone();
        if let (Some(n), true) = (&self.nip, wn != 0.0) {
            total = (total + (n * wn)?)?;
        }
        if let (Some(c), true) = (&self.csr, wc != 0.0) {
            total = (total + (c * wc)?)?;
        }
        Ok(total)
    }

    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let v = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose().map(|x| x.unwrap_or(0.0));
        Ok((scalar(&self.ntp)?, v(&self.nip)?, v(&self.csr)?))
    }
}

/// Trainable parameters with their rates at `step`.
pub fn trainable_params(model: &Model, stage: &StageConfig, step: usize) -> Result<Vec<(String, Var, f64)>> {
    let factor = stage.lr_factor(step);
    let vars = model.store.vars();
    let names = apply_freeze(stage, vars.iter().map(|(n, _)| n.as_str()))?;
    let keep: BTreeSet<String> = names.into_iter().collect();
    vars.into_iter()
        .filter(|(n, _)| keep.contains(n))
        .map(|(n, v)| {
            let lr = stage.lr_for(ParamGroup::of(&n)?) * factor;
            Ok((n, v, lr))
        })
        .collect()
}

/// One forward, backward and optimizer update. A non-finite loss aborts the
/// step before any parameter changes.
pub fn train_step(
    model: &Model,
    batch: &[PackedSequence],
    stage: &StageConfig,
    opt: &mut AdamW,
    seed: Seed,
    step: usize,
) -> Result<LossBreakdown> {
    let mut rngs = StepRngs::new(seed, step);
    let terms = compute_losses(model, batch, stage, &mut rngs)?;
    let (ntp, nip, csr) = terms.values()?;
    for (name, v) in [("ntp", ntp), ("nip", nip), ("csr", csr)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step,
            });
        }
    }
    let total = stage_loss(stage, ntp, nip, csr)?;
    let objective = terms.total(stage)?;
    let grads = objective.backward()?;
    let params = trainable_params(model, stage, step)?;
    let grad_norm = opt.update(&params, &grads, stage)?;
    Ok(LossBreakdown {
        step,
        ntp,
        nip,
        csr,
        total,
        lr: stage.lr_factor(step),
        grad_norm,
        counts: terms.counts,
    })
}

/// Random batch for `step`, with condition dropout applied.
pub fn draw_batch(data: &[PackedSequence], stage: &StageConfig, seed: Seed, step: usize) -> Vec<PackedSequence> {
    let mut rng = seed.indexed("batch", step as u64);
    let n = stage.batch_size.min(data.len());
    let mut drop_rng = seed.indexed("dropout", step as u64);
    sample_indices(&mut rng, data.len(), n)
        .into_iter()
        .map(|i| mark_condition_dropout(data[i].clone(), stage.condition_drop, &mut drop_rng))
        .collect()
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub history: Vec<LossBreakdown>,
    pub checkpoint: Option<PathBuf>,
    pub skipped_steps: usize,
}

fn stage_metadata(stage: &StageConfig, step: usize, opt: &AdamW) -> Result<BTreeMap<String, String>> {
    Ok(BTreeMap::from([
        ("stage".to_string(), stage.stage.name().to_string()),
        ("step".to_string(), step.to_string()),
        ("optimizer_step".to_string(), opt.step.to_string()),
        ("stage_config".to_string(), serde_json::to_string(stage)?),
    ]))
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("checkpoint_{}.safetensors", stage.name()))
}

/// Runs `stage.total_steps` steps from `start_step`. With `out_dir`, appends
/// one metrics record per step to `metrics_<stage>.jsonl` and writes the
/// checkpoint (parameters, optimizer state, stage metadata).
pub fn run_stage(
    model: &Model,
    data: &[PackedSequence],
    stage: &StageConfig,
    seed: Seed,
    out_dir: Option<&Path>,
    mut opt: AdamW,
) -> Result<StageOutcome> {
    stage.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("metrics_{}.jsonl", stage.stage.name()));
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut streak = 0;
    let mut skipped = 0;
    let save = |opt: &AdamW, step: usize| -> Result<Option<PathBuf>> {
        match out_dir {
            Some(dir) => {
                let p = checkpoint_path(dir, stage.stage);
                model.save(&p, &opt.state_tensors(), stage_metadata(stage, step, opt)?)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };
    for step in 0..stage.total_steps {
        let batch = draw_batch(data, stage, seed, step);
        match train_step(model, &batch, stage, &mut opt, seed, step) {
            Ok(b) => {
                streak = 0;
                if let Some((f, p)) = &mut log {
                    let rec = serde_json::json!({
                        "step": b.step, "ntp": b.ntp, "nip": b.nip, "csr": b.csr,
                        "total": b.total, "lr": b.lr,
                    });
                    writeln!(f, "{rec}").map_err(|e| Error::io(p.as_path(), e))?;
                }
                log::debug!("{} step {step}: total {:.4}", stage.stage.name(), b.total);
                history.push(b);
            }
            Err(Error::NonFinite { component, step }) => {
                streak += 1;
                skipped += 1;
                log::warn!("skipping step {step}: non-finite {component} loss");
                if streak > stage.max_nonfinite_streak {
                    return Err(Error::NonFinite { component, step });
                }
            }
            Err(e) => return Err(e),
        }
        if stage.checkpoint_every > 0 && (step + 1) % stage.checkpoint_every == 0 {
            save(&opt, step + 1)?;
        }
    }
    let checkpoint = save(&opt, stage.total_steps)?;
    Ok(StageOutcome {
        history,
        checkpoint,
        skipped_steps: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::datamodel::{Element, Image, ImageRecord, InterleavedDocument};
    use crate::sequence::{assemble, Tokenizer};

    fn tiny() -> Model {
        Model::new(&ModelConfig::tiny(), Tokenizer::new(["a", "red", "square"]), Seed(5)).unwrap()
    }

    fn seq(m: &Model, first_image: bool) -> PackedSequence {
        let img = Element::Image(ImageRecord::new(Image::filled(16, 16, 0.3)));
        let txt = Element::Text("a red square".into());
        let els = if first_image { vec![img, txt] } else { vec![txt, img] };
        let doc = InterleavedDocument::new("d", els);
        assemble(&doc, &m.tokenizer, m.tokenizer.special(), m.cfg.m_enc).unwrap()
    }

    fn toy_stage(stage: Stage) -> StageConfig {
        let mut s = StageConfig::preset(stage);
        s.lr_groups = LrGroups {
            encoder_decoder: 1e-2,
            language_model: 1e-2,
            others: 1e-2,
        };
        s.warmup_steps = 0;
        s.total_steps = 10;
        s.batch_size = 2;
        s.condition_drop = 0.0;
        s
    }

    #[test]
    fn stage_formulas() {
        let s1 = StageConfig::preset(Stage::S1);
        assert_eq!(stage_loss(&s1, 2.0, 0.3, 0.5).unwrap(), 6.0);
        let s2 = StageConfig::preset(Stage::S2);
        assert_eq!(stage_loss(&s2, 1.25, 9.0, 0.0).unwrap(), 1.25);
        let s3 = StageConfig::preset(Stage::S3);
        assert_eq!(stage_loss(&s3, 0.7, 3.0, 4.0).unwrap(), 0.7);
        assert!(stage_loss(&s1, f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn preset_values() {
        let s1 = StageConfig::preset(Stage::S1);
        assert_eq!((s1.lr_groups.encoder_decoder, s1.lr_groups.others), (2e-5, 1e-4));
        assert_eq!((s1.betas, s1.eps, s1.weight_decay), ([0.9, 0.995], 1e-6, 0.05));
        assert_eq!((s1.warmup_steps, s1.batch_size, s1.lambda), (1000, 4, 5.0));
        let s2 = StageConfig::preset(Stage::S2);
        assert_eq!((s2.lr_groups.language_model, s2.lr_groups.others), (1e-6, 1e-5));
        assert_eq!((s2.betas, s2.eps, s2.batch_size), ([0.9, 0.999], 1e-8, 16));
        assert_eq!(StageConfig::preset(Stage::S3).batch_size, 2);
    }

    #[test]
    fn freeze_sets() {
        let g = trainable_groups(&StageConfig::preset(Stage::S1));
        assert_eq!(g, BTreeSet::from([ParamGroup::Vfm, ParamGroup::Connectors]));
        let g = trainable_groups(&StageConfig::preset(Stage::S2));
        assert_eq!(g, BTreeSet::from([ParamGroup::Llm, ParamGroup::Connectors]));
        assert!(apply_freeze(&StageConfig::preset(Stage::S1), ["vfm.a", "oops"]).is_err());
    }

    #[test]
    fn schedule_shape() {
        let mut s = StageConfig::preset(Stage::S1);
        s.warmup_steps = 100;
        s.total_steps = 1000;
        assert_eq!(s.lr_factor(0), 0.0);
        assert_eq!(s.lr_factor(100), 1.0);
        assert!(s.lr_factor(1000) <= 1e-3);
        assert!(s.lr_factor(500) < s.lr_factor(200));
    }

    #[test]
    fn s3_has_no_image_losses() {
        let m = tiny();
        let batch = vec![seq(&m, false)];
        let b = train_step(&m, &batch, &toy_stage(Stage::S3), &mut AdamW::new(), Seed(1), 0).unwrap();
        assert_eq!((b.nip, b.csr), (0.0, 0.0));
        assert_eq!(b.total, b.ntp);
    }

    #[test]
    fn first_image_excluded_from_nip() {
        let m = tiny();
        let batch = vec![seq(&m, true)];
        let b = train_step(&m, &batch, &toy_stage(Stage::S1), &mut AdamW::new(), Seed(1), 0).unwrap();
        assert_eq!(b.counts.nip, 0);
        assert_eq!(b.nip, 0.0);
        assert!(b.csr > 0.0);
        let batch = vec![seq(&m, false)];
        let b = train_step(&m, &batch, &toy_stage(Stage::S1), &mut AdamW::new(), Seed(1), 0).unwrap();
        assert_eq!(b.counts.nip, 1);
        assert!(b.nip > 0.0);
    }

    #[test]
    fn zero_weight_matches_skipped_term() {
        // Computing the consistency term with weight 0 must not perturb
        // training relative to not computing it at all.
        let run = |eval: bool| {
            let m = tiny();
            let data = vec![seq(&m, false), seq(&m, true)];
            let mut st = toy_stage(Stage::S1);
            st.csr_scale = 0.0;
            st.evaluate_disabled_losses = eval;
            let out = run_stage(&m, &data, &st, Seed(2), None, AdamW::new()).unwrap();
            let nips: Vec<f64> = out.history.iter().map(|b| b.nip).collect();
            (nips, m.store.snapshot().unwrap())
        };
        let (a, pa) = run(false);
        let (b, pb) = run(true);
        assert_eq!(a, b);
        for (k, v) in &pa {
            assert_eq!(scalar(&(v - &pb[k]).unwrap().abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
        }
    }

    #[test]
    fn checkpoint_carries_optimizer_state() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let data = vec![seq(&m, false)];
        let mut st = toy_stage(Stage::S1);
        st.total_steps = 2;
        let out = run_stage(&m, &data, &st, Seed(3), Some(dir.path()), AdamW::new()).unwrap();
        let (_, extra, meta) = Model::load(out.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(meta["stage"], "s1");
        assert_eq!(meta["optimizer_step"], "2");
        assert!(extra.keys().any(|k| k.starts_with("opt/m/vfm.")));
        let lines = std::fs::read_to_string(dir.path().join("metrics_s1.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2);
        let rec: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        for k in ["step", "ntp", "nip", "csr", "total", "lr"] {
            assert!(rec.get(k).is_some());
        }
    }
}
