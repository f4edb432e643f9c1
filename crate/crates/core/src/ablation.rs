//! Controlled consistency-regularization ablation on synthetic shapes.
//!
//! A shared foundation (language and diffusion models pretrained on
//! descriptor slots) is built once. For each seed, two stage-one runs start
//! from identical parameters and data order and differ only in the weight on
//! the consistency term. Each is scored on the out-of-distribution split with
//! the paired yes/no benchmark.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::foundation::{descriptor_grid, pretrain_diffusion, pretrain_language, FoundationOptions};
use crate::generate::answer_question;
use crate::model::{Model, ParamGroup};
use crate::par;
use crate::rng::Seed;
use crate::robustvqa::{build_benchmark, evaluate, parse_answer, EvalReport, LabelEmbeddings, LabeledImage};
use crate::sequence::{assemble, Tokenizer};
use crate::synth::{generate, pair_documents, Split, SynthSample, SHAPES};
use crate::training::{run_stage, AdamW, LrGroups, Stage, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub foundation: FoundationOptions,
    pub foundation_seed: u64,
    pub n_foundation: usize,
    pub n_train: usize,
    pub n_ood: usize,
    pub caption_shape_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub lambda: f64,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                resolution: 32,
                channels: 48,
                encoder_stride: 8,
                encoder_width: 16,
                m_llm: 3,
                m_enc: 3,
                resampler_depth: 1,
                heads: 4,
                lm_layers: 2,
                max_len: 64,
                tie_head: false,
                dm_width: 48,
                dm_patch: 4,
                dm_depth: 2,
                timesteps: 100,
                dtype: "f32".into(),
            },
            foundation: FoundationOptions::default(),
            foundation_seed: 1234,
            n_foundation: 600,
            n_train: 600,
            n_ood: 120,
            caption_shape_rate: 0.0,
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 30,
            lambda: 5.0,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl AblationConfig {
    pub fn stage(&self, csr_on: bool) -> StageConfig {
        let mut s = StageConfig::preset(Stage::S1);
        s.lr_groups = LrGroups {
            encoder_decoder: self.lr,
            language_model: self.lr,
            others: self.lr,
        };
        s.lambda = self.lambda;
        s.csr_scale = if csr_on { 1.0 } else { 0.0 };
        s.total_steps = self.steps;
        s.warmup_steps = self.warmup_steps.min(self.steps);
        s.batch_size = self.batch_size;
        s.input_resolution = self.model.resolution;
        s
    }
}

/// Pretrained language and diffusion groups shared by every arm.
pub struct Foundation {
    pub model: Model,
    pub lm_losses: Vec<f64>,
    pub dm_losses: Vec<f64>,
}

pub fn tokenizer() -> Tokenizer {
    Tokenizer::new(crate::synth::vocabulary())
}

pub fn build_foundation(cfg: &AblationConfig) -> Result<Foundation> {
    let seed = Seed(cfg.foundation_seed);
    let model = Model::new(&cfg.model, tokenizer(), seed)?;
    // The language model knows every descriptor word; the diffusion model only
    // ever sees training-split pixels.
    let samples = generate(Split::Train, cfg.n_foundation, cfg.model.resolution, seed.child("foundation"))?;
    let lm_losses = pretrain_language(&model, &descriptor_grid(), &cfg.foundation, seed)?;
    let dm_losses = pretrain_diffusion(&model, &samples, &cfg.foundation, seed)?;
    Ok(Foundation {
        model,
        lm_losses,
        dm_losses,
    })
}

/// Fresh encoder and connectors from `seed`; language and diffusion groups
/// copied from the foundation.
pub fn arm_model(cfg: &AblationConfig, foundation: &Foundation, seed: u64) -> Result<Model> {
    let m = Model::new(&cfg.model, tokenizer(), Seed(seed).child("arm"))?;
    m.store.copy_group_from(&foundation.model.store, ParamGroup::Llm.prefix())?;
    m.store.copy_group_from(&foundation.model.store, ParamGroup::Dm.prefix())?;
    Ok(m)
}

/// Colour-free silhouette descriptor: the foreground mask cropped to its
/// bounding box and pooled onto an 8×8 grid. Serves as the fixed reference
/// embedding for hard-negative mining, identical for both arms.
pub fn silhouette(img: &Image) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let mut border = Vec::new();
    for x in 0..w {
        for y in [0, h - 1] {
            border.push((0..3).map(|c| img.get(y, x, c)).sum::<f32>() / 3.0);
        }
    }
    border.sort_by(f32::total_cmp);
    let bg = border[border.len() / 2];
    let fg = |y: usize, x: usize| (0..3).any(|c| (img.get(y, x, c) - bg).abs() > 0.12);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    let mut out = vec![0.0f32; 64];
    if y0 > y1 {
        return out;
    }
    let (bh, bw) = ((y1 - y0 + 1) as f32, (x1 - x0 + 1) as f32);
    let mut counts = vec![0.0f32; 64];
    for y in y0..=y1 {
        for x in x0..=x1 {
            let gy = (((y - y0) as f32 / bh) * 8.0) as usize;
            let gx = (((x - x0) as f32 / bw) * 8.0) as usize;
            let k = gy.min(7) * 8 + gx.min(7);
            counts[k] += 1.0;
            out[k] += fg(y, x) as u8 as f32;
        }
    }
    for k in 0..64 {
        if counts[k] > 0.0 {
            out[k] /= counts[k];
        }
    }
    out
}

/// Mean silhouette per label over `samples`.
pub fn label_prototypes(samples: &[SynthSample]) -> LabelEmbeddings {
    let mut sums: BTreeMap<String, (Vec<f32>, f32)> = BTreeMap::new();
    let sil = par::map_slice(samples, |s| silhouette(&s.image));
    for (s, v) in samples.iter().zip(sil) {
        let e = sums.entry(s.spec.shape.clone()).or_insert((vec![0.0; 64], 0.0));
        for (a, b) in e.0.iter_mut().zip(&v) {
            *a += b;
        }
        e.1 += 1.0;
    }
    sums.into_iter()
        .map(|(k, (v, n))| (k, v.into_iter().map(|x| x / n).collect()))
        .collect()
}

/// Paired yes/no benchmark over `samples` with silhouette-mined negatives.
pub fn ood_benchmark(
    samples: &[SynthSample],
    prototypes: &LabelEmbeddings,
) -> Result<(Vec<crate::robustvqa::BenchmarkItem>, BTreeMap<String, Image>)> {
    let labeled: Vec<LabeledImage> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| LabeledImage {
            image_ref: format!("ood-{i:04}"),
            gt_label: s.spec.shape.clone(),
            embedding: Some(silhouette(&s.image)),
            split: Some("ood".into()),
        })
        .collect();
    let items = build_benchmark(&labeled, prototypes, crate::robustvqa::Format::YesNo)?;
    let images = labeled
        .iter()
        .zip(samples)
        .map(|(l, s)| (l.image_ref.clone(), s.image.clone()))
        .collect();
    Ok((items, images))
}

/// Answers every item greedily and scores the transcripts.
pub fn score(model: &Model, items: &[crate::robustvqa::BenchmarkItem], images: &BTreeMap<String, Image>) -> Result<EvalReport> {
    let mut answers = BTreeMap::new();
    for it in items {
        let img = images
            .get(&it.image_ref)
            .ok_or_else(|| Error::Data(format!("no image for {}", it.image_ref)))?;
        let text = answer_question(model, img, &it.question, 2)?;
        answers.insert(it.item_id.clone(), parse_answer(&text, it.format, &it.choices));
    }
    evaluate(items, &answers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub csr_on: bool,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub final_ntp: f64,
    pub final_csr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    /// Seeds on which the regularized arm scored at least the baseline.
    pub wins: usize,
    pub baseline_mean: f64,
    pub regularized_mean: f64,
    pub foundation_qa_accuracy: f64,
}

pub struct AblationData {
    pub train: Vec<SynthSample>,
    pub ood: Vec<SynthSample>,
    pub items: Vec<crate::robustvqa::BenchmarkItem>,
    pub images: BTreeMap<String, Image>,
    pub train_items: Vec<crate::robustvqa::BenchmarkItem>,
    pub train_images: BTreeMap<String, Image>,
}

pub fn prepare_data(cfg: &AblationConfig) -> Result<AblationData> {
    let data_seed = Seed(cfg.foundation_seed).child("data");
    let train = generate(Split::Train, cfg.n_train, cfg.model.resolution, data_seed)?;
    let ood = generate(Split::Ood, cfg.n_ood, cfg.model.resolution, data_seed)?;
    let protos = label_prototypes(&train);
    if protos.len() != SHAPES.len() {
        return Err(Error::Data("training split misses a shape".into()));
    }
    let (items, images) = ood_benchmark(&ood, &protos)?;
    let held = &train[..cfg.n_ood.min(train.len())];
    let (train_items, train_images) = ood_benchmark(held, &protos)?;
    Ok(AblationData {
        train,
        ood,
        items,
        images,
        train_items,
        train_images,
    })
}

/// Trains one arm and scores it; returns the trained model too.
pub fn run_arm(cfg: &AblationConfig, foundation: &Foundation, data: &AblationData, seed: u64, csr_on: bool) -> Result<(ArmResult, Model)> {
    let model = arm_model(cfg, foundation, seed)?;
    let docs = pair_documents(&data.train, cfg.caption_shape_rate, Seed(cfg.foundation_seed).child("docs"));
    let seqs = docs
        .iter()
        .map(|d| assemble(d, &model.tokenizer, model.tokenizer.special(), cfg.model.m_enc))
        .collect::<Result<Vec<_>>>()?;
    let out = run_stage(&model, &seqs, &cfg.stage(csr_on), Seed(seed), None, AdamW::new())?;
    let tail = out.history.len().saturating_sub(20);
    let mean = |f: fn(&crate::training::LossBreakdown) -> f64| {
        let xs: Vec<f64> = out.history[tail..].iter().map(f).collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    };
    let report = score(&model, &data.items, &data.images)?;
    let train_report = score(&model, &data.train_items, &data.train_images)?;
    let result = ArmResult {
        seed,
        csr_on,
        accuracy: report.overall.accuracy,
        train_accuracy: train_report.overall.accuracy,
        final_ntp: mean(|b| b.ntp),
        final_csr: mean(|b| b.csr),
    };
    Ok((result, model))
}

/// Accuracy of the foundation itself when the slot holds exact descriptors.
pub fn foundation_qa_accuracy(foundation: &Foundation, data: &AblationData) -> Result<f64> {
    let m = &foundation.model;
    let mut correct = 0;
    let mut total = 0;
    for (i, s) in data.ood.iter().enumerate().take(60) {
        let slot = crate::foundation::slot_tokens(m, &s.spec, false, 0.0, &mut Seed(0).indexed("fq", i as u64))?;
        for (label, gold) in [(s.spec.shape.clone(), "yes"), (SHAPES[(i + 1) % SHAPES.len()].to_string(), "no")] {
            if label == s.spec.shape && gold == "no" {
                continue;
            }
            let doc = crate::datamodel::InterleavedDocument::new(
                "q",
                vec![
                    crate::datamodel::Element::Image(crate::datamodel::ImageRecord::new(s.image.clone())),
                    crate::datamodel::Element::Text(crate::robustvqa::yesno_question(&label)),
                ],
            );
            let seq = assemble(&doc, &m.tokenizer, m.tokenizer.special(), m.cfg.m_enc)?;
            let e = m.decoder.embed_sequence(&seq, &[slot.clone()])?;
            let st = m.decoder.decode(&e)?.0.squeeze(0)?;
            let logits = m.decoder.logits(&st.get(st.dim(0)? - 1)?)?;
            let v: Vec<f64> = logits.to_dtype(candle_core::DType::F64)?.to_vec1()?;
            let (y, n) = (m.tokenizer.word_id("yes").unwrap(), m.tokenizer.word_id("no").unwrap());
            let pred = if v[y as usize] > v[n as usize] { "yes" } else { "no" };
            correct += (pred == gold) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Everything a full ablation produced: the report plus the shared
/// foundation, the data and the regularized model of every seed.
pub struct AblationOutcome {
    pub report: AblationReport,
    pub foundation: Foundation,
    pub data: AblationData,
    pub regularized: Vec<Model>,
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationOutcome> {
    let foundation = build_foundation(cfg)?;
    let data = prepare_data(cfg)?;
    let fq = foundation_qa_accuracy(&foundation, &data)?;
    let mut arms = Vec::new();
    let mut regularized = Vec::new();
    let mut wins = 0;
    for &seed in &cfg.seeds {
        let (off, _) = run_arm(cfg, &foundation, &data, seed, false)?;
        let (on, model) = run_arm(cfg, &foundation, &data, seed, true)?;
        log::info!("seed {seed}: csr off {:.3} / on {:.3}", off.accuracy, on.accuracy);
        wins += (on.accuracy >= off.accuracy) as usize;
        arms.push(off);
        arms.push(on);
        regularized.push(model);
    }
    let mean = |on: bool| {
        let xs: Vec<f64> = arms.iter().filter(|a| a.csr_on == on).map(|a| a.accuracy).collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    };
    let report = AblationReport {
        baseline_mean: mean(false),
        regularized_mean: mean(true),
        wins,
        arms,
        foundation_qa_accuracy: fq,
    };
    Ok(AblationOutcome {
        report,
        foundation,
        data,
        regularized,
    })
}
