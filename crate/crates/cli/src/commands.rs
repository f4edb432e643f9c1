use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mmfb::config::RunConfig;
use mmfb::datamodel::{deserialize_docs, Element, InterleavedDocument};
use mmfb::error::{Error, Result};
use mmfb::generate::{answer_question, GenerateOptions};
use mmfb::io::{read_jsonl, write_json, write_jsonl};
use mmfb::model::Model;
use mmfb::rng::Seed;
use mmfb::robustvqa::{self, EmbeddingRecord, Format, LabelEmbeddings, LabeledImage, RawAnswer};
use mmfb::sequence::{build_sequences, corpus_words, Corpus, CorpusOptions, Tokenizer};
use mmfb::synth::{write_dataset, SynthOptions};
use mmfb::training::{run_stage, AdamW, Stage};
use serde::Serialize;
use serde_json::{json, Value};

use crate::imageio::{read_image, write_both};
use crate::{BenchmarkArgs, EvaluateArgs, GenerateArgs, ReconstructArgs, SynthArgs, TrainArgs};

pub const MANIFEST: &str = "manifest.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reproducibility record: command, arguments, seed and resolved config.
fn write_manifest(dir: &Path, command: &str, args: &impl Serialize, seed: Option<u64>, config: Value, outputs: Value) -> Result<()> {
    let m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": serde_json::to_value(args)?,
        "seed": seed,
        "config": config,
        "outputs": outputs,
    });
    write_json(&dir.join(MANIFEST), &m)
}

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    create_dir(&a.out)?;
    let opts = SynthOptions {
        resolution: a.resolution,
        caption_shape_rate: a.caption_shape_rate,
    };
    let summary = write_dataset(&a.out, a.n_train, a.n_ood, Seed(a.seed), &opts)?;
    log::info!("{} train documents, {} OOD images in {}", summary.train_docs, summary.ood_images, a.out.display());
    write_manifest(&a.out, "synth-data", a, Some(a.seed), serde_json::to_value(&opts)?, serde_json::to_value(&summary)?)
}

fn load_corpora(cfg: &RunConfig) -> Result<Vec<Corpus>> {
    if cfg.data.sources.is_empty() {
        return Err(Error::Config("data.sources is empty".into()));
    }
    cfg.data
        .sources
        .iter()
        .map(|s| {
            Ok(Corpus {
                docs: deserialize_docs(&s.path)?,
                weight: s.weight,
            })
        })
        .collect()
}

fn corpus_tokenizer(corpora: &[Corpus]) -> Tokenizer {
    let docs: Vec<InterleavedDocument> = corpora.iter().flat_map(|c| c.docs.iter().cloned()).collect();
    Tokenizer::new(mmfb::synth::vocabulary().into_iter().chain(corpus_words(&docs)))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let stage: Stage = a.stage.parse()?;
    let cfg = RunConfig::load(&a.config)?;
    cfg.check_paths()?;
    let stage_cfg = cfg.stage_config(stage)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out)?;
    let seed = Seed(cfg.seed);
    let corpora = load_corpora(&cfg)?;

    let (model, opt) = match &a.init {
        Some(p) => {
            let (model, extra, meta) = Model::load(p)?;
            if model.cfg != cfg.model {
                log::warn!("model section of the config is ignored; using the checkpoint's architecture");
            }
            let opt = match (meta.get("stage"), meta.get("optimizer_step")) {
                (Some(s), Some(n)) if s == stage.name() => {
                    let n = n.parse().map_err(|_| Error::Data(format!("{}: bad optimizer_step", p.display())))?;
                    AdamW::from_state(&extra, n)
                }
                _ => AdamW::new(),
            };
            (model, opt)
        }
        None => (Model::new(&cfg.model, corpus_tokenizer(&corpora), seed.child("init"))?, AdamW::new()),
    };
    if stage_cfg.input_resolution != model.cfg.resolution {
        return Err(Error::Config(format!(
            "stage input_resolution {} differs from the model resolution {}",
            stage_cfg.input_resolution, model.cfg.resolution
        )));
    }
    let samples = match cfg.data.samples {
        0 => corpora.iter().map(|c| c.docs.len()).sum(),
        n => n,
    };
    let opts = CorpusOptions {
        samples,
        image_tokens: model.cfg.m_enc,
        max_len: cfg.data.max_len.min(model.cfg.max_len),
        pack: cfg.data.pack,
    };
    let seqs = build_sequences(&corpora, &model.tokenizer, opts, seed.child("data"))?;
    log::info!("{} training sequences from {samples} drawn documents", seqs.len());
    let mut stage_cfg = stage_cfg;
    stage_cfg.condition_drop = cfg.data.condition_drop.unwrap_or(stage_cfg.condition_drop);
    let outcome = run_stage(&model, &seqs, &stage_cfg, seed.child(stage.name()), Some(&out), opt)?;
    let last = outcome.history.last();
    log::info!(
        "stage {} finished: {} steps, {} skipped, final total {:?}",
        stage.name(),
        outcome.history.len(),
        outcome.skipped_steps,
        last.map(|b| b.total)
    );
    let mut resolved = cfg.resolved()?;
    resolved["stage"] = serde_json::to_value(&stage_cfg)?;
    write_manifest(
        &out,
        "train",
        a,
        Some(cfg.seed),
        resolved,
        json!({
            "checkpoint": outcome.checkpoint,
            "metrics": format!("metrics_{}.jsonl", stage.name()),
            "sequences": seqs.len(),
            "skipped_steps": outcome.skipped_steps,
            "config_hash": model.config_hash()?,
        }),
    )
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::load(path)?.0)
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    create_dir(&a.out)?;
    let opts = GenerateOptions {
        max_tokens: a.max_tokens,
        max_images: a.max_images,
        temperature: a.temperature,
        top_k: a.top_k,
        guidance_scale: a.guidance_scale,
        sample_steps: a.sample_steps,
        forced_tokens: if a.force_image { vec![model.tokenizer.special().soi] } else { Vec::new() },
    };
    let prompt = InterleavedDocument::new("prompt", vec![Element::Text(a.prompt.clone())]);
    let t = mmfb::generate::generate(&model, &prompt, &opts, Seed(a.seed))?;
    let mut files = Vec::new();
    for (i, img) in t.images.iter().enumerate() {
        files.extend(write_both(&a.out, &format!("image_{i}"), img)?);
    }
    let transcript = json!({
        "prompt": a.prompt,
        "text": t.text,
        "tokens": t.tokens,
        "sampler_calls": t.sampler_calls,
        "images": files,
    });
    write_json(&a.out.join("transcript.json"), &transcript)?;
    println!("{}", t.text);
    write_manifest(&a.out, "generate", a, Some(a.seed), serde_json::to_value(&opts)?, transcript)
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let image = read_image(&a.image)?;
    let r = model.cfg.resolution;
    if image.height() != r || image.width() != r {
        return Err(Error::Data(format!(
            "{}: image is {}x{}, the model expects {r}x{r}",
            a.image.display(),
            image.height(),
            image.width()
        )));
    }
    let t_star = mmfb::diffusion::partial_start(model.schedule.len(), a.noise_frac)?;
    create_dir(&a.out)?;
    let recon = mmfb::generate::reconstruct(&model, &image, a.noise_frac, Seed(a.seed))?;
    let files = write_both(&a.out, "reconstruction", &recon)?;
    let report = json!({
        "noise_frac": a.noise_frac,
        "t_star": t_star,
        "timesteps": model.schedule.len(),
        "mean_abs_error": image.mean_abs_diff(&recon),
        "files": files,
    });
    write_json(&a.out.join("reconstruction.json"), &report)?;
    write_manifest(&a.out, "reconstruct", a, Some(a.seed), json!({ "model": model.cfg }), report)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn build_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let format: Format = a.format.parse()?;
    let mut images: Vec<LabeledImage> = read_jsonl(&a.labels)?;
    let mut labels = LabelEmbeddings::new();
    let mut by_image = BTreeMap::new();
    for rec in read_jsonl::<EmbeddingRecord>(&a.embeddings)? {
        match rec {
            EmbeddingRecord::Label { label, embedding } => {
                labels.insert(label, embedding);
            }
            EmbeddingRecord::Image { image_ref, embedding } => {
                by_image.insert(image_ref, embedding);
            }
        }
    }
    for img in &mut images {
        if img.embedding.is_none() {
            img.embedding = by_image.get(&img.image_ref).cloned();
        }
    }
    let items = robustvqa::build_benchmark(&images, &labels, format)?;
    create_dir(&a.out)?;
    write_jsonl(&a.out.join("benchmark.jsonl"), &items)?;
    let root = std::path::absolute(base_dir(&a.labels)).map_err(|e| Error::io(&a.labels, e))?;
    log::info!("{} items from {} images", items.len(), images.len());
    write_manifest(
        &a.out,
        "build-benchmark",
        a,
        None,
        json!({ "format": format.name() }),
        json!({ "benchmark": "benchmark.jsonl", "items": items.len(), "image_root": root }),
    )
}

fn recorded_image_root(benchmark: &Path) -> Option<PathBuf> {
    let text = std::fs::read_to_string(base_dir(benchmark).join(MANIFEST)).ok()?;
    let v: Value = serde_json::from_str(&text).ok()?;
    v["outputs"]["image_root"].as_str().map(PathBuf::from)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let items: Vec<robustvqa::BenchmarkItem> = read_jsonl(&a.benchmark)?;
    create_dir(&a.out)?;
    let raw: Vec<RawAnswer> = match (&a.answers, &a.checkpoint) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(ck)) => {
            let model = load_model(ck)?;
            let root = a
                .image_root
                .clone()
                .or_else(|| recorded_image_root(&a.benchmark))
                .unwrap_or_else(|| base_dir(&a.benchmark));
            let mut cache = BTreeMap::new();
            let mut raw = Vec::with_capacity(items.len());
            for it in &items {
                if !cache.contains_key(&it.image_ref) {
                    cache.insert(it.image_ref.clone(), read_image(&root.join(&it.image_ref))?);
                }
                let out = answer_question(&model, &cache[&it.image_ref], &it.question, a.max_tokens)?;
                raw.push(RawAnswer {
                    item_id: it.item_id.clone(),
                    raw_output: out,
                });
            }
            write_jsonl(&a.out.join("answers.jsonl"), &raw)?;
            raw
        }
        (None, None) => return Err(Error::InvalidArgument("either --answers or --checkpoint is required".into())),
    };
    let parsed = robustvqa::parse_answers(&items, &raw);
    let report = robustvqa::evaluate(&items, &parsed)?;
    write_json(&a.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_manifest(&a.out, "evaluate", a, None, Value::Null, json!({ "report": "report.json" }))
}
