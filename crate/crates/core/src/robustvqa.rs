//! Yes/no robustness benchmark: hard-negative mining over label embeddings,
//! prompt rendering, answer parsing and accuracy reporting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const YESNO_TEMPLATE: &str = "Is [category label] the main object in this image? Please answer yes or no.";
pub const MULTICHOICE_QUESTION: &str = "What is the main object in this image?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Format {
    #[serde(rename = "yesno")]
    YesNo,
    #[serde(rename = "multichoice-gt-first")]
    MultichoiceGtFirst,
    #[serde(rename = "multichoice-neg-first")]
    MultichoiceNegFirst,
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::YesNo => "yesno",
            Format::MultichoiceGtFirst => "multichoice-gt-first",
            Format::MultichoiceNegFirst => "multichoice-neg-first",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yesno" => Ok(Format::YesNo),
            "multichoice-gt-first" => Ok(Format::MultichoiceGtFirst),
            "multichoice-neg-first" => Ok(Format::MultichoiceNegFirst),
            _ => Err(Error::InvalidArgument(format!(
                "unknown format {s:?} (yesno, multichoice-gt-first, multichoice-neg-first)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Choice(usize),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoiceOrder {
    GtFirst,
    NegFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image_ref: String,
    pub gt_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub type LabelEmbeddings = BTreeMap<String, Vec<f32>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub image_ref: String,
    pub question: String,
    pub gold: Answer,
    pub format: Format,
    pub gt_label: String,
    pub neg_label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "default".into()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Label other than the ground truth with the highest cosine similarity to
/// the image embedding. Ties go to the label that sorts first.
pub fn mine_hard_negative(item: &LabeledImage, labels: &LabelEmbeddings) -> Result<String> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("mining needs at least two labels".into()));
    }
    let emb = item
        .embedding
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: no image embedding", item.image_ref)))?;
    if !labels.contains_key(&item.gt_label) {
        return Err(Error::Data(format!("{}: label {:?} has no embedding", item.image_ref, item.gt_label)));
    }
    let mut best: Option<(&String, f64)> = None;
    for (label, le) in labels {
        if *label == item.gt_label {
            continue;
        }
        if le.len() != emb.len() {
            return Err(Error::Shape(format!("label {label:?} embedding has width {}", le.len())));
        }
        let s = cosine(emb, le);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    Ok(best.unwrap().0.clone())
}

pub fn yesno_question(label: &str) -> String {
    YESNO_TEMPLATE.replace("[category label]", label)
}

pub fn render_yesno(item_id: &str, image_ref: &str, label: &str, gold: Answer, gt: &str, neg: &str) -> Result<BenchmarkItem> {
    if label.is_empty() {
        return Err(Error::InvalidArgument("empty label".into()));
    }
    if !matches!(gold, Answer::Yes | Answer::No) {
        return Err(Error::InvalidArgument("yes/no gold must be yes or no".into()));
    }
    Ok(BenchmarkItem {
        item_id: item_id.into(),
        image_ref: image_ref.into(),
        question: yesno_question(label),
        gold,
        format: Format::YesNo,
        gt_label: gt.into(),
        neg_label: neg.into(),
        choices: Vec::new(),
        split: default_split(),
    })
}

/// Positive (`gt`, gold yes) and negative (`neg`, gold no) items on one image.
pub fn yesno_pair(image_ref: &str, gt: &str, neg: &str) -> Result<[BenchmarkItem; 2]> {
    if gt == neg {
        return Err(Error::InvalidArgument("positive and negative labels coincide".into()));
    }
    Ok([
        render_yesno(&format!("{image_ref}:pos"), image_ref, gt, Answer::Yes, gt, neg)?,
        render_yesno(&format!("{image_ref}:neg"), image_ref, neg, Answer::No, gt, neg)?,
    ])
}

pub fn multichoice_question(first: &str, second: &str) -> String {
    format!("{MULTICHOICE_QUESTION} Chose from the list: [{first},{second}].")
}

pub fn render_multichoice(image_ref: &str, gt: &str, neg: &str, order: ChoiceOrder) -> Result<BenchmarkItem> {
    if gt == neg {
        return Err(Error::InvalidArgument("choice labels must differ".into()));
    }
    let (choices, gold, format, tag) = match order {
        ChoiceOrder::GtFirst => (vec![gt, neg], 0, Format::MultichoiceGtFirst, "gt-first"),
        ChoiceOrder::NegFirst => (vec![neg, gt], 1, Format::MultichoiceNegFirst, "neg-first"),
    };
    Ok(BenchmarkItem {
        item_id: format!("{image_ref}:{tag}"),
        image_ref: image_ref.into(),
        question: multichoice_question(choices[0], choices[1]),
        gold: Answer::Choice(gold),
        format,
        gt_label: gt.into(),
        neg_label: neg.into(),
        choices: choices.into_iter().map(String::from).collect(),
        split: default_split(),
    })
}

/// Mines a negative for every image and renders items in `format`.
pub fn build_benchmark(images: &[LabeledImage], labels: &LabelEmbeddings, format: Format) -> Result<Vec<BenchmarkItem>> {
    let rendered = par::map_slice(images, |img| -> Result<Vec<BenchmarkItem>> {
        let neg = mine_hard_negative(img, labels)?;
        let mut items = match format {
            Format::YesNo => yesno_pair(&img.image_ref, &img.gt_label, &neg)?.to_vec(),
            Format::MultichoiceGtFirst => vec![render_multichoice(&img.image_ref, &img.gt_label, &neg, ChoiceOrder::GtFirst)?],
            Format::MultichoiceNegFirst => vec![render_multichoice(&img.image_ref, &img.gt_label, &neg, ChoiceOrder::NegFirst)?],
        };
        if let Some(s) = &img.split {
            for it in &mut items {
                it.split = s.clone();
            }
        }
        Ok(items)
    });
    let mut out = Vec::new();
    for r in rendered {
        out.extend(r?);
    }
    Ok(out)
}

fn words(s: &str) -> Vec<(usize, String)> {
    let lower = s.to_lowercase();
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in lower.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(st)) => {
                out.push((st, lower[st..i].to_string()));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(st) = start {
        out.push((st, lower[st..].to_string()));
    }
    out
}

/// Earliest word-aligned occurrence of `needle` (lowercase) in `hay`.
fn find_word(hay: &str, needle: &str) -> Option<usize> {
    let needle_words: Vec<String> = words(needle).into_iter().map(|(_, w)| w).collect();
    if needle_words.is_empty() {
        return None;
    }
    let hw = words(hay);
    (0..hw.len())
        .find(|&i| {
            i + needle_words.len() <= hw.len() && (0..needle_words.len()).all(|k| hw[i + k].1 == needle_words[k])
        })
        .map(|i| hw[i].0)
}

/// Case-insensitive parsing. Yes/no: the first "yes" or "no" word wins.
/// Multiple choice: the label occurring earliest in the output wins (longer
/// label on a tie). Anything else is `Unknown`.
pub fn parse_answer(output: &str, format: Format, choices: &[String]) -> Answer {
    match format {
        Format::YesNo => words(output)
            .into_iter()
            .find_map(|(_, w)| match w.as_str() {
                "yes" => Some(Answer::Yes),
                "no" => Some(Answer::No),
                _ => None,
            })
            .unwrap_or(Answer::Unknown),
        _ => choices
            .iter()
            .enumerate()
            .filter_map(|(i, c)| find_word(output, c).map(|p| (p, std::cmp::Reverse(c.len()), i)))
            .min()
            .map(|(_, _, i)| Answer::Choice(i))
            .unwrap_or(Answer::Unknown),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Tally,
    pub per_format: BTreeMap<String, Tally>,
    pub per_split: BTreeMap<String, Tally>,
    /// Yes/no items by gold answer.
    pub gold_yes: Tally,
    pub gold_no: Tally,
    pub unknown: usize,
}

/// Accuracy with unknown answers counted as incorrect.
pub fn evaluate(items: &[BenchmarkItem], answers: &BTreeMap<String, Answer>) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("accuracy is undefined for an empty benchmark".into()));
    }
    let missing: Vec<&str> = items
        .iter()
        .filter(|i| !answers.contains_key(&i.item_id))
        .map(|i| i.item_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing answers for: {}", missing.join(", "))));
    }
    let mut r = EvalReport {
        overall: Tally::default(),
        per_format: BTreeMap::new(),
        per_split: BTreeMap::new(),
        gold_yes: Tally::default(),
        gold_no: Tally::default(),
        unknown: 0,
    };
    for it in items {
        let a = answers[&it.item_id];
        let ok = a != Answer::Unknown && a == it.gold;
        r.unknown += (a == Answer::Unknown) as usize;
        r.overall.add(ok);
        r.per_format.entry(it.format.name().to_string()).or_default().add(ok);
        r.per_split.entry(it.split.clone()).or_default().add(ok);
        match it.gold {
            Answer::Yes => r.gold_yes.add(ok),
            Answer::No => r.gold_no.add(ok),
            _ => {}
        }
    }
    Ok(r)
}

/// Raw model output for one item, as read from an answers file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub item_id: String,
    pub raw_output: String,
}

pub fn parse_answers(items: &[BenchmarkItem], raw: &[RawAnswer]) -> BTreeMap<String, Answer> {
    let by_id: BTreeMap<&str, &BenchmarkItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    raw.iter()
        .filter_map(|r| {
            by_id
                .get(r.item_id.as_str())
                .map(|it| (r.item_id.clone(), parse_answer(&r.raw_output, it.format, &it.choices)))
        })
        .collect()
}

/// Embedding file record: either a label prototype or an image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbeddingRecord {
    Label { label: String, embedding: Vec<f32> },
    Image { image_ref: String, embedding: Vec<f32> },
}
