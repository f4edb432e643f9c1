//! Documents to packed token sequences: corpus filtering, pair layout,
//! placeholder assembly, greedy packing and condition dropout.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{validate_document, Element, ImageRecord, InterleavedDocument, SpecialTokens};
use crate::error::{Error, Result};

/// Images scoring below this image-text similarity are discarded.
pub const MIN_SIMILARITY: f32 = 0.24;
/// At most this many images survive per interleaved document.
pub const MAX_IMAGES_PER_DOC: usize = 6;
/// Single-image documents are kept with this probability.
pub const SINGLE_IMAGE_KEEP: f64 = 0.5;
/// Pair captions shorter than this many characters are dropped.
pub const MIN_CAPTION_CHARS: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 2048;
pub const DEFAULT_CONDITION_DROP: f64 = 0.1;

const PUNCT: &[char] = &['.', ',', '?', '!', ':', ';'];

/// Whitespace tokenizer over a fixed word list with byte fallback.
///
/// Id layout: 0 `<PAD>`, 1 `<EOS>`, 2 `<SOI>`, 3 `<IMG>`, 4..260 raw bytes,
/// then the words in the order given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

const BYTE_BASE: u32 = 4;
const WORD_BASE: u32 = BYTE_BASE + 256;

impl Tokenizer {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashMap::new();
        let mut list = Vec::new();
        for w in words {
            let w: String = w.into();
            if w.is_empty() || w.contains(char::is_whitespace) || seen.contains_key(&w) {
                continue;
            }
            seen.insert(w.clone(), WORD_BASE + list.len() as u32);
            list.push(w);
        }
        Self { words: list, index: seen }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(mut self) -> Self {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), WORD_BASE + i as u32))
            .collect();
        self
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens { pad: 0, eos: 1, soi: 2, img: 3 }
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    fn push_piece(&self, piece: &str, out: &mut Vec<u32>) {
        match self.index.get(piece) {
            Some(&id) => out.push(id),
            None => out.extend(piece.bytes().map(|b| BYTE_BASE + b as u32)),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let core_start = chunk.find(|c: char| !PUNCT.contains(&c)).unwrap_or(chunk.len());
            let core_end = chunk
                .rfind(|c: char| !PUNCT.contains(&c))
                .map(|i| i + chunk[i..].chars().next().unwrap().len_utf8())
                .unwrap_or(core_start);
            for p in chunk[..core_start].chars() {
                self.push_piece(&p.to_string(), &mut out);
            }
            if core_end > core_start {
                self.push_piece(&chunk[core_start..core_end], &mut out);
            }
            for p in chunk[core_end..].chars() {
                self.push_piece(&p.to_string(), &mut out);
            }
        }
        out
    }

    pub fn token_text(&self, id: u32) -> String {
        match id {
            0 => "<PAD>".into(),
            1 => "<EOS>".into(),
            2 => "<SOI>".into(),
            3 => "<IMG>".into(),
            b if b < WORD_BASE => String::from_utf8_lossy(&[(b - BYTE_BASE) as u8]).into_owned(),
            w => self
                .words
                .get((w - WORD_BASE) as usize)
                .cloned()
                .unwrap_or_else(|| format!("<UNK{w}>")),
        }
    }

    /// Space-joined rendering; consecutive byte tokens are merged.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            if (BYTE_BASE..WORD_BASE).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            if !bytes.is_empty() {
                parts.push(String::from_utf8_lossy(&bytes).into_owned());
                bytes.clear();
            }
            parts.push(self.token_text(id));
        }
        if !bytes.is_empty() {
            parts.push(String::from_utf8_lossy(&bytes).into_owned());
        }
        parts.join(" ")
    }
}

/// Applies the interleaved-corpus rules: drop low-similarity images, keep the
/// best six, drop image-free documents, and keep single-image documents with
/// probability one half.
pub fn filter_interleaved<R: Rng + ?Sized>(
    doc: InterleavedDocument,
    rng: &mut R,
) -> Result<Option<InterleavedDocument>> {
    let doc = validate_document(doc)?;
    let mut scored: Vec<(usize, f32)> = Vec::new();
    for (i, el) in doc.elements.iter().enumerate() {
        if let Element::Image(rec) = el {
            let s = rec.similarity.ok_or_else(|| {
                Error::Data(format!("document {}: image {i} has no similarity score", doc.doc_id))
            })?;
            if s >= MIN_SIMILARITY {
                scored.push((i, s));
            }
        }
    }
    // stable sort keeps document order among equal scores
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(MAX_IMAGES_PER_DOC);
    let keep: Vec<usize> = scored.iter().map(|&(i, _)| i).collect();

    let elements: Vec<Element> = doc
        .elements
        .into_iter()
        .enumerate()
        .filter(|(i, el)| matches!(el, Element::Text(_)) || keep.contains(i))
        .map(|(_, el)| el)
        .collect();
    match keep.len() {
        0 => Ok(None),
        1 if rng.random::<f64>() >= SINGLE_IMAGE_KEEP => Ok(None),
        _ => Ok(Some(InterleavedDocument {
            doc_id: doc.doc_id,
            elements,
        })),
    }
}

pub fn caption_passes(caption: &str) -> bool {
    caption.chars().count() >= MIN_CAPTION_CHARS
}

/// Two-element document with the image before or after the caption, each with
/// probability one half.
pub fn pair_to_document<R: Rng + ?Sized>(
    doc_id: impl Into<String>,
    caption: &str,
    image: ImageRecord,
    rng: &mut R,
) -> InterleavedDocument {
    let text = Element::Text(caption.to_string());
    let img = Element::Image(image);
    let elements = if rng.random::<f64>() < 0.5 {
        vec![img, text]
    } else {
        vec![text, img]
    };
    InterleavedDocument::new(doc_id, elements)
}

/// Picks a corpus index in proportion to `weights`.
pub fn sample_source<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
    Ok(dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub record: ImageRecord,
    pub is_first_in_sequence: bool,
    pub condition_dropped: bool,
    /// Position of this image's `<SOI>` token.
    pub soi_position: usize,
}

/// Marks where an image's visual tokens replace a run of `<IMG>` placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingSlot {
    /// First placeholder position.
    pub position: usize,
    pub image_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub token_ids: Vec<u32>,
    pub embedding_slots: Vec<EmbeddingSlot>,
    pub ntp_mask: Vec<u8>,
    pub image_entries: Vec<ImageEntry>,
    pub doc_ids: Vec<String>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokenizes a document. Each image becomes `<SOI>` followed by
/// `image_tokens` `<IMG>` placeholders that never contribute to the text loss.
pub fn assemble(
    doc: &InterleavedDocument,
    tokenizer: &Tokenizer,
    special: SpecialTokens,
    image_tokens: usize,
) -> Result<PackedSequence> {
    special.validate()?;
    let mut seq = PackedSequence {
        token_ids: Vec::new(),
        embedding_slots: Vec::new(),
        ntp_mask: Vec::new(),
        image_entries: Vec::new(),
        doc_ids: vec![doc.doc_id.clone()],
    };
    for el in &doc.elements {
        match el {
            Element::Text(t) => {
                let ids = tokenizer.encode(t);
                seq.ntp_mask.extend(std::iter::repeat_n(1u8, ids.len()));
                seq.token_ids.extend(ids);
            }
            Element::Image(rec) => {
                let soi_position = seq.token_ids.len();
                seq.token_ids.push(special.soi);
                seq.ntp_mask.push(1);
                seq.embedding_slots.push(EmbeddingSlot {
                    position: soi_position + 1,
                    image_index: seq.image_entries.len(),
                });
                seq.token_ids.extend(std::iter::repeat_n(special.img, image_tokens));
                seq.ntp_mask.extend(std::iter::repeat_n(0u8, image_tokens));
                seq.image_entries.push(ImageEntry {
                    record: rec.clone(),
                    is_first_in_sequence: soi_position == 0,
                    condition_dropped: false,
                    soi_position,
                });
            }
        }
    }
    Ok(seq)
}

/// Greedy in-order packing. A fragment that would overflow starts a new pack;
/// fragments are never split or reordered.
pub fn pack(fragments: Vec<PackedSequence>, max_len: usize) -> Result<Vec<PackedSequence>> {
    let mut out: Vec<PackedSequence> = Vec::new();
    let mut cur: Option<PackedSequence> = None;
    for frag in fragments {
        if frag.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "fragment of length {} exceeds max_len {max_len}",
                frag.len()
            )));
        }
        if let Some(c) = &cur {
            if c.len() + frag.len() > max_len {
                out.push(cur.take().unwrap());
            }
        }
        match &mut cur {
            None => cur = Some(frag),
            Some(c) => append(c, frag),
        }
    }
    out.extend(cur);
    for seq in &mut out {
        for e in &mut seq.image_entries {
            e.is_first_in_sequence = e.soi_position == 0;
        }
    }
    Ok(out)
}

fn append(dst: &mut PackedSequence, src: PackedSequence) {
    let offset = dst.token_ids.len();
    let image_offset = dst.image_entries.len();
    dst.token_ids.extend(src.token_ids);
    dst.ntp_mask.extend(src.ntp_mask);
    dst.embedding_slots.extend(src.embedding_slots.into_iter().map(|s| EmbeddingSlot {
        position: s.position + offset,
        image_index: s.image_index + image_offset,
    }));
    dst.image_entries.extend(src.image_entries.into_iter().map(|mut e| {
        e.soi_position += offset;
        e
    }));
    dst.doc_ids.extend(src.doc_ids);
}

/// Drops the generation condition of each non-first image with probability `p`.
pub fn mark_condition_dropout<R: Rng + ?Sized>(mut seq: PackedSequence, p: f64, rng: &mut R) -> PackedSequence {
    for e in &mut seq.image_entries {
        e.condition_dropped = if e.is_first_in_sequence {
            false
        } else {
            rng.random::<f64>() < p
        };
    }
    seq
}

/// Distinct words (and punctuation marks) appearing in the documents' text,
/// in first-seen order.
pub fn corpus_words(docs: &[InterleavedDocument]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut push = |w: &str| {
        if !w.is_empty() && seen.insert(w.to_string()) {
            out.push(w.to_string());
        }
    };
    for doc in docs {
        for el in &doc.elements {
            if let Element::Text(t) = el {
                for chunk in t.split_whitespace() {
                    let core = chunk.trim_matches(PUNCT);
                    for p in chunk.chars().filter(|c| PUNCT.contains(c)) {
                        push(&p.to_string());
                    }
                    push(core);
                }
            }
        }
    }
    out
}

/// One weighted corpus of the training mixture.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub docs: Vec<InterleavedDocument>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusOptions {
    /// Documents drawn from the mixture.
    pub samples: usize,
    pub image_tokens: usize,
    pub max_len: usize,
    pub pack: bool,
}

/// Draws `samples` documents from the weighted mixture, applies the corpus
/// rules (similarity-scored documents go through the interleaved filter, pair
/// documents through the caption-length rule), assembles and packs them.
/// Documents longer than `max_len` are dropped.
pub fn build_sequences(
    corpora: &[Corpus],
    tokenizer: &Tokenizer,
    opts: CorpusOptions,
    seed: crate::rng::Seed,
) -> Result<Vec<PackedSequence>> {
    let usable: Vec<&Corpus> = corpora.iter().filter(|c| !c.docs.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Data("every corpus is empty".into()));
    }
    let weights: Vec<f64> = usable.iter().map(|c| c.weight).collect();
    let mut rng = seed.stream("mixture");
    let mut fragments = Vec::new();
    let mut dropped = 0usize;
    for _ in 0..opts.samples {
        let src = usable[sample_source(&weights, &mut rng)?];
        let doc = src.docs[rng.random_range(0..src.docs.len())].clone();
        let scored = doc.images().any(|r| r.similarity.is_some());
        let kept = if scored {
            filter_interleaved(doc, &mut rng)?
        } else {
            let doc = validate_document(doc)?;
            let text_ok = doc.elements.iter().all(|e| match e {
                Element::Text(t) => caption_passes(t),
                Element::Image(_) => true,
            });
            (text_ok && doc.image_count() > 0).then_some(doc)
        };
        let Some(doc) = kept else {
            dropped += 1;
            continue;
        };
        let seq = assemble(&doc, tokenizer, tokenizer.special(), opts.image_tokens)?;
        if seq.len() > opts.max_len {
            dropped += 1;
            continue;
        }
        fragments.push(seq);
    }
    if dropped > 0 {
        log::info!("corpus rules dropped {dropped} of {} drawn documents", opts.samples);
    }
    if opts.pack {
        pack(fragments, opts.max_len)
    } else {
        Ok(fragments)
    }
}
