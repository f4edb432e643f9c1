//! Interleaved documents, images, masks, special tokens, and their on-disk form.
//!
//! Documents are stored one JSON record per line. Image pixels and masks live
//! out of line as raw little-endian f32 tensor files, referenced by a path
//! relative to the document file plus the SHA-256 of the tensor file bytes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// H×W×3 RGB image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Channel-first tensor (3, H, W).
    pub fn to_chw(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), &Device::Cpu)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_chw`]; values are clipped to `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Image::new(h, w, data)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        let n = self.data.len().max(1) as f32;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / n
    }
}

/// Binary H×W mask, values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidDocument("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pixels: Image,
    /// Absent means all-ones.
    pub mask: Option<Mask>,
    /// Image-text similarity used for corpus filtering, in `[-1, 1]`.
    pub similarity: Option<f32>,
}

impl ImageRecord {
    pub fn new(pixels: Image) -> Self {
        Self {
            pixels,
            mask: None,
            similarity: None,
        }
    }

    pub fn with_similarity(mut self, s: f32) -> Self {
        self.similarity = Some(s);
        self
    }

    pub fn with_mask(mut self, m: Mask) -> Self {
        self.mask = Some(m);
        self
    }

    /// The mask to apply, with the all-ones default filled in.
    pub fn effective_mask(&self) -> Mask {
        self.mask
            .clone()
            .unwrap_or_else(|| Mask::ones(self.pixels.height, self.pixels.width))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Text(String),
    Image(ImageRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedDocument {
    pub doc_id: String,
    pub elements: Vec<Element>,
}

impl InterleavedDocument {
    pub fn new(doc_id: impl Into<String>, elements: Vec<Element>) -> Self {
        Self {
            doc_id: doc_id.into(),
            elements,
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.elements.iter().filter_map(|e| match e {
            Element::Image(r) => Some(r),
            Element::Text(_) => None,
        })
    }

    pub fn image_count(&self) -> usize {
        self.images().count()
    }
}

/// Control-token ids living in the tokenizer's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    /// `<SOI>`, start of image.
    pub soi: u32,
    /// `<IMG>`, one placeholder per visual token.
    pub img: u32,
    pub eos: u32,
    pub pad: u32,
}

impl SpecialTokens {
    pub fn validate(&self) -> Result<()> {
        let ids = [self.soi, self.img, self.eos, self.pad];
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                if ids[i] == ids[j] {
                    return Err(Error::InvalidArgument(format!(
                        "special token ids must be distinct, {} repeats",
                        ids[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Returns the document unchanged when every invariant holds, otherwise the
/// first violation.
pub fn validate_document(doc: InterleavedDocument) -> Result<InterleavedDocument> {
    if doc.elements.is_empty() {
        return Err(Error::InvalidDocument(format!("document {} is empty", doc.doc_id)));
    }
    for (i, el) in doc.elements.iter().enumerate() {
        let Element::Image(rec) = el else { continue };
        let px = &rec.pixels;
        if px.data.len() != px.height * px.width * 3 {
            return Err(Error::InvalidDocument(format!("element {i}: pixel buffer size mismatch")));
        }
        if px.data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidDocument(format!("element {i}: pixel out of range")));
        }
        if let Some(m) = &rec.mask {
            if m.height != px.height || m.width != px.width {
                return Err(Error::InvalidDocument(format!(
                    "element {i}: mask shape mismatch ({}x{} vs {}x{})",
                    m.height, m.width, px.height, px.width
                )));
            }
            if m.data.iter().any(|&v| v > 1) {
                return Err(Error::InvalidDocument(format!("element {i}: mask is not binary")));
            }
        }
        if let Some(s) = rec.similarity {
            if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
                return Err(Error::InvalidDocument(format!("element {i}: similarity out of range")));
            }
        }
    }
    Ok(doc)
}

// ---------------------------------------------------------------------------
// Raw tensor files

const TENSOR_MAGIC: &[u8; 8] = b"MMFBTNSR";

/// Encodes an f32 tensor: magic, u32 rank, u64 dims, then little-endian values.
pub fn encode_tensor(dims: &[usize], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 4 * values.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |msg: &str| Error::Data(format!("tensor file: {msg}"));
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(off..off + 8).ok_or_else(|| bad("truncated header"))?;
        dims.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        off += 8;
    }
    let n: usize = dims.iter().product();
    let body = &bytes[off..];
    if body.len() != 4 * n {
        return Err(bad("payload size does not match dims"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum ElementLine {
    Text {
        text: String,
    },
    Image {
        #[serde(rename = "ref")]
        reference: String,
        hash: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sim: Option<f32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask_ref: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask_hash: Option<String>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentLine {
    doc_id: String,
    elements: Vec<ElementLine>,
}

fn tensor_dir(path: &Path) -> (PathBuf, String) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "docs".into());
    let rel = format!("{stem}_tensors");
    let parent = path.parent().map(Path::to_path_buf).unwrap_or_default();
    (parent.join(&rel), rel)
}

fn store_tensor(dir: &Path, rel_dir: &str, dims: &[usize], values: &[f32]) -> Result<(String, String)> {
    let bytes = encode_tensor(dims, values);
    let hash = sha256_hex(&bytes);
    let name = format!("{}.f32t", &hash[..24]);
    let file = dir.join(&name);
    if !file.exists() {
        fs::write(&file, &bytes).map_err(|e| Error::io(&file, e))?;
    }
    Ok((format!("{rel_dir}/{name}"), hash))
}

fn load_tensor(base: &Path, reference: &str, hash: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let file = base.join(reference);
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    if sha256_hex(&bytes) != hash {
        return Err(Error::Data(format!("{}: content hash mismatch", file.display())));
    }
    decode_tensor(&bytes)
}

/// Writes one record per line; returns the number of documents written.
pub fn serialize_docs(docs: &[InterleavedDocument], path: &Path) -> Result<usize> {
    let (dir, rel_dir) = tensor_dir(path);
    let has_images = docs.iter().any(|d| d.image_count() > 0);
    if has_images {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        let mut elements = Vec::with_capacity(doc.elements.len());
        for el in &doc.elements {
            elements.push(match el {
                Element::Text(t) => ElementLine::Text { text: t.clone() },
                Element::Image(rec) => {
                    let px = &rec.pixels;
                    let (reference, hash) =
                        store_tensor(&dir, &rel_dir, &[px.height, px.width, 3], &px.data)?;
                    let (mask_ref, mask_hash) = match &rec.mask {
                        Some(m) => {
                            let vals: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
                            let (r, h) = store_tensor(&dir, &rel_dir, &[m.height, m.width], &vals)?;
                            (Some(r), Some(h))
                        }
                        None => (None, None),
                    };
                    ElementLine::Image {
                        reference,
                        hash,
                        sim: rec.similarity,
                        mask_ref,
                        mask_hash,
                    }
                }
            });
        }
        let line = DocumentLine {
            doc_id: doc.doc_id.clone(),
            elements,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(docs.len())
}

pub fn deserialize_docs(path: &Path) -> Result<Vec<InterleavedDocument>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let mut elements = Vec::with_capacity(rec.elements.len());
        for el in rec.elements {
            elements.push(match el {
                ElementLine::Text { text } => Element::Text(text),
                ElementLine::Image {
                    reference,
                    hash,
                    sim,
                    mask_ref,
                    mask_hash,
                } => {
                    let (dims, values) = load_tensor(&base, &reference, &hash)?;
                    let [h, w, 3] = dims[..] else {
                        return Err(Error::Data(format!("{reference}: expected HxWx3 tensor")));
                    };
                    let pixels = Image::new(h, w, values)?;
                    let mask = match (mask_ref, mask_hash) {
                        (Some(r), Some(hh)) => {
                            let (mdims, mvals) = load_tensor(&base, &r, &hh)?;
                            let [mh, mw] = mdims[..] else {
                                return Err(Error::Data(format!("{r}: expected HxW mask")));
                            };
                            Some(Mask::new(mh, mw, mvals.iter().map(|&v| v as u8).collect())?)
                        }
                        (None, None) => None,
                        _ => return Err(Error::Data("mask_ref and mask_hash must appear together".into())),
                    };
                    Element::Image(ImageRecord {
                        pixels,
                        mask,
                        similarity: sim,
                    })
                }
            });
        }
        docs.push(InterleavedDocument {
            doc_id: rec.doc_id,
            elements,
        });
    }
    Ok(docs)
}

/// Reads a standalone tensor file holding an H×W×3 image.
pub fn read_image_tensor(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, values) = decode_tensor(&bytes)?;
    match dims[..] {
        [h, w, 3] => Image::new(h, w, values),
        _ => Err(Error::Data(format!("{}: expected HxWx3 tensor", path.display()))),
    }
}

pub fn write_image_tensor(path: &Path, image: &Image) -> Result<String> {
    let bytes = encode_tensor(&[image.height, image.width, 3], &image.data);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_doc(t: &str) -> InterleavedDocument {
        InterleavedDocument::new("d", vec![Element::Text(t.into())])
    }

    #[test]
    fn valid_text_doc_passes_through() {
        let d = text_doc("a cat");
        assert_eq!(validate_document(d.clone()).unwrap(), d);
    }

    #[test]
    fn rejects_out_of_range_pixel() {
        let mut img = Image::filled(4, 4, 0.5);
        img.set(1, 1, 0, 1.5);
        let d = InterleavedDocument::new("d", vec![Element::Image(ImageRecord::new(img))]);
        let err = validate_document(d).unwrap_err().to_string();
        assert!(err.contains("pixel out of range"), "{err}");
    }

    #[test]
    fn rejects_mask_shape_mismatch() {
        let rec = ImageRecord::new(Image::filled(64, 64, 0.2)).with_mask(Mask::ones(32, 32));
        let d = InterleavedDocument::new("d", vec![Element::Image(rec)]);
        let err = validate_document(d).unwrap_err().to_string();
        assert!(err.contains("mask shape mismatch"), "{err}");
    }

    #[test]
    fn rejects_empty_doc() {
        assert!(validate_document(InterleavedDocument::new("e", vec![])).is_err());
    }

    #[test]
    fn special_tokens_must_be_distinct() {
        let ok = SpecialTokens { soi: 1, img: 2, eos: 3, pad: 0 };
        assert!(ok.validate().is_ok());
        let bad = SpecialTokens { soi: 1, img: 1, eos: 3, pad: 0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn serialize_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("docs.jsonl");
        assert_eq!(serialize_docs(&[], &p).unwrap(), 0);
        assert!(deserialize_docs(&p).unwrap().is_empty());
    }

    #[test]
    fn image_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("docs.jsonl");
        let mut img = Image::filled(3, 5, 0.25);
        img.set(2, 4, 1, 0.123_456_79);
        let rec = ImageRecord::new(img)
            .with_similarity(0.31)
            .with_mask(Mask::from_fn(3, 5, |y, x| y + x > 2));
        let docs = vec![
            InterleavedDocument::new("a", vec![Element::Text("hello".into()), Element::Image(rec)]),
            text_doc("solo"),
            InterleavedDocument::new("c", vec![Element::Image(ImageRecord::new(Image::filled(2, 2, 1.0)))]),
        ];
        assert_eq!(serialize_docs(&docs, &p).unwrap(), 3);
        assert_eq!(deserialize_docs(&p).unwrap(), docs);
        let line = fs::read_to_string(&p).unwrap();
        assert!(line.contains("\"type\":\"image\"") && line.contains("\"hash\""));
    }

    #[test]
    fn tampered_tensor_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("docs.jsonl");
        let docs = vec![InterleavedDocument::new(
            "a",
            vec![Element::Image(ImageRecord::new(Image::filled(2, 2, 0.5)))],
        )];
        serialize_docs(&docs, &p).unwrap();
        let tdir = dir.path().join("docs_tensors");
        let f = fs::read_dir(&tdir).unwrap().next().unwrap().unwrap().path();
        let mut bytes = fs::read(&f).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(deserialize_docs(&p).is_err());
    }
}
