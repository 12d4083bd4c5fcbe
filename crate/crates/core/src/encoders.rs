//! Frozen encoder providers: text embeddings, region embeddings, region
//! captions and the prompt-token text encoder.
//!
//! [`SyntheticProvider`] is the reference implementation. Every output is a
//! pure function of its inputs and a seed: word and region vectors come from
//! a ChaCha stream keyed by a SHA-256 digest of `(seed, domain, key)`. In
//! ground-truth mode the provider is given the annotations of each video and
//! plants category and predicate directions into region embeddings and
//! captions, so relations are linearly recoverable from its outputs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mat, Var};
use crate::data::{union_box, BBox, VideoAnnotation};
use crate::error::{Error, Result};

/// Longest token sequence the text encoder accepts.
pub const MAX_TOKENS: usize = 77;

/// Weight of the per-region noise direction relative to planted signal.
const REGION_NOISE: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionCaption {
    pub fid: usize,
    pub text: String,
}

/// Frozen encoders shared by the whole pipeline. Implementations are
/// stateless after construction.
pub trait EmbeddingProvider: Send + Sync {
    /// Embedding dimension `d`.
    fn dim(&self) -> usize;

    /// Prompt-token dimension.
    fn token_dim(&self) -> usize;

    /// Unit-norm embedding of a string.
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;

    /// Unit-norm embedding of a box on one frame.
    fn embed_region(&self, video_key: &str, fid: usize, bbox: &BBox) -> Result<Array1<f64>>;

    fn caption_region(&self, video_key: &str, fid: usize, bbox: &BBox) -> Result<RegionCaption>;

    /// Token-space embedding of each whitespace-separated word.
    fn word_tokens(&self, text: &str) -> Result<Vec<Array1<f64>>>;

    /// Encodes `n` token sequences of length `len`, stacked as
    /// `[n * len, token_dim]`, into `[n, dim]` unit rows. Differentiable with
    /// respect to `tokens`.
    fn encode_tokens(&self, g: &Graph, tokens: Var, len: usize) -> Result<Var>;

    /// Digest of the frozen encoder weights. Planted or cached per-video
    /// data is not included, so a model trained on one set of videos can be
    /// restored against a provider built for another.
    fn fingerprint(&self) -> String;
}

/// Single-token embedding of a category name: the normalized sum of its word
/// tokens.
pub fn class_token(provider: &dyn EmbeddingProvider, name: &str) -> Result<Array1<f64>> {
    let words = provider.word_tokens(name)?;
    let sum = words
        .iter()
        .fold(Array1::zeros(provider.token_dim()), |acc, w| acc + w);
    Ok(normalized(sum))
}

/// Encodes a single token sequence.
pub fn embed_token_sequence(
    provider: &dyn EmbeddingProvider,
    tokens: &[Array1<f64>],
) -> Result<Array1<f64>> {
    let mat = stack_rows(tokens, provider.token_dim())?;
    let g = Graph::new();
    let x = g.leaf(mat);
    let out = provider.encode_tokens(&g, x, tokens.len())?;
    let row = g.value(out).row(0).to_owned();
    Ok(row)
}

pub fn stack_rows(rows: &[Array1<f64>], dim: usize) -> Result<Mat> {
    let mut m = Mat::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::Shape(format!("row {i} has dim {}, expected {dim}", r.len())));
        }
        m.row_mut(i).assign(r);
    }
    Ok(m)
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn keyed_rng(seed: u64, domain: &str, key: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(key);
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

fn seeded_unit(seed: u64, domain: &str, key: &[u8], dim: usize) -> Array1<f64> {
    normalized(gaussian(&mut keyed_rng(seed, domain, key), dim))
}

fn region_key(video_key: &str, fid: usize, bbox: &BBox) -> Vec<u8> {
    let mut key = Vec::with_capacity(video_key.len() + 48);
    key.extend_from_slice(&(video_key.len() as u64).to_le_bytes());
    key.extend_from_slice(video_key.as_bytes());
    key.extend_from_slice(&(fid as u64).to_le_bytes());
    for c in bbox.quantized() {
        key.extend_from_slice(&c.to_le_bytes());
    }
    key
}

fn words(text: &str) -> Result<Vec<&str>> {
    let w: Vec<&str> = text.split_whitespace().collect();
    if w.is_empty() {
        return Err(Error::Argument("empty text".into()));
    }
    Ok(w)
}

/// Position weights `1 / (1 + p)` used by the synthetic token encoder.
pub fn position_weights(len: usize) -> Vec<f64> {
    (0..len).map(|p| 1.0 / (1.0 + p as f64)).collect()
}

/// The frozen linear text encoder over prompt tokens:
/// `normalize((sum_p w_p * token_p) * P + b)`.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    projection: Mat,
    bias: Mat,
}

impl TokenEncoder {
    pub fn new(seed: u64, d_token: usize, d: usize) -> Self {
        let mut rng = keyed_rng(seed, "token-encoder", b"projection");
        let scale = 1.0 / (d_token as f64).sqrt();
        let projection = Mat::from_shape_fn((d_token, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        let bias = seeded_unit(seed, "token-encoder", b"bias", d)
            .insert_axis(ndarray::Axis(0))
            * 0.1;
        TokenEncoder { projection, bias }
    }

    pub fn encode(&self, g: &Graph, tokens: Var, len: usize) -> Result<Var> {
        let (rows, cols) = g.shape(tokens);
        if len == 0 || len > MAX_TOKENS {
            return Err(Error::Argument(format!(
                "token sequence length {len} outside 1..={MAX_TOKENS}"
            )));
        }
        if rows % len != 0 || cols != self.projection.nrows() {
            return Err(Error::Shape(format!(
                "tokens [{rows}, {cols}] do not split into sequences of {len} x {}",
                self.projection.nrows()
            )));
        }
        let n = rows / len;
        let d_token = cols;
        // Position weighting and projection fold into one [len * d_token, d]
        // map applied to each flattened sequence.
        let d = self.projection.ncols();
        let mut folded = Mat::zeros((len * d_token, d));
        for (p, wp) in position_weights(len).into_iter().enumerate() {
            folded
                .slice_mut(ndarray::s![p * d_token..(p + 1) * d_token, ..])
                .assign(&(&self.projection * wp));
        }
        let flat = g.reshape(tokens, n, len * d_token);
        let projected = g.matmul(flat, g.leaf(folded));
        Ok(g.normalize_rows(g.add_row(projected, g.leaf(self.bias.clone()))))
    }

    fn hash_into(&self, h: &mut Sha256) {
        for v in self.projection.iter().chain(self.bias.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Region {
    Tracklet(Option<String>),
    Union {
        first: Option<String>,
        second: Option<String>,
        /// `(subject, predicate, object)` relations active on this frame.
        relations: Vec<(Option<String>, String, Option<String>)>,
    },
    Background(Vec<String>),
}

fn article(cat: &Option<String>) -> String {
    match cat {
        Some(c) => format!("a {c}"),
        None => "an object".to_string(),
    }
}

impl Region {
    fn caption(&self) -> String {
        match self {
            Region::Tracklet(c) => format!("{} in the scene", article(c)),
            Region::Union {
                first,
                second,
                relations,
            } => {
                if relations.is_empty() {
                    format!("{} and {} in the scene", article(first), article(second))
                } else {
                    let parts: Vec<String> = relations
                        .iter()
                        .map(|(s, p, o)| format!("{} {p} {}", article(s), article(o)))
                        .collect();
                    format!("{} in the scene", parts.join(" and "))
                }
            }
            Region::Background(cats) if cats.is_empty() => "an empty scene".to_string(),
            Region::Background(cats) => {
                let parts: Vec<String> = cats.iter().map(|c| format!("a {c}")).collect();
                format!("{} in the scene", parts.join(" and "))
            }
        }
    }
}

/// Deterministic stand-in for the frozen vision-language encoders.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    seed: u64,
    d: usize,
    d_token: usize,
    encoder: TokenEncoder,
    planted: HashMap<(String, usize, [i64; 4]), Region>,
}

impl SyntheticProvider {
    pub fn new(seed: u64, d: usize, d_token: usize) -> Self {
        SyntheticProvider {
            seed,
            d,
            d_token,
            encoder: TokenEncoder::new(seed, d_token, d),
            planted: HashMap::new(),
        }
    }

    /// Ground-truth mode: registers a video's tracklets and relations so
    /// their regions carry category and predicate signal.
    pub fn plant(&mut self, video: &VideoAnnotation) {
        let vid = video.video_id.clone();
        let mut entries: Vec<((usize, [i64; 4]), Region)> = Vec::new();
        for t in &video.tracklets {
            for (i, b) in t.boxes.iter().enumerate() {
                entries.push(((t.begin_fid + i, b.quantized()), Region::Tracklet(t.category.clone())));
            }
        }
        for (i, a) in video.tracklets.iter().enumerate() {
            for b in &video.tracklets[i + 1..] {
                let Some((begin, end)) = a.overlap(b) else { continue };
                for fid in begin..end {
                    let relations = video
                        .relations
                        .iter()
                        .filter(|r| {
                            r.begin_fid <= fid
                                && fid < r.end_fid
                                && ((r.subject_tid, r.object_tid) == (a.tid, b.tid)
                                    || (r.subject_tid, r.object_tid) == (b.tid, a.tid))
                        })
                        .map(|r| {
                            let (s, o) = if r.subject_tid == a.tid { (a, b) } else { (b, a) };
                            (s.category.clone(), r.predicate.clone(), o.category.clone())
                        })
                        .collect();
                    let u = union_box(a.box_at(fid).expect("covered"), b.box_at(fid).expect("covered"));
                    entries.push((
                        (fid, u.quantized()),
                        Region::Union {
                            first: a.category.clone(),
                            second: b.category.clone(),
                            relations,
                        },
                    ));
                }
            }
        }
        let frame = video.frame_box().quantized();
        for fid in 0..video.frame_count {
            let mut cats: Vec<String> = Vec::new();
            for t in video.tracklets.iter().filter(|t| t.covers(fid)) {
                if let Some(c) = &t.category {
                    if !cats.contains(c) {
                        cats.push(c.clone());
                    }
                }
            }
            entries.push(((fid, frame), Region::Background(cats)));
        }
        // earlier entries win: tracklet, then union, then background
        for ((fid, q), region) in entries {
            self.planted.entry((vid.clone(), fid, q)).or_insert(region);
        }
    }

    pub fn planted(mut self, videos: &[VideoAnnotation]) -> Self {
        for v in videos {
            self.plant(v);
        }
        self
    }

    fn lookup(&self, video_key: &str, fid: usize, bbox: &BBox) -> Option<&Region> {
        self.planted
            .get(&(video_key.to_string(), fid, bbox.quantized()))
    }

    fn word_vector(&self, word: &str) -> Array1<f64> {
        seeded_unit(self.seed, "word", word.as_bytes(), self.d)
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.d
    }

    fn token_dim(&self) -> usize {
        self.d_token
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let sum = words(text)?
            .into_iter()
            .fold(Array1::zeros(self.d), |acc, w| acc + self.word_vector(w));
        Ok(normalized(sum))
    }

    fn embed_region(&self, video_key: &str, fid: usize, bbox: &BBox) -> Result<Array1<f64>> {
        let noise = seeded_unit(self.seed, "region", &region_key(video_key, fid, bbox), self.d);
        let text = |c: &str| self.embed_text(c);
        let signal = match self.lookup(video_key, fid, bbox) {
            None => return Ok(noise),
            Some(Region::Tracklet(None)) => Array1::zeros(self.d),
            Some(Region::Tracklet(Some(c))) => text(c)?,
            Some(Region::Union {
                first,
                second,
                relations,
            }) => {
                let mut s = Array1::zeros(self.d);
                for c in [first, second].into_iter().flatten() {
                    s = s + text(c)? * 0.5;
                }
                for (_, p, _) in relations {
                    s = s + text(p)?;
                }
                s
            }
            Some(Region::Background(cats)) => {
                let mut s = Array1::zeros(self.d);
                for c in cats {
                    s = s + text(c)?;
                }
                s
            }
        };
        Ok(normalized(signal + noise * REGION_NOISE))
    }

    fn caption_region(&self, video_key: &str, fid: usize, bbox: &BBox) -> Result<RegionCaption> {
        let text = match self.lookup(video_key, fid, bbox) {
            Some(region) => region.caption(),
            None => "something in the scene".to_string(),
        };
        Ok(RegionCaption { fid, text })
    }

    fn word_tokens(&self, text: &str) -> Result<Vec<Array1<f64>>> {
        Ok(words(text)?
            .into_iter()
            .map(|w| seeded_unit(self.seed, "token", w.as_bytes(), self.d_token))
            .collect())
    }

    fn encode_tokens(&self, g: &Graph, tokens: Var, len: usize) -> Result<Var> {
        self.encoder.encode(g, tokens, len)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"synthetic");
        h.update(self.seed.to_le_bytes());
        h.update((self.d as u64).to_le_bytes());
        h.update((self.d_token as u64).to_le_bytes());
        self.encoder.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

#[derive(Deserialize)]
struct ExternalRegion {
    video_id: String,
    fid: usize,
    #[serde(rename = "box")]
    quantized: [i64; 4],
    embedding: Vec<f64>,
    #[serde(default)]
    caption: Option<String>,
}

/// Provider backed by precomputed embeddings on disk.
///
/// The directory holds `texts.json` (`{"text": [f64, ...]}`) and
/// `regions.jsonl`, one object per line:
/// `{"video_id", "fid", "box": [x1, y1, x2, y2] (integer pixels), "embedding", "caption"}`.
/// Prompt tokens use the seeded synthetic token encoder.
#[derive(Debug)]
pub struct ExternalProvider {
    dir: PathBuf,
    d: usize,
    tokens: SyntheticProvider,
    texts: HashMap<String, Array1<f64>>,
    regions: HashMap<(String, usize, [i64; 4]), (Array1<f64>, Option<String>)>,
}

impl ExternalProvider {
    pub fn open(dir: &Path, seed: u64, d_token: usize) -> Result<Self> {
        let texts_path = dir.join("texts.json");
        let text = fs::read_to_string(&texts_path).map_err(|e| Error::io(&texts_path, e))?;
        let raw: BTreeMap<String, Vec<f64>> =
            serde_json::from_str(&text).map_err(|e| Error::parse(&texts_path, &e))?;
        let d = raw
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Argument(format!("{} is empty", texts_path.display())))?;
        let mut texts = HashMap::new();
        for (k, v) in raw {
            if v.len() != d {
                return Err(Error::Shape(format!("text embedding {k:?} has dim {}", v.len())));
            }
            texts.insert(k, normalized(Array1::from(v)));
        }
        let regions_path = dir.join("regions.jsonl");
        let mut regions = HashMap::new();
        if regions_path.exists() {
            let body = fs::read_to_string(&regions_path).map_err(|e| Error::io(&regions_path, e))?;
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                let r: ExternalRegion =
                    serde_json::from_str(line).map_err(|e| Error::parse(&regions_path, &e))?;
                if r.embedding.len() != d {
                    return Err(Error::Shape(format!(
                        "region embedding for {} frame {} has dim {}",
                        r.video_id,
                        r.fid,
                        r.embedding.len()
                    )));
                }
                regions.insert(
                    (r.video_id, r.fid, r.quantized),
                    (normalized(Array1::from(r.embedding)), r.caption),
                );
            }
        }
        Ok(ExternalProvider {
            dir: dir.to_path_buf(),
            d,
            tokens: SyntheticProvider::new(seed, d, d_token),
            texts,
            regions,
        })
    }

    fn region(&self, video_key: &str, fid: usize, bbox: &BBox) -> Result<&(Array1<f64>, Option<String>)> {
        self.regions
            .get(&(video_key.to_string(), fid, bbox.quantized()))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "{}: no precomputed region for {video_key} frame {fid} box {:?}",
                    self.dir.display(),
                    bbox.quantized()
                ))
            })
    }
}

impl EmbeddingProvider for ExternalProvider {
    fn dim(&self) -> usize {
        self.d
    }

    fn token_dim(&self) -> usize {
        self.tokens.token_dim()
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        words(text)?;
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("no precomputed text embedding for {text:?}")))
    }

    fn embed_region(&self, video_key: &str, fid: usize, bbox: &BBox) -> Result<Array1<f64>> {
        Ok(self.region(video_key, fid, bbox)?.0.clone())
    }

    fn caption_region(&self, video_key: &str, fid: usize, bbox: &BBox) -> Result<RegionCaption> {
        let text = self.region(video_key, fid, bbox)?.1.clone().ok_or_else(|| {
            Error::Argument(format!("no precomputed caption for {video_key} frame {fid}"))
        })?;
        Ok(RegionCaption { fid, text })
    }

    fn word_tokens(&self, text: &str) -> Result<Vec<Array1<f64>>> {
        self.tokens.word_tokens(text)
    }

    fn encode_tokens(&self, g: &Graph, tokens: Var, len: usize) -> Result<Var> {
        self.tokens.encode_tokens(g, tokens, len)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"external");
        h.update(self.tokens.fingerprint().as_bytes());
        h.update((self.d as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Text embeddings of `names` stacked as rows.
pub fn text_matrix(provider: &dyn EmbeddingProvider, names: &[String]) -> Result<Array2<f64>> {
    let rows = names
        .iter()
        .map(|n| provider.embed_text(n))
        .collect::<Result<Vec<_>>>()?;
    stack_rows(&rows, provider.dim())
}
