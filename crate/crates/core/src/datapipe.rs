//! Prompt construction from recording metadata, music detection over tag
//! timelines, and embedding-space duplicate and memorization scans.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::EmbeddingSet;
use crate::error::{Error, Result};

pub const MUSIC_THRESHOLD: f64 = 0.15;
pub const MUSIC_MIN_SECONDS: f64 = 30.0;
pub const DEDUP_THRESHOLD: f64 = 0.99;
pub const MEMORIZATION_TOP_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Freesound,
    Fma,
}

/// One line of the metadata JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMetadata {
    #[serde(default)]
    pub id: String,
    pub source: Source,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub year: Option<String>,
    #[serde(default)]
    pub genres: Vec<String>,
    #[serde(default)]
    pub album: Option<String>,
    #[serde(default)]
    pub artist: Option<String>,
}

enum FieldValue<'a> {
    Single(&'a str),
    List(Vec<&'a str>),
}

impl RecordingMetadata {
    pub fn new(source: Source) -> Self {
        Self {
            id: String::new(),
            source,
            title: None,
            description: None,
            tags: Vec::new(),
            year: None,
            genres: Vec::new(),
            album: None,
            artist: None,
        }
    }

    /// Non-empty fields in canonical order.
    fn fields(&self) -> Vec<(&'static str, FieldValue<'_>)> {
        fn single<'a>(out: &mut Vec<(&'static str, FieldValue<'a>)>, key: &'static str, v: &'a Option<String>) {
            if let Some(s) = v.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
                out.push((key, FieldValue::Single(s)));
            }
        }
        fn list<'a>(out: &mut Vec<(&'static str, FieldValue<'a>)>, key: &'static str, v: &'a [String]) {
            let items: Vec<&str> = v.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
            if !items.is_empty() {
                out.push((key, FieldValue::List(items)));
            }
        }
        let mut out = Vec::new();
        single(&mut out, "year", &self.year);
        single(&mut out, "artist", &self.artist);
        single(&mut out, "album", &self.album);
        single(&mut out, "title", &self.title);
        single(&mut out, "description", &self.description);
        list(&mut out, "genres", &self.genres);
        list(&mut out, "tags", &self.tags);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields().is_empty() {
            return Err(Error::invalid(format!("recording '{}' has no non-empty metadata", self.id)));
        }
        Ok(())
    }
}

pub fn read_metadata_jsonl(path: impl AsRef<Path>) -> Result<Vec<RecordingMetadata>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let md: RecordingMetadata = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(md);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseTransform {
    AsIs,
    Upper,
    Lower,
}

/// A chosen subset of fields in output order, with list values already
/// shuffled and joined.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParts {
    pub fields: Vec<(String, String)>,
    pub keyed: bool,
    pub case: CaseTransform,
}

impl PromptParts {
    /// Fields named in `order`, lists kept in metadata order.
    pub fn forced(md: &RecordingMetadata, order: &[&str], keyed: bool, case: CaseTransform) -> Result<Self> {
        let fields = md.fields();
        let mut out = Vec::new();
        for key in order {
            let (_, v) = fields
                .iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::invalid(format!("field '{key}' is empty or unknown")))?;
            let value = match v {
                FieldValue::Single(s) => s.to_string(),
                FieldValue::List(items) => items.join(", "),
            };
            out.push((key.to_string(), value));
        }
        if out.is_empty() {
            return Err(Error::invalid("no fields selected"));
        }
        Ok(Self { fields: out, keyed, case })
    }
}

pub fn sample_parts<R: Rng>(md: &RecordingMetadata, rng: &mut R) -> Result<PromptParts> {
    md.validate()?;
    let fields = md.fields();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.is_empty() {
        chosen = (0..fields.len()).filter(|_| rng.random_bool(0.5)).collect();
    }
    chosen.shuffle(rng);
    let parts = chosen
        .into_iter()
        .map(|i| {
            let (key, v) = &fields[i];
            let value = match v {
                FieldValue::Single(s) => s.to_string(),
                FieldValue::List(items) => {
                    let mut items = items.clone();
                    items.shuffle(rng);
                    items.join(", ")
                }
            };
            (key.to_string(), value)
        })
        .collect();
    let keyed = md.source == Source::Fma && rng.random_bool(0.5);
    let case = match rng.random_range(0..3) {
        0 => CaseTransform::AsIs,
        1 => CaseTransform::Upper,
        _ => CaseTransform::Lower,
    };
    Ok(PromptParts { fields: parts, keyed, case })
}

pub fn render(parts: &PromptParts) -> String {
    let joined = parts
        .fields
        .iter()
        .map(|(k, v)| if parts.keyed { format!("{k}: {v}") } else { v.clone() })
        .collect::<Vec<_>>()
        .join(", ");
    match parts.case {
        CaseTransform::AsIs => joined,
        CaseTransform::Upper => joined.to_uppercase(),
        CaseTransform::Lower => joined.to_lowercase(),
    }
}

pub fn build_prompt(md: &RecordingMetadata, rng_seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(render(&sample_parts(md, &mut rng)?))
}

/// Per-tag probabilities sampled at a fixed hop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagTimeline {
    pub hop_seconds: f64,
    pub tags: Vec<String>,
    /// `frames[i][j]` is the probability of `tags[j]` at frame `i`.
    pub frames: Vec<Vec<f64>>,
}

impl TagTimeline {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

/// True when the time spent with some music tag at or above `threshold`
/// adds up to at least `min_seconds`.
pub fn detect_music(tl: &TagTimeline, music_tags: &HashSet<String>, threshold: f64, min_seconds: f64) -> Result<bool> {
    if tl.frames.is_empty() {
        return Err(Error::invalid("empty tag timeline"));
    }
    if !(tl.hop_seconds > 0.0) {
        return Err(Error::invalid(format!("hop {} must be positive", tl.hop_seconds)));
    }
    let cols: Vec<usize> = tl
        .tags
        .iter()
        .enumerate()
        .filter(|(_, t)| music_tags.contains(*t))
        .map(|(i, _)| i)
        .collect();
    let mut active = 0usize;
    for (n, frame) in tl.frames.iter().enumerate() {
        if frame.len() != tl.tags.len() {
            return Err(Error::shape(format!("frame {n} has {} values for {} tags", frame.len(), tl.tags.len())));
        }
        if frame.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("frame {n} has a probability outside [0, 1]")));
        }
        if cols.iter().any(|&c| frame[c] >= threshold) {
            active += 1;
        }
    }
    // small slack so 30 frames at a 1 s hop count as 30 s
    Ok(active as f64 * tl.hop_seconds >= min_seconds - 1e-9)
}

/// Row-normalized embeddings with unique ids.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::shape(format!("{} ids for {} vectors", ids.len(), vectors.len())));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate id '{id}'")));
            }
        }
        let dim = vectors.first().map_or(0, Vec::len);
        for (id, v) in ids.iter().zip(&vectors) {
            if v.len() != dim {
                return Err(Error::shape(format!("vector '{id}' has dim {}, expected {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x.powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("vector '{id}' has norm {norm}")));
            }
        }
        Ok(Self { ids, vectors })
    }

    /// Scales every row to unit length first. Zero rows are rejected.
    pub fn normalized(ids: Vec<String>, mut vectors: Vec<Vec<f64>>) -> Result<Self> {
        for (id, v) in ids.iter().zip(vectors.iter_mut()) {
            let norm = v.iter().map(|x| x.powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::invalid(format!("vector '{id}' cannot be normalized")));
            }
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Self::new(ids, vectors)
    }

    pub fn from_set(set: EmbeddingSet) -> Result<Self> {
        Self::normalized(set.ids, set.rows)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components (size ≥ 2) of the graph joining rows with cosine at
/// least `threshold`. Groups list ids in index order and are ordered by their
/// first member.
pub fn dedup_scan(idx: &EmbeddingIndex, threshold: f64) -> Vec<Vec<String>> {
    let n = idx.len();
    let edges: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let vi = &idx.vectors[i];
            (i + 1..n)
                .filter(move |&j| cosine(vi, &idx.vectors[j]) >= threshold)
                .map(move |j| (i, j))
        })
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for (i, j) in edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    groups
        .into_iter()
        .filter(|g| g.len() > 1)
        .map(|g| g.into_iter().map(|i| idx.ids[i].clone()).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub gen_id: String,
    pub train_id: String,
    pub cosine: f64,
}

/// Nearest training row for every generation, then the global top `k` by
/// cosine. Ties go to the smaller id.
pub fn memorization_candidates(gen: &EmbeddingIndex, train: &EmbeddingIndex, k: usize) -> Result<Vec<Candidate>> {
    if !gen.is_empty() && !train.is_empty() && gen.dim() != train.dim() {
        return Err(Error::shape(format!("generation dim {} vs training dim {}", gen.dim(), train.dim())));
    }
    if train.is_empty() {
        return Ok(Vec::new());
    }
    let mut best: Vec<Candidate> = (0..gen.len())
        .into_par_iter()
        .map(|g| {
            let v = &gen.vectors[g];
            let mut top = 0;
            let mut top_cos = cosine(v, &train.vectors[0]);
            for t in 1..train.len() {
                let c = cosine(v, &train.vectors[t]);
                if c > top_cos || (c == top_cos && train.ids[t] < train.ids[top]) {
                    top = t;
                    top_cos = c;
                }
            }
            Candidate {
                gen_id: gen.ids[g].clone(),
                train_id: train.ids[top].clone(),
                cosine: top_cos,
            }
        })
        .collect();
    best.sort_by(|a, b| {
        b.cosine
            .total_cmp(&a.cosine)
            .then_with(|| a.gen_id.cmp(&b.gen_id))
            .then_with(|| a.train_id.cmp(&b.train_id))
    });
    best.truncate(k);
    Ok(best)
}
