//! Text, timing and timestep conditioning.
//!
//! Text embeddings come from a [`TextEmbedder`]. The built-in
//! [`ToyTextEmbedder`] maps each whitespace token to a fixed pseudo-random unit
//! vector; [`ImportedEmbeddings`] serves precomputed embeddings from a file.
//!
//! Import file layout: a tensor container (see [`crate::container`]) holding
//! one `(K_t, dim)` tensor per prompt, named by [`prompt_key`], plus a sidecar
//! `<file>.index.tsv` with lines `key<TAB>prompt`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{Linear, Params};

/// Longest window the timing condition may describe, in seconds.
pub const MAX_SECONDS_TOTAL: f64 = 47.0;
/// Multiplier applied to diffusion time before the sinusoidal ladder.
pub const TIMESTEP_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Token embeddings of one prompt with their attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens {
    pub tokens: Vec<Vec<f32>>,
    pub mask: Vec<bool>,
}

impl TextTokens {
    /// The null conditioning: one zero token, masked out.
    pub fn null(dim: usize) -> Self {
        Self {
            tokens: vec![vec![0.0; dim]],
            mask: vec![false],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn is_null(&self) -> bool {
        !self.mask.iter().any(|m| *m)
    }
}

/// Pads a batch of prompts to a common length. Returns `(B, K, dim)` tokens and
/// a `(B, K)` mask with 1 for real tokens.
pub fn batch_text(items: &[TextTokens], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let dim = items.iter().map(TextTokens::dim).max().unwrap_or(0);
    let k = items.iter().map(TextTokens::len).max().unwrap_or(0).max(1);
    let mut data = vec![0f32; items.len() * k * dim];
    let mut mask = vec![0f32; items.len() * k];
    for (b, item) in items.iter().enumerate() {
        if item.dim() != dim {
            return Err(Error::shape(format!("text embedding dim {} vs {dim}", item.dim())));
        }
        for (j, (tok, m)) in item.tokens.iter().zip(&item.mask).enumerate() {
            data[(b * k + j) * dim..(b * k + j + 1) * dim].copy_from_slice(tok);
            mask[b * k + j] = f32::from(u8::from(*m));
        }
    }
    let tokens = Tensor::from_vec(data, (items.len(), k, dim), device)?.to_dtype(dtype)?;
    let mask = Tensor::from_vec(mask, (items.len(), k), device)?.to_dtype(dtype)?;
    Ok((tokens, mask))
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, prompt: &str) -> Result<TextTokens>;
}

/// Deterministic stand-in for a pretrained text encoder.
#[derive(Debug, Clone)]
pub struct ToyTextEmbedder {
    pub dim: usize,
    pub max_tokens: usize,
}

impl ToyTextEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, max_tokens: 128 }
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter().map(|x| (x / norm) as f32).collect()
    }
}

/// Toy embedding of a prompt as a token matrix (see [`ToyTextEmbedder`]).
pub fn toy_text_embed(prompt: &str, dim: usize) -> TextTokens {
    ToyTextEmbedder::new(dim).embed_tokens(prompt)
}

impl ToyTextEmbedder {
    fn embed_tokens(&self, prompt: &str) -> TextTokens {
        let tokens: Vec<Vec<f32>> = prompt
            .split_whitespace()
            .take(self.max_tokens)
            .map(|t| self.token_vector(t))
            .collect();
        if tokens.is_empty() {
            return TextTokens::null(self.dim);
        }
        let mask = vec![true; tokens.len()];
        TextTokens { tokens, mask }
    }
}

impl TextEmbedder for ToyTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<TextTokens> {
        Ok(self.embed_tokens(prompt))
    }
}

/// Tensor name under which a prompt is stored in an import file.
pub fn prompt_key(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn index_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".index.tsv");
    PathBuf::from(s)
}

/// Precomputed embeddings looked up by prompt, falling back to the toy
/// embedder unless `strict`.
#[derive(Debug, Clone)]
pub struct ImportedEmbeddings {
    pub table: HashMap<String, TextTokens>,
    pub strict: bool,
    pub fallback: ToyTextEmbedder,
}

impl ImportedEmbeddings {
    pub fn load(path: impl AsRef<Path>, dim: usize, strict: bool) -> Result<Self> {
        let path = path.as_ref();
        let fallback = ToyTextEmbedder::new(dim);
        let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() == 0 {
            log::warn!("embedding file {} is empty", path.display());
            return Ok(Self {
                table: HashMap::new(),
                strict,
                fallback,
            });
        }
        let c = Container::load(path, &Device::Cpu)?;
        let side = index_sidecar(path);
        let index = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut table = HashMap::new();
        for (n, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let Some((key, prompt)) = line.split_once('\t') else {
                return Err(Error::Container {
                    path: side.clone(),
                    message: format!("line {} is not `key<TAB>prompt`", n + 1),
                });
            };
            let t = c.require(key, path)?;
            let (_, d) = t.dims2().map_err(|_| Error::Container {
                path: path.to_path_buf(),
                message: format!("embedding for prompt {prompt:?} must be 2-D"),
            })?;
            if d != dim {
                return Err(Error::Config(format!(
                    "embedding for prompt {prompt:?} has dim {d}, model expects {dim}"
                )));
            }
            let tokens = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let mask = vec![true; tokens.len()];
            table.insert(prompt.to_string(), TextTokens { tokens, mask });
        }
        if table.is_empty() {
            log::warn!("embedding file {} holds no prompts", path.display());
        }
        Ok(Self { table, strict, fallback })
    }

    /// Writes an import file (container plus index sidecar).
    pub fn save(entries: &[(String, Vec<Vec<f32>>)], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut c = Container::new();
        let mut index = String::new();
        for (prompt, rows) in entries {
            let key = prompt_key(prompt);
            let dim = rows.first().map_or(0, Vec::len);
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            c.insert(key.clone(), Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu)?);
            index.push_str(&format!("{key}\t{prompt}\n"));
        }
        c.save(path)?;
        let side = index_sidecar(path);
        std::fs::write(&side, index).map_err(|e| Error::io(&side, e))
    }
}

impl TextEmbedder for ImportedEmbeddings {
    fn dim(&self) -> usize {
        self.fallback.dim
    }

    fn embed(&self, prompt: &str) -> Result<TextTokens> {
        if prompt.trim().is_empty() {
            return Ok(TextTokens::null(self.dim()));
        }
        match self.table.get(prompt) {
            Some(t) => Ok(t.clone()),
            None if self.strict => Err(Error::invalid(format!("no imported embedding for prompt {prompt:?}"))),
            None => self.fallback.embed(prompt),
        }
    }
}

/// Sinusoidal features `[sin(x·f_i) ; cos(x·f_i)]` with `f_i = 10000^(-i/half)`.
pub fn sinusoidal(x: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("sinusoidal embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let args: Vec<f64> = (0..half)
        .map(|i| x * (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
        .collect();
    Ok(args.iter().map(|a| a.sin()).chain(args.iter().map(|a| a.cos())).collect())
}

/// Diffusion-time embedding for `t ∈ [0, 1]`.
pub fn timestep_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    sinusoidal(t * TIMESTEP_SCALE, dim)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingCondition {
    pub seconds_start: f64,
    pub seconds_total: f64,
}

impl TimingCondition {
    pub fn new(seconds_start: f64, seconds_total: f64) -> Result<Self> {
        let tc = Self {
            seconds_start,
            seconds_total,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seconds_total > 0.0 && self.seconds_total <= MAX_SECONDS_TOTAL) {
            return Err(Error::invalid(format!(
                "seconds_total {} outside (0, {MAX_SECONDS_TOTAL}]",
                self.seconds_total
            )));
        }
        if !(self.seconds_start >= 0.0 && self.seconds_start.is_finite()) {
            return Err(Error::invalid(format!("seconds_start {} must be >= 0", self.seconds_start)));
        }
        Ok(())
    }

    /// Sinusoidal features of start and total before the learned projection.
    pub fn features(&self, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        Ok((sinusoidal(self.seconds_start, dim)?, sinusoidal(self.seconds_total, dim)?))
    }
}

/// Learned projections of the timing features, one per field.
pub struct TimingEmbedder {
    start: Linear,
    total: Linear,
    feature_dim: usize,
}

impl TimingEmbedder {
    pub fn new(feature_dim: usize, out_dim: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            start: Linear::new(feature_dim, out_dim, true, &p.pp("start"))?,
            total: Linear::new(feature_dim, out_dim, true, &p.pp("total"))?,
            feature_dim,
        })
    }

    /// Two `(B, out_dim)` embeddings: start and total.
    pub fn forward(&self, timing: &[TimingCondition]) -> Result<(Tensor, Tensor)> {
        let dtype = self.start.weight.dtype();
        let dev = self.start.weight.device();
        let mut starts = Vec::with_capacity(timing.len() * self.feature_dim);
        let mut totals = Vec::with_capacity(timing.len() * self.feature_dim);
        for tc in timing {
            let (s, t) = tc.features(self.feature_dim)?;
            starts.extend(s);
            totals.extend(t);
        }
        let shape = (timing.len(), self.feature_dim);
        let s = Tensor::from_vec(starts, shape, dev)?.to_dtype(dtype)?;
        let t = Tensor::from_vec(totals, shape, dev)?.to_dtype(dtype)?;
        Ok((self.start.forward(&s)?, self.total.forward(&t)?))
    }
}

/// Embeds a timing condition: sinusoidal features through `embedder`.
pub fn timing_embed(tc: &TimingCondition, embedder: &TimingEmbedder) -> Result<(Tensor, Tensor)> {
    embedder.forward(std::slice::from_ref(tc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_embedder_is_deterministic_and_order_sensitive() {
        let a = toy_text_embed("rain on a tin roof", 32);
        assert_eq!(a, toy_text_embed("rain on a tin roof", 32));
        assert_eq!(a.len(), 5);
        for t in &a.tokens {
            let n: f32 = t.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let ab = toy_text_embed("a b", 16);
        let ba = toy_text_embed("b a", 16);
        assert_ne!(ab.tokens, ba.tokens);
        assert_eq!(ab.tokens[0], ba.tokens[1]);
        assert_eq!(ab.tokens[1], ba.tokens[0]);
    }

    #[test]
    fn empty_prompt_is_null_token() {
        let e = toy_text_embed("   ", 8);
        assert_eq!(e.tokens, vec![vec![0.0; 8]]);
        assert!(e.is_null());
    }

    #[test]
    fn token_cap() {
        let long = vec!["w"; 300].join(" ");
        assert_eq!(toy_text_embed(&long, 4).len(), 128);
    }

    #[test]
    fn timestep_closed_forms() {
        let e = timestep_embed(0.0, 16).unwrap();
        assert!(e[..8].iter().all(|v| *v == 0.0));
        assert!(e[8..].iter().all(|v| *v == 1.0));
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - (8f64).sqrt()).abs() < 1e-12);
        assert!(timestep_embed(0.5, 7).is_err());
        let grid: Vec<Vec<f64>> = (1..10).map(|i| timestep_embed(i as f64 / 10.0, 16).unwrap()).collect();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                assert_ne!(grid[i], grid[j]);
            }
        }
    }

    #[test]
    fn timing_bounds_and_distinct_totals() {
        assert!(TimingCondition::new(0.0, 47.0).is_ok());
        assert!(TimingCondition::new(0.0, 0.0).is_err());
        assert!(TimingCondition::new(0.0, 47.5).is_err());
        let a = TimingCondition::new(0.0, 10.0).unwrap().features(16).unwrap();
        let b = TimingCondition::new(0.0, 20.0).unwrap().features(16).unwrap();
        assert_eq!(a.0, b.0);
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn imported_lookup_fallback_and_strict() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.safetensors");
        let entries = vec![
            ("a dog barks".to_string(), vec![vec![1.0f32, 0.0, 0.0, 0.0]; 3]),
            ("rain".to_string(), vec![vec![0.0f32, 1.0, 0.0, 0.0]]),
        ];
        ImportedEmbeddings::save(&entries, &path).unwrap();
        let lax = ImportedEmbeddings::load(&path, 4, false).unwrap();
        assert_eq!(lax.embed("a dog barks").unwrap().len(), 3);
        assert_eq!(lax.embed("rain").unwrap().tokens[0], vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(lax.embed("wind").unwrap(), toy_text_embed("wind", 4));
        let strict = ImportedEmbeddings::load(&path, 4, true).unwrap();
        assert!(strict.embed("wind").is_err());
        match ImportedEmbeddings::load(&path, 8, false) {
            Err(Error::Config(m)) => assert!(m.contains("a dog barks") || m.contains("rain")),
            other => panic!("expected dim error, got {other:?}"),
        }
    }

    #[test]
    fn empty_import_file_gives_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.safetensors");
        std::fs::write(&path, b"").unwrap();
        assert!(ImportedEmbeddings::load(&path, 4, false).unwrap().table.is_empty());
        let path2 = dir.path().join("none.safetensors");
        ImportedEmbeddings::save(&[], &path2).unwrap();
        assert!(ImportedEmbeddings::load(&path2, 4, false).unwrap().table.is_empty());
    }

    #[test]
    fn batching_pads_with_mask() {
        let items = vec![toy_text_embed("a b c", 4), toy_text_embed("", 4)];
        let (t, m) = batch_text(&items, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 4]);
        assert_eq!(m.to_vec2::<f32>().unwrap(), vec![vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]]);
    }
}
