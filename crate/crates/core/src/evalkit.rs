//! Reconstruction metrics, distribution metrics over supplied embeddings, and
//! prompt filters.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::spectral::{mel_filterbank, stft_magnitudes, StftParams};

/// Resolutions `(n_fft, hop, win)` of the reference multi-resolution STFT
/// metric.
pub const METRIC_RESOLUTIONS: [(usize, usize, usize); 3] = [(1024, 120, 600), (2048, 240, 1200), (512, 50, 240)];
pub const METRIC_EPS: f64 = 1e-8;
pub const MEL_BANDS: usize = 128;
pub const MEL_F_MAX: f64 = 22_050.0;
pub const SI_SDR_CAP_DB: f64 = 100.0;
pub const KL_EPS: f64 = 1e-10;
pub const FRECHET_EIG_FLOOR: f64 = 1e-10;

fn check_pair(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.frames() != estimate.frames() || reference.num_channels() != estimate.num_channels() {
        return Err(Error::shape(format!(
            "reference {}x{} vs estimate {}x{}",
            reference.num_channels(),
            reference.frames(),
            estimate.num_channels(),
            estimate.frames()
        )));
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate(),
            estimate.sample_rate()
        )));
    }
    Ok(())
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|v| *v as f64).collect()
}

/// Spectral convergence plus mean absolute log-magnitude difference.
fn sc_plus_logmag(r: &[Vec<f64>], e: &[Vec<f64>]) -> f64 {
    let (mut diff, mut norm, mut log_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (fr, fe) in r.iter().zip(e) {
        for (a, b) in fr.iter().zip(fe) {
            diff += (a - b).powi(2);
            norm += a * a;
            log_sum += (a.max(METRIC_EPS).ln() - b.max(METRIC_EPS).ln()).abs();
            count += 1;
        }
    }
    let sc = if norm > 0.0 { diff.sqrt() / norm.sqrt() } else { diff.sqrt() };
    sc + log_sum / count.max(1) as f64
}

fn project(mags: Vec<Vec<f64>>, fb: &[Vec<f64>]) -> Vec<Vec<f64>> {
    mags.into_iter()
        .map(|frame| fb.iter().map(|row| row.iter().zip(&frame).map(|(w, m)| w * m).sum()).collect())
        .collect()
}

fn spectral_distance(reference: &Waveform, estimate: &Waveform, mel: bool) -> Result<f64> {
    check_pair(reference, estimate)?;
    let mut total = 0.0;
    for &(n_fft, hop, win) in &METRIC_RESOLUTIONS {
        let p = StftParams::new(n_fft, hop, win)?;
        let fb = mel.then(|| mel_filterbank(reference.sample_rate(), n_fft, MEL_BANDS, 0.0, MEL_F_MAX));
        let mut per_channel = 0.0;
        for c in 0..reference.num_channels() {
            let mut r = stft_magnitudes(&to_f64(reference.channel(c)), &p, METRIC_EPS);
            let mut e = stft_magnitudes(&to_f64(estimate.channel(c)), &p, METRIC_EPS);
            if let Some(fb) = &fb {
                r = project(r, fb);
                e = project(e, fb);
            }
            per_channel += sc_plus_logmag(&r, &e);
        }
        total += per_channel / reference.num_channels() as f64;
    }
    Ok(total / METRIC_RESOLUTIONS.len() as f64)
}

pub fn stft_distance(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    spectral_distance(reference, estimate, false)
}

/// As [`stft_distance`] with magnitudes projected onto 128 mel bands.
pub fn mel_distance(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    spectral_distance(reference, estimate, true)
}

/// Scale-invariant SDR in dB for one channel, capped at +100 dB.
pub fn si_sdr_channel(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(format!("{} vs {} samples", reference.len(), estimate.len())));
    }
    let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(Error::invalid("SI-SDR reference is all zeros"));
    }
    let scale = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / ref_energy;
    let (mut target, mut error) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let s = scale * r;
        target += s * s;
        error += (e - s).powi(2);
    }
    if error == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / error).log10()).min(SI_SDR_CAP_DB))
}

/// Per-channel SI-SDR averaged over channels.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let mut sum = 0.0;
    for c in 0..reference.num_channels() {
        sum += si_sdr_channel(&to_f64(reference.channel(c)), &to_f64(estimate.channel(c)))?;
    }
    Ok(sum / reference.num_channels() as f64)
}

#[derive(Debug, Clone)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl EmbeddingStats {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::shape(format!("mean dim {d}, covariance {:?}", covariance.shape())));
        }
        if count < 2 {
            return Err(Error::invalid("embedding statistics need at least two samples"));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-8 {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        Ok(Self { mean, covariance, count })
    }

    /// Sample mean and unbiased covariance of the rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::invalid("embedding statistics need at least two samples"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("ragged embedding rows"));
        }
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric square root via eigendecomposition, eigenvalues floored.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-6 * top) {
        return Err(Error::invalid("covariance is not positive semi-definite"));
    }
    let roots = eig.eigenvalues.map(|l| l.max(FRECHET_EIG_FLOOR).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at zero.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("dims {} vs {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = sqrt_psd(&a.covariance)?;
    sqrt_psd(&b.covariance)?;
    // tr (S_a S_b)^(1/2) = tr (S_a^(1/2) S_b S_a^(1/2))^(1/2)
    let inner = &ra * &b.covariance * &ra;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(FRECHET_EIG_FLOOR).sqrt()).sum();
    let d = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    if d < -1e-6 {
        return Err(Error::invalid(format!("negative Frechet residue {d}")));
    }
    Ok(d.max(0.0))
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Mean of `KL(p || q)` over pairs. `q` gets `KL_EPS` added and is
/// renormalized so zeros stay finite.
pub fn mean_kl(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no probability pairs"));
    }
    let mut total = 0.0;
    for (n, (p, q)) in pairs.iter().enumerate() {
        if p.len() != q.len() {
            return Err(Error::shape(format!("pair {n}: {} vs {} classes", p.len(), q.len())));
        }
        check_simplex(p, &format!("p[{n}]"))?;
        check_simplex(q, &format!("q[{n}]"))?;
        let p_sum: f64 = p.iter().sum();
        let q_sum: f64 = q.iter().sum::<f64>() + KL_EPS * q.len() as f64;
        let kl: f64 = p
            .iter()
            .zip(q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| {
                let pi = pi / p_sum;
                pi * (pi / ((qi + KL_EPS) / q_sum)).ln()
            })
            .sum();
        total += kl.max(0.0);
    }
    Ok(total / pairs.len() as f64)
}

/// Mean cosine similarity between text and audio embeddings.
pub fn clap_score(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no embedding pairs"));
    }
    let mut total = 0.0;
    for (n, (t, a)) in pairs.iter().enumerate() {
        if t.len() != a.len() {
            return Err(Error::shape(format!("pair {n}: {} vs {} dims", t.len(), a.len())));
        }
        let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nt == 0.0 || na == 0.0 {
            return Err(Error::invalid(format!("pair {n} has a zero vector")));
        }
        total += t.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / (nt * na);
    }
    Ok(total / pairs.len() as f64)
}

const CONNECTOR_WORDS: &str = include_str!("../data/connector_words.txt");
const SPEECH_WORDS: &str = include_str!("../data/speech_words.txt");

#[derive(Debug, Clone)]
pub struct PromptFilterList {
    pub connector_words: HashSet<String>,
    pub speech_words: HashSet<String>,
}

fn word_set(text: &str) -> HashSet<String> {
    text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect()
}

impl Default for PromptFilterList {
    fn default() -> Self {
        Self {
            connector_words: word_set(CONNECTOR_WORDS),
            speech_words: word_set(SPEECH_WORDS),
        }
    }
}

impl PromptFilterList {
    pub fn from_texts(connectors: &str, speech: &str) -> Result<Self> {
        let out = Self {
            connector_words: word_set(connectors),
            speech_words: word_set(speech),
        };
        if out.connector_words.is_empty() || out.speech_words.is_empty() {
            return Err(Error::invalid("prompt filter word lists must be nonempty"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    /// Keep every prompt.
    All,
    NoSpeech,
    NoConnectors,
    /// Drop prompts with speech words or connectors.
    Neither,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "no_speech" => Ok(Self::NoSpeech),
            "no_connectors" => Ok(Self::NoConnectors),
            "neither" => Ok(Self::Neither),
            other => Err(Error::invalid(format!("unknown filter mode '{other}'"))),
        }
    }
}

fn words(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn prompt_is_kept(prompt: &str, lists: &PromptFilterList, mode: FilterMode) -> bool {
    let (speech, connectors) = match mode {
        FilterMode::All => (false, false),
        FilterMode::NoSpeech => (true, false),
        FilterMode::NoConnectors => (false, true),
        FilterMode::Neither => (true, true),
    };
    !words(prompt).any(|w| (speech && lists.speech_words.contains(&w)) || (connectors && lists.connector_words.contains(&w)))
}

pub fn filter_prompts(prompts: &[String], lists: &PromptFilterList, mode: FilterMode) -> Vec<String> {
    prompts.iter().filter(|p| prompt_is_kept(p, lists, mode)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shipped_lists() {
        let l = PromptFilterList::default();
        assert_eq!(l.connector_words.len(), 9);
        assert_eq!(l.speech_words.len(), 7);
        assert!(l.connector_words.contains("followed") && l.speech_words.contains("speaks"));
        assert!(PromptFilterList::from_texts("", "man").is_err());
    }

    #[test]
    fn whole_words_only() {
        let l = PromptFilterList::default();
        let keep = |p: &str, m| prompt_is_kept(p, &l, m);
        assert!(keep("An android beeps", FilterMode::NoConnectors));
        assert!(keep("Manual typewriter clacks", FilterMode::NoSpeech));
        assert!(!keep("Birds, then silence", FilterMode::NoConnectors));
        assert!(!keep("MAN coughs", FilterMode::NoSpeech));
        assert!(keep("MAN coughs", FilterMode::All));
    }

    #[test]
    fn kl_smoothing_keeps_zeros_finite() {
        let kl = mean_kl(&[(vec![0.5, 0.5], vec![1.0, 0.0])]).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
        assert!(mean_kl(&[(vec![-0.1, 1.1], vec![0.5, 0.5])]).is_err());
        assert!(mean_kl(&[(vec![0.3, 0.3], vec![0.5, 0.5])]).is_err());
    }

    #[test]
    fn clap_cases() {
        let same = (vec![0.6, 0.8], vec![0.6, 0.8]);
        let ortho = (vec![1.0, 0.0], vec![0.0, 2.0]);
        assert!((clap_score(std::slice::from_ref(&same)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(clap_score(std::slice::from_ref(&ortho)).unwrap(), 0.0);
        assert!((clap_score(&[same, ortho]).unwrap() - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn filtering_is_idempotent(prompts in proptest::collection::vec("[a-zA-Z ,]{0,40}", 0..12), mode in 0usize..4) {
            let mode = [FilterMode::All, FilterMode::NoSpeech, FilterMode::NoConnectors, FilterMode::Neither][mode];
            let l = PromptFilterList::default();
            let once = filter_prompts(&prompts, &l, mode);
            prop_assert_eq!(filter_prompts(&once, &l, mode), once);
        }

        #[test]
        fn kl_is_nonnegative(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..12)) {
            let sp: f64 = raw.iter().map(|r| r.0).sum::<f64>().max(1e-9);
            let sq: f64 = raw.iter().map(|r| r.1).sum::<f64>().max(1e-9);
            prop_assume!(sp > 1e-6 && sq > 1e-6);
            let p: Vec<f64> = raw.iter().map(|r| r.0 / sp).collect();
            let q: Vec<f64> = raw.iter().map(|r| r.1 / sq).collect();
            prop_assert!(mean_kl(&[(p, q)]).unwrap() >= 0.0);
        }
    }
}
