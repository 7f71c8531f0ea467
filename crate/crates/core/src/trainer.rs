//! Training loops: two-phase autoencoder training and v-objective DiT
//! training, both with AdamW and an exponential ramp-up/decay schedule.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::Waveform;
use crate::autoencoder::{reparameterize, Autoencoder, AutoencoderConfig};
use crate::conditioning::{batch_text, TextEmbedder, TextTokens, TimingCondition};
use crate::container::Container;
use crate::diffusion::{noise_and_target_batch, NoiseSchedule};
use crate::dit::{CondInput, Dit, DitConfig};
use crate::error::{Error, Result};
use crate::losses::{adversarial_losses, kl_regularizer, mrstft_stereo, DiscConfig, DiscriminatorBank, LossWeights, MrstftConfig, KL_WEIGHT};
use crate::nn::params::{randn, vars_with_prefix};
use crate::nn::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AeFull,
    AeDecoderOnly,
    Dit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub base_lr: f64,
    pub disc_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: f64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub cond_dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples per autoencoder training chunk.
    pub chunk_frames: usize,
    /// 0 saves only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::ae_full()
    }
}

impl TrainConfig {
    pub fn ae_full() -> Self {
        Self {
            phase: Phase::AeFull,
            base_lr: 1.5e-4,
            disc_lr: 3e-4,
            weight_decay: 1e-3,
            warmup_steps: 1000.0,
            decay_rate: 0.1,
            batch_size: 4,
            max_steps: 10_000,
            cond_dropout: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            chunk_frames: 65_536,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn ae_decoder_only() -> Self {
        Self {
            phase: Phase::AeDecoderOnly,
            ..Self::ae_full()
        }
    }

    pub fn dit() -> Self {
        Self {
            phase: Phase::Dit,
            base_lr: 5e-5,
            ..Self::ae_full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0) || !(self.disc_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad(format!("cond_dropout {} not in [0, 1)", self.cond_dropout));
        }
        if !(self.warmup_steps > 0.0) || !(self.decay_rate > 0.0) {
            return bad("warmup_steps and decay_rate must be positive".into());
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return bad("batch_size and max_steps must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative".into());
        }
        Ok(())
    }

    fn adamw(&self, lr: f64) -> ParamsAdamW {
        ParamsAdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `base_lr (1 - exp(-step / warmup)) decay_rate^(step / max_steps)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step as f64;
    cfg.base_lr * (1.0 - (-s / cfg.warmup_steps).exp()) * cfg.decay_rate.powf(s / cfg.max_steps as f64)
}

/// AdamW over `vars` at the schedule's first-step learning rate.
pub fn adamw(vars: Vec<Var>, cfg: &TrainConfig, base: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, cfg.adamw(base))?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite_or_abort(step: usize, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let context = values.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
    log::error!("non-finite loss at step {step}: {context}");
    Err(Error::NonFinite { step, context })
}

/// SHA-256 over the names and `f64` little-endian values of every variable
/// under `prefix`, in name order.
pub fn hash_vars(varmap: &candle_nn::VarMap, prefix: &str) -> Result<String> {
    let mut h = Sha256::new();
    for (name, var) in vars_with_prefix(varmap, prefix) {
        h.update(name.as_bytes());
        for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Copy every variable under `prefix` into a container, prefix stripped.
pub fn vars_to_container(varmap: &candle_nn::VarMap, prefix: &str, c: &mut Container) {
    for (name, var) in vars_with_prefix(varmap, prefix) {
        c.insert(&name[prefix.len()..], var.as_tensor().clone());
    }
}

/// Set every variable under `prefix` from the container; all must be present.
pub fn vars_from_container(varmap: &candle_nn::VarMap, prefix: &str, c: &Container, path: &Path) -> Result<()> {
    for (name, var) in vars_with_prefix(varmap, prefix) {
        let t = c.require(&name[prefix.len()..], path)?;
        if t.dims() != var.dims() {
            return Err(Error::Container {
                path: path.to_path_buf(),
                message: format!("`{name}` has shape {:?}, model expects {:?}", t.dims(), var.dims()),
            });
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

fn config_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config serializes")
}

fn config_from<T: for<'de> Deserialize<'de>>(c: &Container, path: &Path, key: &str) -> Result<T> {
    let raw = c.metadata.get(key).ok_or_else(|| Error::Container {
        path: path.to_path_buf(),
        message: format!("missing `{key}` metadata"),
    })?;
    serde_json::from_str(raw).map_err(|e| Error::Container {
        path: path.to_path_buf(),
        message: format!("bad `{key}` metadata: {e}"),
    })
}

/// Autoencoder plus its discriminators, each in its own variable store.
pub struct AeSession {
    pub params: Params,
    pub autoencoder: Autoencoder,
    pub disc_params: Params,
    pub discriminators: DiscriminatorBank,
    pub disc_cfg: DiscConfig,
}

impl AeSession {
    pub fn new(cfg: AutoencoderConfig, disc_cfg: DiscConfig, seed: u64, dtype: DType) -> Result<Self> {
        let params = Params::new(seed, dtype, &Device::Cpu);
        let autoencoder = Autoencoder::new(cfg, &params)?;
        let disc_params = Params::new(seed.wrapping_add(0x5eed), dtype, &Device::Cpu);
        let discriminators = DiscriminatorBank::new(&disc_cfg, &disc_params)?;
        Ok(Self {
            params,
            autoencoder,
            disc_params,
            discriminators,
            disc_cfg,
        })
    }

    pub fn encoder_hash(&self) -> Result<String> {
        hash_vars(self.params.varmap(), "encoder.")
    }

    /// Autoencoder weights under `ae.`, discriminators under `disc.`.
    pub fn save(&self, path: impl AsRef<Path>, extra: &[(&str, String)]) -> Result<()> {
        let mut c = Container::new();
        for (name, var) in vars_with_prefix(self.params.varmap(), "") {
            c.insert(format!("ae.{name}"), var.as_tensor().clone());
        }
        for (name, var) in vars_with_prefix(self.disc_params.varmap(), "") {
            c.insert(format!("disc.{name}"), var.as_tensor().clone());
        }
        c.metadata.insert("config".into(), config_json(self.autoencoder.config()));
        c.metadata.insert("disc_config".into(), config_json(&self.disc_cfg));
        c.metadata.insert("encoder_sha256".into(), self.encoder_hash()?);
        for (k, v) in extra {
            c.metadata.insert(k.to_string(), v.clone());
        }
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let path = path.as_ref();
        let c = Container::load(path, &Device::Cpu)?;
        let cfg: AutoencoderConfig = config_from(&c, path, "config")?;
        let disc_cfg: DiscConfig = config_from(&c, path, "disc_config")?;
        let s = Self::new(cfg, disc_cfg, 0, dtype)?;
        let mut ae = Container::new();
        let mut disc = Container::new();
        for (k, t) in &c.tensors {
            if let Some(rest) = k.strip_prefix("ae.") {
                ae.insert(rest, t.clone());
            } else if let Some(rest) = k.strip_prefix("disc.") {
                disc.insert(rest, t.clone());
            }
        }
        vars_from_container(s.params.varmap(), "", &ae, path)?;
        // discriminators are optional for inference-only checkpoints
        if !disc.tensors.is_empty() {
            vars_from_container(s.disc_params.varmap(), "", &disc, path)?;
        }
        Ok(s)
    }
}

/// Load only the autoencoder from a checkpoint written by [`AeSession::save`].
pub fn load_autoencoder(path: impl AsRef<Path>, dtype: DType) -> Result<Autoencoder> {
    Ok(AeSession::load(path, dtype)?.autoencoder)
}

#[derive(Debug, Clone, Serialize)]
pub struct AeStepLog {
    pub step: usize,
    pub lr: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub generator_adv: f64,
    pub feature_matching: f64,
    pub discriminator: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AeReport {
    pub logs: Vec<AeStepLog>,
    /// Encoder hash before training, then one per saved checkpoint.
    pub encoder_hashes: Vec<String>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where a run writes its checkpoints and loss log. `None` keeps everything
/// in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub name: String,
}

impl RunOutput {
    pub fn to_dir(dir: impl Into<PathBuf>, name: impl Into<String>) -> Self {
        Self {
            dir: Some(dir.into()),
            name: name.into(),
        }
    }

    fn checkpoint(&self, step: usize) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}_step{step:07}.safetensors", self.name)))
    }

    fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}_losses.csv", self.name)))
    }
}

fn write_log<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Random stereo chunks of `len` samples, zero-padded when a clip is short.
pub fn sample_audio_batch<R: Rng>(clips: &[Waveform], batch: usize, len: usize, rng: &mut R, dtype: DType) -> Result<Tensor> {
    if clips.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    let mut data = Vec::with_capacity(batch * 2 * len);
    for _ in 0..batch {
        let clip = &clips[rng.random_range(0..clips.len())];
        if clip.num_channels() != 2 {
            return Err(Error::invalid("training clips must be stereo"));
        }
        let start = if clip.frames() > len { rng.random_range(0..=clip.frames() - len) } else { 0 };
        for c in 0..2 {
            let ch = clip.channel(c);
            data.extend((0..len).map(|i| ch.get(start + i).copied().unwrap_or(0.0)));
        }
    }
    Ok(Tensor::from_vec(data, (batch, 2, len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// MRSTFT between a batch and its reconstruction through the posterior mean.
pub fn reconstruction_loss(ae: &Autoencoder, x: &Tensor, mrstft: &MrstftConfig) -> Result<f64> {
    let post = ae.encode(x)?;
    let y = ae.decode(&post.mean)?;
    scalar(&mrstft_stereo(x, &y, mrstft)?)
}

pub struct AeLossConfig {
    pub mrstft: MrstftConfig,
    pub weights: LossWeights,
}

/// One autoencoder phase. `AeFull` updates encoder, decoder and
/// discriminators; `AeDecoderOnly` leaves every encoder variable untouched
/// and checks that by hash at every checkpoint.
pub fn train_autoencoder(s: &mut AeSession, clips: &[Waveform], cfg: &TrainConfig, losses: &AeLossConfig, out: &RunOutput) -> Result<AeReport> {
    cfg.validate()?;
    let frozen = match cfg.phase {
        Phase::AeFull => false,
        Phase::AeDecoderOnly => true,
        Phase::Dit => return Err(Error::Config("train_autoencoder called with phase dit".into())),
    };
    let gen_vars: Vec<Var> = vars_with_prefix(s.params.varmap(), "")
        .into_iter()
        .filter(|(n, _)| !(frozen && n.starts_with("encoder.")))
        .map(|(_, v)| v)
        .collect();
    let disc_vars: Vec<Var> = vars_with_prefix(s.disc_params.varmap(), "").into_iter().map(|(_, v)| v).collect();
    let mut gen_opt = adamw(gen_vars, cfg, lr_at(1, cfg))?;
    let mut disc_opt = adamw(disc_vars, cfg, cfg.disc_lr * lr_at(1, cfg) / cfg.base_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dtype = s.params.dtype();
    let initial_hash = s.encoder_hash()?;
    let mut report = AeReport {
        encoder_hashes: vec![initial_hash.clone()],
        ..Default::default()
    };

    for step in 1..=cfg.max_steps {
        let lr = lr_at(step, cfg);
        gen_opt.set_learning_rate(lr);
        disc_opt.set_learning_rate(cfg.disc_lr * lr / cfg.base_lr);
        let x = sample_audio_batch(clips, cfg.batch_size, cfg.chunk_frames, &mut rng, dtype)?;
        let post = s.autoencoder.encode(&x)?;
        let z_seed: u64 = rng.random();
        let (z, kl) = if frozen {
            let post = crate::autoencoder::GaussianParams {
                mean: post.mean.detach(),
                log_variance: post.log_variance.detach(),
            };
            (reparameterize(&post, z_seed)?, None)
        } else {
            (reparameterize(&post, z_seed)?, Some(kl_regularizer(&post)?))
        };
        let y = s.autoencoder.decode(&z)?;
        let rec = mrstft_stereo(&x, &y, &losses.mrstft)?;
        let adv = adversarial_losses(&x, &y, &s.discriminators)?;
        let w = &losses.weights;
        let mut total = ((&rec * w.reconstruction)? + (&adv.g_loss * w.adversarial)?)?;
        total = (total + (&adv.fm_loss * w.feature_matching)?)?;
        if let Some(kl) = &kl {
            total = (total + (kl * KL_WEIGHT)?)?;
        }
        let entry = AeStepLog {
            step,
            lr,
            reconstruction: scalar(&rec)?,
            kl: kl.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            generator_adv: scalar(&adv.g_loss)?,
            feature_matching: scalar(&adv.fm_loss)?,
            discriminator: scalar(&adv.d_loss)?,
            total: scalar(&total)?,
        };
        finite_or_abort(
            step,
            &[
                ("reconstruction", entry.reconstruction),
                ("kl", entry.kl),
                ("generator_adv", entry.generator_adv),
                ("feature_matching", entry.feature_matching),
                ("discriminator", entry.discriminator),
            ],
        )?;
        let gen_grads = total.backward()?;
        let disc_grads = adv.d_loss.backward()?;
        gen_opt.step(&gen_grads)?;
        disc_opt.step(&disc_grads)?;
        log::debug!("ae step {step}: rec {:.5} total {:.5}", entry.reconstruction, entry.total);
        report.logs.push(entry);

        let due = (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.max_steps;
        if due {
            let hash = s.encoder_hash()?;
            if frozen && hash != initial_hash {
                return Err(Error::invalid(format!("encoder changed during decoder-only training at step {step}")));
            }
            if let Some(path) = out.checkpoint(step) {
                let phase = config_json(&cfg.phase);
                s.save(&path, &[("phase", phase), ("step", step.to_string())])?;
                report.checkpoints.push(path);
            }
            report.encoder_hashes.push(hash);
        }
    }
    if let Some(path) = out.log_path() {
        write_log(&path, &report.logs)?;
    }
    Ok(report)
}

/// One latent sequence with its prompt and timing.
#[derive(Debug, Clone)]
pub struct DitSample {
    /// `(latent_channels, T)`.
    pub latents: Tensor,
    pub prompt: String,
    pub timing: TimingCondition,
}

pub struct DitSession {
    pub params: Params,
    pub dit: Dit,
}

impl DitSession {
    pub fn new(cfg: DitConfig, seed: u64, dtype: DType) -> Result<Self> {
        let params = Params::new(seed, dtype, &Device::Cpu);
        let dit = Dit::new(cfg, &params)?;
        Ok(Self { params, dit })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &[(&str, String)]) -> Result<()> {
        let mut c = Container::new();
        vars_to_container(self.params.varmap(), "", &mut c);
        c.metadata.insert("config".into(), config_json(self.dit.config()));
        for (k, v) in extra {
            c.metadata.insert(k.to_string(), v.clone());
        }
        c.save(path)
    }

    /// Returns the session and the checkpoint's metadata.
    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<(Self, Container)> {
        let path = path.as_ref();
        let c = Container::load(path, &Device::Cpu)?;
        let cfg: DitConfig = config_from(&c, path, "config")?;
        let s = Self::new(cfg, 0, dtype)?;
        vars_from_container(s.params.varmap(), "", &c, path)?;
        Ok((s, c))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DitStepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub conditioned: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DitReport {
    pub logs: Vec<DitStepLog>,
    pub conditioned_steps: usize,
    pub null_steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Caches prompt embeddings so each prompt is embedded once per run.
struct TextCache<'a> {
    embedder: &'a dyn TextEmbedder,
    seen: HashMap<String, TextTokens>,
}

impl<'a> TextCache<'a> {
    fn get(&mut self, prompt: &str) -> Result<TextTokens> {
        if let Some(t) = self.seen.get(prompt) {
            return Ok(t.clone());
        }
        let t = self.embedder.embed(prompt)?;
        self.seen.insert(prompt.to_string(), t.clone());
        Ok(t)
    }
}

fn cond_input(items: &[&DitSample], texts: Vec<TextTokens>, dtype: DType) -> Result<CondInput> {
    let (text, text_mask) = batch_text(&texts, dtype, &Device::Cpu)?;
    Ok(CondInput {
        text,
        text_mask,
        timing: items.iter().map(|s| s.timing).collect(),
    })
}

fn stack_latents(items: &[&DitSample], dtype: DType) -> Result<Tensor> {
    let shape = items[0].latents.dims().to_vec();
    if items.iter().any(|s| s.latents.dims() != shape.as_slice()) {
        return Err(Error::shape("latent sequences in a batch must share a shape"));
    }
    let ts: Vec<Tensor> = items.iter().map(|s| s.latents.clone()).collect();
    Ok(Tensor::stack(&ts, 0)?.to_dtype(dtype)?)
}

/// v-objective training. Each step draws a batch, one uniform time per
/// example, fresh noise, and with probability `cond_dropout` swaps every
/// prompt in the batch for the null prompt (timing is kept).
pub fn train_dit(s: &mut DitSession, data: &[DitSample], embedder: &dyn TextEmbedder, cfg: &TrainConfig, out: &RunOutput) -> Result<DitReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty latent dataset"));
    }
    if embedder.dim() != s.dit.config().text_dim {
        return Err(Error::Config(format!(
            "embedder dim {} but model text_dim {}",
            embedder.dim(),
            s.dit.config().text_dim
        )));
    }
    let vars: Vec<Var> = vars_with_prefix(s.params.varmap(), "").into_iter().map(|(_, v)| v).collect();
    let mut opt = adamw(vars, cfg, lr_at(1, cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dtype = s.params.dtype();
    let sched = NoiseSchedule::cosine();
    let mut cache = TextCache {
        embedder,
        seen: HashMap::new(),
    };
    let mut report = DitReport::default();
    for step in 1..=cfg.max_steps {
        let lr = lr_at(step, cfg);
        opt.set_learning_rate(lr);
        let items: Vec<&DitSample> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let x0 = stack_latents(&items, dtype)?;
        let ts: Vec<f64> = (0..items.len()).map(|_| rng.random::<f64>()).collect();
        let eps = randn(&mut rng, x0.shape(), dtype, &Device::Cpu)?;
        let (x_t, v) = noise_and_target_batch(&x0, &eps, &ts, &sched)?;
        let conditioned = !rng.random_bool(cfg.cond_dropout);
        let texts = items
            .iter()
            .map(|it| {
                if conditioned {
                    cache.get(&it.prompt)
                } else {
                    Ok(TextTokens::null(embedder.dim()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let cond = cond_input(&items, texts, dtype)?;
        let pred = s.dit.forward(&x_t, &ts, &cond)?;
        let loss = (pred - v)?.sqr()?.mean_all()?;
        let value = scalar(&loss)?;
        finite_or_abort(step, &[("v_mse", value)])?;
        opt.step(&loss.backward()?)?;
        if conditioned {
            report.conditioned_steps += 1;
        } else {
            report.null_steps += 1;
        }
        report.logs.push(DitStepLog {
            step,
            lr,
            loss: value,
            conditioned,
        });
        let due = (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.max_steps;
        if due {
            if let Some(path) = out.checkpoint(step) {
                s.save(&path, &[("step", step.to_string())])?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(path) = out.log_path() {
        write_log(&path, &report.logs)?;
    }
    Ok(report)
}

/// Conditioned v-MSE averaged over every sample and each time in `ts`, with
/// noise drawn from `seed`.
pub fn dit_v_mse(dit: &Dit, data: &[DitSample], embedder: &dyn TextEmbedder, ts: &[f64], seed: u64) -> Result<f64> {
    let dtype = dit_dtype(dit, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = NoiseSchedule::cosine();
    let mut total = 0.0;
    for item in data {
        let items = [item];
        let x0 = stack_latents(&items, dtype)?;
        let cond = cond_input(&items, vec![embedder.embed(&item.prompt)?], dtype)?;
        for &t in ts {
            let eps = randn(&mut rng, x0.shape(), dtype, &Device::Cpu)?;
            let (x_t, v) = noise_and_target_batch(&x0, &eps, &[t], &sched)?;
            let pred = dit.forward(&x_t, &[t], &cond)?;
            total += scalar(&(pred - v)?.sqr()?.mean_all()?)?;
        }
    }
    Ok(total / (data.len() * ts.len()) as f64)
}

fn dit_dtype(_dit: &Dit, data: &[DitSample]) -> Result<DType> {
    data.first()
        .map(|d| d.latents.dtype())
        .ok_or_else(|| Error::invalid("empty latent dataset"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            decay_rate: 1.0,
            ..TrainConfig::ae_full()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(1_000_000, &cfg) - cfg.base_lr).abs() < 1e-15);
        let near = TrainConfig {
            decay_rate: 0.99,
            ..TrainConfig::ae_full()
        };
        let mut last = 0.0;
        for step in 1..1000 {
            let lr = lr_at(step, &near);
            assert!(lr > last && lr > 0.0);
            last = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::ae_full().validate().is_ok());
        assert!(TrainConfig { cond_dropout: 1.0, ..TrainConfig::dit() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::dit() }.validate().is_err());
        assert_eq!(TrainConfig::dit().base_lr, 5e-5);
        assert_eq!(TrainConfig::ae_full().chunk_frames, 65_536);
    }

    #[test]
    fn pure_decay_step_is_decoupled() {
        let w = Var::from_tensor(&Tensor::new(&[1.5f64, -2.0, 0.25], &Device::Cpu).unwrap()).unwrap();
        let cfg = TrainConfig::ae_full();
        let lr = 0.01;
        let mut opt = adamw(vec![w.clone()], &cfg, lr).unwrap();
        let before = w.as_tensor().to_vec1::<f64>().unwrap();
        // a scalar `* 0.0` is pruned from the graph, a zero tensor is not
        let zero_grad_loss = w.as_tensor().mul(&w.as_tensor().zeros_like().unwrap()).unwrap().sum_all().unwrap();
        let g = zero_grad_loss.backward().unwrap();
        assert_eq!(g.get(w.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![0.0; 3]);
        opt.step(&g).unwrap();
        let after = w.as_tensor().to_vec1::<f64>().unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b * (1.0 - lr * cfg.weight_decay)).abs() < 1e-15, "{a} vs {b}");
        }
    }
}
