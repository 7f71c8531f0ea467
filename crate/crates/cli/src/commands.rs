use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use audiogen::audio::{load_wav, save_wav};
use audiogen::autoencoder::{reparameterize, Autoencoder};
use audiogen::nn::Params;
use audiogen::conditioning::{ImportedEmbeddings, TextEmbedder, TimingCondition, ToyTextEmbedder, MAX_SECONDS_TOTAL};
use audiogen::config::RunConfig;
use audiogen::container::{Container, EmbeddingSet};
use audiogen::datapipe::{build_prompt, dedup_scan, detect_music, memorization_candidates, read_metadata_jsonl, EmbeddingIndex, TagTimeline};
use audiogen::diffusion::{generate_frames, Models};
use audiogen::evalkit::{self, EmbeddingStats, FilterMode, PromptFilterList};
use audiogen::trainer::{self, AeLossConfig, AeSession, DitSample, DitSession, Phase, RunOutput};
use audiogen::Waveform;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] audiogen::Error),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn data(msg: impl Into<String>) -> CliError {
    CliError::Core(audiogen::Error::InvalidInput(msg.into()))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::TrainAe(a) => train_ae(cli, cfg, a),
        Command::TrainDit(a) => train_dit(cli, cfg, a),
        Command::Generate(a) => generate(cli, cfg, a),
        Command::Encode(a) => encode(cli, &cfg, a),
        Command::Decode(a) => decode(&autoencoder(a.autoencoder.as_ref(), &cfg, cli.seed)?, &a.latents, &a.out, None),
        Command::ChunkDecode(a) => {
            let ae = autoencoder(a.autoencoder.as_ref(), &cfg, cli.seed)?;
            decode(&ae, &a.latents, &a.out, Some((a.chunk, a.overlap)))
        }
        Command::EvalRecon(a) => eval_recon(a),
        Command::EvalGen(a) => eval_gen(a),
        Command::Dedup(a) => dedup(a),
        Command::MemScan(a) => mem_scan(a),
        Command::BuildPrompts(a) => build_prompts(cli, a),
        Command::DetectMusic(a) => music(a),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

/// WAV files directly inside `dir`, sorted by name.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| audiogen::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(data(format!("no .wav files in {}", dir.display())));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        audiogen::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "ae_full" => Ok(Phase::AeFull),
        "ae_decoder_only" => Ok(Phase::AeDecoderOnly),
        other => Err(usage(format!("--phase must be ae_full or ae_decoder_only, got '{other}'"))),
    }
}

fn train_ae(cli: &Cli, cfg: RunConfig, a: &crate::TrainAeArgs) -> Result<()> {
    let phase = parse_phase(&a.phase)?;
    if phase == Phase::AeDecoderOnly && a.init.is_none() {
        return Err(usage("ae_decoder_only needs --init with a phase-one checkpoint"));
    }
    let mut tc = cfg.train.clone();
    tc.phase = phase;
    tc.seed = cli.seed;
    if let Some(s) = a.steps {
        tc.max_steps = s;
    }
    let clips = wav_files(&a.data)?
        .iter()
        .map(load_wav)
        .collect::<audiogen::Result<Vec<_>>>()?;
    log::info!("loaded {} clips from {}", clips.len(), a.data.display());
    let mut session = match &a.init {
        Some(p) => AeSession::load(p, DType::F32)?,
        None => AeSession::new(cfg.autoencoder.clone(), cfg.discriminator.clone(), cli.seed, DType::F32)?,
    };
    create_dir(&a.out)?;
    let losses = AeLossConfig {
        mrstft: cfg.mrstft.clone(),
        weights: cfg.loss_weights.clone(),
    };
    let name = match phase {
        Phase::AeFull => "ae_full",
        _ => "ae_decoder_only",
    };
    let report = trainer::train_autoencoder(&mut session, &clips, &tc, &losses, &RunOutput::to_dir(&a.out, name))?;
    if let Some(last) = report.logs.last() {
        log::info!("step {}: reconstruction {:.5}, total {:.5}", last.step, last.reconstruction, last.total);
    }
    Ok(())
}

/// Crop or zero-pad `(C, T)` latents to `frames`.
fn fit_frames(z: &Tensor, frames: usize) -> Result<Tensor> {
    let t = z.dim(1)?;
    Ok(if t >= frames {
        z.narrow(1, 0, frames)?
    } else {
        z.pad_with_zeros(1, 0, frames - t)?
    })
}

fn embedder(path: Option<&PathBuf>, dim: usize) -> Result<Box<dyn TextEmbedder>> {
    Ok(match path {
        Some(p) => Box::new(ImportedEmbeddings::load(p, dim, false)?),
        None => Box::new(ToyTextEmbedder::new(dim)),
    })
}

fn train_dit(cli: &Cli, cfg: RunConfig, a: &crate::TrainDitArgs) -> Result<()> {
    if a.variants == 0 || a.frames == 0 {
        return Err(usage("--variants and --frames must be at least 1"));
    }
    let mut tc = cfg.train.clone();
    tc.phase = Phase::Dit;
    tc.seed = cli.seed;
    if let Some(s) = a.steps {
        tc.max_steps = s;
    }
    let latents = Container::load(&a.latents, &Device::Cpu)?;
    let metadata: HashMap<String, _> = read_metadata_jsonl(&a.metadata)?
        .into_iter()
        .map(|m| (m.id.clone(), m))
        .collect();
    let hop_seconds = cfg.autoencoder.hop() as f64 / cfg.autoencoder.sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut samples = Vec::new();
    for (id, z) in &latents.tensors {
        let Some(md) = metadata.get(id) else {
            log::warn!("no metadata for latent '{id}', skipped");
            continue;
        };
        let seconds = latents
            .metadata
            .get(&format!("seconds.{id}"))
            .and_then(|s| s.parse::<f64>().ok())
            .unwrap_or(z.dim(1)? as f64 * hop_seconds);
        let timing = TimingCondition::new(0.0, seconds.min(MAX_SECONDS_TOTAL))?;
        let z = fit_frames(&z.to_dtype(DType::F32)?, a.frames)?;
        for _ in 0..a.variants {
            samples.push(DitSample {
                latents: z.clone(),
                prompt: build_prompt(md, rng.random())?,
                timing,
            });
        }
    }
    if samples.is_empty() {
        return Err(data("no latent sequence has matching metadata"));
    }
    log::info!("{} training pairs", samples.len());
    let mut session = match &a.init {
        Some(p) => DitSession::load(p, DType::F32)?.0,
        None => DitSession::new(cfg.dit.clone(), cli.seed, DType::F32)?,
    };
    let emb = embedder(a.embeddings.as_ref(), session.dit.config().text_dim)?;
    create_dir(&a.out)?;
    let report = trainer::train_dit(&mut session, &samples, emb.as_ref(), &tc, &RunOutput::to_dir(&a.out, "dit"))?;
    log::info!(
        "{} conditioned and {} null-conditioned steps, final loss {:.5}",
        report.conditioned_steps,
        report.null_steps,
        report.logs.last().map_or(f64::NAN, |l| l.loss)
    );
    Ok(())
}

fn autoencoder(path: Option<&PathBuf>, cfg: &RunConfig, seed: u64) -> Result<Autoencoder> {
    Ok(match path {
        Some(p) => trainer::load_autoencoder(p, DType::F32)?,
        None => {
            log::warn!("no --autoencoder checkpoint; using untrained weights from the configuration");
            Autoencoder::new(cfg.autoencoder.clone(), &Params::new(seed, DType::F32, &Device::Cpu))?
        }
    })
}

fn generate(cli: &Cli, cfg: RunConfig, a: &crate::GenerateArgs) -> Result<()> {
    let ae = autoencoder(a.autoencoder.as_ref(), &cfg, cli.seed)?;
    let dit = match &a.dit {
        Some(p) => DitSession::load(p, DType::F32)?.0,
        None => {
            log::warn!("no --dit checkpoint; using untrained weights from the configuration");
            DitSession::new(cfg.dit.clone(), cli.seed, DType::F32)?
        }
    };
    let emb = embedder(a.embeddings.as_ref(), dit.dit.config().text_dim)?;
    let mut sampler = cfg.sampler;
    sampler.rng_seed = cli.seed;
    if let Some(s) = a.steps {
        sampler.steps = s;
    }
    if let Some(c) = a.cfg_scale {
        sampler.cfg_scale = c;
    }
    let models = Models {
        autoencoder: &ae,
        dit: &dit.dit,
        embedder: emb.as_ref(),
    };
    let w = generate_frames(&a.prompt, a.seconds, &sampler, &models, a.frames)?;
    save_wav(&w, &a.out)?;
    log::info!("wrote {:.2} s to {}", w.seconds(), a.out.display());
    Ok(())
}

fn encode(cli: &Cli, cfg: &RunConfig, a: &crate::EncodeArgs) -> Result<()> {
    let ae = autoencoder(a.autoencoder.as_ref(), cfg, cli.seed)?;
    let files = if a.input.is_dir() { wav_files(&a.input)? } else { vec![a.input.clone()] };
    let mut out = Container::new();
    for (i, f) in files.iter().enumerate() {
        let w = load_wav(f)?;
        let seconds = w.seconds();
        let post = ae.encode_waveform(&w.pad_to_multiple(ae.config().hop())?, DType::F32)?;
        let z = if a.sample {
            reparameterize(&post, cli.seed.wrapping_add(i as u64))?
        } else {
            post.mean
        };
        let id = stem(f);
        out.metadata.insert(format!("seconds.{id}"), seconds.to_string());
        out.insert(id, z.squeeze(0)?);
    }
    out.metadata.insert("sample_rate".into(), ae.config().sample_rate.to_string());
    out.save(&a.out)?;
    log::info!("encoded {} file(s) to {}", files.len(), a.out.display());
    Ok(())
}

fn decode(ae: &Autoencoder, latents: &Path, out: &Path, chunking: Option<(usize, Option<usize>)>) -> Result<()> {
    let c = Container::load(latents, &Device::Cpu)?;
    if c.tensors.is_empty() {
        return Err(data(format!("{} holds no latents", latents.display())));
    }
    let rf = ae.receptive_field_latents();
    let single = c.tensors.len() == 1 && out.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
    if !single {
        create_dir(out)?;
    }
    for (id, z) in &c.tensors {
        let z = z.to_dtype(DType::F32)?.unsqueeze(0)?;
        let audio = match chunking {
            None => ae.decode(&z)?,
            Some((chunk, overlap)) => {
                let overlap = overlap.unwrap_or(rf);
                if overlap < rf {
                    log::warn!("overlap {overlap} is below the receptive field {rf}; chunk seams will differ from a full decode");
                }
                ae.chunked_decode(&z, chunk, overlap)?
            }
        };
        let mut w = Waveform::from_tensor(&audio, ae.config().sample_rate)?;
        if let Some(s) = c.metadata.get(&format!("seconds.{id}")).and_then(|s| s.parse::<f64>().ok()) {
            let frames = ((s * ae.config().sample_rate as f64).round() as usize).min(w.frames());
            w = w.segment(0, frames)?;
        }
        let path = if single { out.to_path_buf() } else { out.join(format!("{id}.wav")) };
        save_wav(&w, &path)?;
    }
    Ok(())
}

fn eval_recon(a: &crate::EvalReconArgs) -> Result<()> {
    let refs = wav_files(&a.reference)?;
    let mut rows = Vec::new();
    let mut sums = [0.0; 3];
    for r in &refs {
        let name = r.file_name().expect("listed file has a name");
        let e = a.est.join(name);
        if !e.exists() {
            return Err(data(format!("no estimate for {}", e.display())));
        }
        let (rw, ew) = (load_wav(r)?, load_wav(&e)?);
        let m = [evalkit::stft_distance(&rw, &ew)?, evalkit::mel_distance(&rw, &ew)?, evalkit::si_sdr(&rw, &ew)?];
        sums.iter_mut().zip(&m).for_each(|(s, v)| *s += v);
        rows.push(vec![stem(r), m[0].to_string(), m[1].to_string(), m[2].to_string()]);
    }
    let n = refs.len() as f64;
    rows.push(vec!["mean".into(), (sums[0] / n).to_string(), (sums[1] / n).to_string(), (sums[2] / n).to_string()]);
    write_rows(&a.out, &["item", "stft", "mel", "sisdr"], rows)
}

fn load_set(path: &Path, tensor: &str) -> Result<EmbeddingSet> {
    Ok(EmbeddingSet::load(path, tensor)?)
}

/// Rows of two sets paired by id, in the first set's order.
fn paired(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Vec<(String, Vec<f64>, Vec<f64>)>> {
    let by_id: HashMap<&str, &Vec<f64>> = b.ids.iter().map(String::as_str).zip(&b.rows).collect();
    a.ids
        .iter()
        .zip(&a.rows)
        .map(|(id, row)| match by_id.get(id.as_str()) {
            Some(other) => Ok((id.clone(), row.clone(), (*other).clone())),
            None => Err(data(format!("id '{id}' missing from the paired file"))),
        })
        .collect()
}

/// `id,prompt` CSV.
fn read_prompts(path: &Path) -> Result<HashMap<String, String>> {
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = HashMap::new();
    for rec in r.deserialize::<(String, String)>() {
        let (id, prompt) = rec.map_err(err)?;
        out.insert(id, prompt);
    }
    Ok(out)
}

fn eval_gen(a: &crate::EvalGenArgs) -> Result<()> {
    let mode: FilterMode = a.filter.parse().map_err(|e: audiogen::Error| usage(e.to_string()))?;
    let keep: Option<HashSet<String>> = match &a.prompts {
        Some(p) => {
            let lists = PromptFilterList::default();
            Some(
                read_prompts(p)?
                    .into_iter()
                    .filter(|(_, prompt)| evalkit::prompt_is_kept(prompt, &lists, mode))
                    .map(|(id, _)| id)
                    .collect(),
            )
        }
        None if mode != FilterMode::All => return Err(usage("--filter needs --prompts")),
        None => None,
    };
    let kept = |id: &str| keep.as_ref().is_none_or(|k| k.contains(id));

    let mut items: BTreeMap<String, [Option<f64>; 2]> = BTreeMap::new();
    let mut summary: [Option<f64>; 3] = [None; 3];
    if let (Some(r), Some(g)) = (&a.ref_probs, &a.gen_probs) {
        let pairs: Vec<_> = paired(&load_set(r, &a.tensor)?, &load_set(g, &a.tensor)?)?
            .into_iter()
            .filter(|(id, _, _)| kept(id))
            .collect();
        for (id, p, q) in &pairs {
            items.entry(id.clone()).or_default()[0] = Some(evalkit::mean_kl(&[(p.clone(), q.clone())])?);
        }
        let all: Vec<_> = pairs.into_iter().map(|(_, p, q)| (p, q)).collect();
        summary[0] = Some(evalkit::mean_kl(&all)?);
    }
    if let (Some(t), Some(au)) = (&a.text_emb, &a.audio_emb) {
        let pairs: Vec<_> = paired(&load_set(t, &a.tensor)?, &load_set(au, &a.tensor)?)?
            .into_iter()
            .filter(|(id, _, _)| kept(id))
            .collect();
        for (id, t, v) in &pairs {
            items.entry(id.clone()).or_default()[1] = Some(evalkit::clap_score(&[(t.clone(), v.clone())])?);
        }
        let all: Vec<_> = pairs.into_iter().map(|(_, t, v)| (t, v)).collect();
        summary[1] = Some(evalkit::clap_score(&all)?);
    }
    if let (Some(r), Some(g)) = (&a.ref_emb, &a.gen_emb) {
        let rs = EmbeddingStats::from_rows(&load_set(r, &a.tensor)?.rows)?;
        let gs = EmbeddingStats::from_rows(&load_set(g, &a.tensor)?.rows)?;
        summary[2] = Some(evalkit::frechet_distance(&rs, &gs)?);
    }
    if summary.iter().all(Option::is_none) {
        return Err(usage("give at least one of the --ref-emb/--gen-emb, --ref-probs/--gen-probs or --text-emb/--audio-emb pairs"));
    }
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rows: Vec<Vec<String>> = items
        .into_iter()
        .map(|(id, [kl, clap])| vec![id, cell(kl), cell(clap), String::new()])
        .collect();
    rows.push(vec!["summary".into(), cell(summary[0]), cell(summary[1]), cell(summary[2])]);
    write_rows(&a.out, &["item", "kl", "clap", "fd"], rows)
}

fn index(path: &Path, tensor: &str) -> Result<EmbeddingIndex> {
    Ok(EmbeddingIndex::from_set(load_set(path, tensor)?)?)
}

fn dedup(a: &crate::DedupArgs) -> Result<()> {
    let idx = index(&a.embeddings, &a.tensor)?;
    let groups = dedup_scan(&idx, a.threshold);
    log::info!("{} duplicate groups among {} items", groups.len(), idx.len());
    let rows = groups
        .iter()
        .enumerate()
        .flat_map(|(g, ids)| ids.iter().map(move |id| vec![g.to_string(), id.clone()]));
    write_rows(&a.out, &["group", "id"], rows)
}

fn mem_scan(a: &crate::MemScanArgs) -> Result<()> {
    let gen = index(&a.gen, &a.tensor)?;
    let train = index(&a.train, &a.tensor)?;
    let cands = memorization_candidates(&gen, &train, a.k)?;
    let rows = cands
        .iter()
        .enumerate()
        .map(|(r, c)| vec![(r + 1).to_string(), c.gen_id.clone(), c.train_id.clone(), c.cosine.to_string()]);
    write_rows(&a.out, &["rank", "gen_id", "train_id", "cosine"], rows)
}

fn build_prompts(cli: &Cli, a: &crate::BuildPromptsArgs) -> Result<()> {
    let records = read_metadata_jsonl(&a.metadata)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut rows = Vec::new();
    for md in &records {
        for v in 0..a.variants {
            rows.push(vec![md.id.clone(), v.to_string(), build_prompt(md, rng.random())?]);
        }
    }
    write_rows(&a.out, &["id", "variant", "prompt"], rows)
}

fn music(a: &crate::DetectMusicArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.music_tags).map_err(|e| audiogen::Error::Io {
        path: a.music_tags.clone(),
        source: e,
    })?;
    let tags: HashSet<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if tags.is_empty() {
        return Err(data(format!("{} lists no tags", a.music_tags.display())));
    }
    let files = if a.timelines.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.timelines)
            .map_err(|e| audiogen::Error::Io {
                path: a.timelines.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![a.timelines.clone()]
    };
    let mut rows = Vec::new();
    for f in &files {
        let tl = TagTimeline::load(f)?;
        let is_music = detect_music(&tl, &tags, a.threshold, a.min_seconds)?;
        rows.push(vec![stem(f), is_music.to_string()]);
    }
    write_rows(&a.out, &["id", "is_music"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_classes() {
        assert_eq!(usage("x").exit_code(), 1);
        assert_eq!(data("x").exit_code(), 2);
        let nan = CliError::from(audiogen::Error::NonFinite {
            step: 4,
            context: "loss".into(),
        });
        assert_eq!(nan.exit_code(), 3);
    }
}
