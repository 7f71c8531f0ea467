//! Waveforms, WAV I/O, training-chunk sampling, silence trimming and the
//! mid/side stereo transform.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Channel-major float audio. Pipeline code expects two channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::invalid("waveform needs at least one channel"));
        };
        let frames = first.len();
        if frames == 0 {
            return Err(Error::invalid("waveform has zero frames"));
        }
        if channels.iter().any(|c| c.len() != frames) {
            return Err(Error::shape("channels differ in length"));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn stereo(left: Vec<f32>, right: Vec<f32>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![left, right], sample_rate)
    }

    pub fn silence(frames: usize, sample_rate: u32) -> Result<Self> {
        Self::stereo(vec![0.0; frames], vec![0.0; frames], sample_rate)
    }

    pub fn frames(&self) -> usize {
        self.channels[0].len()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn seconds(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    /// Duplicate a mono signal into two channels; stereo passes through.
    pub fn into_stereo(self) -> Result<Self> {
        match self.channels.len() {
            2 => Ok(self),
            1 => {
                let c = self.channels.into_iter().next().unwrap();
                Self::stereo(c.clone(), c, self.sample_rate)
            }
            n => Err(Error::UnsupportedEncoding(format!("{n}-channel audio"))),
        }
    }

    fn require_stereo(&self) -> Result<()> {
        if self.channels.len() != 2 {
            return Err(Error::shape(format!(
                "expected stereo audio, got {} channels",
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Copy of frames `[start, start + len)`, zero-filled past the end.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                (start..start + len)
                    .map(|i| c.get(i).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        Self::new(channels, self.sample_rate)
    }

    /// Zero-pad at the end up to the next multiple of `multiple` frames.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<Self> {
        let len = self.frames().div_ceil(multiple) * multiple;
        self.segment(0, len)
    }

    /// `(1, channels, frames)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = self.channels.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (1, self.channels.len(), self.frames()), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Waveform::to_tensor`]; accepts `(C, N)` or `(1, C, N)`.
    pub fn from_tensor(t: &Tensor, sample_rate: u32) -> Result<Self> {
        let t = match t.rank() {
            3 => t.squeeze(0)?,
            2 => t.clone(),
            r => return Err(Error::shape(format!("waveform tensor of rank {r}"))),
        };
        let channels = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        Self::new(channels, sample_rate)
    }
}

/// Load a PCM16 or float32 WAV file as a stereo waveform.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{bits}-bit {fmt:?} in {}",
                path.display()
            )))
        }
    };
    if n_ch == 0 || interleaved.len() < n_ch {
        return Err(Error::invalid(format!("{} contains no audio", path.display())));
    }
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, v) in channels.iter_mut().zip(frame) {
            c.push(*v);
        }
    }
    Waveform::new(channels, spec.sample_rate)?.into_stereo()
}

/// Write a 32-bit float WAV. Nothing is written if the waveform is invalid.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // re-validate: the fields are private but a caller may hold a stale clone
    Waveform::new(w.channels.clone(), w.sample_rate)?;
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..w.frames() {
        for c in &w.channels {
            writer.write_sample(c[i]).map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}

/// How training chunks are cut from recordings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ChunkPolicy {
    pub chunk_seconds: f64,
    pub max_chunks_per_recording: usize,
    /// High-fidelity recordings contribute twice as many chunks.
    pub hifi_double_sample: bool,
    pub sample_rate: u32,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            chunk_seconds: 5.0,
            max_chunks_per_recording: 3,
            hifi_double_sample: false,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl ChunkPolicy {
    pub fn chunk_frames(&self) -> usize {
        (self.chunk_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_seconds > 0.0) || self.chunk_frames() == 0 {
            return Err(Error::Config("chunk_seconds must be positive".into()));
        }
        if self.max_chunks_per_recording == 0 {
            return Err(Error::Config("max_chunks_per_recording must be >= 1".into()));
        }
        Ok(())
    }
}

/// Random chunk boundaries `(start, end)` for one recording. Every chunk spans
/// exactly `chunk_frames`; a recording shorter than that yields a single chunk
/// starting at 0 that the caller zero-pads.
pub fn sample_chunks(
    recording_length_frames: usize,
    policy: &ChunkPolicy,
    rng_seed: u64,
) -> Vec<(usize, usize)> {
    let len = policy.chunk_frames().max(1);
    let per_pass = if recording_length_frames <= len {
        1
    } else {
        (recording_length_frames / len).clamp(1, policy.max_chunks_per_recording.max(1))
    };
    let count = if policy.hifi_double_sample {
        2 * per_pass
    } else {
        per_pass
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..count)
        .map(|_| {
            let start = if recording_length_frames <= len {
                0
            } else {
                rng.random_range(0..=recording_length_frames - len)
            };
            (start, start + len)
        })
        .collect()
}

fn rms_db(chunk_channels: &[&[f32]]) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for c in chunk_channels {
        sum += c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        n += c.len();
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        20.0 * rms.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Remove the longest run of trailing windows whose RMS (over all channels)
/// sits below `threshold_db` dBFS. At least one window is always kept.
pub fn trim_trailing_silence(w: &Waveform, threshold_db: f64, window_ms: f64) -> Result<Waveform> {
    let window = ((window_ms / 1000.0) * w.sample_rate as f64).round().max(1.0) as usize;
    let frames = w.frames();
    let n_windows = frames.div_ceil(window);
    let mut keep = None;
    for i in (0..n_windows).rev() {
        let start = i * window;
        let end = (start + window).min(frames);
        let slices: Vec<&[f32]> = w.channels.iter().map(|c| &c[start..end]).collect();
        if rms_db(&slices) >= threshold_db {
            keep = Some(end);
            break;
        }
    }
    let keep = keep.unwrap_or(window.min(frames));
    let channels = w.channels.iter().map(|c| c[..keep].to_vec()).collect();
    Waveform::new(channels, w.sample_rate)
}

/// Mid/side and left/right views of a stereo signal.
#[derive(Debug, Clone)]
pub struct StereoViews {
    pub mid: Vec<f32>,
    pub side: Vec<f32>,
    pub left: Vec<f32>,
    pub right: Vec<f32>,
}

impl StereoViews {
    /// `(L, R)` recovered from mid/side.
    pub fn reconstruct_lr(&self) -> (Vec<f32>, Vec<f32>) {
        let l = self.mid.iter().zip(&self.side).map(|(m, s)| m + s).collect();
        let r = self.mid.iter().zip(&self.side).map(|(m, s)| m - s).collect();
        (l, r)
    }
}

/// `mid = (L + R) / 2`, `side = (L - R) / 2`.
pub fn ms_lr_split(w: &Waveform) -> Result<StereoViews> {
    w.require_stereo()?;
    let (l, r) = (&w.channels[0], &w.channels[1]);
    Ok(StereoViews {
        mid: l.iter().zip(r).map(|(a, b)| 0.5 * (a + b)).collect(),
        side: l.iter().zip(r).map(|(a, b)| 0.5 * (a - b)).collect(),
        left: l.clone(),
        right: r.clone(),
    })
}
