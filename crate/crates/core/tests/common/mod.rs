#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use audiogen::datapipe::cosine;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Largest per-coordinate relative error between the autograd gradient of a
/// scalar function and central finite differences, probing at most `probes`
/// coordinates (all of them when the input is small).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, probes: usize, seed: u64) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    assert_eq!(x.dtype(), DType::F64);
    let var = Var::from_tensor(x).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .unwrap_or_else(|| vec![0.0; x.elem_count()]);
    let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mut idx: Vec<usize> = (0..base.len()).collect();
    if base.len() > probes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..probes {
            let j = rng.random_range(i..base.len());
            idx.swap(i, j);
        }
        idx.truncate(probes);
    }
    let eval = |v: &[f64]| {
        let t = Tensor::from_slice(v, x.shape(), &Device::Cpu).unwrap();
        f(&t).to_scalar::<f64>().unwrap()
    };
    let mut worst = 0.0f64;
    for &i in &idx {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    audiogen::nn::randn(&mut rng, shape, DType::F64, &Device::Cpu).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

/// Like [`grad_check`] but perturbs a registered parameter in place.
pub fn grad_check_var<F>(f: F, var: &Var, h: f64, probes: usize, seed: u64) -> f64
where
    F: Fn() -> Tensor,
{
    let y = f();
    let grads = y.backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .unwrap_or_else(|| vec![0.0; var.elem_count()]);
    let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let shape = var.shape().clone();
    let mut idx: Vec<usize> = (0..base.len()).collect();
    if base.len() > probes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..probes {
            let j = rng.random_range(i..base.len());
            idx.swap(i, j);
        }
        idx.truncate(probes);
    }
    let eval = |v: &[f64]| {
        var.set(&Tensor::from_slice(v, &shape, &Device::Cpu).unwrap()).unwrap();
        f().to_scalar::<f64>().unwrap()
    };
    let mut worst = 0.0f64;
    for &i in &idx {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    var.set(&Tensor::from_slice(&base, &shape, &Device::Cpu).unwrap()).unwrap();
    worst
}

/// Closed-form v-predictor for data drawn from `N(mu, s^2 I)`, with `mu`
/// broadcast along the last axis of `(N, dim)` latents.
pub struct GaussianOracle {
    pub mu: Vec<f64>,
    pub s: f64,
}

impl GaussianOracle {
    fn v(&self, x_t: &Tensor, t: f64) -> audiogen::Result<Tensor> {
        let sched = audiogen::diffusion::NoiseSchedule::cosine();
        let (a, g) = (sched.alpha(t), sched.sigma(t));
        let d = a * a * self.s * self.s + g * g;
        let mu = Tensor::from_slice(&self.mu, (1, self.mu.len()), x_t.device())?.to_dtype(x_t.dtype())?;
        // E[x0 | x_t] and E[eps | x_t] combine to sigma ((a - a s^2) / D (x_t - a mu) - mu)
        let centered = x_t.broadcast_sub(&(&mu * a)?)?;
        let v = ((centered * ((a - a * self.s * self.s) / d))?.broadcast_sub(&mu)? * g)?;
        Ok(v)
    }

    /// Endpoint of the exact probability-flow ODE from `x_t` at `t_from` to `t_to`.
    pub fn exact_flow(&self, x: &Tensor, t_from: f64, t_to: f64) -> Tensor {
        let sched = audiogen::diffusion::NoiseSchedule::cosine();
        let scale = |t: f64| (sched.alpha(t).powi(2) * self.s * self.s + sched.sigma(t).powi(2)).sqrt();
        let mu = Tensor::from_slice(&self.mu, (1, self.mu.len()), x.device()).unwrap();
        let z = (x.broadcast_sub(&(&mu * sched.alpha(t_from)).unwrap()).unwrap() / scale(t_from)).unwrap();
        ((z * scale(t_to)).unwrap().broadcast_add(&(&mu * sched.alpha(t_to)).unwrap())).unwrap()
    }
}

impl audiogen::diffusion::VPredictor for GaussianOracle {
    fn v_cond(&self, x_t: &Tensor, t: f64) -> audiogen::Result<Tensor> {
        self.v(x_t, t)
    }

    fn v_uncond(&self, x_t: &Tensor, t: f64) -> audiogen::Result<Tensor> {
        self.v(x_t, t)
    }
}

/// Per-column mean and (population) variance of an `(N, dim)` tensor.
pub fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let rows = x.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mean: Vec<f64> = (0..dim).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let var = (0..dim)
        .map(|c| rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

/// Synthetic stereo clips: sines, linear chirps and gated noise bursts,
/// each with a templated prompt.
pub fn toy_corpus(n: usize, frames: usize, seed: u64) -> Vec<(audiogen::Waveform, String)> {
    use std::f64::consts::PI;
    let sr = 44_100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let amp = rng.random_range(0.2..0.6);
            let pan = rng.random_range(0.6..1.0);
            let (mono, prompt): (Vec<f64>, String) = match i % 3 {
                0 => {
                    let f = rng.random_range(110.0..1760.0);
                    let x = (0..frames).map(|k| amp * (2.0 * PI * f * k as f64 / sr).sin()).collect();
                    (x, format!("a steady tone at {} hertz", f.round()))
                }
                1 => {
                    let (f0, f1) = (rng.random_range(100.0..500.0), rng.random_range(1000.0..4000.0));
                    let dur = frames as f64 / sr;
                    let x = (0..frames)
                        .map(|k| {
                            let t = k as f64 / sr;
                            amp * (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin()
                        })
                        .collect();
                    (x, "a rising chirp".to_string())
                }
                _ => {
                    let burst = frames / 4;
                    let x = (0..frames)
                        .map(|k| {
                            let on = (k / burst) % 2 == 0;
                            if on { amp * rng.random_range(-1.0..1.0) } else { 0.0 }
                        })
                        .collect();
                    (x, "bursts of white noise".to_string())
                }
            };
            let l = mono.iter().map(|v| (v * pan) as f32).collect();
            let r = mono.iter().map(|v| (v * (1.6 - pan)) as f32).collect();
            (audiogen::Waveform::stereo(l, r, 44_100).unwrap(), prompt)
        })
        .collect()
}

pub fn random_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

pub fn index(prefix: &str, rows: Vec<Vec<f64>>) -> audiogen::datapipe::EmbeddingIndex {
    let ids = (0..rows.len()).map(|i| format!("{prefix}{i:04}")).collect();
    audiogen::datapipe::EmbeddingIndex::normalized(ids, rows).unwrap()
}

/// 200 vectors where rows `2k` and `2k + 1` (k < 5) are near copies.
pub fn planted(seed: u64) -> audiogen::datapipe::EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = random_rows(200, 32, &mut rng);
    for k in 0..5 {
        let jitter: Vec<f64> = (0..32).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        rows[2 * k + 1] = rows[2 * k].iter().zip(&jitter).map(|(a, b)| a + b).collect();
    }
    // shuffle so planted pairs are not adjacent
    let mut order: Vec<usize> = (0..200).collect();
    for i in (1..200).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    index("v", order.iter().map(|&i| rows[i].clone()).collect())
}

/// Components by breadth-first search over the full similarity matrix.
pub fn brute_groups(idx: &audiogen::datapipe::EmbeddingIndex, threshold: f64) -> Vec<Vec<String>> {
    let n = idx.len();
    let v = idx.vectors();
    let adj: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| i != j && cosine(&v[i], &v[j]) >= threshold).collect())
        .collect();
    let mut seen = vec![false; n];
    let mut groups = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for w in 0..n {
                if adj[u][w] && !seen[w] {
                    seen[w] = true;
                    comp.push(w);
                    queue.push_back(w);
                }
            }
        }
        if comp.len() > 1 {
            comp.sort();
            groups.push(comp.into_iter().map(|i| idx.ids()[i].clone()).collect());
        }
    }
    groups
}

/// Every pair ranked globally, then the first hit per generation kept.
pub fn brute_candidates(gen: &audiogen::datapipe::EmbeddingIndex, train: &audiogen::datapipe::EmbeddingIndex, k: usize) -> Vec<audiogen::datapipe::Candidate> {
    let mut pairs = Vec::new();
    for (gi, g) in gen.vectors().iter().enumerate() {
        for (ti, t) in train.vectors().iter().enumerate() {
            pairs.push((cosine(g, t), gen.ids()[gi].clone(), train.ids()[ti].clone()));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = HashSet::new();
    let mut out = Vec::new();
    for (c, g, t) in pairs {
        if used.insert(g.clone()) {
            out.push(audiogen::datapipe::Candidate {
                gen_id: g,
                train_id: t,
                cosine: c,
            });
        }
    }
    out.truncate(k);
    out
}
