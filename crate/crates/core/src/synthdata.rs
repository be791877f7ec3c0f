//! Synthetic two-modality transcription task.
//!
//! Every frame carries one target token. The audio channel shows a fixed
//! per-token code, the video channel a fixed per-cluster code (cluster =
//! token mod `n_clusters`), each with isotropic Gaussian noise. Clean audio
//! identifies the token; video alone never identifies more than its cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{join_key, parse_opt, parse_value, render_opt, KvConfig};
use crate::error::{cfg_err, Result};
use crate::numkernel::Tensor;
use crate::scalar::Scalar;

/// Evaluation SNR grid in dB.
pub const SNR_GRID_DB: [f64; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub n_clusters: usize,
    pub seq_len: usize,
    pub d_audio: usize,
    pub d_video: usize,
    /// Per-element audio noise std when no SNR is given.
    pub sigma_audio: f64,
    pub sigma_video: f64,
    /// When set, overrides `sigma_audio` through [`snr_to_sigma`].
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            n_clusters: 8,
            seq_len: 24,
            d_audio: 16,
            d_video: 16,
            sigma_audio: 0.0,
            sigma_video: 0.1,
            snr_db: None,
            seed: 7,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(cfg_err!("vocab_size must be at least 2"));
        }
        if self.n_clusters == 0 || self.n_clusters >= self.vocab_size {
            return Err(cfg_err!(
                "n_clusters = {} outside [1, {})",
                self.n_clusters,
                self.vocab_size
            ));
        }
        if self.vocab_size % self.n_clusters != 0 {
            return Err(cfg_err!(
                "vocab_size {} not divisible by n_clusters {}",
                self.vocab_size,
                self.n_clusters
            ));
        }
        if self.seq_len == 0 || self.d_audio == 0 || self.d_video == 0 {
            return Err(cfg_err!("seq_len, d_audio and d_video must be positive"));
        }
        if !(self.sigma_audio >= 0.0 && self.sigma_video >= 0.0) {
            return Err(cfg_err!("noise levels must be non-negative"));
        }
        Ok(())
    }

    pub fn tokens_per_cluster(&self) -> usize {
        self.vocab_size / self.n_clusters
    }

    pub fn cluster_of(&self, token: usize) -> usize {
        token % self.n_clusters
    }

    /// Per-element RMS of a unit-norm audio code.
    pub fn audio_rms(&self) -> f64 {
        1.0 / (self.d_audio as f64).sqrt()
    }

    /// Audio noise std implied by the configuration.
    pub fn effective_sigma_audio(&self) -> f64 {
        match self.snr_db {
            Some(db) => snr_to_sigma(db, self.audio_rms()),
            None => self.sigma_audio,
        }
    }
}

impl KvConfig for TaskConfig {
    fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (join_key(prefix, "vocab_size"), self.vocab_size.to_string()),
            (join_key(prefix, "n_clusters"), self.n_clusters.to_string()),
            (join_key(prefix, "seq_len"), self.seq_len.to_string()),
            (join_key(prefix, "d_audio"), self.d_audio.to_string()),
            (join_key(prefix, "d_video"), self.d_video.to_string()),
            (join_key(prefix, "sigma_audio"), self.sigma_audio.to_string()),
            (join_key(prefix, "sigma_video"), self.sigma_video.to_string()),
            (join_key(prefix, "snr_db"), render_opt(&self.snr_db)),
            (join_key(prefix, "seed"), self.seed.to_string()),
        ]
    }

    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "n_clusters" => self.n_clusters = parse_value(key, value)?,
            "seq_len" => self.seq_len = parse_value(key, value)?,
            "d_audio" => self.d_audio = parse_value(key, value)?,
            "d_video" => self.d_video = parse_value(key, value)?,
            "sigma_audio" => self.sigma_audio = parse_value(key, value)?,
            "sigma_video" => self.sigma_video = parse_value(key, value)?,
            "snr_db" => self.snr_db = parse_opt(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(cfg_err!("unknown task key `{key}`")),
        }
        Ok(())
    }
}

/// `sigma = rms * 10^(-snr_db / 20)`.
pub fn snr_to_sigma(snr_db: f64, signal_rms: f64) -> f64 {
    signal_rms * 10f64.powf(-snr_db / 20.0)
}

/// How audio noise is assigned to the sequences of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoisePlan {
    /// Use the task configuration for every sequence.
    Config,
    /// Every sequence at the given SNR.
    Snr(f64),
    /// Every sequence with the given per-element std.
    Sigma(f64),
    /// A fraction of sequences get SNR ~ Normal(mean, std) dB; the rest use
    /// the task configuration.
    Mixed {
        fraction: f64,
        mean_db: f64,
        std_db: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRecord {
    pub sigma_audio: f64,
    pub sigma_video: f64,
    pub snr_db: Option<f64>,
}

/// Sequences of the synthetic task; feature rows are sequence-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    pub targets: Vec<Vec<usize>>,
    /// `[n * seq_len x d_audio]`
    pub audio: Tensor<T>,
    /// `[n * seq_len x d_video]`
    pub video: Tensor<T>,
    pub noise: Vec<NoiseRecord>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

/// Task definition with its frozen codebooks.
#[derive(Clone, Debug)]
pub struct Task {
    cfg: TaskConfig,
    audio_codes: Vec<Vec<f64>>,
    video_codes: Vec<Vec<f64>>,
}

fn unit_codes(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

impl Task {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let audio_codes = unit_codes(cfg.vocab_size, cfg.d_audio, &mut rng);
        let video_codes = unit_codes(cfg.n_clusters, cfg.d_video, &mut rng);
        Ok(Self {
            cfg,
            audio_codes,
            video_codes,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn audio_code(&self, token: usize) -> &[f64] {
        &self.audio_codes[token]
    }

    pub fn video_code(&self, cluster: usize) -> &[f64] {
        &self.video_codes[cluster]
    }

    /// Generator for batch `index` of a stream; the same `(seed, index)`
    /// always yields the same batch.
    pub fn batch_rng(seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        rng
    }

    /// `n_sequences` sequences with noise from the task configuration.
    pub fn generate_batch<T: Scalar, R: Rng>(&self, n_sequences: usize, rng: &mut R) -> SampleBatch<T> {
        self.generate_batch_with(n_sequences, NoisePlan::Config, rng)
    }

    pub fn generate_batch_with<T: Scalar, R: Rng>(
        &self,
        n_sequences: usize,
        plan: NoisePlan,
        rng: &mut R,
    ) -> SampleBatch<T> {
        let cfg = &self.cfg;
        let f = cfg.seq_len;
        let mut targets = Vec::with_capacity(n_sequences);
        let mut audio = Vec::with_capacity(n_sequences * f * cfg.d_audio);
        let mut video = Vec::with_capacity(n_sequences * f * cfg.d_video);
        let mut noise = Vec::with_capacity(n_sequences);
        for _ in 0..n_sequences {
            let (sigma_a, snr) = match plan {
                NoisePlan::Config => (cfg.effective_sigma_audio(), cfg.snr_db),
                NoisePlan::Snr(db) => (snr_to_sigma(db, cfg.audio_rms()), Some(db)),
                NoisePlan::Sigma(s) => (s, None),
                NoisePlan::Mixed {
                    fraction,
                    mean_db,
                    std_db,
                } => {
                    if rng.random::<f64>() < fraction {
                        let db = Normal::new(mean_db, std_db.max(0.0))
                            .map(|d| d.sample(rng))
                            .unwrap_or(mean_db);
                        (snr_to_sigma(db, cfg.audio_rms()), Some(db))
                    } else {
                        (cfg.effective_sigma_audio(), cfg.snr_db)
                    }
                }
            };
            let toks: Vec<usize> = (0..f).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            for &t in &toks {
                for &c in &self.audio_codes[t] {
                    let n: f64 = rng.sample(StandardNormal);
                    audio.push(T::lit(c + sigma_a * n));
                }
                for &c in &self.video_codes[cfg.cluster_of(t)] {
                    let n: f64 = rng.sample(StandardNormal);
                    video.push(T::lit(c + cfg.sigma_video * n));
                }
            }
            targets.push(toks);
            noise.push(NoiseRecord {
                sigma_audio: sigma_a,
                sigma_video: cfg.sigma_video,
                snr_db: snr,
            });
        }
        let rows = n_sequences * f;
        SampleBatch {
            targets,
            audio: Tensor::matrix(rows, cfg.d_audio, audio).expect("sized above"),
            video: Tensor::matrix(rows, cfg.d_video, video).expect("sized above"),
            noise,
        }
    }
}
