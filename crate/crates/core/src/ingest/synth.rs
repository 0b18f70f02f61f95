//! Synthetic motor-imagery-like datasets with known class structure.
//!
//! Class `k` is a sinusoid at its own frequency projected through a class-specific
//! spatial pattern. Each subject applies its own random channel mixing and gain, and
//! white noise is added at the requested signal-to-noise ratio.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Trial;
use crate::error::{Error, Result};

/// Noise standard deviation (and reference signal amplitude) in microvolts.
const SCALE_UV: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subject_count: usize,
    pub trials_per_subject: usize,
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    /// Signal power over noise power; `f64::INFINITY` means noise-free, `0` pure noise.
    pub class_signal_snr: f64,
    pub seed: u64,
    /// Strength of the per-subject random channel mixing.
    pub subject_variability: f64,
    /// Half-width of the uniform per-trial phase jitter, in radians.
    pub phase_jitter: f64,
}

impl SynthSpec {
    pub fn new(subjects: usize, trials: usize, channels: usize, samples: usize, classes: usize) -> Self {
        SynthSpec {
            subject_count: subjects,
            trials_per_subject: trials,
            channels,
            samples,
            classes,
            class_signal_snr: 1.0,
            seed: 0,
            subject_variability: 0.3,
            phase_jitter: 0.5,
        }
    }

    pub fn with_snr(mut self, snr: f64) -> Self {
        self.class_signal_snr = snr;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Parses `key=value` pairs separated by commas, e.g.
    /// `subjects=4,trials=20,channels=8,samples=128,classes=2,snr=inf,seed=1`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::new(4, 20, 8, 128, 2);
        for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad synth entry {pair:?}")))?;
            let bad = || Error::InvalidArgument(format!("bad value for {k}: {v:?}"));
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match k {
                "subjects" => spec.subject_count = int(v)?,
                "trials" => spec.trials_per_subject = int(v)?,
                "channels" => spec.channels = int(v)?,
                "samples" => spec.samples = int(v)?,
                "classes" => spec.classes = int(v)?,
                "snr" => spec.class_signal_snr = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "variability" => spec.subject_variability = v.parse().map_err(|_| bad())?,
                "jitter" => spec.phase_jitter = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::InvalidArgument(format!("unknown synth key {k:?}"))),
            }
        }
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.subject_count == 0
            || self.trials_per_subject == 0
            || self.channels == 0
            || self.samples == 0
        {
            return Err(Error::InvalidArgument("synthetic counts must all be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("synthetic data needs >= 2 classes".into()));
        }
        if !(self.class_signal_snr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "snr must be >= 0, got {}",
                self.class_signal_snr
            )));
        }
        Ok(())
    }
}

/// What the generator planted, for checking learned representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub class_patterns: Vec<Vec<f64>>,
    /// Cycles per sample.
    pub class_frequencies: Vec<f64>,
    pub class_phases: Vec<f64>,
    pub subjects: Vec<String>,
    pub signal_amplitude: f64,
    pub noise_std: f64,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(Vec<Trial<f32>>, SynthTruth)> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.channels;
    let k = spec.classes;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let class_patterns: Vec<Array1<f64>> = (0..k)
        .map(|_| {
            let v = Array1::from_shape_fn(c, |_| normal(&mut rng));
            let norm = v.dot(&v).sqrt().max(1e-12);
            v * ((c as f64).sqrt() / norm)
        })
        .collect();
    let class_frequencies: Vec<f64> = (0..k).map(|i| 0.04 + 0.025 * i as f64).collect();
    let class_phases: Vec<f64> = (0..k).map(|i| 2.0 * PI * i as f64 / k as f64).collect();

    let snr = spec.class_signal_snr;
    let (amplitude, noise_std) = if snr.is_infinite() {
        (SCALE_UV, 0.0)
    } else {
        // a sinusoid of amplitude A has power A²/2
        (SCALE_UV * (2.0 * snr).sqrt(), SCALE_UV)
    };

    let mut trials = Vec::with_capacity(spec.subject_count * spec.trials_per_subject);
    let mut subjects = Vec::with_capacity(spec.subject_count);
    for s in 0..spec.subject_count {
        let subject = format!("S{:03}", s + 1);
        let scale = spec.subject_variability / (c as f64).sqrt();
        let mixing = Array2::from_shape_fn((c, c), |(i, j)| {
            f64::from(u8::from(i == j)) + scale * normal(&mut rng)
        });
        let gain = (1.0 + 0.2 * normal(&mut rng)).clamp(0.5, 1.5);
        let projected: Vec<Array1<f64>> = class_patterns.iter().map(|a| mixing.dot(a)).collect();

        let mut labels: Vec<usize> = (0..spec.trials_per_subject).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        for (i, &y) in labels.iter().enumerate() {
            let jitter = if spec.phase_jitter > 0.0 {
                rng.random_range(-spec.phase_jitter..=spec.phase_jitter)
            } else {
                0.0
            };
            let omega = 2.0 * PI * class_frequencies[y];
            let phase = class_phases[y] + jitter;
            let wave: Vec<f64> = (0..spec.samples)
                .map(|t| (omega * t as f64 + phase).sin())
                .collect();
            let data = Array2::from_shape_fn((c, spec.samples), |(ch, t)| {
                let signal = amplitude * gain * projected[y][ch] * wave[t];
                let noise = if noise_std > 0.0 {
                    noise_std * normal(&mut rng)
                } else {
                    0.0
                };
                (signal + noise) as f32
            });
            trials.push(Trial::new(
                subject.clone(),
                format!("{subject}/0/{i}"),
                data,
                Some(y),
                k,
            )?);
        }
        subjects.push(subject);
    }
    let truth = SynthTruth {
        class_patterns: class_patterns.into_iter().map(|a| a.to_vec()).collect(),
        class_frequencies,
        class_phases,
        subjects,
        signal_amplitude: amplitude,
        noise_std,
    };
    Ok((trials, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::new(2, 6, 3, 20, 2).with_seed(4);
        let (a, ta) = synth_generate(&spec).unwrap();
        let (b, tb) = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = synth_generate(&spec.clone().with_seed(5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_per_subject() {
        let spec = SynthSpec::new(3, 11, 2, 10, 4);
        let (trials, _) = synth_generate(&spec).unwrap();
        for s in ["S001", "S002", "S003"] {
            let mut counts = [0usize; 4];
            for t in trials.iter().filter(|t| t.subject_id == s) {
                counts[t.label.unwrap()] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn spec_string() {
        let spec = SynthSpec::parse("subjects=3,trials=8,snr=inf,classes=4,seed=9").unwrap();
        assert_eq!(spec.subject_count, 3);
        assert!(spec.class_signal_snr.is_infinite());
        assert_eq!(spec.classes, 4);
        assert!(SynthSpec::parse("colour=blue").is_err());
    }

    #[test]
    fn rejects_degenerate() {
        assert!(synth_generate(&SynthSpec::new(0, 1, 1, 1, 2)).is_err());
        assert!(synth_generate(&SynthSpec::new(1, 1, 1, 1, 1)).is_err());
    }
}
