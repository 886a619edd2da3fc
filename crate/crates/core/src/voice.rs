//! Synthetic speaker and noise sources: a glottal pulse train shaped by
//! time-varying formant resonators, with fricative bursts and pauses.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::wav::{write_wav, WavEncoding};

const FS: f64 = SAMPLE_RATE as f64;

/// (F1, F2, F3) in Hz for a reference adult male tract.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [70.0, 100.0, 140.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiceProfile {
    pub id: String,
    /// Mean fundamental frequency in Hz.
    pub f0: f64,
    /// Formant frequency multiplier (shorter tracts have larger values).
    pub formant_scale: f64,
    /// Syllables per second.
    pub rate: f64,
    /// Aspiration noise mixed into the glottal source.
    pub breathiness: f64,
    /// Preferred vowels, biasing the vowel choice per speaker.
    pub vowel_bias: [f64; 6],
}

impl VoiceProfile {
    pub fn random(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pitch = rng.gen_range(0.0..1.0f64);
        let mut vowel_bias = [0.0; 6];
        for b in &mut vowel_bias {
            *b = rng.gen_range(0.2..1.0);
        }
        Self {
            id: id.into(),
            f0: 85.0 + 170.0 * pitch,
            formant_scale: 0.88 + 0.3 * pitch + rng.gen_range(-0.05..0.05),
            rate: rng.gen_range(3.5..6.0),
            breathiness: rng.gen_range(0.02..0.25),
            vowel_bias,
        }
    }
}

/// Two-pole resonator with unity gain near its centre frequency.
#[derive(Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tick(&mut self, x: f64, freq: f64, bw: f64) -> f64 {
        let r = (-PI * bw / FS).exp();
        let c = 2.0 * r * (2.0 * PI * freq / FS).cos();
        let y = (1.0 - r) * x + c * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn pick_vowel(rng: &mut ChaCha8Rng, bias: &[f64; 6]) -> usize {
    let total: f64 = bias.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, b) in bias.iter().enumerate() {
        if u < *b {
            return i;
        }
        u -= b;
    }
    bias.len() - 1
}

fn rms_normalize(mut s: Vec<f64>, target: f64) -> Vec<f64> {
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        for v in &mut s {
            *v *= target / rms;
        }
    }
    s
}

/// Speech-like utterance of `secs` seconds, RMS 0.05.
pub fn synth_utterance(p: &VoiceProfile, secs: f64, seed: u64) -> Waveform {
    let n = (secs * FS).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut res = [Resonator::default(), Resonator::default(), Resonator::default()];
    let mut fric = Resonator::default();
    let mut phase = 0.0;
    let mut tilt = 0.0;
    let mut prev_noise = 0.0;
    let mut vowel = VOWELS[pick_vowel(&mut rng, &p.vowel_bias)];
    while out.len() < n {
        if rng.gen_bool(0.12) {
            let pause = (rng.gen_range(0.15..0.45) * FS) as usize;
            out.extend(std::iter::repeat_n(0.0, pause));
            continue;
        }
        let syl = (rng.gen_range(0.7..1.3) / p.rate * FS) as usize;
        let onset = if rng.gen_bool(0.5) {
            (rng.gen_range(0.03..0.08) * FS) as usize
        } else {
            0
        };
        let fric_freq = rng.gen_range(2500.0..6000.0);
        let target = VOWELS[pick_vowel(&mut rng, &p.vowel_bias)];
        let start_f0 = p.f0 * rng.gen_range(0.85..1.2);
        let end_f0 = start_f0 * rng.gen_range(0.85..1.1);
        let loud = rng.gen_range(0.5..1.0);
        for i in 0..syl {
            let u = i as f64 / syl as f64;
            let mut sample = 0.0;
            if i < onset {
                let w: f64 = rng.gen_range(-1.0..1.0);
                let hp = w - prev_noise;
                prev_noise = w;
                sample += 0.6 * fric.tick(hp, fric_freq, 1500.0) * (PI * i as f64 / onset as f64).sin();
            } else {
                let f0 = start_f0 + (end_f0 - start_f0) * u;
                phase += f0 / FS;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                };
                let asp: f64 = p.breathiness * rng.gen_range(-1.0..1.0);
                tilt = 0.9 * tilt + pulse + asp * 0.3;
                let glide = (u * 4.0).min(1.0);
                let mut v = tilt;
                let mut acc = 0.0;
                for k in 0..3 {
                    let f = (vowel[k] + (target[k] - vowel[k]) * glide) * p.formant_scale;
                    v = res[k].tick(v, f.min(0.45 * FS), BANDWIDTHS[k]);
                    acc += v;
                }
                let vu = (i - onset) as f64 / (syl - onset).max(1) as f64;
                let env = (PI * vu).sin().powf(0.6);
                sample += acc * env;
            }
            out.push(sample * loud);
        }
        vowel = target;
    }
    out.truncate(n);
    Waveform::new(rms_normalize(out, 0.05))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    Hum,
    Fan,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 6] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Brown,
        NoiseKind::Hum,
        NoiseKind::Fan,
        NoiseKind::Babble,
    ];
}

/// Stationary or slowly varying background noise, RMS 0.05.
pub fn synth_noise(kind: NoiseKind, secs: f64, seed: u64) -> Waveform {
    let n = (secs * FS).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white = move || -> f64 { rng.gen_range(-1.0..1.0) };
    let s: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let w = white();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Brown => {
            let mut acc = 0.0;
            (0..n)
                .map(|_| {
                    acc = 0.998 * acc + 0.05 * white();
                    acc
                })
                .collect()
        }
        NoiseKind::Hum => {
            let base = if seed.is_multiple_of(2) { 50.0 } else { 60.0 };
            (0..n)
                .map(|i| {
                    let t = i as f64 / FS;
                    (1..=6)
                        .map(|h| (2.0 * PI * base * h as f64 * t).sin() / h as f64)
                        .sum::<f64>()
                        + 0.05 * white()
                })
                .collect()
        }
        NoiseKind::Fan => {
            let mut r = Resonator::default();
            let centre = 300.0 + (seed % 7) as f64 * 60.0;
            (0..n)
                .map(|i| {
                    let t = i as f64 / FS;
                    let am = 1.0 + 0.3 * (2.0 * PI * 0.7 * t).sin();
                    am * r.tick(white(), centre, 400.0) + 0.02 * white()
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; n];
            for k in 0..5u64 {
                let p = VoiceProfile::random(format!("babble{k}"), seed.wrapping_add(1000 + k));
                let u = synth_utterance(&p, secs, seed.wrapping_mul(31).wrapping_add(k));
                for (a, b) in acc.iter_mut().zip(&u.samples) {
                    *a += b;
                }
            }
            acc
        }
    };
    Waveform::new(rms_normalize(s, 0.05))
}

/// Layout written by [`write_synthetic_pool`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub root: PathBuf,
    pub speakers: Vec<VoiceProfile>,
    /// Speaker id to enrollment file.
    pub registry: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolSize {
    pub speakers: usize,
    pub utterances: usize,
    pub utterance_s: f64,
    pub enroll_s: f64,
    pub noises: usize,
    pub noise_s: f64,
}

impl Default for PoolSize {
    fn default() -> Self {
        Self {
            speakers: 8,
            utterances: 3,
            utterance_s: 6.0,
            enroll_s: 10.0,
            noises: 6,
            noise_s: 10.0,
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::file(p, e))
}

/// Write `root/speech/<id>/uttK.wav`, `root/noise/*.wav`,
/// `root/enroll/<id>.wav` and the enrollment registry `root/enroll.json`.
pub fn write_synthetic_pool(root: impl AsRef<Path>, size: PoolSize, seed: u64) -> Result<SyntheticPool> {
    let root = root.as_ref();
    if size.speakers == 0 || size.utterances == 0 || size.noises == 0 {
        return Err(Error::invalid("pool needs at least one speaker, utterance and noise"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut registry = crate::speaker::Registry::default();
    let mut speakers = Vec::new();
    create_dir(&root.join("enroll"))?;
    create_dir(&root.join("noise"))?;
    for k in 0..size.speakers {
        let id = format!("spk{k:03}");
        let profile = VoiceProfile::random(&id, master.gen());
        let dir = root.join("speech").join(&id);
        create_dir(&dir)?;
        for u in 0..size.utterances {
            let w = synth_utterance(&profile, size.utterance_s, master.gen());
            write_wav(dir.join(format!("utt{u}.wav")), &w, WavEncoding::Float32)?;
        }
        let enroll = root.join("enroll").join(format!("{id}.wav"));
        write_wav(&enroll, &synth_utterance(&profile, size.enroll_s, master.gen()), WavEncoding::Float32)?;
        registry.insert(id.clone(), enroll);
        speakers.push(profile);
    }
    for k in 0..size.noises {
        let kind = NoiseKind::ALL[k % NoiseKind::ALL.len()];
        let w = synth_noise(kind, size.noise_s, master.gen());
        let name = serde_json::to_value(kind)?.as_str().unwrap_or("noise").to_string();
        write_wav(root.join("noise").join(format!("{name}{k}.wav")), &w, WavEncoding::Float32)?;
    }
    let reg_path = root.join("enroll.json");
    registry.save(&reg_path)?;
    Ok(SyntheticPool {
        root: root.to_path_buf(),
        speakers,
        registry: reg_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterances_are_deterministic_and_normalized() {
        let p = VoiceProfile::random("a", 1);
        let a = synth_utterance(&p, 1.5, 7);
        assert_eq!(a, synth_utterance(&p, 1.5, 7));
        assert_eq!(a.len(), 24000);
        let rms = (a.energy() / a.len() as f64).sqrt();
        assert!((rms - 0.05).abs() < 1e-12);
        assert!(a.is_finite());
    }

    #[test]
    fn every_noise_kind_is_finite_and_nonsilent() {
        for kind in NoiseKind::ALL {
            let w = synth_noise(kind, 0.5, 3);
            assert!(w.is_finite() && w.energy() > 0.0, "{kind:?}");
        }
    }
}
