//! Runtime invariant suites behind the `selftest` command.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::dsp::{self, ComplexSpectrogram, FeatureBlock, Stft, Waveform, FEATURE_CHANNELS, FRAME_LEN, N_BINS};
use crate::error::{Error, Result};
use crate::model::layers::{Init, SgtcnBlock};
use crate::model::{checkpoint, spectral_loss, Conditioning, Gtcnn, ModelConfig, Selection};
use crate::scene::{estimate_rt60, mix_at_ratios, render_echo, sample_room, simulate_rir, Ratios};
use crate::voice::{synth_noise, synth_utterance, NoiseKind, VoiceProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_features(frames: usize, seed: u64) -> FeatureBlock {
    let mut r = rng(seed);
    FeatureBlock {
        data: (0..frames * FEATURE_CHANNELS * N_BINS).map(|_| r.gen_range(-1.0..1.0)).collect(),
        frames,
    }
}

fn unit_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    crate::speaker::l2_normalize(&mut v);
    v
}

/// `Ok(detail)` or `Err(reason)`.
pub type Check = std::result::Result<String, String>;

pub fn stft_round_trip(trials: usize) -> Check {
    let stft = Stft::new();
    let mut worst = 0.0f64;
    for k in 0..trials {
        let mut r = rng(100 + k as u64);
        let w = Waveform::new((0..16_000).map(|_| r.gen_range(-1.0..1.0)).collect());
        let back = stft.synthesize(&stft.analyze(&w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let hi = back.len().min(w.len()) - FRAME_LEN;
        let (mut num, mut den) = (0.0, 0.0);
        for n in FRAME_LEN..hi {
            num += (back.samples[n] - w.samples[n]).powi(2);
            den += w.samples[n].powi(2);
        }
        worst = worst.max((num / den).sqrt());
    }
    if worst < 1e-6 {
        Ok(format!("worst interior relative error {worst:.2e}"))
    } else {
        Err(format!("interior relative error {worst:.2e} exceeds 1e-6"))
    }
}

pub fn compression_inverse(trials: usize) -> Check {
    let mut worst = 0.0f64;
    for k in 0..trials {
        let mut r = rng(200 + k as u64);
        let n = 5 * N_BINS;
        let spec = ComplexSpectrogram::from_parts(
            (0..n).map(|_| r.gen_range(-3.0..3.0)).collect(),
            (0..n).map(|_| r.gen_range(-3.0..3.0)).collect(),
            5,
        )
        .map_err(|e| e.to_string())?;
        let back = dsp::decompress(&dsp::compress(&spec));
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            num += (back.re[i] - spec.re[i]).powi(2) + (back.im[i] - spec.im[i]).powi(2);
            den += spec.re[i].powi(2) + spec.im[i].powi(2);
        }
        worst = worst.max((num / den).sqrt());
    }
    if worst < 1e-6 {
        Ok(format!("worst relative error {worst:.2e}"))
    } else {
        Err(format!("relative error {worst:.2e} exceeds 1e-6"))
    }
}

pub fn checkpoint_round_trip() -> Check {
    let m = Gtcnn::<f32>::new(ModelConfig::desk(Selection::Emix).with_seed(5)).map_err(|e| e.to_string())?;
    let bytes = checkpoint::encode(&m).map_err(|e| e.to_string())?;
    let back = checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    if checkpoint::encode(&back).map_err(|e| e.to_string())? != bytes {
        return Err("re-encoded checkpoint differs".into());
    }
    let feats = random_features(8, 6);
    let cond = Conditioning {
        near: Some(unit_vector(512, 7)),
        far: Some(unit_vector(512, 8)),
    };
    let a = m.estimate(&feats, &cond).map_err(|e| e.to_string())?;
    let b = back.estimate(&feats, &cond).map_err(|e| e.to_string())?;
    if a.re != b.re || a.im != b.im {
        return Err("reloaded model output differs".into());
    }
    Ok(format!("{} bytes, forward bit-identical", bytes.len()))
}

pub fn gradient_check(coords: usize) -> Check {
    let mut model = Gtcnn::<f64>::new(ModelConfig::desk(Selection::Es).with_seed(11)).map_err(|e| e.to_string())?;
    let frames = 5;
    let feats = random_features(frames, 12);
    let mut r = rng(13);
    let n = frames * N_BINS;
    let clean = ComplexSpectrogram::from_parts(
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
        frames,
    )
    .map_err(|e| e.to_string())?;
    let cond = Conditioning::near(unit_vector(512, 14));
    let run = |m: &Gtcnn<f64>, grad: bool| -> Result<(f64, Option<crate::autodiff::Gradients<f64>>)> {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &feats, &cond)?;
        let l = spectral_loss(&mut tape, &out, &clean)?;
        let v = tape.scalar_value(l);
        Ok((v, if grad { Some(tape.backward(l)?) } else { None }))
    };
    let grads = run(&model, true).map_err(|e| e.to_string())?.1.ok_or("backward produced no gradients")?;
    let ids: Vec<_> = model.params.ids().collect();
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let id = ids[r.gen_range(0..ids.len())];
        let j = r.gen_range(0..model.params.get(id).len());
        let orig = model.params.get(id).data[j];
        model.params.get_mut(id).data[j] = orig + eps;
        let up = run(&model, false).map_err(|e| e.to_string())?.0;
        model.params.get_mut(id).data[j] = orig - eps;
        let down = run(&model, false).map_err(|e| e.to_string())?.0;
        model.params.get_mut(id).data[j] = orig;
        let fd = (up - down) / (2.0 * eps);
        let an = grads.get(id).map_or(0.0, |g| g[j]);
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-7);
        if rel >= 1e-4 {
            return Err(format!("{}[{j}]: analytic {an:e}, numeric {fd:e}", model.params.name(id)));
        }
        worst = worst.max(rel);
    }
    Ok(format!("{coords} coordinates, worst relative error {worst:.2e}"))
}

pub fn causality() -> Check {
    let m = Gtcnn::<f64>::new(ModelConfig::desk(Selection::None).with_seed(21)).map_err(|e| e.to_string())?;
    let frames = 40;
    let feats = random_features(frames, 22);
    let (base, stats) = m.estimate_with_norms(&feats, &Conditioning::none(), None).map_err(|e| e.to_string())?;
    let cut = 23;
    let mut changed = feats.clone();
    let mut r = rng(23);
    for v in &mut changed.data[cut * FEATURE_CHANNELS * N_BINS..] {
        *v = r.gen_range(-4.0..4.0);
    }
    let (pert, _) = m
        .estimate_with_norms(&changed, &Conditioning::none(), Some(stats))
        .map_err(|e| e.to_string())?;
    let split = cut * N_BINS;
    if base.re[..split] != pert.re[..split] || base.im[..split] != pert.im[..split] {
        return Err(format!("frames before {cut} changed after a future perturbation"));
    }
    if base.re[split..] == pert.re[split..] {
        return Err("perturbation had no effect at all".into());
    }
    Ok(format!("frames < {cut} unchanged by future input"))
}

pub fn block_lookback() -> Check {
    let (frames, cin, width, hidden, at) = (70, 4, 3, 4, 10);
    let mut store = ParamStore::<f64>::new();
    let block = {
        let mut init = Init::new(&mut store, 31);
        SgtcnBlock::new(&mut init, "probe", cin, width, hidden, 3, &[1, 2, 5, 9]).map_err(|e| e.to_string())?
    };
    let mut r = rng(32);
    let x: Vec<f64> = (0..frames * cin).map(|_| r.gen_range(-1.0..1.0)).collect();
    let run = |x: &[f64], stats| -> Result<_> {
        let mut tape = match stats {
            Some(s) => Tape::inference().with_frozen_norms(s),
            None => Tape::inference(),
        };
        let xv = tape.constant(Tensor::new(vec![frames, cin, 1], x.to_vec())?);
        let y = block.forward(&mut tape, &store, xv)?;
        Ok((tape.value(y).data.clone(), tape.take_norm_stats()))
    };
    let (base, stats) = run(&x, None).map_err(|e| e.to_string())?;
    let mut xp = x.clone();
    xp[at * cin] += 1.0;
    let (pert, _) = run(&xp, Some(stats)).map_err(|e| e.to_string())?;
    let hit: Vec<usize> = (0..frames)
        .filter(|t| base[t * width..(t + 1) * width] != pert[t * width..(t + 1) * width])
        .collect();
    let span = hit.last().map(|l| l - at);
    if hit.first() == Some(&at) && span == Some(34) {
        Ok("one block reaches exactly 34 frames".into())
    } else {
        Err(format!("affected frames {:?}..{:?}", hit.first(), hit.last()))
    }
}

pub fn ratio_exactness(scenes: usize) -> Check {
    let mut r = rng(40);
    let mut worst = 0.0f64;
    for k in 0..scenes {
        let secs = 1.0;
        let s = synth_utterance(&VoiceProfile::random("a", r.gen()), secs, r.gen());
        let x = synth_utterance(&VoiceProfile::random("b", r.gen()), secs, r.gen());
        let z = synth_utterance(&VoiceProfile::random("c", r.gen()), secs, r.gen());
        let v = synth_noise(NoiseKind::ALL[k % NoiseKind::ALL.len()], secs, r.gen());
        let room = sample_room(&mut r);
        let h = simulate_rir(&room).map_err(|e| e.to_string())?;
        let d = render_echo(&x, &h, r.gen_range(0.0..200.0)).map_err(|e| e.to_string())?;
        let want = Ratios {
            sir: r.gen_range(-5.0..5.0),
            ser: r.gen_range(-10.0..10.0),
            snr: r.gen_range(15.0..45.0),
        };
        let m = mix_at_ratios(&s, &z, &d, &v, &want).map_err(|e| e.to_string())?;
        for (got, w) in [(m.achieved.sir, want.sir), (m.achieved.ser, want.ser), (m.achieved.snr, want.snr)] {
            worst = worst.max((got - w).abs());
        }
        for i in 0..m.y.len() {
            let sum = m.s.samples[i] + m.z.samples[i] + m.d.samples[i] + m.v.samples[i];
            if (m.y.samples[i] - sum).abs() > 1e-9 {
                return Err(format!("mixture is not the sum of its parts at sample {i}"));
            }
        }
    }
    if worst <= 0.01 {
        Ok(format!("{scenes} mixtures, worst ratio error {worst:.2e} dB"))
    } else {
        Err(format!("ratio error {worst:.3} dB exceeds 0.01 dB"))
    }
}

pub fn reverberation(rooms: usize) -> Check {
    let mut r = rng(50);
    let mut worst = 0.0f64;
    for _ in 0..rooms {
        let room = sample_room(&mut r);
        let h = simulate_rir(&room).map_err(|e| e.to_string())?;
        let t = estimate_rt60(&h).map_err(|e| e.to_string())?;
        worst = worst.max((t - room.rt60).abs() / room.rt60);
    }
    if worst <= 0.2 {
        Ok(format!("{rooms} rooms, worst RT60 deviation {:.1}%", 100.0 * worst))
    } else {
        Err(format!("RT60 deviation {:.1}% exceeds 20%", 100.0 * worst))
    }
}

type Suite<'a> = Box<dyn Fn() -> Check + 'a>;

/// Run every suite; `quick` trims trial counts.
pub fn run(quick: bool) -> Vec<CheckResult> {
    let n = |q: usize, full: usize| if quick { q } else { full };
    let suites: Vec<(&'static str, Suite<'_>)> = vec![
        ("stft-round-trip", Box::new(move || stft_round_trip(n(3, 20)))),
        ("compression-inverse", Box::new(move || compression_inverse(n(10, 100)))),
        ("checkpoint-round-trip", Box::new(checkpoint_round_trip)),
        ("gradient-check", Box::new(move || gradient_check(n(12, 100)))),
        ("causality", Box::new(causality)),
        ("block-lookback", Box::new(block_lookback)),
        ("ratio-exactness", Box::new(move || ratio_exactness(n(2, 10)))),
        ("rt60", Box::new(move || reverberation(n(3, 20)))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let out = f();
            CheckResult {
                name,
                passed: out.is_ok(),
                detail: out.unwrap_or_else(|e| e),
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// Load a checkpoint and run one forward pass on it.
pub fn verify_checkpoint(path: &Path) -> Result<String> {
    let m = checkpoint::load(path)?;
    let cond = Conditioning {
        near: m.config.selection.uses_near().then(|| unit_vector(m.config.raw_embed_dim, 1)),
        far: m.config.selection.uses_far().then(|| unit_vector(m.config.raw_embed_dim, 2)),
    };
    let est = m.estimate(&random_features(4, 3), &cond)?;
    if !est.re.iter().chain(&est.im).all(|v| v.is_finite()) {
        return Err(Error::Checkpoint(format!("{} produces non-finite output", path.display())));
    }
    Ok(format!(
        "{}: mode {}, {} parameters",
        path.display(),
        m.config.selection,
        m.count_params().total
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for r in run(true) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = Gtcnn::<f32>::new(ModelConfig::desk(Selection::None)).unwrap();
        let mut bytes = checkpoint::encode(&m).unwrap();
        std::fs::write(&p, &bytes).unwrap();
        assert!(verify_checkpoint(&p).unwrap().contains("mode none"));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(verify_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
