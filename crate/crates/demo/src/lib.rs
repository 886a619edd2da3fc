//! WebAssembly bindings for the static page in `www/`.
//!
//! Every export returns a JSON string; the plain `*_json` functions do the work
//! and are usable natively.

use paec::autodiff::{ParamStore, Tape, Tensor};
use paec::dsp::{Stft, Waveform};
use paec::model::layers::{Init, SgtcnBlock};
use paec::scene::{estimate_rt60, mix_at_ratios, render_echo, sample_room, schroeder_edc, simulate_rir, Ratios};
use paec::voice::{synth_noise, synth_utterance, NoiseKind, VoiceProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const SCENE_SECONDS: f64 = 2.0;
const EDC_FLOOR_DB: f64 = -70.0;

fn db(v: f64) -> Value {
    if v.is_finite() {
        json!((v * 100.0).round() / 100.0)
    } else {
        json!(if v > 0.0 { "inf" } else { "-inf" })
    }
}

/// Room impulse response decay for a random shoebox with the given RT60.
pub fn room_json(rt60: f64, seed: u64) -> paec::Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut room = sample_room(&mut rng);
    room.rt60 = rt60;
    let h = simulate_rir(&room)?;
    let measured = estimate_rt60(&h)?;
    let ms = h.sample_rate as usize / 1000;
    let edc: Vec<f64> = schroeder_edc(&h.samples)
        .iter()
        .step_by(ms)
        .take_while(|e| **e > EDC_FLOOR_DB)
        .map(|e| (e * 100.0).round() / 100.0)
        .collect();
    Ok(json!({
        "size_m": [room.width, room.depth, room.height],
        "target_s": rt60,
        "measured_s": measured,
        "taps": h.len(),
        "edc_db": edc,
    }))
}

fn log_spectrogram(w: &Waveform) -> paec::Result<(usize, usize, Vec<f32>)> {
    let spec = Stft::new().analyze(w)?;
    let mut out = Vec::with_capacity(spec.frames * spec.bins);
    for t in 0..spec.frames {
        for f in 0..spec.bins {
            out.push((20.0 * spec.magnitude(t, f).max(1e-6).log10()) as f32);
        }
    }
    Ok((spec.frames, spec.bins, out))
}

/// Synthetic two-second scene mixed at the requested ratios. A non-finite
/// `sir` leaves out the interfering talker.
pub fn scene_json(sir: f64, ser: f64, snr: f64, seed: u64) -> paec::Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = synth_utterance(&VoiceProfile::random("near", rng.gen()), SCENE_SECONDS, rng.gen());
    let x = synth_utterance(&VoiceProfile::random("far", rng.gen()), SCENE_SECONDS, rng.gen());
    let z = if sir.is_finite() {
        synth_utterance(&VoiceProfile::random("other", rng.gen()), SCENE_SECONDS, rng.gen())
    } else {
        Waveform::zeros(s.len())
    };
    let kind = NoiseKind::ALL[rng.gen_range(0..NoiseKind::ALL.len())];
    let v = synth_noise(kind, SCENE_SECONDS, rng.gen());
    let room = sample_room(&mut rng);
    let h = simulate_rir(&room)?;
    let d = render_echo(&x, &h, rng.gen_range(0.0..200.0))?;
    let sir = if sir.is_finite() { sir } else { f64::INFINITY };
    let m = mix_at_ratios(&s, &z, &d, &v, &Ratios { sir, ser, snr })?;
    let (frames, bins, mic) = log_spectrogram(&m.y)?;
    let (_, _, target) = log_spectrogram(&m.s)?;
    Ok(json!({
        "frames": frames,
        "bins": bins,
        "mic_db": mic,
        "target_db": target,
        "noise": format!("{kind:?}"),
        "achieved": { "sir": db(m.achieved.sir), "ser": db(m.achieved.ser), "snr": db(m.achieved.snr) },
    }))
}

/// Output frames of one S-GTCN block that change when a single input frame
/// is perturbed.
pub fn receptive_field_json(dilations: &[usize], kernel: usize) -> paec::Result<Value> {
    let lookback: usize = dilations.iter().map(|d| (kernel.max(1) - 1) * d).sum();
    let (at, cin, width, hidden) = (4, 3, 3, 4);
    let frames = at + lookback + 8;
    let mut store = ParamStore::<f64>::new();
    let block = {
        let mut init = Init::new(&mut store, 9);
        SgtcnBlock::new(&mut init, "demo", cin, width, hidden, kernel, dilations)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<f64> = (0..frames * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |x: &[f64], stats| -> paec::Result<_> {
        let mut tape = match stats {
            Some(s) => Tape::inference().with_frozen_norms(s),
            None => Tape::inference(),
        };
        let xv = tape.constant(Tensor::new(vec![frames, cin, 1], x.to_vec())?);
        let y = block.forward(&mut tape, &store, xv)?;
        Ok((tape.value(y).data.clone(), tape.take_norm_stats()))
    };
    let (base, stats) = run(&x, None)?;
    let mut bumped = x.clone();
    bumped[at * cin] += 1.0;
    let (moved, _) = run(&bumped, Some(stats))?;
    let affected: Vec<bool> = (0..frames)
        .map(|t| base[t * width..(t + 1) * width] != moved[t * width..(t + 1) * width])
        .collect();
    Ok(json!({
        "frames": frames,
        "perturbed": at,
        "lookback": lookback,
        "affected": affected,
    }))
}

fn reply(v: paec::Result<Value>) -> String {
    match v {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

#[wasm_bindgen]
pub fn room(rt60: f64, seed: u32) -> String {
    reply(room_json(rt60, seed.into()))
}

#[wasm_bindgen]
pub fn scene(sir: f64, ser: f64, snr: f64, seed: u32) -> String {
    reply(scene_json(sir, ser, snr, seed.into()))
}

/// `dilations` is a comma separated list such as `"1,2,5,9"`.
#[wasm_bindgen]
pub fn receptive_field(dilations: &str, kernel: u32) -> String {
    let parsed: Result<Vec<usize>, _> = dilations
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    match parsed {
        Ok(d) => reply(receptive_field_json(&d, kernel as usize)),
        Err(e) => json!({ "error": format!("dilations: {e}") }).to_string(),
    }
}
