use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::db::{energy, energy_ratio_db, inf_f64};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const MAX_ECHO_DELAY_MS: f64 = 512.0;

/// Target-to-component energy ratios in dB; `+inf` removes the component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    #[serde(with = "inf_f64")]
    pub sir: f64,
    #[serde(with = "inf_f64")]
    pub ser: f64,
    #[serde(with = "inf_f64")]
    pub snr: f64,
}

/// Amplitude factors applied to interference, echo and noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub z: f64,
    pub d: f64,
    pub v: f64,
}

/// Output of [`mix_at_ratios`]: the scaled components and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub y: Waveform,
    pub s: Waveform,
    pub z: Waveform,
    pub d: Waveform,
    pub v: Waveform,
    pub gains: Gains,
    pub achieved: Ratios,
}

/// Full linear convolution, `a.len() + b.len() - 1` samples.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, x) in a.iter().enumerate() {
            for (j, h) in b.iter().enumerate() {
                out[i + j] += x * h;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let lift = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|x| Complex::new(*x, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        fwd.process(&mut v);
        v
    };
    let fa = lift(a);
    let mut prod: Vec<Complex<f64>> = lift(b).iter().zip(&fa).map(|(p, q)| p * q).collect();
    inv.process(&mut prod);
    let scale = 1.0 / n as f64;
    prod[..out_len].iter().map(|c| c.re * scale).collect()
}

pub fn delay_samples(delay_ms: f64, sample_rate: u32) -> usize {
    (delay_ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Echo `x * h` delayed by `delay_ms` (rounded to whole samples) and cut to
/// `x.len()`.
pub fn render_echo(x: &Waveform, h: &Waveform, delay_ms: f64) -> Result<Waveform> {
    if !(0.0..=MAX_ECHO_DELAY_MS).contains(&delay_ms) {
        return Err(Error::invalid(format!(
            "echo delay must lie in [0, {MAX_ECHO_DELAY_MS}] ms, got {delay_ms}"
        )));
    }
    x.check_rate()?;
    h.check_rate()?;
    let shift = delay_samples(delay_ms, x.sample_rate);
    let n = x.len();
    let mut out = vec![0.0; n];
    if shift < n {
        let keep = n - shift;
        let head = &x.samples[..keep];
        let taps = &h.samples[..h.len().min(keep)];
        let conv = convolve(head, taps);
        out[shift..].copy_from_slice(&conv[..keep]);
    }
    Ok(Waveform {
        samples: out,
        sample_rate: x.sample_rate,
    })
}

fn gain_for(target_energy: f64, comp: &Waveform, ratio_db: f64, what: &str) -> Result<f64> {
    if ratio_db.is_nan() {
        return Err(Error::invalid(format!("{what} ratio is NaN")));
    }
    if ratio_db == f64::INFINITY {
        return Ok(0.0);
    }
    if ratio_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("{what} ratio of -inf cannot be realized")));
    }
    let e = energy(&comp.samples);
    if e <= 0.0 {
        return Err(Error::ZeroEnergy(format!(
            "{what} has zero energy but a finite ratio of {ratio_db} dB"
        )));
    }
    Ok((target_energy / (e * 10f64.powf(ratio_db / 10.0))).sqrt())
}

/// Scale `z`, `d` and `v` (never `s`) so that the target-to-component
/// energy ratios equal `ratios`, and sum them into the microphone signal.
pub fn mix_at_ratios(
    s: &Waveform,
    z: &Waveform,
    d: &Waveform,
    v: &Waveform,
    ratios: &Ratios,
) -> Result<Mixture> {
    let n = s.len();
    s.check_rate()?;
    for (what, w) in [("interference", z), ("echo", d), ("noise", v)] {
        if w.len() != n {
            return Err(Error::shape(format!(
                "{what} has {} samples, target {n}",
                w.len()
            )));
        }
        w.check_rate()?;
    }
    let es = energy(&s.samples);
    if es <= 0.0 {
        return Err(Error::ZeroEnergy("target speech has zero energy".into()));
    }
    let gains = Gains {
        z: gain_for(es, z, ratios.sir, "interference")?,
        d: gain_for(es, d, ratios.ser, "echo")?,
        v: gain_for(es, v, ratios.snr, "noise")?,
    };
    let z = z.scaled(gains.z);
    let d = d.scaled(gains.d);
    let v = v.scaled(gains.v);
    let y = sum4(s, &z, &d, &v);
    let achieved = Ratios {
        sir: energy_ratio_db(es, energy(&z.samples)),
        ser: energy_ratio_db(es, energy(&d.samples)),
        snr: energy_ratio_db(es, energy(&v.samples)),
    };
    Ok(Mixture {
        y,
        s: s.clone(),
        z,
        d,
        v,
        gains,
        achieved,
    })
}

pub(crate) fn sum4(s: &Waveform, z: &Waveform, d: &Waveform, v: &Waveform) -> Waveform {
    let samples = (0..s.len())
        .map(|i| s.samples[i] + z.samples[i] + d.samples[i] + v.samples[i])
        .collect();
    Waveform {
        samples,
        sample_rate: s.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn direct(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for i in 0..a.len() {
            for j in 0..b.len() {
                out[i + j] += a[i] * b[j];
            }
        }
        out
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let a = noise(1000, 1).samples;
        let b = noise(300, 2).samples;
        for (p, q) in convolve(&a, &b).iter().zip(direct(&a, &b)) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_impulse_echo_is_a_pure_delay() {
        let x = noise(4000, 3);
        let h = Waveform::new(vec![1.0]);
        assert_eq!(render_echo(&x, &h, 0.0).unwrap(), x);
        let d = render_echo(&x, &h, 100.0).unwrap();
        assert!(d.samples[..1600].iter().all(|v| *v == 0.0));
        for n in 1600..4000 {
            assert!((d.samples[n] - x.samples[n - 1600]).abs() < 1e-12);
        }
    }

    #[test]
    fn long_delay_matches_direct_convolution() {
        let x = noise(12000, 4);
        let h = noise(700, 5);
        let d = render_echo(&x, &h, 512.0).unwrap();
        let full = direct(&x.samples, &h.samples);
        assert!(d.samples[..8192].iter().all(|v| *v == 0.0));
        for n in 8192..12000 {
            assert!((d.samples[n] - full[n - 8192]).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_or_excessive_delay_is_rejected() {
        let x = noise(100, 6);
        let h = Waveform::new(vec![1.0]);
        assert!(render_echo(&x, &h, -1.0).is_err());
        assert!(render_echo(&x, &h, 513.0).is_err());
    }

    #[test]
    fn equal_energy_at_zero_db_leaves_interference_unscaled() {
        let s = noise(2000, 7);
        let z = Waveform::new(s.samples.iter().rev().copied().collect());
        let v = noise(2000, 8);
        let m = mix_at_ratios(&s, &z, &v, &v, &Ratios { sir: 0.0, ser: 10.0, snr: 30.0 }).unwrap();
        assert!((m.gains.z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn twenty_db_gives_amplitude_tenth() {
        let s = noise(2000, 9);
        let z = Waveform::new(s.samples.iter().rev().copied().collect());
        let v = noise(2000, 10);
        let m = mix_at_ratios(&s, &z, &v, &v, &Ratios { sir: 20.0, ser: 0.0, snr: 5.0 }).unwrap();
        assert!((m.gains.z - 0.1).abs() < 1e-12);
        assert!((m.achieved.sir - 20.0).abs() < 1e-9);
        assert_eq!(m.s, s);
    }

    #[test]
    fn infinite_sir_drops_the_interferer() {
        let s = noise(500, 11);
        let z = Waveform::zeros(500);
        let v = noise(500, 12);
        let m = mix_at_ratios(&s, &z, &v, &v, &Ratios { sir: f64::INFINITY, ser: 3.0, snr: 10.0 })
            .unwrap();
        assert!(m.z.samples.iter().all(|x| *x == 0.0));
        assert_eq!(m.achieved.sir, f64::INFINITY);
        for i in 0..500 {
            assert_eq!(m.y.samples[i], s.samples[i] + m.d.samples[i] + m.v.samples[i]);
        }
    }

    #[test]
    fn silent_component_with_finite_ratio_is_an_error() {
        let s = noise(500, 13);
        let z = Waveform::zeros(500);
        let v = noise(500, 14);
        let err = mix_at_ratios(&s, &z, &v, &v, &Ratios { sir: 5.0, ser: 3.0, snr: 10.0 });
        assert!(matches!(err, Err(Error::ZeroEnergy(_))));
        let err = mix_at_ratios(&z, &v, &v, &v, &Ratios { sir: 5.0, ser: 3.0, snr: 10.0 });
        assert!(matches!(err, Err(Error::ZeroEnergy(_))));
    }
}
