//! Signal-processing primitives shared by scene synthesis, the network front-end
//! and the metrics: framing, STFT/iSTFT, power-law spectral compression and
//! feature stacking.
//!
//! The analysis configuration is fixed: 20 ms frames (320 samples), 10 ms hop
//! (160 samples), a 320-point FFT and a square-root periodic Hann window on both
//! analysis and synthesis. With that window pair plain overlap-add is exact on
//! every sample covered by two frames.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 320;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 320;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
/// Feature channels: compressed mic re/im, compressed reference re/im.
pub const FEATURE_CHANNELS: usize = 4;

/// Magnitudes below this are treated as exact zeros by the power-law maps.
pub const MAG_FLOOR: f64 = 1e-12;

/// Mono signal at a fixed sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Truncate or zero-pad to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Waveform {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate(self.sample_rate));
        }
        Ok(())
    }
}

/// One-sided complex spectrogram stored as two row-major `frames x bins` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize) -> Self {
        Self {
            re: vec![0.0; frames * N_BINS],
            im: vec![0.0; frames * N_BINS],
            frames,
            bins: N_BINS,
            hop: HOP,
            fft_size: FFT_SIZE,
        }
    }

    pub fn from_parts(re: Vec<f64>, im: Vec<f64>, frames: usize) -> Result<Self> {
        if re.len() != frames * N_BINS || im.len() != re.len() {
            return Err(Error::shape(format!(
                "spectrogram planes must both hold {frames}x{N_BINS} values, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self {
            re,
            im,
            frames,
            bins: N_BINS,
            hop: HOP,
            fft_size: FFT_SIZE,
        })
    }

    #[inline]
    pub fn idx(&self, t: usize, f: usize) -> usize {
        t * self.bins + f
    }

    pub fn magnitude(&self, t: usize, f: usize) -> f64 {
        let i = self.idx(t, f);
        self.re[i].hypot(self.im[i])
    }

    pub fn power(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.bins != N_BINS || self.fft_size != FFT_SIZE || self.hop != HOP {
            return Err(Error::shape(format!(
                "spectrogram configured for fft={} hop={} bins={}, expected {FFT_SIZE}/{HOP}/{N_BINS}",
                self.fft_size, self.hop, self.bins
            )));
        }
        if self.re.len() != self.frames * self.bins || self.im.len() != self.re.len() {
            return Err(Error::shape("spectrogram planes do not match frames x bins"));
        }
        Ok(())
    }
}

/// `frames x 4 x 161` network input, channel order mic-re, mic-im, ref-re, ref-im.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub data: Vec<f64>,
    pub frames: usize,
}

impl FeatureBlock {
    pub fn channel(&self, t: usize, c: usize) -> &[f64] {
        let start = (t * FEATURE_CHANNELS + c) * N_BINS;
        &self.data[start..start + N_BINS]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.frames, FEATURE_CHANNELS, N_BINS]
    }
}

/// Square-root periodic Hann window.
pub fn sqrt_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).sqrt())
        .collect()
}

pub fn frame_count(len: usize) -> usize {
    if len < FRAME_LEN {
        0
    } else {
        (len - FRAME_LEN) / HOP + 1
    }
}

/// Reusable STFT engine; holds the FFT plans and the window.
#[derive(Clone)]
pub struct Stft {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("fft_size", &FFT_SIZE).finish()
    }
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(FFT_SIZE),
            inverse: planner.plan_fft_inverse(FFT_SIZE),
            window: sqrt_hann(FRAME_LEN),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        w.check_rate()?;
        if w.len() < FRAME_LEN {
            return Err(Error::InputTooShort {
                needed: FRAME_LEN,
                got: w.len(),
            });
        }
        let frames = frame_count(w.len());
        let mut spec = ComplexSpectrogram::zeros(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for t in 0..frames {
            let start = t * HOP;
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(w.samples[start + n] * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            let row = t * N_BINS;
            for f in 0..N_BINS {
                spec.re[row + f] = buf[f].re;
                spec.im[row + f] = buf[f].im;
            }
        }
        Ok(spec)
    }

    /// Weighted overlap-add inverse. The result has `(frames-1)*hop + 320`
    /// samples; only samples covered by two frames are exact reconstructions.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        spec.check()?;
        if spec.frames == 0 {
            return Ok(Waveform::zeros(0));
        }
        let len = (spec.frames - 1) * HOP + FRAME_LEN;
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let scale = 1.0 / FFT_SIZE as f64;
        for t in 0..spec.frames {
            let row = t * N_BINS;
            for f in 0..N_BINS {
                buf[f] = Complex::new(spec.re[row + f], spec.im[row + f]);
            }
            // DC and Nyquist must be real for a Hermitian spectrum.
            buf[0].im = 0.0;
            buf[N_BINS - 1].im = 0.0;
            for f in 1..N_BINS - 1 {
                buf[FFT_SIZE - f] = buf[f].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * HOP;
            for n in 0..FRAME_LEN {
                out[start + n] += buf[n].re * scale * self.window[n];
            }
        }
        Ok(Waveform::new(out))
    }
}

pub fn stft(w: &Waveform) -> Result<ComplexSpectrogram> {
    Stft::new().analyze(w)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    Stft::new().synthesize(spec)
}

/// Scale every bin's magnitude to `|X|^power`, leaving the phase untouched.
/// Computed as `|X|^(power-1) * (re, im)`; bins under [`MAG_FLOOR`] map to zero.
pub fn power_law(spec: &ComplexSpectrogram, power: f64) -> ComplexSpectrogram {
    let mut out = spec.clone();
    for (re, im) in out.re.iter_mut().zip(out.im.iter_mut()) {
        let mag = re.hypot(*im);
        if mag < MAG_FLOOR {
            *re = 0.0;
            *im = 0.0;
        } else {
            let gain = mag.powf(power - 1.0);
            *re *= gain;
            *im *= gain;
        }
    }
    out
}

pub fn compress(spec: &ComplexSpectrogram) -> ComplexSpectrogram {
    power_law(spec, 0.5)
}

pub fn decompress(spec: &ComplexSpectrogram) -> ComplexSpectrogram {
    power_law(spec, 2.0)
}

/// Stack compressed mic and reference spectra into the network input.
pub fn make_features(y: &Waveform, x: &Waveform) -> Result<FeatureBlock> {
    make_features_with(&Stft::new(), y, x)
}

pub fn make_features_with(stft: &Stft, y: &Waveform, x: &Waveform) -> Result<FeatureBlock> {
    if y.len() != x.len() {
        return Err(Error::shape(format!(
            "microphone has {} samples but reference has {}",
            y.len(),
            x.len()
        )));
    }
    let ys = compress(&stft.analyze(y)?);
    let xs = compress(&stft.analyze(x)?);
    let frames = ys.frames;
    let mut data = Vec::with_capacity(frames * FEATURE_CHANNELS * N_BINS);
    for t in 0..frames {
        let row = t * N_BINS..(t + 1) * N_BINS;
        data.extend_from_slice(&ys.re[row.clone()]);
        data.extend_from_slice(&ys.im[row.clone()]);
        data.extend_from_slice(&xs.re[row.clone()]);
        data.extend_from_slice(&xs.im[row]);
    }
    Ok(FeatureBlock { data, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct evaluation of the DFT definition for one windowed frame.
    fn dft_frame(frame: &[f64]) -> Vec<(f64, f64)> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, v)| {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    (re + v * ang.cos(), im + v * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn zero_frame_gives_zero_spectrum() {
        let s = stft(&Waveform::zeros(320)).unwrap();
        assert_eq!((s.frames, s.bins), (1, 161));
        assert!(s.re.iter().chain(&s.im).all(|v| *v == 0.0));
    }

    #[test]
    fn frame_count_arithmetic() {
        assert_eq!(stft(&Waveform::zeros(480)).unwrap().frames, 2);
        assert_eq!(stft(&Waveform::zeros(16_000)).unwrap().frames, 99);
        assert_eq!(frame_count(16_000 - 1), 98);
    }

    #[test]
    fn short_input_is_rejected() {
        let err = stft(&Waveform::zeros(319)).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn foreign_sample_rate_is_rejected() {
        let w = Waveform {
            samples: vec![0.0; 1000],
            sample_rate: 8000,
        };
        assert!(matches!(stft(&w), Err(Error::SampleRate(8000))));
    }

    #[test]
    fn cosine_peaks_at_its_bin_and_matches_dft() {
        let freq = 25.0 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
        assert_eq!(freq, 1250.0);
        let w = Waveform::new(
            (0..3200)
                .map(|n| (2.0 * PI * freq * n as f64 / SAMPLE_RATE as f64).cos())
                .collect(),
        );
        let s = stft(&w).unwrap();
        let win = sqrt_hann(FRAME_LEN);
        for t in 0..s.frames {
            let frame: Vec<f64> = (0..FRAME_LEN)
                .map(|n| w.samples[t * HOP + n] * win[n])
                .collect();
            let oracle = dft_frame(&frame);
            for (f, (re, im)) in oracle.iter().enumerate() {
                let i = s.idx(t, f);
                assert!((s.re[i] - re).abs() < 1e-9 && (s.im[i] - im).abs() < 1e-9);
            }
            let argmax = (0..N_BINS)
                .max_by(|a, b| s.magnitude(t, *a).total_cmp(&s.magnitude(t, *b)))
                .unwrap();
            assert_eq!(argmax, 25);
        }
    }

    #[test]
    fn white_noise_round_trip_interior() {
        let w = noise(16_000, 3);
        let st = Stft::new();
        let rec = st.synthesize(&st.analyze(&w).unwrap()).unwrap();
        let (lo, hi) = (FRAME_LEN, rec.len() - FRAME_LEN);
        let err: f64 = (lo..hi).map(|n| (rec.samples[n] - w.samples[n]).powi(2)).sum();
        let norm: f64 = (lo..hi).map(|n| w.samples[n].powi(2)).sum();
        assert!((err / norm).sqrt() < 1e-6);
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let w = istft(&ComplexSpectrogram::zeros(5)).unwrap();
        assert_eq!(w.len(), 4 * HOP + FRAME_LEN);
        assert!(w.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_frame_inverts_to_window_squared_frame() {
        let w = noise(FRAME_LEN, 9);
        let rec = istft(&stft(&w).unwrap()).unwrap();
        let win = sqrt_hann(FRAME_LEN);
        for n in 0..FRAME_LEN {
            let expect = w.samples[n] * win[n] * win[n];
            assert!((rec.samples[n] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn compress_examples() {
        let mut s = ComplexSpectrogram::zeros(1);
        s.re[0] = 4.0;
        s.re[1] = 3.0;
        s.im[1] = 4.0;
        let c = compress(&s);
        assert!((c.re[0] - 2.0).abs() < 1e-12 && c.im[0] == 0.0);
        assert_eq!((c.re[2], c.im[2]), (0.0, 0.0));
        // |3+4i|^0.5 * (cos, sin)(atan2(4, 3))
        let ang = 4f64.atan2(3.0);
        let mag = 5f64.sqrt();
        assert!((c.re[1] - mag * ang.cos()).abs() < 1e-12);
        assert!((c.im[1] - mag * ang.sin()).abs() < 1e-12);
        assert!((c.re[1].hypot(c.im[1]) - 2.2360679).abs() < 1e-7);
    }

    #[test]
    fn decompress_examples() {
        let mut s = ComplexSpectrogram::zeros(1);
        s.re[0] = 2.0;
        let d = decompress(&s);
        assert!((d.re[0] - 4.0).abs() < 1e-12);
        assert_eq!((d.re[1], d.im[1]), (0.0, 0.0));
    }

    #[test]
    fn features_stack_in_channel_order() {
        let y = noise(4000, 1);
        let x = noise(4000, 2);
        let feats = make_features(&y, &x).unwrap();
        let cy = compress(&stft(&y).unwrap());
        let cx = compress(&stft(&x).unwrap());
        for t in 0..feats.frames {
            assert_eq!(feats.channel(t, 0), &cy.re[t * N_BINS..(t + 1) * N_BINS]);
            assert_eq!(feats.channel(t, 1), &cy.im[t * N_BINS..(t + 1) * N_BINS]);
            assert_eq!(feats.channel(t, 2), &cx.re[t * N_BINS..(t + 1) * N_BINS]);
            assert_eq!(feats.channel(t, 3), &cx.im[t * N_BINS..(t + 1) * N_BINS]);
        }
    }

    #[test]
    fn silent_inputs_give_zero_features() {
        let feats = make_features(&Waveform::zeros(16_000), &Waveform::zeros(16_000)).unwrap();
        assert_eq!(feats.dims(), [99, 4, 161]);
        assert!(feats.data.iter().all(|v| *v == 0.0));

        let feats = make_features(&noise(16_000, 4), &Waveform::zeros(16_000)).unwrap();
        for t in 0..feats.frames {
            assert!(feats.channel(t, 2).iter().all(|v| *v == 0.0));
            assert!(feats.channel(t, 3).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn feature_length_mismatch_errors() {
        assert!(make_features(&Waveform::zeros(1000), &Waveform::zeros(999)).is_err());
    }
}
