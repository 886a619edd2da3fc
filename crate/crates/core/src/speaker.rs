//! Speaker embeddings: a deterministic statistics-based extractor, the
//! learned 512 -> 256 projections and the time-tiled conditioning input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor};
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::Selection;
use crate::wav::read_wav;

pub const RAW_DIM: usize = 512;
pub const EMBED_DIM: usize = 256;
pub const MEL_BANDS: usize = 128;

/// Anything that maps enrollment audio to a fixed-size utterance vector.
pub trait EmbeddingProvider {
    fn extract(&self, enrollment: &Waveform) -> Result<Vec<f64>>;
    /// Cache key component; change it whenever outputs change.
    fn version(&self) -> &str;
    fn deterministic(&self) -> bool;
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over `n_fft / 2 + 1` bins, one row per band.
pub fn mel_filterbank(n_bands: usize, n_fft: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_bands + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / n_fft as f64;
    (0..n_bands)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Stand-in extractor: per-band mean, standard deviation, skewness and
/// excess kurtosis of 128 log-mel energies (20 Hz to 8 kHz), L2-normalized.
pub struct StatsExtractor {
    pub min_duration_s: f64,
    frame: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StatsExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StatsExtractor")
            .field("min_duration_s", &self.min_duration_s)
            .finish_non_exhaustive()
    }
}

impl Default for StatsExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl StatsExtractor {
    pub const VERSION: &'static str = "logmel-stats-v1";

    pub fn new() -> Self {
        let (frame, hop, n_fft) = (400, 160, 2048);
        let window = (0..frame)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame as f64).cos())
            .collect();
        Self {
            min_duration_s: 1.0,
            frame,
            hop,
            n_fft,
            window,
            filters: mel_filterbank(MEL_BANDS, n_fft, 20.0, 8000.0),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        }
    }

    /// Log-mel energies, one `MEL_BANDS` row per frame.
    pub fn log_mel(&self, w: &Waveform) -> Vec<[f64; MEL_BANDS]> {
        let bins = self.n_fft / 2 + 1;
        let n_frames = if w.len() < self.frame { 0 } else { (w.len() - self.frame) / self.hop + 1 };
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        (0..n_frames)
            .map(|t| {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                let seg = &w.samples[t * self.hop..t * self.hop + self.frame];
                for (i, (x, win)) in seg.iter().zip(&self.window).enumerate() {
                    buf[i].re = x * win;
                }
                self.fft.process(&mut buf);
                let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
                let mut row = [0.0; MEL_BANDS];
                for (b, filt) in self.filters.iter().enumerate() {
                    let e: f64 = filt.iter().zip(&power).map(|(f, p)| f * p).sum();
                    row[b] = (e + 1e-10).ln();
                }
                row
            })
            .collect()
    }
}

impl EmbeddingProvider for StatsExtractor {
    fn extract(&self, enrollment: &Waveform) -> Result<Vec<f64>> {
        enrollment.check_rate()?;
        let needed = (self.min_duration_s * SAMPLE_RATE as f64).ceil() as usize;
        if enrollment.len() < needed.max(self.frame) {
            return Err(Error::InputTooShort {
                needed: needed.max(self.frame),
                got: enrollment.len(),
            });
        }
        if !enrollment.is_finite() {
            return Err(Error::invalid("enrollment audio has non-finite samples"));
        }
        let rows = self.log_mel(enrollment);
        let n = rows.len() as f64;
        let mut out = vec![0.0; RAW_DIM];
        for b in 0..MEL_BANDS {
            let mean = rows.iter().map(|r| r[b]).sum::<f64>() / n;
            let m2 = rows.iter().map(|r| (r[b] - mean).powi(2)).sum::<f64>() / n;
            let m3 = rows.iter().map(|r| (r[b] - mean).powi(3)).sum::<f64>() / n;
            let m4 = rows.iter().map(|r| (r[b] - mean).powi(4)).sum::<f64>() / n;
            let std = m2.sqrt();
            let (skew, kurt) = if m2 > 1e-12 {
                (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
            } else {
                (0.0, 0.0)
            };
            out[b] = mean;
            out[MEL_BANDS + b] = std;
            out[2 * MEL_BANDS + b] = skew;
            out[3 * MEL_BANDS + b] = kurt;
        }
        l2_normalize(&mut out);
        Ok(out)
    }

    fn version(&self) -> &str {
        Self::VERSION
    }

    fn deterministic(&self) -> bool {
        true
    }
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Stand-in embedding of an enrollment signal.
pub fn extract_standin(enrollment: &Waveform) -> Result<Vec<f64>> {
    StatsExtractor::new().extract(enrollment)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Which end of the call an embedding belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    Near,
    Far,
}

impl End {
    pub fn param_prefix(self) -> &'static str {
        match self {
            End::Near => "speaker.proj_near",
            End::Far => "speaker.proj_far",
        }
    }
}

/// Apply the `which` projection stored in `params` to a raw embedding.
pub fn project<T: Real>(raw: &[f64], which: End, params: &ParamStore<T>) -> Result<Vec<f64>> {
    let prefix = which.param_prefix();
    let w = params
        .id(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::Selection(format!("model has no {prefix} projection")))?;
    let b = params
        .id(&format!("{prefix}.bias"))
        .ok_or_else(|| Error::Selection(format!("model has no {prefix} bias")))?;
    let k = params.get(w).dims.get(1).copied().unwrap_or(0);
    if raw.len() != k {
        return Err(Error::shape(format!(
            "embedding has {} values, projection expects {k}",
            raw.len()
        )));
    }
    let mut tape = Tape::<T>::inference();
    let x = tape.constant(Tensor::from_f64(&[1, k], raw)?);
    let wv = tape.param(params, w);
    let bv = tape.param(params, b);
    let y = tape.linear(x, wv, Some(bv))?;
    Ok(tape.value(y).to_f64())
}

/// Conditioning rows for `mode`: `None` for the unconditional model,
/// otherwise `[frames, dim]` with every row equal to the (concatenated)
/// projected embedding.
pub fn select_and_tile(
    e_s: Option<&[f64]>,
    e_x: Option<&[f64]>,
    mode: Selection,
    frames: usize,
) -> Result<Option<Tensor<f64>>> {
    fn need<'a>(v: Option<&'a [f64]>, mode: Selection, which: &str) -> Result<&'a [f64]> {
        v.ok_or_else(|| Error::Selection(format!("mode {mode} needs the {which}-end embedding")))
    }
    let row: Vec<f64> = match mode {
        Selection::None => return Ok(None),
        Selection::Es => need(e_s, mode, "near")?.to_vec(),
        Selection::Ex => need(e_x, mode, "far")?.to_vec(),
        Selection::Emix => {
            let mut r = need(e_s, mode, "near")?.to_vec();
            r.extend_from_slice(need(e_x, mode, "far")?);
            r
        }
    };
    let dim = row.len();
    let data = row.iter().copied().cycle().take(dim * frames).collect();
    Ok(Some(Tensor::new(vec![frames, dim], data)?))
}

/// Speaker id to enrollment WAV. Relative paths resolve against the
/// registry file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Registry {
    pub speakers: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    base: PathBuf,
}

impl Registry {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut reg: Registry = serde_json::from_str(&text)?;
        reg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(reg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn insert(&mut self, id: impl Into<String>, path: impl Into<PathBuf>) {
        self.speakers.insert(id.into(), path.into());
    }

    pub fn path(&self, id: &str) -> Result<PathBuf> {
        let p = self
            .speakers
            .get(id)
            .ok_or_else(|| Error::Selection(format!("speaker {id:?} is not enrolled")))?;
        Ok(if p.is_absolute() { p.clone() } else { self.base.join(p) })
    }
}

/// Extracted embeddings keyed by `speaker_id@extractor_version`, optionally
/// persisted as JSON.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: BTreeMap<String, Vec<f64>>,
    path: Option<PathBuf>,
    dirty: bool,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Cache backed by `path`; a missing file starts empty.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let entries = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            entries,
            path: Some(path),
            dirty: false,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_extract(
        &mut self,
        id: &str,
        registry: &Registry,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<f64>> {
        let key = format!("{id}@{}", provider.version());
        if let Some(v) = self.entries.get(&key) {
            return Ok(v.clone());
        }
        let w = read_wav(registry.path(id)?)?;
        let v = provider.extract(&w)?;
        if provider.deterministic() {
            self.entries.insert(key, v.clone());
            self.dirty = true;
        }
        Ok(v)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(path), true) = (&self.path, self.dirty) {
            let text = serde_json::to_string(&self.entries)?;
            std::fs::write(path, text).map_err(|e| Error::file(path, e))?;
            self.dirty = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn white(secs: f64, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..(secs * 16000.0) as usize).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    fn tone(secs: f64, hz: f64) -> Waveform {
        Waveform::new(
            (0..(secs * 16000.0) as usize)
                .map(|n| 0.3 * (2.0 * std::f64::consts::PI * hz * n as f64 / 16000.0).sin())
                .collect(),
        )
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let w = white(1.2, 1);
        let a = extract_standin(&w).unwrap();
        assert_eq!(a.len(), RAW_DIM);
        let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(a, extract_standin(&w).unwrap());
    }

    #[test]
    fn noise_and_tone_are_distinct() {
        let a = extract_standin(&white(2.0, 2)).unwrap();
        let b = extract_standin(&tone(2.0, 200.0)).unwrap();
        assert!(cosine(&a, &b) < 0.9, "{}", cosine(&a, &b));
    }

    #[test]
    fn short_enrollment_is_rejected() {
        assert!(matches!(
            extract_standin(&white(0.5, 3)),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn every_mel_band_has_weight() {
        for f in mel_filterbank(MEL_BANDS, 2048, 20.0, 8000.0) {
            assert!(f.iter().sum::<f64>() > 0.0);
        }
    }

    fn projection_store(weight: Vec<f64>, bias: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.register("speaker.proj_near.weight", Tensor::new(vec![EMBED_DIM, RAW_DIM], weight).unwrap())
            .unwrap();
        p.register("speaker.proj_near.bias", Tensor::new(vec![EMBED_DIM], bias).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn identity_truncation_projection_keeps_leading_coordinates() {
        let mut w = vec![0.0; EMBED_DIM * RAW_DIM];
        for i in 0..EMBED_DIM {
            w[i * RAW_DIM + i] = 1.0;
        }
        let p = projection_store(w, vec![0.0; EMBED_DIM]);
        let raw: Vec<f64> = (0..RAW_DIM).map(|i| i as f64 * 0.01).collect();
        assert_eq!(project(&raw, End::Near, &p).unwrap(), raw[..EMBED_DIM].to_vec());
        assert!(project(&raw, End::Far, &p).is_err());
        assert!(project(&raw[..10], End::Near, &p).is_err());
    }

    #[test]
    fn zero_weight_projection_returns_bias() {
        let bias: Vec<f64> = (0..EMBED_DIM).map(|i| i as f64).collect();
        let p = projection_store(vec![0.0; EMBED_DIM * RAW_DIM], bias.clone());
        assert_eq!(project(&vec![1.0; RAW_DIM], End::Near, &p).unwrap(), bias);
    }

    #[test]
    fn tiling_examples() {
        let es: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let ex: Vec<f64> = (0..256).map(|i| -(i as f64)).collect();
        let t = select_and_tile(Some(&es), Some(&ex), Selection::Emix, 10).unwrap().unwrap();
        assert_eq!(t.dims, vec![10, 512]);
        for r in 1..10 {
            assert_eq!(t.data[r * 512..(r + 1) * 512], t.data[..512]);
        }
        assert!(select_and_tile(Some(&es), Some(&ex), Selection::None, 10).unwrap().is_none());
        let t = select_and_tile(Some(&es), None, Selection::Es, 1).unwrap().unwrap();
        assert_eq!(t.data, es);
        assert!(select_and_tile(Some(&es), None, Selection::Ex, 3).is_err());
    }

    #[test]
    fn registry_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registry::default();
        reg.insert("a", "enroll/a.wav");
        let path = dir.path().join("reg.json");
        reg.save(&path).unwrap();
        let back = Registry::load(&path).unwrap();
        assert_eq!(back.path("a").unwrap(), dir.path().join("enroll/a.wav"));
        assert!(back.path("b").is_err());
    }
}
