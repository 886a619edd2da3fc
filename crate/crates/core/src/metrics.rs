//! ERLE, mixing-ratio measurement, SI-SDR and log-spectral distance, plus
//! the per-scene evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::db::{energy, energy_ratio_db, inf_f64};
use crate::dsp::{Stft, Waveform};
use crate::error::{Error, Result};
use crate::scene::{render_scene, MixtureRecord, Ratios, Scenario, SceneSpec, SourceCache, Talk};

pub const REPORT_VERSION: u32 = 1;
pub const LSD_FLOOR: f64 = 1e-8;
/// Residual-to-target energy below which SI-SDR is reported as `+inf`.
pub const SI_SDR_EXACT: f64 = 1e-24;

fn same_len(a: &Waveform, b: &Waveform, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{what}: signals have {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Echo return loss enhancement `10 log10(sum y^2 / sum s_hat^2)`;
/// `+inf` for a silent output.
pub fn erle(y: &Waveform, s_hat: &Waveform) -> Result<f64> {
    same_len(y, s_hat, "erle")?;
    let out = energy(&s_hat.samples);
    if out == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (energy(&y.samples) / out).log10())
}

/// Target-to-interference, -echo and -noise ratios of a rendered scene.
pub fn measure_ratios(rec: &MixtureRecord) -> Result<Ratios> {
    let es = energy(&rec.s.samples);
    if es == 0.0 {
        return Err(Error::ZeroEnergy(format!(
            "{}: target is silent, ratios are undefined",
            rec.spec.scene_id
        )));
    }
    Ok(Ratios {
        sir: energy_ratio_db(es, energy(&rec.z.samples)),
        ser: energy_ratio_db(es, energy(&rec.d.samples)),
        snr: energy_ratio_db(es, energy(&rec.v.samples)),
    })
}

/// Scale-invariant signal-to-distortion ratio in dB. `+inf` when the
/// estimate is a scaled copy of the reference, `-inf` when it is silent or
/// orthogonal to it.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    same_len(reference, estimate, "si_sdr")?;
    let rr = energy(&reference.samples);
    if rr == 0.0 {
        return Err(Error::ZeroEnergy("si_sdr reference is silent".into()));
    }
    let dot: f64 = reference.samples.iter().zip(&estimate.samples).map(|(r, e)| r * e).sum();
    let alpha = dot / rr;
    let mut target_e = 0.0;
    let mut resid_e = 0.0;
    for (r, e) in reference.samples.iter().zip(&estimate.samples) {
        let t = alpha * r;
        target_e += t * t;
        resid_e += (e - t) * (e - t);
    }
    if target_e == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if resid_e <= SI_SDR_EXACT * target_e {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target_e / resid_e).log10())
}

/// Log-spectral distance in dB over the analysis STFT.
pub fn lsd(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    same_len(reference, estimate, "lsd")?;
    let stft = Stft::new();
    let r = stft.analyze(reference)?;
    let e = stft.analyze(estimate)?;
    let mut acc = 0.0;
    for t in 0..r.frames {
        let mut frame = 0.0;
        for f in 0..r.bins {
            let a = r.magnitude(t, f).max(LSD_FLOOR).log10();
            let b = e.magnitude(t, f).max(LSD_FLOOR).log10();
            frame += (a - b) * (a - b);
        }
        acc += frame / r.bins as f64;
    }
    Ok(20.0 * (acc / r.frames as f64).sqrt())
}

/// Something that turns a rendered scene into an estimate of its target.
pub trait Enhancer {
    fn enhance(&mut self, rec: &MixtureRecord) -> Result<Waveform>;
}

/// `s_hat = y`.
pub struct Passthrough;

impl Enhancer for Passthrough {
    fn enhance(&mut self, rec: &MixtureRecord) -> Result<Waveform> {
        Ok(rec.y.clone())
    }
}

/// `s_hat = 0`.
pub struct Silence;

impl Enhancer for Silence {
    fn enhance(&mut self, rec: &MixtureRecord) -> Result<Waveform> {
        Ok(Waveform::zeros(rec.y.len()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene_id: String,
    pub scenario: Scenario,
    pub talk: Talk,
    #[serde(with = "inf_f64::option", default, skip_serializing_if = "Option::is_none")]
    pub erle: Option<f64>,
    #[serde(with = "inf_f64::option", default, skip_serializing_if = "Option::is_none")]
    pub si_sdr: Option<f64>,
    #[serde(with = "inf_f64::option", default, skip_serializing_if = "Option::is_none")]
    pub si_sdr_improvement: Option<f64>,
    #[serde(with = "inf_f64::option", default, skip_serializing_if = "Option::is_none")]
    pub lsd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(with = "inf_f64")]
    pub mean: f64,
    #[serde(with = "inf_f64")]
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub scenes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erle: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_sdr: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_sdr_improvement: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lsd: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    /// How per-scene dB values are aggregated.
    pub aggregation: String,
    pub model: String,
    pub rows: Vec<EvalRow>,
    /// Keyed by talk condition label.
    pub summary: BTreeMap<String, ConditionSummary>,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, rows: Vec<EvalRow>) -> Self {
        let mut summary = BTreeMap::new();
        for talk in Talk::ALL {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.talk == talk).collect();
            if sel.is_empty() {
                continue;
            }
            let col = |f: fn(&EvalRow) -> Option<f64>| {
                Summary::of(&sel.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            summary.insert(
                talk.label().to_string(),
                ConditionSummary {
                    scenes: sel.len(),
                    erle: col(|r| r.erle),
                    si_sdr: col(|r| r.si_sdr),
                    si_sdr_improvement: col(|r| r.si_sdr_improvement),
                    lsd: col(|r| r.lsd),
                },
            );
        }
        Self {
            format_version: REPORT_VERSION,
            aggregation: "mean and median of per-scene dB values".into(),
            model: model.into(),
            rows,
            summary,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Metrics of one scene for its talk condition: ERLE for far-end single
/// talk, SI-SDR (and its gain over the mixture) and LSD otherwise.
pub fn score_scene(rec: &MixtureRecord, s_hat: &Waveform) -> Result<EvalRow> {
    same_len(&rec.y, s_hat, rec.spec.scene_id.as_str())?;
    let mut row = EvalRow {
        scene_id: rec.spec.scene_id.clone(),
        scenario: rec.spec.scenario,
        talk: rec.spec.talk,
        erle: None,
        si_sdr: None,
        si_sdr_improvement: None,
        lsd: None,
    };
    match rec.spec.talk {
        Talk::StFe => row.erle = Some(erle(&rec.y, s_hat)?),
        Talk::Dt | Talk::StNe => {
            let out = si_sdr(&rec.s, s_hat)?;
            let base = si_sdr(&rec.s, &rec.y)?;
            row.si_sdr = Some(out);
            row.si_sdr_improvement = Some(if out == base { 0.0 } else { out - base });
            row.lsd = Some(lsd(&rec.s, s_hat)?);
        }
    }
    Ok(row)
}

/// Render every scene, enhance it and score it.
pub fn evaluate_testset(
    scenes: &[SceneSpec],
    enhancer: &mut dyn Enhancer,
    sources: &mut SourceCache,
    model: &str,
) -> Result<EvalReport> {
    let rows = scenes
        .iter()
        .map(|spec| {
            let rec = render_scene(spec, sources)?;
            let s_hat = enhancer.enhance(&rec)?;
            score_scene(&rec, &s_hat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(model, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec())
    }

    #[test]
    fn erle_examples() {
        let y = w(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(erle(&y, &y).unwrap(), 0.0);
        let tenth = y.scaled(0.1);
        assert!((erle(&y, &tenth).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(erle(&y, &Waveform::zeros(4)).unwrap(), f64::INFINITY);
        assert!(erle(&y, &Waveform::zeros(3)).is_err());
    }

    #[test]
    fn si_sdr_examples() {
        let r = w(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(si_sdr(&r, &r).unwrap(), f64::INFINITY);
        assert_eq!(si_sdr(&r, &r.scaled(2.0)).unwrap(), f64::INFINITY);
        // Orthogonal component of equal energy.
        let e = w(&[2.0, 0.0, 2.0, 0.0]);
        assert!(si_sdr(&r, &e).unwrap().abs() < 1e-12);
        assert!(si_sdr(&Waveform::zeros(4), &r).is_err());
        assert_eq!(si_sdr(&r, &Waveform::zeros(4)).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn lsd_of_identical_signals_is_zero() {
        let x: Vec<f64> = (0..1600).map(|n| (n as f64 * 0.05).sin()).collect();
        assert_eq!(lsd(&w(&x), &w(&x)).unwrap(), 0.0);
        assert!(lsd(&w(&x), &Waveform::zeros(1600)).unwrap() > 50.0);
    }

    #[test]
    fn summary_median_and_mean() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 4.0);
        assert!(Summary::of(&[]).is_none());
    }
}
