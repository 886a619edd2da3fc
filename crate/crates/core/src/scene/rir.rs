//! Shoebox image-source room impulse responses and Schroeder decay analysis.

use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Minimum distance between a transducer and any wall.
pub const WALL_CLEARANCE: f64 = 0.1;
const CALIBRATION_STEPS: usize = 6;

/// Rectangular room; `x` spans the width, `y` the depth and `z` the height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub width: f64,
    pub height: f64,
    pub depth: f64,
    pub rt60: f64,
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    pub seed: u64,
}

impl RoomSpec {
    pub fn dims(&self) -> [f64; 3] {
        [self.width, self.depth, self.height]
    }

    pub fn volume(&self) -> f64 {
        self.width * self.depth * self.height
    }

    pub fn surface(&self) -> f64 {
        2.0 * (self.width * self.depth + self.width * self.height + self.depth * self.height)
    }

    pub fn direct_distance(&self) -> f64 {
        dist(self.source_pos, self.mic_pos)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if dims.iter().any(|d| !d.is_finite() || *d <= 2.0 * WALL_CLEARANCE) {
            return Err(Error::Geometry(format!("room dimensions {dims:?} are not usable")));
        }
        if !(self.rt60.is_finite() && self.rt60 > 0.0) {
            return Err(Error::Geometry(format!("rt60 must be positive, got {}", self.rt60)));
        }
        for (what, p) in [("source", self.source_pos), ("microphone", self.mic_pos)] {
            for (axis, (&c, &l)) in p.iter().zip(&dims).enumerate() {
                if !(c >= WALL_CLEARANCE && c <= l - WALL_CLEARANCE) {
                    return Err(Error::Geometry(format!(
                        "{what} coordinate {axis} = {c} m is within {WALL_CLEARANCE} m of a wall"
                    )));
                }
            }
        }
        if self.direct_distance() == 0.0 {
            return Err(Error::Geometry("source and microphone coincide".into()));
        }
        Ok(())
    }

    /// Uniform wall reflection coefficient reproducing `rt60`.
    ///
    /// Inverts Eyring's formula `T = 24 ln10 V / (-c S ln(1 - a))`.
    pub fn reflection(&self) -> f64 {
        let k = 24.0 * std::f64::consts::LN_10 * self.volume()
            / (SPEED_OF_SOUND * self.surface() * self.rt60);
        // 1 - a = exp(-k); amplitude coefficient is its square root.
        (-k / 2.0).exp()
    }

    /// Absorption from Sabine's formula, for reference.
    pub fn sabine_absorption(&self) -> f64 {
        24.0 * std::f64::consts::LN_10 * self.volume() / (SPEED_OF_SOUND * self.surface() * self.rt60)
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Image-source renderer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    /// Amplitude reflection coefficient shared by all walls.
    pub reflection: f64,
    pub length: usize,
    /// Highest total reflection count included; unlimited when `None`.
    pub max_order: Option<usize>,
    pub sample_rate: u32,
}

impl ImageSource {
    /// Settings derived from the room: Eyring absorption and a response
    /// `1.25 * rt60` long, covering every image that arrives within it.
    pub fn for_room(room: &RoomSpec) -> Self {
        Self {
            reflection: room.reflection(),
            length: (1.25 * room.rt60 * SAMPLE_RATE as f64).ceil() as usize,
            max_order: None,
            sample_rate: SAMPLE_RATE,
        }
    }

    /// Like [`ImageSource::for_room`], with the reflection coefficient
    /// refined until the measured decay time is within `tol` (relative)
    /// of the target. The late decay of a shoebox is slower than the
    /// diffuse-field formula assumes, so the Eyring value alone overshoots.
    pub fn calibrated(room: &RoomSpec, tol: f64) -> Result<(Self, Waveform)> {
        let mut is = Self::for_room(room);
        let mut h = is.render(room)?;
        for _ in 0..CALIBRATION_STEPS {
            let measured = match estimate_rt60(&h) {
                Ok(t) => t,
                Err(_) => break,
            };
            if ((measured - room.rt60) / room.rt60).abs() <= tol {
                break;
            }
            // Decay rate in dB/s is proportional to -ln(reflection).
            let ln_b = is.reflection.ln() * measured / room.rt60;
            is.reflection = ln_b.exp().clamp(0.0, 1.0 - 1e-9);
            h = is.render(room)?;
        }
        Ok((is, h))
    }

    pub fn render(&self, room: &RoomSpec) -> Result<Waveform> {
        room.validate()?;
        if !(0.0..=1.0).contains(&self.reflection) {
            return Err(Error::invalid("reflection coefficient must lie in [0, 1]"));
        }
        let fs = self.sample_rate as f64;
        let max_dist = self.length as f64 / fs * SPEED_OF_SOUND;
        let dims = room.dims();

        // Per axis: (offset from the microphone, reflection count) of every
        // image coordinate within reach.
        let axes: Vec<Vec<(f64, usize)>> = (0..3)
            .map(|a| {
                let l = dims[a];
                let n_max = (max_dist / (2.0 * l)).ceil() as i64 + 1;
                let mut v = Vec::new();
                for n in -n_max..=n_max {
                    for q in 0..=1i64 {
                        let pos = (1 - 2 * q) as f64 * room.source_pos[a] + 2.0 * n as f64 * l;
                        let off = pos - room.mic_pos[a];
                        let refl = ((n - q).abs() + n.abs()) as usize;
                        if off.abs() <= max_dist {
                            v.push((off, refl));
                        }
                    }
                }
                v
            })
            .collect();

        let mut h = vec![0.0; self.length];
        let limit = self.max_order.unwrap_or(usize::MAX);
        let r2 = max_dist * max_dist;
        for &(dx, rx) in &axes[0] {
            let dx2 = dx * dx;
            if rx > limit {
                continue;
            }
            for &(dy, ry) in &axes[1] {
                let dxy2 = dx2 + dy * dy;
                if dxy2 > r2 || rx + ry > limit {
                    continue;
                }
                for &(dz, rz) in &axes[2] {
                    let d2 = dxy2 + dz * dz;
                    let order = rx + ry + rz;
                    if d2 > r2 || order > limit {
                        continue;
                    }
                    let d = d2.sqrt();
                    let idx = (d / SPEED_OF_SOUND * fs).round() as usize;
                    if idx < h.len() {
                        h[idx] += self.reflection.powi(order as i32) / d;
                    }
                }
            }
        }
        Ok(Waveform {
            samples: h,
            sample_rate: self.sample_rate,
        })
    }
}

/// Impulse response of `room` at 16 kHz whose Schroeder decay time is
/// within 2% of `room.rt60`.
pub fn simulate_rir(room: &RoomSpec) -> Result<Waveform> {
    Ok(ImageSource::calibrated(room, 0.02)?.1)
}

/// Schroeder backward-integrated energy decay in dB relative to the total.
pub fn schroeder_edc(h: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut edc: Vec<f64> = h
        .iter()
        .rev()
        .map(|v| {
            acc += v * v;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|e| if total > 0.0 && *e > 0.0 { 10.0 * (e / total).log10() } else { f64::NEG_INFINITY })
        .collect()
}

/// Reverberation time from a least-squares line through the decay curve
/// between -5 and -35 dB, extrapolated to -60 dB.
pub fn estimate_rt60(h: &Waveform) -> Result<f64> {
    let edc = schroeder_edc(&h.samples);
    let fs = h.sample_rate as f64;
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter(|(_, e)| **e <= -5.0 && **e >= -35.0)
        .map(|(i, e)| (i as f64 / fs, *e))
        .collect();
    if pts.len() < 2 || edc.iter().all(|e| *e > -35.0) {
        return Err(Error::invalid("decay curve does not reach -35 dB"));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let me = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|(t, e)| (t - mt) * (e - me)).sum();
    let var: f64 = pts.iter().map(|(t, _)| (t - mt) * (t - mt)).sum();
    let slope = cov / var;
    if slope >= 0.0 {
        return Err(Error::invalid("decay curve is not decaying"));
    }
    Ok(-60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(rt60: f64) -> RoomSpec {
        RoomSpec {
            width: 6.0,
            height: 3.5,
            depth: 4.0,
            rt60,
            source_pos: [1.5, 1.2, 1.4],
            mic_pos: [4.1, 2.9, 1.6],
            seed: 0,
        }
    }

    #[test]
    fn anechoic_room_is_a_single_delayed_impulse() {
        let r = room(0.4);
        let h = ImageSource {
            reflection: 0.0,
            length: 800,
            max_order: Some(0),
            sample_rate: SAMPLE_RATE,
        }
        .render(&r)
        .unwrap();
        let d = r.direct_distance();
        let at = (d / SPEED_OF_SOUND * 16000.0).round() as usize;
        for (i, v) in h.samples.iter().enumerate() {
            if i == at {
                assert!((v - 1.0 / d).abs() < 1e-15);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn measured_rt60_matches_target() {
        let r = room(0.4);
        let h = simulate_rir(&r).unwrap();
        assert!(h.len() >= 6400);
        let t = estimate_rt60(&h).unwrap();
        assert!((0.392..=0.408).contains(&t), "{t}");
        let plain = ImageSource::for_room(&r).render(&r).unwrap();
        assert!(estimate_rt60(&plain).unwrap() > 0.4);
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = room(0.3);
        assert_eq!(simulate_rir(&r).unwrap(), simulate_rir(&r).unwrap());
    }

    #[test]
    fn wall_clearance_is_enforced() {
        let mut r = room(0.3);
        r.mic_pos[2] = 0.05;
        assert!(matches!(simulate_rir(&r), Err(Error::Geometry(_))));
        let mut r = room(0.3);
        r.source_pos[0] = 6.5;
        assert!(simulate_rir(&r).is_err());
    }

    #[test]
    fn eyring_absorption_is_below_sabine() {
        let r = room(0.3);
        let a_eyring = 1.0 - r.reflection().powi(2);
        assert!(a_eyring < r.sabine_absorption());
    }
}
