//! Full-duplex scene synthesis: rooms, echo paths and ratio-exact mixing.

mod mix;
mod pool;
mod rir;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mix::{
    convolve, delay_samples, mix_at_ratios, render_echo, Gains, Mixture, Ratios, MAX_ECHO_DELAY_MS,
};
pub use pool::{SourceInfo, SourcePool};
pub use rir::{
    estimate_rt60, schroeder_edc, simulate_rir, ImageSource, RoomSpec, SPEED_OF_SOUND,
    WALL_CLEARANCE,
};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav, WavEncoding};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    D1,
    D2,
    D3,
}

/// Sampling ranges in dB; `sir: None` means no interferer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioRanges {
    pub sir: Option<(f64, f64)>,
    pub ser: (f64, f64),
    pub snr: (f64, f64),
}

impl Scenario {
    pub fn ranges(self) -> ScenarioRanges {
        match self {
            Scenario::D1 => ScenarioRanges {
                sir: None,
                ser: (-10.0, 20.0),
                snr: (-5.0, 40.0),
            },
            Scenario::D2 => ScenarioRanges {
                sir: Some((0.0, 20.0)),
                ser: (-10.0, 20.0),
                snr: (-5.0, 40.0),
            },
            Scenario::D3 => ScenarioRanges {
                sir: Some((0.0, 20.0)),
                ser: (-10.0, 20.0),
                snr: (15.0, 45.0),
            },
        }
    }

    /// Distinct speakers a scene needs (near, far and maybe interferer).
    pub fn speakers_needed(self) -> usize {
        if self.ranges().sir.is_some() {
            3
        } else {
            2
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D1" => Ok(Scenario::D1),
            "D2" => Ok(Scenario::D2),
            "D3" => Ok(Scenario::D3),
            _ => Err(Error::invalid(format!("unknown scenario {s:?} (D1, D2, D3)"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Who is talking in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Talk {
    /// Double talk: near-end target and far-end echo together.
    #[serde(rename = "DT")]
    Dt,
    /// Near-end single talk: the far end is silent, so there is no echo.
    #[serde(rename = "ST-NE")]
    StNe,
    /// Far-end single talk: the target is silent; ratios are set with the
    /// target present and the target is removed afterwards.
    #[serde(rename = "ST-FE")]
    StFe,
}

impl Talk {
    pub const ALL: [Talk; 3] = [Talk::Dt, Talk::StNe, Talk::StFe];

    pub fn label(self) -> &'static str {
        match self {
            Talk::Dt => "DT",
            Talk::StNe => "ST-NE",
            Talk::StFe => "ST-FE",
        }
    }
}

impl std::str::FromStr for Talk {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "DT" => Ok(Talk::Dt),
            "ST-NE" => Ok(Talk::StNe),
            "ST-FE" => Ok(Talk::StFe),
            _ => Err(Error::invalid(format!("unknown talk condition {s:?} (DT, ST-NE, ST-FE)"))),
        }
    }
}

impl std::fmt::Display for Talk {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One source excerpt: file, owning speaker and start sample. Sources are
/// looped from `offset` to fill the scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub speaker: String,
    pub path: PathBuf,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub format_version: u32,
    pub scene_id: String,
    pub scenario: Scenario,
    pub talk: Talk,
    pub seed: u64,
    pub ratios: Ratios,
    pub echo_delay_ms: f64,
    pub duration_s: f64,
    pub room: RoomSpec,
    pub near: SourceRef,
    pub far: SourceRef,
    pub interferer: Option<SourceRef>,
    pub noise: SourceRef,
}

impl SceneSpec {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.scenario.ranges();
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        let bad = |what: &str, v: f64| {
            Err(Error::invalid(format!(
                "{}: {what} = {v} outside the {} range",
                self.scene_id, self.scenario
            )))
        };
        match (r.sir, &self.interferer) {
            (None, None) if self.ratios.sir == f64::INFINITY => {}
            (Some(range), Some(_)) if within(self.ratios.sir, range) => {}
            _ => return bad("sir", self.ratios.sir),
        }
        let echo_off = self.talk == Talk::StNe;
        if echo_off {
            if self.ratios.ser != f64::INFINITY {
                return bad("ser", self.ratios.ser);
            }
        } else if !within(self.ratios.ser, r.ser) {
            return bad("ser", self.ratios.ser);
        }
        if !within(self.ratios.snr, r.snr) {
            return bad("snr", self.ratios.snr);
        }
        if !(0.0..=MAX_ECHO_DELAY_MS).contains(&self.echo_delay_ms) {
            return bad("echo delay", self.echo_delay_ms);
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration", self.duration_s);
        }
        let mut ids = vec![&self.near.speaker, &self.far.speaker];
        ids.extend(self.interferer.as_ref().map(|z| &z.speaker));
        for i in 0..ids.len() {
            if ids[i + 1..].contains(&ids[i]) {
                return Err(Error::invalid(format!(
                    "{}: speaker {} appears in two roles",
                    self.scene_id, ids[i]
                )));
            }
        }
        self.room.validate()
    }
}

/// Rendered scene: every component, their sum and the measured ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub spec: SceneSpec,
    pub y: Waveform,
    pub s: Waveform,
    pub x: Waveform,
    pub z: Waveform,
    pub d: Waveform,
    pub v: Waveform,
    /// Ratios measured right after scaling (before an ST-FE target is removed).
    pub achieved: Ratios,
}

/// Scene sampling knobs not fixed by the scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub duration_s: f64,
    pub talk: Talk,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            duration_s: 8.0,
            talk: Talk::Dt,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Random shoebox with the scenario geometry ranges.
pub fn sample_room(rng: &mut ChaCha8Rng) -> RoomSpec {
    let width = uniform(rng, (5.0, 8.0));
    let height = uniform(rng, (3.0, 4.0));
    let depth = uniform(rng, (3.0, 5.0));
    let rt60 = uniform(rng, (0.2, 0.7));
    let margin = 0.5;
    let point = |rng: &mut ChaCha8Rng| {
        [
            uniform(rng, (margin, width - margin)),
            uniform(rng, (margin, depth - margin)),
            uniform(rng, (margin, height - margin)),
        ]
    };
    let (mut source_pos, mut mic_pos);
    loop {
        source_pos = point(rng);
        mic_pos = point(rng);
        let d2: f64 = source_pos.iter().zip(&mic_pos).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 >= 1.0 {
            break;
        }
    }
    RoomSpec {
        width,
        height,
        depth,
        rt60,
        source_pos,
        mic_pos,
        seed: rng.gen(),
    }
}

/// Draw one scene description; deterministic in `seed`.
pub fn sample_scene(
    scenario: Scenario,
    pool: &SourcePool,
    seed: u64,
    opts: &SceneOptions,
) -> Result<SceneSpec> {
    let speakers: Vec<&String> = pool.speakers.keys().collect();
    let needed = scenario.speakers_needed();
    if speakers.len() < needed {
        return Err(Error::Pool(format!(
            "scenario {scenario} needs {needed} distinct speakers, pool has {}",
            speakers.len()
        )));
    }
    if pool.noise.is_empty() {
        return Err(Error::Pool("noise pool is empty".into()));
    }
    if !(opts.duration_s.is_finite() && opts.duration_s > 0.0) {
        return Err(Error::invalid("scene duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, speakers.len(), needed);
    let pick = |rng: &mut ChaCha8Rng, speaker: &str| {
        let files = &pool.speakers[speaker];
        let f = &files[rng.gen_range(0..files.len())];
        SourceRef {
            speaker: speaker.to_string(),
            path: f.path.clone(),
            offset: rng.gen_range(0..f.len),
        }
    };
    let near = pick(&mut rng, speakers[picked.index(0)]);
    let far = pick(&mut rng, speakers[picked.index(1)]);
    let interferer = (needed == 3).then(|| pick(&mut rng, speakers[picked.index(2)]));
    let n = &pool.noise[rng.gen_range(0..pool.noise.len())];
    let noise = SourceRef {
        speaker: "noise".into(),
        path: n.path.clone(),
        offset: rng.gen_range(0..n.len),
    };

    let r = scenario.ranges();
    let sir = r.sir.map_or(f64::INFINITY, |range| uniform(&mut rng, range));
    let ser = uniform(&mut rng, r.ser);
    let snr = uniform(&mut rng, r.snr);
    let echo_delay_ms = uniform(&mut rng, (0.0, MAX_ECHO_DELAY_MS));
    let room = sample_room(&mut rng);
    let spec = SceneSpec {
        format_version: MANIFEST_VERSION,
        scene_id: format!("{}-{seed:016x}", scenario.to_string().to_lowercase()),
        scenario,
        talk: opts.talk,
        seed,
        ratios: Ratios {
            sir,
            ser: if opts.talk == Talk::StNe { f64::INFINITY } else { ser },
            snr,
        },
        echo_delay_ms,
        duration_s: opts.duration_s,
        room,
        near,
        far,
        interferer,
        noise,
    };
    spec.validate()?;
    Ok(spec)
}

/// How talk conditions are assigned across a manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TalkPlan {
    Only(Talk),
    /// DT, ST-NE, ST-FE in turn.
    Cycle,
}

impl TalkPlan {
    pub fn talk(self, index: usize) -> Talk {
        match self {
            TalkPlan::Only(t) => t,
            TalkPlan::Cycle => Talk::ALL[index % 3],
        }
    }
}

/// Sample `n` scenes with ids `{scenario}-{index}`; per-scene seeds are
/// drawn from `seed`.
pub fn sample_scenes(
    n: usize,
    scenario: Scenario,
    pool: &SourcePool,
    seed: u64,
    duration_s: f64,
    talk: TalkPlan,
) -> Result<Vec<SceneSpec>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let opts = SceneOptions {
                duration_s,
                talk: talk.talk(i),
            };
            let mut spec = sample_scene(scenario, pool, master.gen(), &opts)?;
            spec.scene_id = format!("{}-{i:05}", scenario.to_string().to_lowercase());
            Ok(spec)
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, scenes: &[SceneSpec]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&out).map_err(|e| Error::file(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SceneSpec>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut scenes = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: SceneSpec = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        if spec.format_version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "{}:{}: manifest format version {}, expected {MANIFEST_VERSION}",
                path.display(),
                i + 1,
                spec.format_version
            )));
        }
        spec.validate()?;
        scenes.push(spec);
    }
    Ok(scenes)
}

/// Sample `n` scenes and write them as a JSON-lines manifest.
pub fn build_manifest(
    path: impl AsRef<Path>,
    n: usize,
    scenario: Scenario,
    pool: &SourcePool,
    seed: u64,
    duration_s: f64,
    talk: TalkPlan,
) -> Result<Vec<SceneSpec>> {
    let scenes = if n == 0 {
        Vec::new()
    } else {
        sample_scenes(n, scenario, pool, seed, duration_s, talk)?
    };
    write_manifest(path, &scenes)?;
    Ok(scenes)
}

/// Loaded source files, keyed by path.
#[derive(Debug, Default)]
pub struct SourceCache {
    files: HashMap<PathBuf, Waveform>,
}

impl SourceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, path: &Path) -> Result<&Waveform> {
        if !self.files.contains_key(path) {
            let w = read_wav(path)?;
            if w.is_empty() {
                return Err(Error::Pool(format!("{} is empty", path.display())));
            }
            self.files.insert(path.to_path_buf(), w);
        }
        Ok(&self.files[path])
    }

    /// `n` samples of the source, looping from its offset.
    pub fn excerpt(&mut self, src: &SourceRef, n: usize) -> Result<Waveform> {
        let w = self.get(&src.path)?;
        let len = w.len();
        Ok(Waveform::new(
            (0..n).map(|i| w.samples[(src.offset + i) % len]).collect(),
        ))
    }
}

/// Render a scene from its description and the source files it names.
pub fn render_scene(spec: &SceneSpec, sources: &mut SourceCache) -> Result<MixtureRecord> {
    spec.validate()?;
    let n = spec.n_samples();
    let s = sources.excerpt(&spec.near, n)?;
    let x = match spec.talk {
        Talk::StNe => Waveform::zeros(n),
        _ => sources.excerpt(&spec.far, n)?,
    };
    let z = match &spec.interferer {
        Some(src) => sources.excerpt(src, n)?,
        None => Waveform::zeros(n),
    };
    let v = sources.excerpt(&spec.noise, n)?;

    let h = simulate_rir(&spec.room)?;
    // Unit direct-path gain; the echo level is set by the SER anyway.
    let h = h.scaled(spec.room.direct_distance());
    let d = render_echo(&x, &h, spec.echo_delay_ms)?;
    let m = mix_at_ratios(&s, &z, &d, &v, &spec.ratios)?;

    let (s, y) = match spec.talk {
        Talk::StFe => {
            let silent = Waveform::zeros(n);
            let y = mix::sum4(&silent, &m.z, &m.d, &m.v);
            (silent, y)
        }
        _ => (m.s, m.y),
    };
    Ok(MixtureRecord {
        spec: spec.clone(),
        y,
        s,
        x,
        z: m.z,
        d: m.d,
        v: m.v,
        achieved: m.achieved,
    })
}

/// Write `{scene_id}.{role}.wav` for every signal of a record.
pub fn write_scene_wavs(rec: &MixtureRecord, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for (role, w) in [
        ("y", &rec.y),
        ("s", &rec.s),
        ("x", &rec.x),
        ("z", &rec.z),
        ("d", &rec.d),
        ("v", &rec.v),
    ] {
        let p = dir.join(format!("{}.{role}.wav", rec.spec.scene_id));
        write_wav(&p, w, WavEncoding::Float32)?;
        paths.push(p);
    }
    Ok(paths)
}
