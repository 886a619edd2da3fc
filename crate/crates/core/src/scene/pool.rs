use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceInfo {
    pub path: PathBuf,
    /// Length in samples.
    pub len: usize,
}

impl SourceInfo {
    /// Reads only the WAV header.
    pub fn probe(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let reader = hound::WavReader::open(&path)
            .map_err(|e| Error::Pool(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE {
            return Err(Error::Pool(format!(
                "{}: need mono {SAMPLE_RATE} Hz, found {} channel(s) at {} Hz",
                path.display(),
                spec.channels,
                spec.sample_rate
            )));
        }
        let len = reader.duration() as usize;
        if len == 0 {
            return Err(Error::Pool(format!("{} has no samples", path.display())));
        }
        Ok(Self { path, len })
    }
}

/// Speech files grouped by speaker plus a noise list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourcePool {
    pub speakers: BTreeMap<String, Vec<SourceInfo>>,
    pub noise: Vec<SourceInfo>,
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let p = entry.map_err(|e| Error::file(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl SourcePool {
    /// Pool laid out as `root/speech/<speaker>/*.wav` and `root/noise/*.wav`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        Self::from_dirs(root.join("speech"), root.join("noise"))
    }

    pub fn from_dirs(speech: impl AsRef<Path>, noise: impl AsRef<Path>) -> Result<Self> {
        let speech = speech.as_ref();
        let mut speakers = BTreeMap::new();
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(speech)
            .map_err(|e| Error::file(speech, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            let files = wav_files(&d)?
                .into_iter()
                .map(SourceInfo::probe)
                .collect::<Result<Vec<_>>>()?;
            if !files.is_empty() {
                let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                speakers.insert(name, files);
            }
        }
        let noise = wav_files(noise.as_ref())?
            .into_iter()
            .map(SourceInfo::probe)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { speakers, noise })
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers.len()
    }
}
