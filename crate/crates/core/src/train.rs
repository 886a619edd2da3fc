//! Training loop: example preparation, plateau learning-rate schedule,
//! best-validation checkpointing and the per-epoch run record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamState, Gradients, Tape};
use crate::dsp::{self, ComplexSpectrogram, FeatureBlock, Stft, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::Enhancer;
use crate::model::{checkpoint, spectral_loss, Conditioning, Gtcnn, ModelConfig, Selection};
use crate::scene::{render_scene, MixtureRecord, Scenario, SceneSpec, SourceCache};
use crate::speaker::{EmbeddingCache, EmbeddingProvider, Registry, StatsExtractor};

pub const RUN_RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scenario: Option<Scenario>,
    pub lr: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub batch_size: usize,
    /// Segment length in seconds; scenes shorter than this are used whole.
    pub segment_s: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Share of the training manifest held out when no validation manifest is given.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            scenario: None,
            lr: 1e-4,
            plateau_patience: 2,
            lr_factor: 0.5,
            batch_size: 4,
            segment_s: 8.0,
            max_epochs: 20,
            seed: 0,
            shuffle: false,
            val_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::invalid("lr factor must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 {
            return Err(Error::invalid("batch size and patience must be positive"));
        }
        if !(self.segment_s.is_finite() && self.segment_s > 0.0) {
            return Err(Error::invalid("segment length must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate once the validation loss has
/// failed to go below its best value for `patience` epochs in a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Record one epoch's validation loss; returns whether it is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        match self.best {
            Some(b) if val >= b => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
                false
            }
            _ => {
                self.best = Some(val);
                self.bad_epochs = 0;
                true
            }
        }
    }
}

/// Raw speaker embeddings for scenes, looked up through the enrollment
/// registry.
pub struct Conditioner {
    pub selection: Selection,
    registry: Option<Registry>,
    cache: EmbeddingCache,
    provider: Box<dyn EmbeddingProvider>,
}

impl Conditioner {
    pub fn none() -> Self {
        Self {
            selection: Selection::None,
            registry: None,
            cache: EmbeddingCache::in_memory(),
            provider: Box::new(StatsExtractor::new()),
        }
    }

    /// Personalized modes need a registry; it is ignored for `Selection::None`.
    pub fn new(selection: Selection, registry: Option<Registry>, cache: EmbeddingCache) -> Result<Self> {
        if selection.is_personalized() && registry.is_none() {
            return Err(Error::Selection(format!(
                "mode {selection} needs an enrollment registry"
            )));
        }
        Ok(Self {
            selection,
            registry,
            cache,
            provider: Box::new(StatsExtractor::new()),
        })
    }

    pub fn with_provider(mut self, provider: Box<dyn EmbeddingProvider>) -> Self {
        self.provider = provider;
        self
    }

    fn embedding(&mut self, speaker: &str) -> Result<Vec<f64>> {
        let registry = self
            .registry
            .as_ref()
            .ok_or_else(|| Error::Selection("no enrollment registry".into()))?;
        self.cache.get_or_extract(speaker, registry, self.provider.as_ref())
    }

    pub fn for_speakers(&mut self, near: &str, far: &str) -> Result<Conditioning> {
        Ok(Conditioning {
            near: if self.selection.uses_near() { Some(self.embedding(near)?) } else { None },
            far: if self.selection.uses_far() { Some(self.embedding(far)?) } else { None },
        })
    }

    pub fn for_scene(&mut self, spec: &SceneSpec) -> Result<Conditioning> {
        self.for_speakers(&spec.near.speaker, &spec.far.speaker)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.cache.flush()
    }
}

/// One training segment with its features, target spectrum and conditioning.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub features: FeatureBlock,
    pub clean: ComplexSpectrogram,
    pub cond: Conditioning,
}

fn slice(w: &Waveform, start: usize, len: usize) -> Waveform {
    Waveform::new(w.samples[start..start + len].to_vec())
}

/// Consecutive segments of `segment_s` seconds cut from a rendered scene.
pub fn segment_record(rec: &MixtureRecord, segment_s: f64, cond: &Conditioning) -> Result<Vec<Example>> {
    let stft = Stft::new();
    let n = rec.y.len();
    let seg = ((segment_s * SAMPLE_RATE as f64).round() as usize).min(n);
    let count = (n / seg.max(1)).max(1);
    (0..count)
        .map(|k| {
            let (y, x, s) = (slice(&rec.y, k * seg, seg), slice(&rec.x, k * seg, seg), slice(&rec.s, k * seg, seg));
            Ok(Example {
                id: if count == 1 { rec.spec.scene_id.clone() } else { format!("{}#{k}", rec.spec.scene_id) },
                features: dsp::make_features_with(&stft, &y, &x)?,
                clean: stft.analyze(&s)?,
                cond: cond.clone(),
            })
        })
        .collect()
}

pub fn prepare_examples(
    scenes: &[SceneSpec],
    sources: &mut SourceCache,
    conditioner: &mut Conditioner,
    segment_s: f64,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for spec in scenes {
        let rec = render_scene(spec, sources)?;
        let cond = conditioner.for_scene(spec)?;
        out.extend(segment_record(&rec, segment_s, &cond)?);
    }
    Ok(out)
}

/// Seeded hold-out: returns `(train, validation)`.
pub fn split_validation<S>(scenes: Vec<S>, fraction: f64, seed: u64) -> (Vec<S>, Vec<S>) {
    let n_val = (scenes.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= scenes.len() {
        return (scenes, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed0f7a11);
    let picked: std::collections::BTreeSet<usize> =
        rand::seq::index::sample(&mut rng, scenes.len(), n_val).into_iter().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in scenes.into_iter().enumerate() {
        if picked.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub wall_s: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub config: TrainConfig,
    pub train_examples: usize,
    pub val_examples: usize,
    /// Mean training loss before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn loss_trace(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!("{what} is not finite ({v})")))
    }
}

/// Mean loss over `examples` without recording gradients.
pub fn mean_loss(model: &Gtcnn<f32>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &ex.features, &ex.cond)?;
        let loss = spectral_loss(&mut tape, &out, &ex.clean)?;
        total += tape.scalar_value(loss) as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Loss and gradient of one example.
pub fn example_gradient(model: &Gtcnn<f32>, ex: &Example) -> Result<(f64, Gradients<f32>)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &ex.features, &ex.cond)?;
    let loss = spectral_loss(&mut tape, &out, &ex.clean)?;
    let value = tape.scalar_value(loss) as f64;
    Ok((value, tape.backward(loss)?))
}

/// Train `model` in place. The checkpoint of the best validation epoch is
/// written to `out_dir/best.ckpt` when a directory is given. Without
/// validation examples the epoch's training loss stands in.
pub fn train(
    model: &mut Gtcnn<f32>,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunRecord> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if model.config.selection != cfg.model.selection {
        return Err(Error::Selection(format!(
            "model mode {} differs from configured mode {}",
            model.config.selection, cfg.model.selection
        )));
    }
    let ckpt_path = out_dir.map(|d| d.join("best.ckpt"));
    let initial = check_finite(mean_loss(model, train_set)?, "initial training loss")?;
    let mut state = AdamState::new(&model.params);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.plateau_patience);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = RunRecord {
        format_version: RUN_RECORD_VERSION,
        config: cfg.clone(),
        train_examples: train_set.len(),
        val_examples: val_set.len(),
        initial_train_loss: initial,
        epochs: Vec::new(),
        best_epoch: None,
        checkpoint: None,
    };

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = sched.lr;
        let adam = Adam::with_lr(lr);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Gradients::empty(model.params.len());
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let (loss, g) = example_gradient(model, &train_set[i])?;
                epoch_loss += check_finite(loss, "training loss")?;
                acc.add_scaled(&g, scale);
            }
            adam.step(&mut model.params, &acc, &mut state)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            check_finite(mean_loss(model, val_set)?, "validation loss")?
        };
        let improved = sched.observe(val_loss);
        if improved {
            record.best_epoch = Some(epoch);
            if let Some(p) = &ckpt_path {
                checkpoint::save(model, p)?;
                record.checkpoint = Some(p.clone());
            }
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_s: t0.elapsed().as_secs_f64(),
            improved,
        };
        on_epoch(&rec);
        record.epochs.push(rec);
    }
    Ok(record)
}

/// A trained model plus the conditioning lookup it needs.
pub struct ModelEnhancer {
    pub model: Gtcnn<f32>,
    pub conditioner: Conditioner,
}

impl ModelEnhancer {
    pub fn new(model: Gtcnn<f32>, conditioner: Conditioner) -> Result<Self> {
        if model.config.selection != conditioner.selection {
            return Err(Error::Selection(format!(
                "checkpoint mode {} but conditioning prepared for {}",
                model.config.selection, conditioner.selection
            )));
        }
        Ok(Self { model, conditioner })
    }
}

impl Enhancer for ModelEnhancer {
    fn enhance(&mut self, rec: &MixtureRecord) -> Result<Waveform> {
        let cond = self.conditioner.for_scene(&rec.spec)?;
        self.model.enhance(&rec.y, &rec.x, &cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_halves_after_two_bad_epochs() {
        let mut s = PlateauScheduler::new(1e-4, 0.5, 2);
        assert!(s.observe(1.0));
        assert!(!s.observe(1.0));
        assert_eq!(s.lr, 1e-4);
        assert!(!s.observe(1.2));
        assert_eq!(s.lr, 5e-5);
        assert!(s.observe(0.5));
        assert!(!s.observe(0.7));
        assert!(!s.observe(0.6));
        assert_eq!(s.lr, 2.5e-5);
    }

    #[test]
    fn improvement_resets_the_count() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2);
        for v in [3.0, 3.5, 2.0, 2.5, 1.0, 1.5, 0.5] {
            s.observe(v);
        }
        assert_eq!(s.lr, 1.0);
    }

    #[test]
    fn validation_split_is_seeded_and_disjoint() {
        let items: Vec<usize> = (0..20).collect();
        let (train, val) = split_validation(items.clone(), 0.1, 3);
        assert_eq!((train.len(), val.len()), (18, 2));
        assert_eq!(split_validation(items.clone(), 0.1, 3), (train.clone(), val.clone()));
        let mut all = [train, val].concat();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_validation(vec![1, 2, 3], 0.1, 0).1, Vec::<i32>::new());
    }

    #[test]
    fn personalized_modes_need_a_registry() {
        assert!(Conditioner::new(Selection::Es, None, EmbeddingCache::in_memory()).is_err());
        assert!(Conditioner::new(Selection::None, None, EmbeddingCache::in_memory()).is_ok());
    }
}
