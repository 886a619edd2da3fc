use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Selection, ENCODER_LAYERS};
use super::layers::{Conv, Dense, GatedConv, GatedTConv, Init, SgtcnBlock};
use crate::autodiff::{ConvGeom, NormStats, ParamStore, Real, Tape, Tensor, Var};
use crate::dsp::{self, ComplexSpectrogram, FeatureBlock, Stft, Waveform, FEATURE_CHANNELS, N_BINS};
use crate::error::{Error, Result};

/// Raw (extractor-output) speaker embeddings handed to the network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub near: Option<Vec<f64>>,
    pub far: Option<Vec<f64>>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn near(v: Vec<f64>) -> Self {
        Self {
            near: Some(v),
            far: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<GatedConv>,
    skips: Vec<Conv>,
    proj_near: Option<Dense>,
    proj_far: Option<Dense>,
    blocks: Vec<SgtcnBlock>,
    real_decoder: Vec<GatedTConv>,
    imag_decoder: Vec<GatedTConv>,
    dense_re: Dense,
    dense_im: Dense,
}

/// Gated temporal convolutional network, optionally conditioned on speaker
/// embeddings.
#[derive(Debug, Clone)]
pub struct Gtcnn<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Dense-layer outputs `W`, `[T, 1, 161]` each.
    pub raw_re: Var,
    pub raw_im: Var,
    /// Decompressed estimate `|W| * W`, `[T, 1, 161]` each.
    pub est_re: Var,
    pub est_im: Var,
    pub frames: usize,
}

/// Trainable-scalar totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub modules: BTreeMap<String, usize>,
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, n) in &self.modules {
            writeln!(f, "{name:<16} {n:>10}")?;
        }
        write!(f, "{:<16} {:>10} ({:.2}M)", "total", self.total, self.total as f64 / 1e6)
    }
}

fn build_layout<T: Real>(config: &ModelConfig, init: &mut Init<'_, T>) -> Result<Layout> {
    config.validate()?;
    let c = config.channels;
    let ladder = config.freq_ladder()?;
    let geom = ConvGeom {
        kt: config.kernel[0],
        kf: config.kernel[1],
        stride_f: config.stride_f,
        dilation_t: 1,
    };
    let encoder = (0..ENCODER_LAYERS)
        .map(|i| {
            let cin = if i == 0 { FEATURE_CHANNELS } else { c };
            GatedConv::new(init, &format!("encoder.gconv{i}"), cin, c, geom)
        })
        .collect::<Result<Vec<_>>>()?;
    let skips = (0..ENCODER_LAYERS)
        .map(|i| Conv::new(init, &format!("skip.pconv{i}"), c, c, ConvGeom::pointwise()))
        .collect::<Result<Vec<_>>>()?;
    let sel = config.selection;
    let proj_near = if sel.uses_near() {
        Some(Dense::new(init, "speaker.proj_near", config.raw_embed_dim, config.embed_dim)?)
    } else {
        None
    };
    let proj_far = if sel.uses_far() {
        Some(Dense::new(init, "speaker.proj_far", config.raw_embed_dim, config.embed_dim)?)
    } else {
        None
    };
    let width = config.bottleneck_width()?;
    let cin = width + config.conditioning_width();
    let blocks = (0..config.n_blocks)
        .map(|b| {
            SgtcnBlock::new(
                init,
                &format!("sgtcn{b}"),
                cin,
                width,
                config.gtcn_hidden,
                config.dconv_kernel,
                &config.dilations,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut decoder = |prefix: &str| -> Result<Vec<GatedTConv>> {
        (0..ENCODER_LAYERS)
            .map(|i| {
                let cout = if i + 1 == ENCODER_LAYERS { 1 } else { c };
                let f_out = ladder[ENCODER_LAYERS - 1 - i];
                GatedTConv::new(init, &format!("{prefix}.trgconv{i}"), c, cout, geom, f_out)
            })
            .collect()
    };
    let real_decoder = decoder("real_decoder")?;
    let imag_decoder = decoder("imag_decoder")?;
    let dense_re = Dense::new(init, "out_dense_r", N_BINS, N_BINS)?;
    let dense_im = Dense::new(init, "out_dense_i", N_BINS, N_BINS)?;
    Ok(Layout {
        encoder,
        skips,
        proj_near,
        proj_far,
        blocks,
        real_decoder,
        imag_decoder,
        dense_re,
        dense_im,
    })
}

impl<T: Real> Gtcnn<T> {
    /// Freshly initialized model, deterministic in `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = {
            let mut init = Init::new(&mut params, config.init_seed);
            build_layout(&config, &mut init)?
        };
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Model with the given parameter values; names and dims must match the
    /// configuration exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "configuration expects {} tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let src = params
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims != model.params.get(id).dims {
                return Err(Error::Checkpoint(format!(
                    "{name}: dims {:?}, expected {:?}",
                    src.dims,
                    model.params.get(id).dims
                )));
            }
            model.params.assign(id, src.data.clone())?;
        }
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> Gtcnn<U> {
        Gtcnn {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn count_params(&self) -> ParamReport {
        let mut modules = BTreeMap::new();
        for (_, name, t) in self.params.iter() {
            let key = name.split('.').next().unwrap_or(name).to_string();
            *modules.entry(key).or_insert(0) += t.len();
        }
        ParamReport {
            total: self.params.count(),
            modules,
        }
    }

    fn conditioning(
        &self,
        tape: &mut Tape<T>,
        cond: &Conditioning,
        frames: usize,
    ) -> Result<Option<Var>> {
        let sel = self.config.selection;
        let raw = self.config.raw_embed_dim;
        let mut project = |v: &Option<Vec<f64>>, proj: &Option<Dense>, which: &str| {
            let v = v.as_ref().ok_or_else(|| {
                Error::Selection(format!("mode {sel} needs the {which}-end embedding"))
            })?;
            if v.len() != raw {
                return Err(Error::Selection(format!(
                    "{which}-end embedding has {} values, expected {raw}",
                    v.len()
                )));
            }
            let x = tape.constant(Tensor::from_f64(&[1, 1, raw], v)?);
            let proj = proj.as_ref().expect("projection exists for selected mode");
            let e = proj.forward(tape, &self.params, x)?;
            tape.reshape(e, &[1, self.config.embed_dim, 1])
        };
        let joined = match sel {
            Selection::None => return Ok(None),
            Selection::Es => project(&cond.near, &self.layout.proj_near, "near")?,
            Selection::Ex => project(&cond.far, &self.layout.proj_far, "far")?,
            Selection::Emix => {
                let n = project(&cond.near, &self.layout.proj_near, "near")?;
                let f = project(&cond.far, &self.layout.proj_far, "far")?;
                tape.concat(&[n, f])?
            }
        };
        Ok(Some(tape.tile(joined, frames)?))
    }

    /// Forward pass from features already placed on the tape (`[T, 4, 161]`).
    pub fn forward_var(&self, tape: &mut Tape<T>, x: Var, cond: &Conditioning) -> Result<ForwardVars> {
        let dims = tape.dims(x).to_vec();
        if dims.len() != 3 || dims[1] != FEATURE_CHANNELS || dims[2] != N_BINS || dims[0] == 0 {
            return Err(Error::shape(format!(
                "features must be [T>0, {FEATURE_CHANNELS}, {N_BINS}], got {dims:?}"
            )));
        }
        let frames = dims[0];
        let p = &self.params;
        let l = &self.layout;
        let c = self.config.channels;
        let width = self.config.bottleneck_width()?;
        let bottom_bins = width / c;

        let mut enc = Vec::with_capacity(ENCODER_LAYERS);
        let mut h = x;
        for layer in &l.encoder {
            h = layer.forward(tape, p, h)?;
            enc.push(h);
        }

        let emb = self.conditioning(tape, cond, frames)?;
        for block in &l.blocks {
            let flat = tape.reshape(h, &[frames, width, 1])?;
            let input = match emb {
                Some(e) => tape.concat(&[flat, e])?,
                None => flat,
            };
            let out = block.forward(tape, p, input)?;
            h = tape.reshape(out, &[frames, c, bottom_bins])?;
        }

        let skips = enc
            .iter()
            .zip(&l.skips)
            .map(|(e, s)| s.forward(tape, p, *e))
            .collect::<Result<Vec<_>>>()?;

        let mut decode = |layers: &[GatedTConv], dense: &Dense| -> Result<Var> {
            let mut d = h;
            for (i, layer) in layers.iter().enumerate() {
                let skip = skips[ENCODER_LAYERS - 1 - i];
                let input = tape.add(d, skip)?;
                d = layer.forward(tape, p, input)?;
            }
            dense.forward(tape, p, d)
        };
        let raw_re = decode(&l.real_decoder, &l.dense_re)?;
        let raw_im = decode(&l.imag_decoder, &l.dense_im)?;

        // |W|^2 at the phase of W, i.e. |W| * W.
        let mag = tape.magnitude(raw_re, raw_im)?;
        let est_re = tape.mul(mag, raw_re)?;
        let est_im = tape.mul(mag, raw_im)?;
        Ok(ForwardVars {
            raw_re,
            raw_im,
            est_re,
            est_im,
            frames,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        features: &FeatureBlock,
        cond: &Conditioning,
    ) -> Result<ForwardVars> {
        let x = tape.constant(Tensor::from_f64(&features.dims(), &features.data)?);
        self.forward_var(tape, x, cond)
    }

    /// Estimated clean spectrum without recording gradients.
    pub fn estimate(&self, features: &FeatureBlock, cond: &Conditioning) -> Result<ComplexSpectrogram> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, features, cond)?;
        spectrogram_of(&tape, out)
    }

    /// Same as [`Gtcnn::estimate`] with instance-norm statistics replayed
    /// from `stats` (or recorded when `None`); returns the statistics used.
    pub fn estimate_with_norms(
        &self,
        features: &FeatureBlock,
        cond: &Conditioning,
        stats: Option<Vec<NormStats<T>>>,
    ) -> Result<(ComplexSpectrogram, Vec<NormStats<T>>)> {
        let mut tape = match stats {
            Some(s) => Tape::inference().with_frozen_norms(s),
            None => Tape::inference(),
        };
        let out = self.forward(&mut tape, features, cond)?;
        let spec = spectrogram_of(&tape, out)?;
        Ok((spec, tape.take_norm_stats()))
    }

    /// Enhanced near-end speech from microphone `y` and far-end reference `x`.
    /// The reference is zero-padded or truncated to `y`'s length; the output
    /// has exactly `y.len()` samples.
    pub fn enhance(&self, y: &Waveform, x: &Waveform, cond: &Conditioning) -> Result<Waveform> {
        if x.is_empty() {
            return Err(Error::invalid("far-end reference signal is required"));
        }
        let stft = Stft::new();
        let x = x.fit_to(y.len());
        let feats = dsp::make_features_with(&stft, y, &x)?;
        let est = self.estimate(&feats, cond)?;
        Ok(stft.synthesize(&est)?.fit_to(y.len()))
    }
}

/// Read the decompressed estimate off a tape.
pub fn spectrogram_of<T: Real>(tape: &Tape<T>, out: ForwardVars) -> Result<ComplexSpectrogram> {
    ComplexSpectrogram::from_parts(
        tape.value(out.est_re).to_f64(),
        tape.value(out.est_im).to_f64(),
        out.frames,
    )
}

/// Mean over frames and bins of the squared real and imaginary errors.
pub fn spectral_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardVars,
    clean: &ComplexSpectrogram,
) -> Result<Var> {
    if clean.frames != out.frames || clean.bins != N_BINS {
        return Err(Error::shape(format!(
            "clean spectrum is {}x{}, estimate {}x{N_BINS}",
            clean.frames, clean.bins, out.frames
        )));
    }
    let tr: Vec<T> = clean.re.iter().map(|v| T::lit(*v)).collect();
    let ti: Vec<T> = clean.im.iter().map(|v| T::lit(*v)).collect();
    let lr = tape.sq_err_sum(out.est_re, &tr)?;
    let li = tape.sq_err_sum(out.est_im, &ti)?;
    let total = tape.add(lr, li)?;
    tape.scale(total, T::lit(1.0 / (clean.frames * clean.bins) as f64))
}

/// Plain evaluation of the same loss on two spectrograms.
pub fn spectral_mse(est: &ComplexSpectrogram, clean: &ComplexSpectrogram) -> Result<f64> {
    if est.frames != clean.frames || est.bins != clean.bins {
        return Err(Error::shape("spectrogram sizes differ"));
    }
    let n = (est.frames * est.bins) as f64;
    let s: f64 = est
        .re
        .iter()
        .zip(&clean.re)
        .chain(est.im.iter().zip(&clean.im))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / n)
}
