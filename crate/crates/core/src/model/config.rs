use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which speaker embeddings condition the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Unconditional echo canceller.
    None,
    /// Near-end (target) speaker embedding.
    Es,
    /// Far-end speaker embedding.
    Ex,
    /// Both, concatenated near then far.
    Emix,
}

impl Selection {
    pub fn uses_near(self) -> bool {
        matches!(self, Selection::Es | Selection::Emix)
    }

    pub fn uses_far(self) -> bool {
        matches!(self, Selection::Ex | Selection::Emix)
    }

    pub fn is_personalized(self) -> bool {
        self != Selection::None
    }

    /// Width of the tiled conditioning feature for a given projected size.
    pub fn conditioning_width(self, embed_dim: usize) -> usize {
        match self {
            Selection::None => 0,
            Selection::Es | Selection::Ex => embed_dim,
            Selection::Emix => 2 * embed_dim,
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Selection::None),
            "es" => Ok(Selection::Es),
            "ex" => Ok(Selection::Ex),
            "emix" => Ok(Selection::Emix),
            other => Err(Error::invalid(format!(
                "unknown selection mode {other:?} (none, es, ex, emix)"
            ))),
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selection::None => "none",
            Selection::Es => "es",
            Selection::Ex => "ex",
            Selection::Emix => "emix",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder/decoder channel count `C`.
    pub channels: usize,
    /// Width of the GTCN inner (dilated) convolutions.
    pub gtcn_hidden: usize,
    /// Dilations of the GTCN layers inside one S-GTCN block.
    pub dilations: Vec<usize>,
    pub n_blocks: usize,
    /// Projected speaker-embedding size.
    pub embed_dim: usize,
    /// Raw extractor output size.
    pub raw_embed_dim: usize,
    pub selection: Selection,
    /// Time x frequency kernel of every gated (transposed) conv layer.
    pub kernel: [usize; 2],
    pub stride_f: usize,
    pub dconv_kernel: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size layer widths.
    pub fn full(selection: Selection) -> Self {
        Self {
            channels: 80,
            gtcn_hidden: 64,
            dilations: vec![1, 2, 5, 9],
            n_blocks: 3,
            embed_dim: 256,
            raw_embed_dim: 512,
            selection,
            kernel: [2, 3],
            stride_f: 2,
            dconv_kernel: 3,
            fft_size: crate::dsp::FFT_SIZE,
            hop: crate::dsp::HOP,
            init_seed: 0,
        }
    }

    /// Reduced widths for CPU-scale experiments; kernels and dilations unchanged.
    pub fn desk(selection: Selection) -> Self {
        Self {
            channels: 24,
            gtcn_hidden: 32,
            n_blocks: 2,
            ..Self::full(selection)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    /// Frequency bins after each encoder layer, starting with the input.
    pub fn freq_ladder(&self) -> Result<Vec<usize>> {
        let mut f = self.fft_size / 2 + 1;
        let mut ladder = vec![f];
        for _ in 0..ENCODER_LAYERS {
            f = crate::autodiff::conv_out_len(f, self.kernel[1], self.stride_f)?;
            ladder.push(f);
        }
        Ok(ladder)
    }

    /// S-GTCN feature width `bins_at_bottleneck * C`.
    pub fn bottleneck_width(&self) -> Result<usize> {
        Ok(self.freq_ladder()?[ENCODER_LAYERS] * self.channels)
    }

    pub fn conditioning_width(&self) -> usize {
        self.selection.conditioning_width(self.embed_dim)
    }

    /// History (in frames) visible to one S-GTCN block.
    pub fn block_lookback(&self) -> usize {
        self.dilations.iter().map(|d| (self.dconv_kernel - 1) * d).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.gtcn_hidden == 0 || self.n_blocks == 0 {
            return Err(Error::invalid("channel, hidden and block counts must be positive"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::invalid("dilations must be a nonempty list of positive values"));
        }
        if self.fft_size != crate::dsp::FFT_SIZE || self.hop != crate::dsp::HOP {
            return Err(Error::invalid(format!(
                "only the {}-point / {}-hop front end is supported",
                crate::dsp::FFT_SIZE,
                crate::dsp::HOP
            )));
        }
        if self.kernel[0] == 0 || self.dconv_kernel == 0 {
            return Err(Error::invalid("kernels must be nonempty"));
        }
        self.freq_ladder()?;
        Ok(())
    }
}

pub const ENCODER_LAYERS: usize = 5;
