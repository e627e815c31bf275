//! Transformer encoder over the concatenated visible tokens of all three
//! modalities. There is no class token: every row of the output is a
//! visible patch/group token.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BlockShape, Layout};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::tokenizer::Modality;

pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub layerscale: bool,
    pub layerscale_init: f64,
}

/// Named encoder scales. Presets only fill in an [`EncoderConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalePreset {
    Micro,
    Small,
    Base,
    Large,
    Giant,
}

impl ScalePreset {
    pub const PAPER_SCALES: [ScalePreset; 4] = [
        ScalePreset::Small,
        ScalePreset::Base,
        ScalePreset::Large,
        ScalePreset::Giant,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Some(Self::Micro),
            "small" => Some(Self::Small),
            "base" => Some(Self::Base),
            "large" => Some(Self::Large),
            "giant" => Some(Self::Giant),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Micro => "micro",
            Self::Small => "small",
            Self::Base => "base",
            Self::Large => "large",
            Self::Giant => "giant",
        }
    }

    pub fn encoder(self) -> EncoderConfig {
        let (dim, depth, heads) = match self {
            Self::Micro => (16, 2, 2),
            Self::Small => (384, 12, 6),
            Self::Base => (768, 12, 12),
            Self::Large => (1024, 24, 16),
            Self::Giant => (1536, 40, 24),
        };
        EncoderConfig {
            dim,
            depth,
            heads,
            mlp_ratio: 4.0,
            layerscale: false,
            layerscale_init: 1e-5,
        }
    }

    /// Published encoder parameter count for the scale, if any.
    pub fn reference_params(self) -> Option<f64> {
        match self {
            Self::Micro => None,
            Self::Small => Some(22e6),
            Self::Base => Some(87e6),
            Self::Large => Some(304e6),
            Self::Giant => Some(1.1e9),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        // depth 0 is allowed: a diagnostic stack that only applies the final norm.
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("encoder mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            layerscale: self.layerscale.then_some(self.layerscale_init),
        }
    }

    pub fn layout(&self) -> Layout {
        let mut l = Layout::new();
        let shape = self.block_shape();
        for i in 0..self.depth {
            nn::self_attention_block_layout(&mut l, &format!("{ENCODER_PREFIX}.blocks.{i}"), &shape);
        }
        l.layer_norm(&format!("{ENCODER_PREFIX}.norm"), self.dim);
        l
    }
}

/// Encoder output over all visible tokens.
#[derive(Debug, Clone)]
pub struct JointRepresentation {
    /// `B_vis×C` final-normed hidden states.
    pub h: Var,
    /// Row ranges of `h` belonging to rgb, depth and pc.
    pub slices: [Range<usize>; 3],
    /// Recorded hidden states: tap 0 is the block input, tap `i` the output of block `i`.
    pub taps: Vec<(usize, Var)>,
    /// Attention probabilities, per block then per head.
    pub attention: Vec<Vec<Var>>,
}

impl JointRepresentation {
    pub fn slice(&self, m: Modality) -> Range<usize> {
        self.slices[m.index()].clone()
    }

    pub fn tap(&self, layer: usize) -> Option<Var> {
        self.taps.iter().find(|(l, _)| *l == layer).map(|(_, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.slices[2].end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs the encoder over `visible`, the row-concatenation (rgb, depth, pc)
/// of visible tokens with positions already added. `counts` gives the rows
/// per modality; `taps` lists hidden states to record.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &EncoderConfig,
    visible: Var,
    counts: [usize; 3],
    taps: &[usize],
) -> Result<JointRepresentation> {
    cfg.validate()?;
    let (rows, cols) = g.shape(visible);
    if cols != cfg.dim {
        return Err(Error::Config(format!(
            "encoder expects {}-dim tokens, got {cols}",
            cfg.dim
        )));
    }
    if rows != counts.iter().sum::<usize>() {
        return Err(Error::Internal(format!(
            "{rows} visible rows but modality counts {counts:?}"
        )));
    }
    if let Some(t) = taps.iter().find(|&&t| t > cfg.depth) {
        return Err(Error::Config(format!(
            "tap {t} requested from a {}-block encoder",
            cfg.depth
        )));
    }
    let shape = cfg.block_shape();
    let mut recorded = Vec::new();
    let mut attention = Vec::with_capacity(cfg.depth);
    let mut x = visible;
    if taps.contains(&0) {
        recorded.push((0, x));
    }
    for i in 0..cfg.depth {
        let (y, probs) =
            nn::self_attention_block(g, p, &format!("{ENCODER_PREFIX}.blocks.{i}"), &shape, x);
        x = y;
        attention.push(probs);
        if taps.contains(&(i + 1)) {
            recorded.push((i + 1, x));
        }
    }
    let h = nn::layer_norm(g, p, &format!("{ENCODER_PREFIX}.norm"), x);
    let a = counts[0];
    let b = a + counts[1];
    Ok(JointRepresentation {
        h,
        slices: [0..a, a..b, b..b + counts[2]],
        taps: recorded,
        attention,
    })
}
