//! The tailored streaming Transformer: VGG-style frontend, chunk-masked
//! encoder, triggered-attention decoder, CTC head, and weight-inheritance
//! initialization from an equal-depth non-streaming model. Setting
//! `chunk_size: None` turns the same network into its non-streaming variant.

mod forward;
mod weights;

pub use forward::{
    bind, ctc_head, decode_step, decoder_forward, encode, mel_to_tensor, vgg_frontend,
    BoundWeights, DecoderTrace, EncoderTrace,
};
pub use weights::{guidance_init, Weights};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::TensorError;

/// Fixed time downsampling of the frontend (two stride-2 pools).
pub const FRONTEND_DOWNSAMPLE: usize = 4;
/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    /// Teacher/student configurations differ where they must match.
    ConfigMismatch { detail: String },
    /// A decode-step frame limit points past the encoder output.
    LimitOutOfRange { limit: usize, frames: usize },
    /// A CTC path does not collapse to the given labels.
    PathLabelMismatch,
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::ConfigMismatch { detail } => write!(f, "config mismatch: {detail}"),
            ModelError::LimitOutOfRange { limit, frames } => {
                write!(f, "frame limit {limit} out of range for {frames} encoder frames")
            }
            ModelError::PathLabelMismatch => {
                write!(f, "CTC path does not collapse to the label sequence")
            }
        }
    }
}

impl core::error::Error for ModelError {}

/// Architecture hyperparameters shared by all four training stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Encoder attention chunk, in post-frontend frames; `None` is the
    /// non-streaming (full-context) setting.
    pub chunk_size: Option<usize>,
    /// Total id count, including blank, sos and eos.
    pub vocab_size: usize,
    pub mel_bins: usize,
    pub frontend_channels: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        debug_assert_eq!(self.model_dim % self.heads, 0);
        self.model_dim / self.heads
    }

    /// The same architecture with the chunk mask removed.
    pub fn non_streaming(&self) -> ModelConfig {
        ModelConfig { chunk_size: None, ..self.clone() }
    }

    /// Frontend output length for a mel input of `frames` rows.
    pub fn downsampled_len(&self, frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }

    /// Shape-determining fields that weight inheritance requires to match.
    pub(crate) fn shape_key(&self) -> String {
        format!(
            "J{} K{} H{} d{} f{} V{} F{} C{}",
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.model_dim,
            self.ffn_dim,
            self.vocab_size,
            self.mel_bins,
            self.frontend_channels
        )
    }
}

/// Boolean attention mask, `rows x cols`, true = attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask { rows, cols, data: alloc::vec![true; rows * cols] }
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }
}

/// Chunk attention mask: frame `i` attends to frame `j` iff
/// `chunk(j) <= chunk(i)` with `chunk(i) = floor(i / chunk_size)`.
/// `chunk_size: None` yields the all-ones (non-streaming) mask.
pub fn make_chunk_mask(frames: usize, chunk_size: Option<usize>) -> AttnMask {
    let mut mask = AttnMask::full(frames, frames);
    if let Some(c) = chunk_size {
        debug_assert!(c >= 1);
        for i in 0..frames {
            for j in 0..frames {
                mask.data[i * frames + j] = j / c <= i / c;
            }
        }
    }
    mask
}

/// Causal (lower-triangular) self-attention mask for the decoder.
pub fn make_causal_mask(len: usize) -> AttnMask {
    let mut mask = AttnMask::full(len, len);
    for i in 0..len {
        for j in 0..len {
            mask.data[i * len + j] = j <= i;
        }
    }
    mask
}

/// Cross-attention mask from per-row frame limits: row `l` may attend to
/// encoder frames `0..=limits[l]`.
pub fn make_cross_mask(limits: &[usize], frames: usize) -> Result<AttnMask, ModelError> {
    let mut mask = AttnMask::full(limits.len(), frames);
    for (l, &lim) in limits.iter().enumerate() {
        if lim >= frames {
            return Err(ModelError::LimitOutOfRange { limit: lim, frames });
        }
        for j in 0..frames {
            mask.data[l * frames + j] = j <= lim;
        }
    }
    Ok(mask)
}

/// Per-label trigger frames derived from a CTC path, plus the chunk-ceiling
/// frame limits the triggered decoder may look at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerEvents {
    /// Frame of the first occurrence of each emitted label.
    pub frames: Vec<usize>,
    /// `(floor(n/chunk) + 1) * chunk - 1`, clipped to the last frame.
    pub limits: Vec<usize>,
}

/// Collapse a CTC path: drop blanks (id 0), merge repeats.
pub fn collapse_ctc_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = 0usize;
    for &p in path {
        if p != 0 && p != prev {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Trigger events from a CTC path known to collapse to `labels`.
pub fn trigger_events_from_path(
    path: &[usize],
    labels: &[usize],
    chunk_size: Option<usize>,
) -> Result<TriggerEvents, ModelError> {
    if collapse_ctc_path(path) != labels {
        return Err(ModelError::PathLabelMismatch);
    }
    let n_frames = path.len();
    let mut frames = Vec::with_capacity(labels.len());
    let mut prev = 0usize;
    for (t, &p) in path.iter().enumerate() {
        if p != 0 && p != prev {
            frames.push(t);
        }
        prev = p;
    }
    debug_assert_eq!(frames.len(), labels.len());
    let limits = frames.iter().map(|&n| chunk_limit(n, chunk_size, n_frames)).collect();
    Ok(TriggerEvents { frames, limits })
}

/// Last frame index within the chunk containing frame `n`, clipped.
pub fn chunk_limit(n: usize, chunk_size: Option<usize>, n_frames: usize) -> usize {
    debug_assert!(n_frames > 0);
    match chunk_size {
        Some(c) => ((n / c + 1) * c - 1).min(n_frames - 1),
        None => n_frames - 1,
    }
}
