//! Tape-recorded forward passes for the frontend, encoder, decoder and
//! heads. Every function exposes the intermediate hidden states and
//! attention matrices needed for knowledge distillation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Real, Tape, Tensor, TensorId};
use crate::features::{MelSpectrogram, MEL_BINS};

use super::weights::Weights;
use super::{make_causal_mask, make_cross_mask, AttnMask, ModelConfig, ModelError, LN_EPS};

/// Weight tensors registered on a tape, addressed by name.
pub struct BoundWeights {
    ids: BTreeMap<String, TensorId>,
}

impl BoundWeights {
    pub fn id(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound weight tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

/// Register every weight tensor as a tape leaf. With `trainable` set the
/// subsequent `backward` yields one gradient per tensor.
pub fn bind<T: Real>(tape: &mut Tape<T>, w: &Weights<T>, trainable: bool) -> BoundWeights {
    let mut ids = BTreeMap::new();
    for (name, t) in w.iter() {
        let tensor = if trainable { t.clone().with_grad() } else { t.clone().detached() };
        ids.insert(name.clone(), tape.leaf(tensor));
    }
    BoundWeights { ids }
}

/// Mel spectrogram as a `[frames, MEL_BINS]` tensor.
pub fn mel_to_tensor<T: Real>(mel: &MelSpectrogram) -> Tensor<T> {
    let data: Vec<T> = mel.data.iter().map(|&v| T::of(v)).collect();
    Tensor::new(vec![mel.frames, MEL_BINS], data).expect("mel shape")
}

/// Per-layer encoder outputs: final hidden states, each layer's hidden
/// states (EHS), and each layer's per-head attention matrices (ESA).
pub struct EncoderTrace {
    pub output: TensorId,
    pub layer_outputs: Vec<TensorId>,
    pub layer_attn: Vec<Vec<TensorId>>,
}

/// Decoder outputs under teacher forcing: per-step log-probabilities plus
/// the DHS/DSA/DCA traces.
pub struct DecoderTrace {
    pub logprobs: TensorId,
    pub layer_outputs: Vec<TensorId>,
    pub self_attn: Vec<Vec<TensorId>>,
    pub cross_attn: Vec<Vec<TensorId>>,
}

/// VGG-style frontend: four 3x3 conv blocks (conv + layer norm over
/// channels + ReLU) with a 2x2 max pool after every second block, then a
/// linear projection of the flattened channels to `model_dim`. Output
/// length is `ceil(frames / 4)`; no positional embedding is added.
pub fn vgg_frontend<T: Real>(
    tape: &mut Tape<T>,
    mel: TensorId,
    w: &BoundWeights,
    cfg: &ModelConfig,
) -> Result<TensorId, ModelError> {
    let (frames, bins) = {
        let v = tape.value(mel);
        (v.shape()[0], v.shape()[1])
    };
    debug_assert_eq!(bins, cfg.mel_bins);
    let mut grid_t = frames;
    let mut grid_f = bins;
    let mut x = tape.reshape(mel, vec![grid_t * grid_f, 1])?;
    for b in 0..4 {
        let cols = tape.im2col(x, grid_t, grid_f)?;
        let z = tape.matmul(cols, w.id(&format!("frontend.block{b}.kernel")))?;
        let z = tape.add_row(z, w.id(&format!("frontend.block{b}.bias")))?;
        let z = tape.layer_norm(
            z,
            w.id(&format!("frontend.block{b}.ln_gain")),
            w.id(&format!("frontend.block{b}.ln_bias")),
            LN_EPS,
        )?;
        x = tape.relu(z)?;
        if b % 2 == 1 {
            x = tape.maxpool2(x, grid_t, grid_f)?;
            grid_t = grid_t.div_ceil(2);
            grid_f = grid_f.div_ceil(2);
        }
    }
    let flat = tape.reshape(x, vec![grid_t, grid_f * cfg.frontend_channels])?;
    let proj = tape.matmul(flat, w.id("frontend.proj.weight"))?;
    Ok(tape.add_row(proj, w.id("frontend.proj.bias"))?)
}

/// Multi-head attention with a shared boolean mask; returns the projected
/// output and the per-head attention matrices.
fn mhsa<T: Real>(
    tape: &mut Tape<T>,
    queries_from: TensorId,
    keys_values_from: TensorId,
    mask: &AttnMask,
    prefix: &str,
    w: &BoundWeights,
    cfg: &ModelConfig,
) -> Result<(TensorId, Vec<TensorId>), ModelError> {
    let q = tape.matmul(queries_from, w.id(&format!("{prefix}.wq")))?;
    let k = tape.matmul(keys_values_from, w.id(&format!("{prefix}.wk")))?;
    let v = tape.matmul(keys_values_from, w.id(&format!("{prefix}.wv")))?;
    let dk = cfg.head_dim();
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut contexts = Vec::with_capacity(cfg.heads);
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, (h + 1) * dk)?;
        let kh = tape.slice_cols(k, h * dk, (h + 1) * dk)?;
        let vh = tape.slice_cols(v, h * dk, (h + 1) * dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scaled, &mask.data)?;
        contexts.push(tape.matmul(probs, vh)?);
        attn.push(probs);
    }
    let cat = tape.concat_cols(&contexts)?;
    let out = tape.matmul(cat, w.id(&format!("{prefix}.wo")))?;
    Ok((out, attn))
}

fn feed_forward<T: Real>(
    tape: &mut Tape<T>,
    x: TensorId,
    prefix: &str,
    w: &BoundWeights,
) -> Result<TensorId, ModelError> {
    let h = tape.matmul(x, w.id(&format!("{prefix}.w1")))?;
    let h = tape.add_row(h, w.id(&format!("{prefix}.b1")))?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w.id(&format!("{prefix}.w2")))?;
    Ok(tape.add_row(h, w.id(&format!("{prefix}.b2")))?)
}

fn residual_norm<T: Real>(
    tape: &mut Tape<T>,
    x: TensorId,
    sub: TensorId,
    ln: &str,
    w: &BoundWeights,
) -> Result<TensorId, ModelError> {
    let res = tape.add(x, sub)?;
    Ok(tape.layer_norm(res, w.id(&format!("{ln}.gain")), w.id(&format!("{ln}.bias")), LN_EPS)?)
}

/// Stack of chunk-masked encoder layers (post-LN: MHSA and FFN, each
/// followed by residual + layer norm).
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    features: TensorId,
    mask: &AttnMask,
    w: &BoundWeights,
    cfg: &ModelConfig,
) -> Result<EncoderTrace, ModelError> {
    let n = tape.value(features).shape()[0];
    if mask.rows != n || mask.cols != n {
        return Err(ModelError::Tensor(crate::autodiff::TensorError::ShapeMismatch {
            op: "encode",
            detail: format!("mask {}x{} vs {n} frames", mask.rows, mask.cols),
        }));
    }
    let mut x = features;
    let mut layer_outputs = Vec::with_capacity(cfg.encoder_layers);
    let mut layer_attn = Vec::with_capacity(cfg.encoder_layers);
    for j in 0..cfg.encoder_layers {
        let (attn_out, probs) = mhsa(tape, x, x, mask, &format!("enc.{j}.attn"), w, cfg)?;
        let x1 = residual_norm(tape, x, attn_out, &format!("enc.{j}.ln1"), w)?;
        let ff = feed_forward(tape, x1, &format!("enc.{j}.ffn"), w)?;
        x = residual_norm(tape, x1, ff, &format!("enc.{j}.ln2"), w)?;
        layer_outputs.push(x);
        layer_attn.push(probs);
    }
    Ok(EncoderTrace { output: x, layer_outputs, layer_attn })
}

/// Frame-local CTC head: per-frame log-softmax over the full id space
/// (blank is id 0).
pub fn ctc_head<T: Real>(
    tape: &mut Tape<T>,
    encoder_out: TensorId,
    w: &BoundWeights,
) -> Result<TensorId, ModelError> {
    let z = tape.matmul(encoder_out, w.id("ctc.weight"))?;
    let z = tape.add_row(z, w.id("ctc.bias"))?;
    Ok(tape.log_softmax(z)?)
}

/// Teacher-forced decoder pass over `input_ids` (sos followed by labels).
/// Row `l` of the output predicts target `l`; its cross-attention is
/// restricted to encoder frames `0..=cross_limits[l]`.
pub fn decoder_forward<T: Real>(
    tape: &mut Tape<T>,
    input_ids: &[usize],
    encoder_out: TensorId,
    cross_limits: &[usize],
    w: &BoundWeights,
    cfg: &ModelConfig,
) -> Result<DecoderTrace, ModelError> {
    debug_assert_eq!(input_ids.len(), cross_limits.len());
    let n = tape.value(encoder_out).shape()[0];
    let self_mask = make_causal_mask(input_ids.len());
    let cross_mask = make_cross_mask(cross_limits, n)?;
    let mut x = tape.embed(w.id("embed.table"), input_ids)?;
    let mut layer_outputs = Vec::with_capacity(cfg.decoder_layers);
    let mut self_attn = Vec::with_capacity(cfg.decoder_layers);
    let mut cross_attn = Vec::with_capacity(cfg.decoder_layers);
    for k in 0..cfg.decoder_layers {
        let (sa, sa_probs) = mhsa(tape, x, x, &self_mask, &format!("dec.{k}.self"), w, cfg)?;
        let x1 = residual_norm(tape, x, sa, &format!("dec.{k}.ln1"), w)?;
        let (ca, ca_probs) =
            mhsa(tape, x1, encoder_out, &cross_mask, &format!("dec.{k}.cross"), w, cfg)?;
        let x2 = residual_norm(tape, x1, ca, &format!("dec.{k}.ln2"), w)?;
        let ff = feed_forward(tape, x2, &format!("dec.{k}.ffn"), w)?;
        x = residual_norm(tape, x2, ff, &format!("dec.{k}.ln3"), w)?;
        layer_outputs.push(x);
        self_attn.push(sa_probs);
        cross_attn.push(ca_probs);
    }
    let z = tape.matmul(x, w.id("out.weight"))?;
    let z = tape.add_row(z, w.id("out.bias"))?;
    let logprobs = tape.log_softmax(z)?;
    Ok(DecoderTrace { logprobs, layer_outputs, self_attn, cross_attn })
}

/// One triggered decode step: next-token log-probabilities for `prefix`
/// (starting with sos) given encoder states up to frame `limit` inclusive.
/// The encoder tail past `limit` is sliced away, so the output cannot
/// depend on it.
pub fn decode_step<T: Real>(
    tape: &mut Tape<T>,
    prefix: &[usize],
    encoder_out: TensorId,
    limit: usize,
    w: &BoundWeights,
    cfg: &ModelConfig,
) -> Result<(TensorId, DecoderTrace), ModelError> {
    let n = tape.value(encoder_out).shape()[0];
    if limit >= n {
        return Err(ModelError::LimitOutOfRange { limit, frames: n });
    }
    let visible = tape.slice_rows(encoder_out, 0, limit + 1)?;
    let limits = vec![limit; prefix.len()];
    let trace = decoder_forward(tape, prefix, visible, &limits, w, cfg)?;
    let rows = prefix.len();
    let last = tape.slice_rows(trace.logprobs, rows - 1, rows)?;
    Ok((last, trace))
}
