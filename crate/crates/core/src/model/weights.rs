//! Named weight tensors, seeded initialization, and Guidance
//! Initialization (weight inheritance from a non-streaming donor).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Real, Tensor};
use crate::rng::Rng;

use super::{ModelConfig, ModelError};

/// A named-tensor bundle for one network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T: Real> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Canonical (name, shape) directory for a configuration. The order is the
/// initialization order, so it is part of the determinism contract.
pub fn tensor_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let f = cfg.ffn_dim;
    let c = cfg.frontend_channels;
    let u = cfg.vocab_size;
    let mel_cols = cfg.mel_bins.div_ceil(2).div_ceil(2);
    let mut out = Vec::new();
    for b in 0..4 {
        let c_in = if b == 0 { 1 } else { c };
        out.push((format!("frontend.block{b}.kernel"), alloc::vec![9 * c_in, c]));
        out.push((format!("frontend.block{b}.bias"), alloc::vec![c]));
        out.push((format!("frontend.block{b}.ln_gain"), alloc::vec![c]));
        out.push((format!("frontend.block{b}.ln_bias"), alloc::vec![c]));
    }
    out.push(("frontend.proj.weight".into(), alloc::vec![c * mel_cols, d]));
    out.push(("frontend.proj.bias".into(), alloc::vec![d]));
    out.push(("embed.table".into(), alloc::vec![u, d]));
    for j in 0..cfg.encoder_layers {
        for name in ["wq", "wk", "wv", "wo"] {
            out.push((format!("enc.{j}.attn.{name}"), alloc::vec![d, d]));
        }
        out.push((format!("enc.{j}.ln1.gain"), alloc::vec![d]));
        out.push((format!("enc.{j}.ln1.bias"), alloc::vec![d]));
        out.push((format!("enc.{j}.ln2.gain"), alloc::vec![d]));
        out.push((format!("enc.{j}.ln2.bias"), alloc::vec![d]));
        out.push((format!("enc.{j}.ffn.w1"), alloc::vec![d, f]));
        out.push((format!("enc.{j}.ffn.b1"), alloc::vec![f]));
        out.push((format!("enc.{j}.ffn.w2"), alloc::vec![f, d]));
        out.push((format!("enc.{j}.ffn.b2"), alloc::vec![d]));
    }
    for k in 0..cfg.decoder_layers {
        for name in ["wq", "wk", "wv", "wo"] {
            out.push((format!("dec.{k}.self.{name}"), alloc::vec![d, d]));
        }
        for name in ["wq", "wk", "wv", "wo"] {
            out.push((format!("dec.{k}.cross.{name}"), alloc::vec![d, d]));
        }
        for ln in ["ln1", "ln2", "ln3"] {
            out.push((format!("dec.{k}.{ln}.gain"), alloc::vec![d]));
            out.push((format!("dec.{k}.{ln}.bias"), alloc::vec![d]));
        }
        out.push((format!("dec.{k}.ffn.w1"), alloc::vec![d, f]));
        out.push((format!("dec.{k}.ffn.b1"), alloc::vec![f]));
        out.push((format!("dec.{k}.ffn.w2"), alloc::vec![f, d]));
        out.push((format!("dec.{k}.ffn.b2"), alloc::vec![d]));
    }
    out.push(("ctc.weight".into(), alloc::vec![d, u]));
    out.push(("ctc.bias".into(), alloc::vec![u]));
    out.push(("out.weight".into(), alloc::vec![d, u]));
    out.push(("out.bias".into(), alloc::vec![u]));
    out
}

impl<T: Real> Weights<T> {
    /// Fresh initialization: matrices uniform in
    /// +-sqrt(6 / (fan_in + fan_out)), biases zero, layer-norm gains one.
    /// Tensors are drawn in `tensor_shapes` order from one seeded stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in tensor_shapes(cfg) {
            let t = init_tensor::<T>(&name, &shape, &mut rng);
            tensors.insert(name, t);
        }
        Weights { config: cfg.clone(), tensors }
    }

    pub fn from_tensors(
        cfg: &ModelConfig,
        tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        for (name, shape) in tensor_shapes(cfg) {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::ConfigMismatch {
                        detail: format!("{name}: shape {:?} != {:?}", t.shape(), shape),
                    })
                }
                None => {
                    return Err(ModelError::ConfigMismatch {
                        detail: format!("missing tensor {name}"),
                    })
                }
            }
        }
        Ok(Weights { config: cfg.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown weight tensor {name}"))
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        debug_assert_eq!(self.get(name).shape(), t.shape());
        self.tensors.insert(name.into(), t);
    }

    /// Name-sorted iteration (BTreeMap order).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

fn init_tensor<T: Real>(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    if name.ends_with(".ln_gain") || name.ends_with(".gain") {
        return Tensor::new(shape.to_vec(), alloc::vec![T::one(); shape.iter().product()])
            .expect("gain shape");
    }
    if name.ends_with("bias") {
        return Tensor::zeros(shape.to_vec());
    }
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[0], shape[1]),
        _ => (shape.iter().product(), 1),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<T> =
        (0..shape.iter().product()).map(|_| T::of(rng.uniform_in(-bound, bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Names inherited by Guidance Initialization: the full frontend and
/// embedding, every encoder layer, the CTC head, and the decoder layers at
/// 1-based odd positions {1, 3, 5, ...}. The decoder output projection and
/// the remaining decoder layers keep their fresh initialization.
fn inherited(name: &str, decoder_layers: usize) -> bool {
    if name.starts_with("frontend.") || name.starts_with("embed.") || name.starts_with("enc.") {
        return true;
    }
    if name.starts_with("ctc.") {
        return true;
    }
    if let Some(rest) = name.strip_prefix("dec.") {
        if let Some((idx, _)) = rest.split_once('.') {
            if let Ok(k) = idx.parse::<usize>() {
                return k < decoder_layers && k % 2 == 0;
            }
        }
    }
    false
}

/// Initialize a streaming model from an equal-depth non-streaming donor by
/// copying the inherited tensor set (see [`inherited`]); everything else is
/// left untouched. Tensor shapes never change.
pub fn guidance_init<T: Real>(
    student: &mut Weights<T>,
    teacher: &Weights<T>,
) -> Result<(), ModelError> {
    if student.config.shape_key() != teacher.config.shape_key() {
        return Err(ModelError::ConfigMismatch {
            detail: format!(
                "student {} vs teacher {}",
                student.config.shape_key(),
                teacher.config.shape_key()
            ),
        });
    }
    let k = student.config.decoder_layers;
    let names: Vec<String> = student.tensors.keys().cloned().collect();
    for name in names {
        if inherited(&name, k) {
            let t = teacher.get(&name).clone();
            student.tensors.insert(name, t);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 6,
            heads: 2,
            model_dim: 8,
            ffn_dim: 12,
            chunk_size: Some(2),
            vocab_size: 7,
            mel_bins: 80,
            frontend_channels: 3,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Weights::<f32>::init(&cfg(), 5);
        let b = Weights::<f32>::init(&cfg(), 5);
        let c = Weights::<f32>::init(&cfg(), 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn inheritance_copies_odd_decoder_layers_only() {
        assert!(inherited("enc.11.attn.wq", 6));
        assert!(inherited("frontend.block0.kernel", 6));
        assert!(inherited("embed.table", 6));
        assert!(inherited("ctc.weight", 6));
        assert!(inherited("dec.0.self.wq", 6)); // 1-based layer 1
        assert!(!inherited("dec.1.self.wq", 6)); // 1-based layer 2
        assert!(inherited("dec.2.cross.wk", 6)); // 1-based layer 3
        assert!(inherited("dec.4.ffn.w1", 6)); // 1-based layer 5
        assert!(!inherited("dec.5.ffn.w1", 6)); // 1-based layer 6
        assert!(!inherited("out.weight", 6));
        // K = 1: the single decoder layer is copied
        assert!(inherited("dec.0.cross.wq", 1));
    }

    #[test]
    fn guidance_init_copies_bitwise_and_leaves_the_rest() {
        let teacher = Weights::<f32>::init(&cfg().non_streaming(), 1);
        let mut student = Weights::<f32>::init(&cfg(), 2);
        let before = student.clone();
        guidance_init(&mut student, &teacher).unwrap();
        for (name, t) in student.iter() {
            if inherited(name, 6) {
                assert_eq!(t, teacher.get(name), "{name} should be inherited");
            } else {
                assert_eq!(t, before.get(name), "{name} should be untouched");
            }
            assert_eq!(t.shape(), before.get(name).shape());
        }
    }

    #[test]
    fn guidance_init_rejects_depth_mismatch() {
        let teacher_cfg = ModelConfig { encoder_layers: 3, ..cfg() };
        let teacher = Weights::<f32>::init(&teacher_cfg, 1);
        let mut student = Weights::<f32>::init(&cfg(), 2);
        assert!(matches!(
            guidance_init(&mut student, &teacher),
            Err(ModelError::ConfigMismatch { .. })
        ));
    }
}
