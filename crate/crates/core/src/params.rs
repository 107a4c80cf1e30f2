//! Named parameter storage with roles, regions and trainability flags.
//!
//! A store can be *virtual*: every parameter keeps its shape and metadata
//! but no values. Virtual stores back count-only presets such as the
//! ViT-B-shaped model, where materializing ~90M weights buys nothing.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::{numel, Float, NdArray};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is, used by the selective PEFT methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    Norm,
    Embedding,
    Adapter,
    Unlabeled,
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    /// PEFT parameters attached to the image encoder.
    EncoderAdapter,
    PromptEncoder,
    MaskDecoder,
    InstanceHead,
}

impl Component {
    pub fn is_encoder_side(self) -> bool {
        matches!(self, Component::Encoder | Component::EncoderAdapter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    /// Part of the attention sub-layer (qkv / output projection).
    pub attention: bool,
    pub component: Component,
    pub region: String,
    pub trainable: bool,
}

impl ParamMeta {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Uniform(f64),
    Const(f64),
}

impl Init {
    /// He-style uniform bound for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform((1.0 / fan_in as f64).sqrt() * 3f64.sqrt())
    }

    fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, 1.0).expect("unit normal");
                (0..n)
                    .map(|_| loop {
                        let z: f64 = d.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ParamValue<T> {
    Dense(Arc<NdArray<T>>),
    Quantized(Arc<QuantizedTensor>),
    Virtual,
    /// Count-only stand-in for a quantized weight with the given block size.
    VirtualQuantized(usize),
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    metas: Vec<ParamMeta>,
    values: Vec<ParamValue<T>>,
    by_name: HashMap<String, ParamId>,
    virtual_only: bool,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            metas: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
            virtual_only: false,
        }
    }

    /// A store that records shapes only.
    pub fn new_virtual() -> Self {
        Self {
            virtual_only: true,
            ..Self::new()
        }
    }

    pub fn is_virtual(&self) -> bool {
        self.virtual_only
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, meta: ParamMeta, init: Init, rng: &mut R) -> Result<ParamId> {
        if self.by_name.contains_key(&meta.name) {
            return Err(Error::Config(format!("duplicate parameter name {}", meta.name)));
        }
        if meta.shape.is_empty() || meta.shape.contains(&0) {
            return Err(Error::shape("param", format!("{}: {:?}", meta.name, meta.shape)));
        }
        let value = if self.virtual_only {
            ParamValue::Virtual
        } else {
            let data = init.sample(meta.numel(), rng).into_iter().map(T::of).collect();
            ParamValue::Dense(Arc::new(NdArray::new(meta.shape.clone(), data)?))
        };
        let id = ParamId(self.metas.len());
        self.by_name.insert(meta.name.clone(), id);
        self.metas.push(meta);
        self.values.push(value);
        Ok(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.metas.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.metas[id.0]
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.metas
    }

    pub fn value(&self, id: ParamId) -> &ParamValue<T> {
        &self.values[id.0]
    }

    pub fn dense(&self, id: ParamId) -> Result<&Arc<NdArray<T>>> {
        match &self.values[id.0] {
            ParamValue::Dense(a) => Ok(a),
            ParamValue::Quantized(_) => Err(Error::Config(format!(
                "{} is quantized",
                self.metas[id.0].name
            ))),
            ParamValue::Virtual | ParamValue::VirtualQuantized(_) => Err(Error::Config(format!(
                "{} has no values (count-only model)",
                self.metas[id.0].name
            ))),
        }
    }

    pub fn dense_mut(&mut self, id: ParamId) -> Result<&mut NdArray<T>> {
        self.dense(id)?;
        match &mut self.values[id.0] {
            ParamValue::Dense(a) => Ok(Arc::make_mut(a)),
            _ => unreachable!(),
        }
    }

    pub fn is_quantized(&self, id: ParamId) -> bool {
        matches!(
            self.values[id.0],
            ParamValue::Quantized(_) | ParamValue::VirtualQuantized(_)
        )
    }

    /// Replaces a parameter's values; shape must match.
    pub fn set_dense(&mut self, id: ParamId, value: NdArray<T>) -> Result<()> {
        if value.shape() != self.metas[id.0].shape.as_slice() {
            return Err(Error::shape(
                "set_dense",
                format!("{}: {:?} vs {:?}", self.metas[id.0].name, value.shape(), self.metas[id.0].shape),
            ));
        }
        self.values[id.0] = ParamValue::Dense(Arc::new(value));
        Ok(())
    }

    /// Swaps a dense weight for its 4-bit form and freezes it.
    pub fn quantize(&mut self, id: ParamId, block: usize) -> Result<()> {
        if block == 0 {
            return Err(Error::Config("quantization block size must be positive".into()));
        }
        self.values[id.0] = match &self.values[id.0] {
            ParamValue::Dense(a) => {
                ParamValue::Quantized(Arc::new(QuantizedTensor::quantize(&a.cast::<f32>(), block)?))
            }
            ParamValue::Virtual => ParamValue::VirtualQuantized(block),
            ParamValue::Quantized(_) | ParamValue::VirtualQuantized(_) => return Ok(()),
        };
        self.metas[id.0].trainable = false;
        Ok(())
    }

    pub fn set_quantized(&mut self, id: ParamId, q: QuantizedTensor) -> Result<()> {
        if q.shape() != self.metas[id.0].shape.as_slice() {
            return Err(Error::shape("set_quantized", self.metas[id.0].name.clone()));
        }
        self.values[id.0] = ParamValue::Quantized(Arc::new(q));
        self.metas[id.0].trainable = false;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) -> Result<()> {
        if trainable && self.is_quantized(id) {
            return Err(Error::Config(format!(
                "{} is quantized and cannot be trainable",
                self.metas[id.0].name
            )));
        }
        self.metas[id.0].trainable = trainable;
        Ok(())
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.metas[id.0].trainable
    }

    /// Bytes held by a parameter in its storage form.
    pub fn storage_bytes(&self, id: ParamId) -> usize {
        let m = &self.metas[id.0];
        let n = m.numel();
        match &self.values[id.0] {
            ParamValue::Quantized(q) => q.bytes(),
            ParamValue::VirtualQuantized(block) => n.div_ceil(2) + 4 * n.div_ceil(*block),
            _ => n * std::mem::size_of::<T>(),
        }
    }

    /// Same parameters converted to another float type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            metas: self.metas.clone(),
            values: self
                .values
                .iter()
                .map(|v| match v {
                    ParamValue::Dense(a) => ParamValue::Dense(Arc::new(a.cast())),
                    ParamValue::Quantized(q) => ParamValue::Quantized(q.clone()),
                    ParamValue::Virtual => ParamValue::Virtual,
                    ParamValue::VirtualQuantized(b) => ParamValue::VirtualQuantized(*b),
                })
                .collect(),
            by_name: self.by_name.clone(),
            virtual_only: self.virtual_only,
        }
    }
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta(name: &str, shape: &[usize]) -> ParamMeta {
        ParamMeta {
            name: name.into(),
            shape: shape.to_vec(),
            role: Role::Weight,
            attention: false,
            component: Component::Encoder,
            region: "encoder-block-0".into(),
            trainable: true,
        }
    }

    #[test]
    fn quantized_params_cannot_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let id = s.add(meta("w", &[4, 8]), Init::Normal(0.1), &mut rng).unwrap();
        s.quantize(id, 16).unwrap();
        assert!(!s.trainable(id));
        assert!(s.set_trainable(id, true).is_err());
        assert_eq!(s.storage_bytes(id), 16 + 8);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        s.add(meta("w", &[2]), Init::Zeros, &mut rng).unwrap();
        assert!(s.add(meta("w", &[2]), Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Init::TruncNormal(0.02).sample(5000, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
    }
}
