//! Training-memory probe: one forward/backward pass on a fixed input, with
//! retained activations read from the tape ledger.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::peft::count_params;
use crate::samlite::{PromptSet, SamLite};
use crate::tensor::NdArray;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub method: String,
    /// Retained activation bytes per region tag.
    pub regions: BTreeMap<String, u64>,
    pub encoder_block_bytes: u64,
    pub total_activation_bytes: u64,
    pub trainable_params: u64,
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
}

/// Deterministic probe image: a bright disk on a dark background.
pub fn probe_image(channels: usize, size: usize) -> NdArray<f32> {
    let c = size as f64 / 2.0;
    let r = size as f64 / 4.0;
    NdArray::from_fn(&[channels, size, size], |i| {
        let p = i % (size * size);
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        if (y - c).powi(2) + (x - c).powi(2) <= r * r {
            0.8
        } else {
            0.1
        }
    })
}

pub fn probe_prompts(size: usize) -> PromptSet {
    PromptSet::bbox((size / 4, size / 4, 3 * size / 4, 3 * size / 4))
}

pub fn memory_report(m: &SamLite<f32>) -> Result<MemoryReport> {
    if m.store.is_virtual() {
        return Err(Error::Config(format!(
            "preset {} is count-only; memory reports need a materialized model",
            m.arch.cfg.preset
        )));
    }
    let size = m.arch.image_size();
    let image = probe_image(m.arch.cfg.vit.in_channels, size);
    let mut t = Tape::new();
    let x = m.image_input(&mut t, &image)?;
    let f = m.arch.embed(&mut t, &m.store, x)?;
    let logits = m.arch.mask_logits(&mut t, &m.store, f, &probe_prompts(size))?;
    let out = m.arch.instance_output(&mut t, &m.store, f, x)?;
    let a = t.mean(logits)?;
    let b = t.mean(out)?;
    let loss = t.add(a, b)?;
    let ledger = t.ledger();
    t.backward(loss)?;
    let counts = count_params(&m.store);
    let elem = std::mem::size_of::<f32>() as u64;
    let param_bytes = m.store.ids().map(|id| m.store.storage_bytes(id) as u64).sum();
    Ok(MemoryReport {
        method: m.arch.peft.as_ref().map_or("none".into(), |p| p.method.to_string()),
        regions: ledger.regions().clone(),
        encoder_block_bytes: ledger.encoder_block_bytes(),
        total_activation_bytes: ledger.total_retained_bytes(),
        trainable_params: counts.trainable_params as u64,
        param_bytes,
        grad_bytes: counts.trainable_params as u64 * elem,
        optimizer_bytes: Adam::state_bytes(&m.store),
    })
}
