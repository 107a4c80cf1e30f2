//! Model exports: folding LoRA deltas into the base weights, and re-basing a
//! QLoRA model onto full-precision pretrained weights.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamValue};
use crate::peft::{merge_lora, AlphaParam, Method, PeftConfig};
use crate::samlite::{PromptSet, SamLite};
use crate::tensor::NdArray;

fn alpha_value(store: &ParamStore<f32>, a: AlphaParam) -> Result<f32> {
    Ok(match a {
        AlphaParam::Fixed(v) => v as f32,
        AlphaParam::Learned(id) => store.dense(id)?.data()[0],
    })
}

/// Copies every parameter of `from` whose name exists in `to`.
fn copy_by_name(from: &ParamStore<f32>, to: &mut ParamStore<f32>, skip_quantized: bool) -> Result<()> {
    for id in from.ids() {
        let meta = from.meta(id);
        let Some(dst) = to.id(&meta.name) else { continue };
        match from.value(id) {
            ParamValue::Dense(a) => to.set_dense(dst, (**a).clone())?,
            ParamValue::Quantized(q) if !skip_quantized => to.set_quantized(dst, (**q).clone())?,
            ParamValue::Quantized(_) => {}
            ParamValue::Virtual | ParamValue::VirtualQuantized(_) => {
                return Err(Error::Config(format!("{} has no values", meta.name)))
            }
        }
    }
    Ok(())
}

/// A plain model whose weights carry the merged LoRA deltas. The model must
/// use unquantized LoRA.
pub fn merge_lora_model(m: &SamLite<f32>) -> Result<SamLite<f32>> {
    let method = m.arch.peft.as_ref().map(|p| p.method);
    if !matches!(method, Some(Method::Lora | Method::LateLora)) {
        return Err(Error::Config(format!(
            "merge-lora needs a lora or late_lora model, got {}",
            method.map_or("no adapters".to_string(), |m| m.to_string())
        )));
    }
    let mut out = SamLite::build(m.arch.cfg.clone(), None, 0)?;
    copy_by_name(&m.store, &mut out.store, false)?;
    for blk in &m.arch.encoder.blocks {
        for lin in blk.linears() {
            let mut w = (**m.store.dense(lin.w)?).clone();
            for ad in &lin.adapters.lora {
                let a = m.store.dense(ad.a)?;
                let b = m.store.dense(ad.b)?;
                w = merge_lora(&w, a, b, alpha_value(&m.store, ad.alpha)?, ad.cols)?;
            }
            let dst = out.store.id(&m.store.meta(lin.w).name).expect("same architecture");
            out.store.set_dense(dst, w)?;
        }
    }
    for id in m.store.ids() {
        if let Some(dst) = out.store.id(&m.store.meta(id).name) {
            out.store.set_trainable(dst, m.store.trainable(id))?;
        }
    }
    Ok(out)
}

/// The unquantized counterpart of a QLoRA configuration.
pub fn unquantized_config(cfg: &PeftConfig) -> Result<PeftConfig> {
    let method = match cfg.method {
        Method::Qlora => Method::Lora,
        Method::LateQlora => Method::LateLora,
        m => return Err(Error::Config(format!("{m} is not a quantized method"))),
    };
    Ok(PeftConfig {
        method,
        quant_bits: None,
        quant_block: None,
        ..cfg.clone()
    })
}

/// Replaces the quantized base weights of a QLoRA model with the
/// full-precision values from `base`, keeping every adapter and all other
/// trained tensors.
pub fn qlora_full_precision(m: &SamLite<f32>, base: &ParamStore<f32>) -> Result<SamLite<f32>> {
    let peft = m
        .arch
        .peft
        .as_ref()
        .ok_or_else(|| Error::Config("qlora export needs a qlora model, got no adapters".into()))?;
    let lora = unquantized_config(peft)?;
    let mut out = SamLite::build(m.arch.cfg.clone(), Some(&lora), 0)?;
    copy_by_name(&m.store, &mut out.store, true)?;
    for id in m.store.ids().filter(|&id| m.store.is_quantized(id)) {
        let name = &m.store.meta(id).name;
        let src = base
            .id(name)
            .ok_or_else(|| Error::Config(format!("base weights lack {name}")))?;
        let w = base.dense(src)?;
        if w.shape() != m.store.meta(id).shape.as_slice() {
            return Err(Error::shape(
                "qlora_full_precision",
                format!("{name}: base {:?} vs model {:?}", w.shape(), m.store.meta(id).shape),
            ));
        }
        let dst = out.store.id(name).expect("same architecture");
        out.store.set_dense(dst, (**w).clone())?;
    }
    Ok(out)
}

/// Mask logits and instance-head output for one probe input.
pub fn probe_outputs(m: &SamLite<f32>, image: &NdArray<f32>, prompts: &PromptSet) -> Result<(NdArray<f32>, NdArray<f32>)> {
    let mut t = Tape::inference();
    let x = m.image_input(&mut t, image)?;
    let f = m.arch.embed(&mut t, &m.store, x)?;
    let l = m.arch.mask_logits(&mut t, &m.store, f, prompts)?;
    let o = m.arch.instance_output(&mut t, &m.store, f, x)?;
    Ok((t.value(l).clone(), t.value(o).clone()))
}

/// Largest absolute difference between two models' probe outputs.
pub fn probe_max_abs_diff(a: &SamLite<f32>, b: &SamLite<f32>, image: &NdArray<f32>, prompts: &PromptSet) -> Result<f64> {
    let (la, oa) = probe_outputs(a, image, prompts)?;
    let (lb, ob) = probe_outputs(b, image, prompts)?;
    Ok(la.max_abs_diff(&lb).max(oa.max_abs_diff(&ob)))
}
