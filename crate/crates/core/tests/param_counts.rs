use peftsam_core::peft::{count_params, param_seq_ratio, LoraScope, Method, PeftConfig};
use peftsam_core::samlite::{ModelConfig, SamLite};

fn delta(cfg: Option<PeftConfig>) -> usize {
    let m = SamLite::<f32>::build(ModelConfig::preset("vit-b-shape").unwrap(), cfg.as_ref(), 0).unwrap();
    count_params(&m.store).encoder_trainable
}

fn method(m: Method) -> usize {
    delta(Some(PeftConfig::new(m)))
}

#[test]
fn encoder_deltas_follow_the_table_ordering() {
    let full = method(Method::FullFt);
    let late_ft = method(Method::LateFt);
    let attn = method(Method::AttnTune);
    let late_lora = delta(Some(PeftConfig::new(Method::LateLora).with_scope(LoraScope::All)));
    let lora = method(Method::Lora);
    let adapt = method(Method::Adaptformer);
    let fact = method(Method::Fact);
    let ssf = method(Method::Ssf);
    let bias = method(Method::BiasTune);
    let ln = method(Method::LnTune);
    let frozen = method(Method::FreezeEncoder);

    assert!(full > late_ft && late_ft > attn && attn > late_lora);
    assert!(late_lora > lora.max(adapt));
    assert!(lora.min(adapt) > fact && lora.min(adapt) > ssf);
    assert!(ssf >= bias && bias >= ln && ln >= frozen);
    assert_eq!(frozen, 0);
    // FacT at the default rank sits below SSF; the table's 4.4M implies a
    // larger configuration.
    assert!(fact > 0 && fact < ssf, "fact {fact} ssf {ssf}");
}

#[test]
fn lora_counts_are_exact() {
    // 12 blocks, q and v each get A [768, 32] and B [32, 768]
    assert_eq!(method(Method::Lora), 12 * 2 * 2 * 768 * 32);
    assert_eq!(method(Method::Qlora), method(Method::Lora));
    let all = delta(Some(PeftConfig::new(Method::Lora).with_scope(LoraScope::All)));
    assert_eq!(2 * delta(Some(PeftConfig::new(Method::LateLora).with_scope(LoraScope::All))), all);
}

#[test]
fn qlora_freezes_a_quantized_encoder() {
    let m = SamLite::<f32>::build(ModelConfig::preset("toy").unwrap(), Some(&PeftConfig::new(Method::Qlora)), 0).unwrap();
    let r = count_params(&m.store);
    assert!(r.quantized_params > 0);
    // four bits per element plus one f32 scale per 64-element block
    assert!(r.quantized_bytes * 6 < r.quantized_params * 4);
}

#[test]
fn ratios_scale_with_sequence_length() {
    assert!((param_seq_ratio(86e6, 4096.0).unwrap() - 20996.09375).abs() < 1e-9);
    assert!(param_seq_ratio(1.0, 0.0).is_err());
}
