use peftsam_core::autodiff::Tape;
use peftsam_core::export::{merge_lora_model, probe_max_abs_diff, probe_outputs, qlora_full_precision};
use peftsam_core::interactive::{evaluate_interactive, StartKind};
use peftsam_core::memory::{memory_report, probe_image, probe_prompts};
use peftsam_core::peft::{late_range, LoraScope, Method, PeftConfig};
use peftsam_core::samlite::{ModelConfig, SamLite};
use peftsam_core::synth::{render, GenSpec, Metric, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> ModelConfig {
    ModelConfig::preset("micro").unwrap()
}

fn small(method: Method) -> PeftConfig {
    let p = PeftConfig::new(method);
    match method {
        m if m.is_lora() || m == Method::Fact => p.with_rank(2),
        Method::Adaptformer => p.with_projection(4),
        _ => p,
    }
}

fn small_quant(method: Method) -> PeftConfig {
    if method.is_quantized() {
        small(method).with_quant_block(16)
    } else {
        small(method)
    }
}

/// Fills every LoRA B matrix with reproducible noise so deltas are nonzero.
fn randomize_lora_b(m: &mut SamLite<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m
        .arch
        .encoder
        .blocks
        .iter()
        .flat_map(|b| b.linears().into_iter().flat_map(|l| l.adapters.lora.iter().map(|a| a.b)).collect::<Vec<_>>())
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        for v in m.store.dense_mut(id).unwrap().data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
}

fn probe(size: usize) -> (peftsam_core::tensor::NdArray<f32>, peftsam_core::samlite::PromptSet) {
    (probe_image(1, size), probe_prompts(size))
}

#[test]
fn zero_init_adapters_leave_the_forward_bit_identical() {
    let cfg = micro();
    let (img, prompts) = probe(cfg.vit.image_size);
    let base = SamLite::<f32>::build_base(cfg.clone(), 3).unwrap();
    for method in Method::ALL.into_iter().filter(|m| !m.is_quantized()) {
        let m = SamLite::<f32>::build(cfg.clone(), Some(&small(method)), 3).unwrap();
        assert_eq!(probe_max_abs_diff(&base, &m, &img, &prompts).unwrap(), 0.0, "{method}");
    }
}

#[test]
fn trainability_does_not_change_the_forward() {
    let cfg = micro();
    let (img, prompts) = probe(cfg.vit.image_size);
    let a = SamLite::<f32>::build(cfg, Some(&small(Method::Lora)), 1).unwrap();
    let mut b = a.clone();
    let ids: Vec<_> = b.store.ids().collect();
    for id in ids {
        let t = b.store.trainable(id);
        b.store.set_trainable(id, !t).unwrap();
    }
    let (la, oa) = probe_outputs(&a, &img, &prompts).unwrap();
    let (lb, ob) = probe_outputs(&b, &img, &prompts).unwrap();
    assert_eq!(la.data(), lb.data());
    assert_eq!(oa.data(), ob.data());
}

#[test]
fn merged_lora_matches_the_adapter_model() {
    let cfg = micro();
    let (img, prompts) = probe(cfg.vit.image_size);
    let mut m = SamLite::<f32>::build(cfg, Some(&small(Method::Lora).with_scope(LoraScope::All)), 2).unwrap();
    randomize_lora_b(&mut m, 5);
    let merged = merge_lora_model(&m).unwrap();
    assert!(merged.arch.peft.is_none());
    let d = probe_max_abs_diff(&m, &merged, &img, &prompts).unwrap();
    assert!(d < 1e-5, "max diff {d}");
}

#[test]
fn qlora_export_then_merge_equals_merging_on_the_full_precision_base() {
    let cfg = micro();
    let (img, prompts) = probe(cfg.vit.image_size);
    let base = SamLite::<f32>::build_base(cfg.clone(), 4).unwrap();
    let mut q = SamLite::<f32>::build(cfg.clone(), Some(&small_quant(Method::Qlora)), 4).unwrap();
    let mut l = SamLite::<f32>::build(cfg, Some(&small(Method::Lora)), 4).unwrap();
    randomize_lora_b(&mut q, 9);
    randomize_lora_b(&mut l, 9);
    let exported = merge_lora_model(&qlora_full_precision(&q, &base.store).unwrap()).unwrap();
    let direct = merge_lora_model(&l).unwrap();
    let d = probe_max_abs_diff(&exported, &direct, &img, &prompts).unwrap();
    assert!(d < 1e-5, "max diff {d}");
}

#[test]
fn exports_refuse_the_wrong_method() {
    let cfg = micro();
    let base = SamLite::<f32>::build_base(cfg.clone(), 0).unwrap();
    let l = SamLite::<f32>::build(cfg.clone(), Some(&small(Method::Lora)), 0).unwrap();
    assert!(qlora_full_precision(&l, &base.store).is_err());
    assert!(qlora_full_precision(&base, &base.store).is_err());
    let s = SamLite::<f32>::build(cfg, Some(&small(Method::Ssf)), 0).unwrap();
    assert!(merge_lora_model(&s).is_err());
}

#[test]
fn frozen_encoder_retains_no_block_activations() {
    let cfg = micro();
    let report = |m: Method| {
        let model = SamLite::<f32>::build(cfg.clone(), Some(&small_quant(m)), 0).unwrap();
        memory_report(&model).unwrap()
    };
    let frozen = report(Method::FreezeEncoder);
    let full = report(Method::FullFt);
    assert_eq!(frozen.encoder_block_bytes, 0);
    assert!(frozen.total_activation_bytes > 0);
    assert!(full.encoder_block_bytes > report(Method::LateFt).encoder_block_bytes);
    assert!(full.optimizer_bytes > report(Method::Lora).optimizer_bytes);
    let v = SamLite::<f32>::build(ModelConfig::preset("vit-b-shape").unwrap(), None, 0).unwrap();
    assert!(memory_report(&v).is_err());
}

#[test]
fn late_ranges_cover_the_final_blocks() {
    assert_eq!(late_range(0.5, 12), 6..12);
    assert_eq!(late_range(0.25, 12), 9..12);
    assert_eq!(late_range(0.08, 12), 11..12);
    assert_eq!(late_range(1.0, 12), 0..12);
    assert_eq!(late_range(0.01, 2), 1..2);
}

#[test]
fn fact_factors_are_shared_across_blocks() {
    let m = SamLite::<f32>::build(micro(), Some(&small(Method::Fact)), 0).unwrap();
    let names: Vec<&str> = m.store.metas().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("fact.u")).count(), 1);
    assert_eq!(names.iter().filter(|n| n.ends_with("fact.v")).count(), 1);
    let sigmas = names.iter().filter(|n| n.ends_with(".sigma")).count();
    assert_eq!(sigmas % m.arch.cfg.vit.depth, 0);
}

#[test]
fn encoder_output_has_the_neck_grid_shape() {
    let cfg = micro();
    let m = SamLite::<f32>::build_base(cfg.clone(), 0).unwrap();
    let mut t = Tape::<f32>::inference();
    let x = m.image_input(&mut t, &probe_image(1, cfg.vit.image_size)).unwrap();
    let f = m.arch.embed(&mut t, &m.store, x).unwrap();
    let g = cfg.vit.image_size / cfg.vit.patch_size;
    assert_eq!(t.shape(f), &[cfg.vit.neck_dim, g, g]);
    let mut t = Tape::<f32>::inference();
    let bad = peftsam_core::tensor::NdArray::<f32>::zeros(&[1, 16, 16]);
    assert!(m.image_input(&mut t, &bad).is_err());
}

#[test]
fn interactive_evaluation_is_reproducible() {
    let spec = GenSpec {
        image_size: 32,
        min_instances: 1,
        max_instances: 2,
        min_radius: 3.0,
        max_radius: 5.0,
        seed: 6,
        ..GenSpec::default()
    };
    let data: Vec<Sample> = (0..3)
        .map(|i| {
            let (image, labels) = render(&spec, 2, i).unwrap();
            Sample {
                id: format!("img{i}"),
                image,
                labels,
            }
        })
        .collect();
    let m = SamLite::<f32>::build(micro(), Some(&small(Method::Lora)), 0).unwrap();
    let a = evaluate_interactive(&m, &data, StartKind::Point, 3, Metric::Dice, 11, true).unwrap();
    let b = evaluate_interactive(&m, &data, StartKind::Point, 3, Metric::Dice, 11, true).unwrap();
    assert_eq!(a.records, b.records);
    for r in &a.records {
        assert_eq!(r.metrics.len(), 4);
        assert_eq!(r.trace.as_ref().unwrap().entries.len(), 4);
    }
}
