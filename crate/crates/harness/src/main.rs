use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use peftsam_core::export::{merge_lora_model, probe_max_abs_diff, qlora_full_precision, unquantized_config};
use peftsam_core::interactive::EVAL_CORRECTIONS;
use peftsam_core::memory::{memory_report, probe_image, probe_prompts};
use peftsam_core::peft::{count_params, Alpha, LoraScope, Method, PeftConfig};
use peftsam_core::samlite::SamLite;
use peftsam_core::synth::{generate, GenSpec, Task};
use peftsam_core::{Error, Result};
use peftsam_harness::checkpoint::{load_base_weights, Checkpoint};
use peftsam_harness::config::{EvalTask, ExperimentConfig};
use peftsam_harness::evaluate::write_text;
use peftsam_harness::run::{build_model, eval_path, train_run};
use peftsam_harness::sweep::{load_grid, run_sweep, sweep_csv};

#[derive(Parser)]
#[command(name = "peftsam", version, about = "Desk-scale PEFT experiments for a SAM-style segmenter")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic blob dataset.
    GenData(GenArgs),
    /// Train one configuration with early stopping.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print trainable parameter counts.
    CountParams(CountArgs),
    /// Print retained activation bytes against the full_ft baseline.
    MemReport(CountArgs),
    /// Merge LoRA weights or re-base a QLoRA model on full-precision weights.
    Export(ExportArgs),
    /// Train and evaluate every point of a parameter grid.
    Sweep(SweepArgs),
    /// Write the seeded base model as a checkpoint.
    Init(InitArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_val: usize,
    #[arg(long, default_value_t = 20)]
    n_test: usize,
    #[arg(long, default_value_t = 3)]
    min_inst: usize,
    #[arg(long, default_value_t = 8)]
    max_inst: usize,
    #[arg(long, default_value_t = 6.0)]
    min_r: f64,
    #[arg(long, default_value_t = 14.0)]
    max_r: f64,
    #[arg(long, default_value_t = 0.4)]
    contrast: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Allow blobs to touch and overlap (later blobs win).
    #[arg(long)]
    overlap: bool,
    #[arg(long, default_value = "instance")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct MethodArgs {
    #[arg(long, default_value = "toy")]
    preset: String,
    /// PEFT method; omit for a model with the base freezing only.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    /// A number or "learned".
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lora_scope: Option<String>,
    #[arg(long)]
    proj: Option<usize>,
    /// A probability or "none".
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    late_fraction: Option<f64>,
    #[arg(long)]
    quant_block: Option<usize>,
}

impl MethodArgs {
    fn peft(&self) -> Result<Option<PeftConfig>> {
        let Some(m) = &self.method else {
            let stray = self.rank.is_some()
                || self.alpha.is_some()
                || self.lora_scope.is_some()
                || self.proj.is_some()
                || self.dropout.is_some()
                || self.late_fraction.is_some()
                || self.quant_block.is_some();
            if stray {
                return Err(Error::Config("method flags given without --method".into()));
            }
            return Ok(None);
        };
        let mut p = PeftConfig::new(m.parse::<Method>()?);
        p.rank = self.rank;
        p.alpha = self.alpha.as_deref().map(str::parse::<Alpha>).transpose()?;
        p.lora_scope = self.lora_scope.as_deref().map(str::parse::<LoraScope>).transpose()?;
        p.projection_size = self.proj;
        p.dropout = match self.dropout.as_deref() {
            None => None,
            Some(s) if s.eq_ignore_ascii_case("none") => Some(0.0),
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("dropout must be a number or \"none\", got {s:?}")))?,
            ),
        };
        p.late_fraction = self.late_fraction;
        p.quant_block = self.quant_block;
        p.validate()?;
        Ok(Some(p))
    }

    fn config(&self, seed: u64) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::new(&self.preset, self.peft()?, seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 25)]
    objects_per_image: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base weights checkpoint (see `init`).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Train on the first N training images only.
    #[arg(long)]
    n_train: Option<usize>,
    /// Tasks to train for; `ais` enables the instance-head loss.
    #[arg(long)]
    tasks: Option<String>,
}

impl TrainFlags {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.method.config(self.seed)?;
        cfg.data = Some(self.data.clone());
        cfg.train.batch_size = self.batch_size;
        cfg.train.objects_per_image = self.objects_per_image;
        cfg.train.lr = self.lr;
        cfg.train.patience = self.patience;
        cfg.train.max_epochs = self.max_epochs;
        cfg.init = self.init.clone();
        cfg.n_train = self.n_train;
        if let Some(t) = &self.tasks {
            cfg.tasks = EvalTask::parse_list(t)?;
        }
        cfg.validate_for_training()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ais,point,box,ip,ib")]
    tasks: String,
    #[arg(long, default_value_t = EVAL_CORRECTIONS)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_jsonl: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "qlora_full_precision")]
    merge_lora: bool,
    #[arg(long, requires = "base")]
    qlora_full_precision: bool,
    /// Full-precision base weights checkpoint.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out_csv: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Encoder-side trainable deltas on the vit-b-shape preset, in millions.
const EXPECTED_DELTAS: [(&str, f64); 9] = [
    ("full_ft", 89.6),
    ("attn_tune", 28.4),
    ("late_ft", 42.5),
    ("lora", 1.18),
    ("late_lora", 2.36),
    ("ssf", 0.22),
    ("bias_tune", 0.1),
    ("ln_tune", 0.037),
    ("adaptformer", 1.19),
];

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Format { .. } | Error::Shape { .. } | Error::DType { .. } => 3,
        Error::NonFinite(_) | Error::Tape(_) => 4,
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let task = match a.task.as_str() {
        "instance" => Task::Instance,
        "semantic" => Task::Semantic,
        t => return Err(Error::Config(format!("task must be instance or semantic, got {t:?}"))),
    };
    let spec = GenSpec {
        image_size: a.size,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        min_instances: a.min_inst,
        max_instances: a.max_inst,
        min_radius: a.min_r,
        max_radius: a.max_r,
        contrast: a.contrast,
        noise: a.noise,
        overlap_allowed: a.overlap,
        task,
        seed: a.seed,
    };
    generate(&spec, &a.out)?;
    println!("wrote {} images to {}", a.n_train + a.n_val + a.n_test, a.out.display());
    Ok(())
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.flags.config()?;
    let lp = log_path(&a.out);
    let mut log = File::create(&lp).map_err(|e| Error::Io { path: lp.clone(), source: e })?;
    let mut io_err = None;
    let run = train_run(&cfg, &mut |entry| {
        let line = serde_json::to_string(entry).expect("log entries serialize");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::Io { path: lp, source: e });
    }
    run.checkpoint.save(&a.out)?;
    let s = &run.outcome.summary;
    println!(
        "{}: {} epochs, best score {:.4} at epoch {}, stopped by {}",
        cfg.experiment_id(),
        s.epochs_run,
        s.best_score,
        s.best_epoch,
        s.stop_reason
    );
    println!("checkpoint {}", a.out.display());
    match run.outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let tasks = EvalTask::parse_list(&a.tasks)?;
    let out = eval_path(&a.ckpt, &a.data, &tasks, a.iters, a.seed)?;
    if let Some(p) = &a.out_jsonl {
        write_text(p, &out.jsonl())?;
    }
    let csv = out.csv();
    if let Some(p) = &a.out_csv {
        write_text(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_count(a: CountArgs) -> Result<()> {
    let cfg = a.method.config(a.seed)?;
    let model = SamLite::<f32>::build(cfg.model_config()?, cfg.peft.as_ref(), a.seed)?;
    let r = count_params(&model.store);
    println!("preset {}, method {}", cfg.preset, cfg.method_name());
    println!("{:<24} {:>14}", "total", r.total_params);
    println!("{:<24} {:>14}", "trainable", r.trainable_params);
    println!("{:<24} {:>14}", "frozen", r.frozen_params);
    println!("{:<24} {:>14}", "encoder trainable", r.encoder_trainable);
    println!("{:<24} {:>14}", "adapter params", r.adapter_params);
    println!("{:<24} {:>14}", "decoder side", r.decoder_side_params);
    if r.quantized_params > 0 {
        println!("{:<24} {:>14}", "quantized params", r.quantized_params);
        println!("{:<24} {:>14}", "quantized bytes", r.quantized_bytes);
    }
    println!();
    println!("{:<24} {:>14} {:>14}", "region", "trainable", "total");
    for (region, c) in &r.per_region {
        println!("{region:<24} {:>14} {:>14}", c.trainable, c.total);
    }
    if cfg.preset == "vit-b-shape" {
        let name = cfg.method_name();
        if let Some((_, m)) = EXPECTED_DELTAS.iter().find(|(n, _)| *n == name) {
            println!();
            println!(
                "encoder delta {:.3}M, reference {m}M (difference {:+.3}M)",
                r.encoder_trainable as f64 / 1e6,
                r.encoder_trainable as f64 / 1e6 - m
            );
        }
    }
    Ok(())
}

fn cmd_mem(a: CountArgs) -> Result<()> {
    let cfg = a.method.config(a.seed)?;
    let mc = cfg.model_config()?;
    if mc.count_only() {
        return Err(Error::Config(format!("preset {} is count-only; use toy", cfg.preset)));
    }
    let model = SamLite::<f32>::build(mc.clone(), cfg.peft.as_ref(), a.seed)?;
    let baseline = SamLite::<f32>::build(mc, Some(&PeftConfig::new(Method::FullFt)), a.seed)?;
    let r = memory_report(&model)?;
    let b = memory_report(&baseline)?;
    let ratio = |x: u64, y: u64| if y == 0 { 0.0 } else { x as f64 / y as f64 };
    println!("preset {}, method {} vs full_ft", cfg.preset, cfg.method_name());
    println!("{:<24} {:>14} {:>14} {:>8}", "region", "bytes", "full_ft", "ratio");
    let mut regions: Vec<&String> = r.regions.keys().chain(b.regions.keys()).collect();
    regions.sort();
    regions.dedup();
    for k in regions {
        let x = r.regions.get(k).copied().unwrap_or(0);
        let y = b.regions.get(k).copied().unwrap_or(0);
        println!("{k:<24} {x:>14} {y:>14} {:>8.2}", ratio(x, y));
    }
    println!(
        "{:<24} {:>14} {:>14} {:>8.2}",
        "encoder blocks",
        r.encoder_block_bytes,
        b.encoder_block_bytes,
        ratio(r.encoder_block_bytes, b.encoder_block_bytes)
    );
    println!(
        "{:<24} {:>14} {:>14} {:>8.2}",
        "total activations",
        r.total_activation_bytes,
        b.total_activation_bytes,
        ratio(r.total_activation_bytes, b.total_activation_bytes)
    );
    println!("{:<24} {:>14} {:>14}", "gradient bytes", r.grad_bytes, b.grad_bytes);
    println!("{:<24} {:>14} {:>14}", "optimizer bytes", r.optimizer_bytes, b.optimizer_bytes);
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let (mut config, model) = if a.merge_lora {
        let m = merge_lora_model(&ck.model)?;
        let mut c = ck.config.clone();
        c.peft = None;
        (c, m)
    } else if a.qlora_full_precision {
        let base = a.base.as_ref().expect("clap enforces --base");
        let m = qlora_full_precision(&ck.model, &load_base_weights(base)?)?;
        let mut c = ck.config.clone();
        c.peft = Some(unquantized_config(ck.config.peft.as_ref().expect("checked by export"))?);
        (c, m)
    } else {
        return Err(Error::Config("export needs --merge-lora or --qlora-full-precision".into()));
    };
    config.init = None;
    let size = model.arch.image_size();
    let image = probe_image(model.arch.cfg.vit.in_channels, size);
    let diff = probe_max_abs_diff(&ck.model, &model, &image, &probe_prompts(size))?;
    Checkpoint {
        config,
        training: ck.training.clone(),
        model,
    }
    .save(&a.out)?;
    println!("probe max abs diff vs source model: {diff:e}");
    println!("checkpoint {}", a.out.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = a.flags.config()?;
    let grid = load_grid(&a.grid)?;
    let rows = run_sweep(&base, &grid, a.jobs)?;
    let csv = sweep_csv(&rows);
    write_text(&a.out_csv, &csv)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} grid points, {failed} failed; table {}", rows.len(), a.out_csv.display());
    Ok(())
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let cfg = ExperimentConfig::new(&a.preset, None, a.seed);
    cfg.validate_for_training()?;
    Checkpoint::new(cfg.clone(), build_model(&cfg)?).save(&a.out)?;
    println!("base weights {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenData(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::CountParams(a) => cmd_count(a),
        Cmd::MemReport(a) => cmd_mem(a),
        Cmd::Export(a) => cmd_export(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Init(a) => cmd_init(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
