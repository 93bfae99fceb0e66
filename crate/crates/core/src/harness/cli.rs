//! Command-line front end. `run` is the whole program minus process exit,
//! so tests can drive it in-process.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::{parse_optional_variant, AttentionConfig, PoolingStrategy};
use crate::audit::reference::ReferenceTable;
use crate::audit::{audit_report, build_arch_with, Backbone};
use crate::blocks::Integration;
use crate::error::{Error, Result};
use crate::harness::ablate;
use crate::harness::analysis::importance_matrix;
use crate::harness::data::synth_dataset;
use crate::harness::models::{ModelConfig, ModelKind, ToyModel};
use crate::harness::optim::OptimizerKind;
use crate::harness::suites::{run_suite, Suite};
use crate::harness::train::{evaluate, metrics_csv, train, Checkpoint, Precision, Trained, TrainConfig};
use crate::param::ParamStore;
use crate::tensor::Real;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bridge-attn", version, about = "Bridge attention audits, gradient checks, toy training and CKA exports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter and FLOPs audit of a ResNet against the reference table.
    Audit(AuditArgs),
    /// Central-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train a toy model.
    Train(TrainArgs),
    /// Top-1 accuracy of a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Branch-importance CKA matrix of a toy model.
    Cka(CkaArgs),
    /// Toy-scale ablations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long, default_value = "resnet50")]
    arch: String,
    /// se, bav1, bav2 or none.
    #[arg(long, default_value = "none")]
    attn: String,
    #[arg(long, default_value_t = 16)]
    r: usize,
    #[arg(long, default_value = "avg")]
    pooling: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV replacing the built-in reference cells.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the per-case results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags override the config file, which overrides the defaults.
#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    attn: Option<String>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    integration: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// CIFAR-10 batch file or directory; switches the dataset to CIFAR-10.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    bypass_attention: bool,
    #[arg(long)]
    stop_at_acc: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Metrics log path; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CIFAR-10 data to score instead of the checkpoint's eval set.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CkaArgs {
    #[arg(long, default_value = "toy4")]
    model: String,
    #[arg(long, default_value = "bav2")]
    attn: String,
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score a trained checkpoint instead of a fresh seeded model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    pooling: bool,
    #[arg(long)]
    sources: bool,
    #[arg(long)]
    integration: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Also write the rows as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit code for a library error: failed checks give 1, bad input gives 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::Degenerate(_) => EXIT_CHECK_FAILED,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Audit(a) => audit(a, out, err),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Train(a) => train_cmd(a, out, err),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Cka(a) => cka(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn status(ok: bool) -> i32 {
    if ok {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn audit(a: AuditArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let backbone: Backbone = a.arch.parse()?;
    let pooling: PoolingStrategy = a.pooling.parse()?;
    let attention = parse_optional_variant(&a.attn)?.map(|v| AttentionConfig::new(v, a.r).with_pooling(pooling));
    let arch = build_arch_with(backbone, attention)?;
    let table = match &a.reference {
        Some(p) => ReferenceTable::load(p)?,
        None => ReferenceTable::builtin(),
    };
    let report = audit_report(&arch, &table)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_or_print(a.out.as_deref(), &json, out)?;
    writeln!(
        err,
        "{} {}: params {:?}, flops {:?}",
        report.arch, report.attention, report.params_status, report.flops_status
    )?;
    Ok(status(report.passed()))
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let suite: Suite = a.suite.parse()?;
    let results = run_suite(suite, a.seed)?;
    for r in &results {
        let null = r.null_abs.map_or(String::new(), |v| format!(" null_abs={v:.1e}"));
        writeln!(
            out,
            "{} {}/{} max_rel_err={:.3e} threshold={:.0e}{null}",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.name,
            r.max_rel_error,
            r.threshold
        )?;
    }
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    Ok(status(results.iter().all(|r| r.passed)))
}

fn apply_overrides(mut cfg: TrainConfig, o: TrainOverrides) -> Result<TrainConfig> {
    if let Some(m) = o.model {
        cfg.model = m.parse()?;
    }
    if let Some(v) = o.blocks {
        cfg.blocks = v;
    }
    if let Some(v) = o.attn {
        cfg.attention = parse_optional_variant(&v)?;
    }
    if let Some(v) = o.r {
        cfg.r = v;
    }
    if let Some(v) = o.pooling {
        cfg.pooling = v.parse()?;
    }
    if let Some(v) = o.integration {
        cfg.integration = v.parse::<Integration>()?;
    }
    if let Some(v) = o.optimizer {
        cfg.optimizer = v.parse::<OptimizerKind>()?;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.samples {
        cfg.samples = v;
    }
    if let Some(v) = o.classes {
        cfg.classes = v;
    }
    if let Some(p) = o.data {
        cfg.dataset = crate::harness::train::DatasetKind::Cifar10;
        cfg.data_path = Some(p);
    }
    if let Some(p) = o.eval_data {
        cfg.eval_path = Some(p);
    }
    if o.bypass_attention {
        cfg.bypass_attention = true;
    }
    if o.stop_at_acc.is_some() {
        cfg.stop_at_acc = o.stop_at_acc;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish_training<T: Real>(cfg: &TrainConfig, t: Trained<T>, log: Option<&Path>, save: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    write_or_print(log, &metrics_csv(&t.log), out)?;
    writeln!(err, "eval_acc {:.4}", t.eval_acc)?;
    if let Some(p) = save {
        Checkpoint::new(cfg, t.classes, &t.store).save(p)?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let TrainArgs { config, overrides, log, save } = a;
    let base = match &config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let cfg = apply_overrides(base, overrides)?;
    let (log, save) = (log.as_deref(), save.as_deref());
    match Precision::from_env(Precision::F32)? {
        Precision::F32 => finish_training(&cfg, train::<f32>(&cfg)?, log, save, out, err)?,
        Precision::F64 => finish_training(&cfg, train::<f64>(&cfg)?, log, save, out, err)?,
    }
    Ok(EXIT_OK)
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, mut store) = ckpt.restore()?;
    let data = match &a.data {
        Some(p) => crate::harness::data::load_cifar10(p)?,
        None => ckpt.config.datasets()?.1,
    };
    let acc = evaluate(&model, &mut store, &data, 64)?;
    writeln!(out, "{acc:.6}")?;
    Ok(EXIT_OK)
}

fn cka(a: CkaArgs, out: &mut dyn Write) -> Result<i32> {
    let (model, mut store, size) = match &a.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let (m, s) = ckpt.restore()?;
            (m, s, ckpt.config.image_size)
        }
        None => {
            let kind: ModelKind = a.model.parse()?;
            let attention = parse_optional_variant(&a.attn)?
                .map(|v| AttentionConfig::new(v, a.r))
                .ok_or_else(|| Error::config("cka needs an attention variant"))?;
            let cfg = match kind {
                ModelKind::ToyTransformer => ModelConfig::toy_transformer(Integration::BaMlp, Some(attention), 4),
                ModelKind::Toy4 => ModelConfig::toy4(Some(attention), 4),
                ModelKind::ToyConv => ModelConfig::toy_conv(2, Some(attention), 4),
            };
            let mut store = ParamStore::<f64>::new(a.seed);
            let model = ToyModel::new(&mut store, &cfg)?;
            (model, store, 16)
        }
    };
    let data = synth_dataset(a.seed, a.samples, 4, size)?;
    let matrix = importance_matrix(&model, &mut store, &data, a.samples)?;
    write_or_print(a.out.as_deref(), &matrix.to_csv_string()?, out)?;
    Ok(status(matrix.in_unit_range()))
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let all = !(a.pooling || a.sources || a.integration);
    let base = TrainConfig {
        epochs: a.epochs,
        ..ablate::short_run(a.seed)
    };
    let mut ok = true;
    let mut json = serde_json::Map::new();
    if all || a.pooling {
        let rows = ablate::pooling(&base)?;
        ok &= rows.iter().all(|r| r.is_valid());
        write!(out, "{}", ablate::train_table("pooling", &rows))?;
        json.insert("pooling".into(), serde_json::to_value(&rows)?);
    }
    if all || a.sources {
        let rows = ablate::sources(a.seed)?;
        ok &= rows.iter().all(|r| r.passed);
        write!(out, "{}", ablate::source_table(&rows))?;
        json.insert("sources".into(), serde_json::to_value(&rows)?);
    }
    if all || a.integration {
        let rows = ablate::integration(&base)?;
        ok &= rows.iter().all(|r| r.is_valid());
        write!(out, "{}", ablate::train_table("integration", &rows))?;
        json.insert("integration".into(), serde_json::to_value(&rows)?);
    }
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(status(ok))
}
