use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use unimix_core::data::{assemble_scenario, generate, load_manifest, write_manifest, CorpusSpec, Institute};
use unimix_core::train::{self, EvalTask, FinetuneTask, Trainer};
use unimix_core::{Checkpoint, Mode, QueryType, Scenario, TrainConfig, Vocab};

#[derive(Parser, Debug)]
#[command(name = "unimix", version, about = "Mixed paired/unpaired image-text pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (PGM images plus a JSONL manifest).
    GenData(GenData),
    /// Masked-modelling pre-training; writes pretrain.ckpt and loss.csv.
    Pretrain(Common),
    /// Attach a fresh head and fine-tune every parameter; writes finetune.ckpt.
    Finetune(Common),
    /// Run a metric pipeline; writes metrics.json.
    Evaluate(Common),
    /// Regenerate every image of a manifest; writes regen/*.pgm and metrics.json.
    Regenerate(Common),
    /// Pretrain -> finetune -> evaluate over a grid of scenarios and fractions.
    ScenarioSuite(Suite),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InstituteArg {
    A,
    B,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = InstituteArg::A)]
    institute: InstituteArg,
    /// Drop the report from every record (image-only corpus).
    #[arg(long)]
    no_reports: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, value_enum)]
    multiscale: Option<Switch>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    paired_frac: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    /// Pooled feature for fine-tuning heads: image, text or image_text.
    #[arg(long)]
    query: Option<String>,
}

#[derive(Args, Debug)]
struct Common {
    #[command(flatten)]
    over: Overrides,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Second-institute manifest (mixup2 pre-training).
    #[arg(long)]
    manifest_b: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args, Debug)]
struct Suite {
    #[command(flatten)]
    over: Overrides,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    manifest_b: Option<PathBuf>,
    /// Shared evaluation split.
    #[arg(long)]
    eval_manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "baseline1,baseline2,mixup1")]
    scenarios: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5,1.0")]
    fractions: Vec<f64>,
}

fn build_config(o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
        cfg.scenario.seed = s;
    }
    if let Some(m) = &o.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(b) = o.block_size {
        cfg.block_size = b;
    }
    if let Some(s) = o.multiscale {
        cfg.multiscale = matches!(s, Switch::On);
    }
    if let Some(s) = &o.scenario {
        cfg.scenario.scenario = s.parse::<Scenario>()?;
    }
    if let Some(f) = o.paired_frac {
        cfg.scenario.paired_fraction = f;
    }
    if o.max_steps.is_some() {
        cfg.max_steps = o.max_steps;
    }
    if o.finetune_steps.is_some() {
        cfg.finetune_max_steps = o.finetune_steps;
    }
    if let Some(q) = &o.query {
        cfg.query = q.parse::<QueryType>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn vocab_for(cfg: &TrainConfig) -> Result<Vocab> {
    Ok(match &cfg.vocab_file {
        Some(p) => Vocab::load(Path::new(p))?,
        None => Vocab::synthetic(),
    })
}

fn manifest(path: &Path, cfg: &TrainConfig) -> Result<Vec<unimix_core::StudyRecord>> {
    load_manifest(path, cfg.block_size).with_context(|| format!("loading {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(path: Option<&PathBuf>) -> Result<Checkpoint> {
    let path = path.context("--checkpoint is required")?;
    Ok(Checkpoint::load(path)?)
}

fn gen_data(a: &GenData) -> Result<()> {
    let institute = match a.institute {
        InstituteArg::A => Institute::A,
        InstituteArg::B => Institute::B,
    };
    let mut records = generate(&CorpusSpec::new(a.n, a.image_size, a.classes, a.seed).institute(institute))?;
    if a.no_reports {
        for r in &mut records {
            r.report.clear();
            r.has_report = false;
        }
    }
    let path = write_manifest(&records, &a.out_dir)?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn pretrain(c: &Common) -> Result<()> {
    let cfg = build_config(&c.over)?;
    let a = manifest(&c.manifest, &cfg)?;
    let b = match &c.manifest_b {
        Some(p) => manifest(p, &cfg)?,
        None => Vec::new(),
    };
    let sets = assemble_scenario(&a, &b, &cfg.scenario)?;
    let (trainer, log) = train::pretrain(&cfg, vocab_for(&cfg)?, &sets.pretrain)?;
    out_dir(&c.out_dir)?;
    trainer.checkpoint().save(&c.out_dir.join("pretrain.ckpt"))?;
    log.save(&c.out_dir.join("loss.csv"))?;
    let last = log.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps on {} tuples, final loss {last:.4}",
        trainer.step,
        sets.pretrain.len()
    );
    Ok(())
}

fn finetune(c: &Common) -> Result<()> {
    let cfg = build_config(&c.over)?;
    let task: FinetuneTask = c.task.as_deref().context("--task cls|hash is required")?.parse()?;
    let base = c.checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let records = manifest(&c.manifest, &cfg)?;
    // With an explicit fraction, fine-tune on the scenario's paired subset only.
    let records = if c.over.paired_frac.is_some() {
        assemble_scenario(&records, &[], &cfg.scenario)?.finetune
    } else {
        records
    };
    let trainer = train::finetune(base.as_ref(), &cfg, vocab_for(&cfg)?, task, &records)?;
    out_dir(&c.out_dir)?;
    trainer.checkpoint().save(&c.out_dir.join("finetune.ckpt"))?;
    println!("fine-tuned {} steps on {} records", trainer.step, records.len());
    Ok(())
}

fn evaluate(c: &Common, task: Option<EvalTask>) -> Result<()> {
    let ck = load_checkpoint(c.checkpoint.as_ref())?;
    let task = match task {
        Some(t) => t,
        None => c.task.as_deref().context("--task is required")?.parse()?,
    };
    let model = Trainer::from_checkpoint(&ck)?.model;
    let records = manifest(&c.manifest, &model.config)?;
    out_dir(&c.out_dir)?;
    let report = train::evaluate(&model, task, &records, Some(&c.out_dir))?;
    report.save(&c.out_dir.join("metrics.json"))?;
    print!("{}", report.to_json());
    Ok(())
}

fn scenario_suite(s: &Suite) -> Result<()> {
    let cfg = build_config(&s.over)?;
    let a = manifest(&s.manifest, &cfg)?;
    let b = match &s.manifest_b {
        Some(p) => manifest(p, &cfg)?,
        None => Vec::new(),
    };
    let eval = manifest(&s.eval_manifest, &cfg)?;
    let scenarios = s
        .scenarios
        .iter()
        .map(|x| x.parse::<Scenario>())
        .collect::<unimix_core::Result<Vec<_>>>()?;
    if scenarios.is_empty() || s.fractions.is_empty() {
        bail!("need at least one scenario and one fraction");
    }
    let table = train::run_scenario_suite(&cfg, &vocab_for(&cfg)?, &a, &b, &eval, &scenarios, &s.fractions)?;
    out_dir(&s.out_dir)?;
    table.save(&s.out_dir.join("suite.json"))?;
    for c in &table.cells {
        let auc = c.macro_auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        println!("{:<10} {:>5.2} {auc}", c.scenario, c.paired_fraction);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(c) => pretrain(c),
        Command::Finetune(c) => finetune(c),
        Command::Evaluate(c) => evaluate(c, None),
        Command::Regenerate(c) => evaluate(c, Some(EvalTask::Regen)),
        Command::ScenarioSuite(s) => scenario_suite(s),
    }
}
