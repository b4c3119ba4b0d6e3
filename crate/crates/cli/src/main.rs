use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cbt_core::checkpoint::{Checkpoint, CheckpointKind};
use cbt_core::config::RunConfig;
use cbt_core::probes::{reports_csv, train_probe, window_ablation, ProbeConfig, ProbeData, ProbeReport, ProbeTask};
use cbt_core::synthdata::{generate, Corpus, CorpusSpec};
use cbt_core::trainer::{MetricsRecord, Trainer};
use cbt_core::{CbtError, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "cbt", version, about = "Contrastive bidirectional transformer pretraining and probes")]
struct Cli {
    /// Worker threads for data generation and feature extraction.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        /// Corpus spec JSON (defaults when absent).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain on a corpus file.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "pretrain")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the resolved config and step-0 losses; write nothing.
        #[arg(long)]
        dry_run: bool,
        /// Save the initial (random) parameters without training.
        #[arg(long)]
        init_only: bool,
    },
    /// Train probes on a checkpoint's features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// JSON probe config, or a list of them.
        #[arg(long)]
        probe_config: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskArg>,
        /// Comma-separated observation windows; emits CSV.
        #[arg(long, value_delimiter = ',')]
        windows: Vec<usize>,
        /// With --windows, add input-average baseline rows.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Share of the corpus held out for testing.
        #[arg(long, default_value_t = 0.4)]
        test_fraction: f64,
    },
    /// Pretrain and probe every cell of a layers x heads grid.
    Ablate {
        /// For example "layers=1,2,4;heads=1,2,4,8".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "ablate")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    SeqClass,
    Anticipation,
    DenseLabel,
}

impl From<TaskArg> for ProbeTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::SeqClass => ProbeTask::SeqClass,
            TaskArg::Anticipation => ProbeTask::Anticipation,
            TaskArg::DenseLabel => ProbeTask::DenseLabel,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::Pretrain {
            config,
            corpus,
            out,
            seed,
            dry_run,
            init_only,
        } => pretrain(config.as_deref(), &corpus, &out, seed, dry_run, init_only),
        Command::Probe {
            checkpoint,
            corpus,
            probe_config,
            task,
            windows,
            baseline,
            seed,
            test_fraction,
        } => probe(ProbeArgs {
            checkpoint: &checkpoint,
            corpus: &corpus,
            probe_config: probe_config.as_deref(),
            task: task.map(Into::into),
            windows: &windows,
            baseline,
            seed,
            test_fraction,
        }),
        Command::Ablate {
            grid,
            config,
            corpus,
            out,
            seed,
        } => ablate(&grid, config.as_deref(), &corpus, &out, seed),
    }
}

/// `path` under `CBT_RUN_DIR` when that is set and `path` is relative.
fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os("CBT_RUN_DIR") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.probes.iter_mut().for_each(|p| p.seed = s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved config and the tool version into `dir`.
fn echo(dir: &Path, name: &str, config_json: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let doc = format!(
        "{{\"config\":{config_json},\"version\":{}}}\n",
        serde_json::to_string(env!("CARGO_PKG_VERSION"))?
    );
    fs::write(dir.join(name), doc)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: CorpusSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = resolve_out(out);
    eprintln!("generating {} sequences", spec.num_sequences);
    let corpus = generate(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    corpus.save(&out)?;
    let echo_path = out.with_extension("echo.json");
    fs::write(
        &echo_path,
        format!(
            "{{\"config\":{},\"version\":{}}}\n",
            spec.to_canonical_json()?,
            serde_json::to_string(env!("CARGO_PKG_VERSION"))?
        ),
    )?;
    let checksum = sha256_hex(&fs::read(&out)?);
    println!(
        "{}",
        serde_json::json!({"sequences": corpus.len(), "sha256": checksum, "path": out.display().to_string()})
    );
    Ok(())
}

fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    let s = &corpus.spec;
    if s.feature_dim != cfg.model.encoder.input_dim || s.vocab != cfg.model.vocab {
        return Err(CbtError::Config(format!(
            "corpus (feature_dim {}, vocab {}) does not fit the model (input {}, vocab {})",
            s.feature_dim, s.vocab, cfg.model.encoder.input_dim, cfg.model.vocab
        )));
    }
    Ok(())
}

fn pretrain(
    config: Option<&Path>,
    corpus_path: &Path,
    out: &Path,
    seed: Option<u64>,
    dry_run: bool,
    init_only: bool,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    let corpus = Corpus::load(corpus_path)?;
    cfg.corpus = corpus.spec.clone();
    check_corpus(&cfg, &corpus)?;
    let (train, _) = corpus.split(cfg.test_fraction)?;
    let trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;

    if dry_run {
        let r = trainer.evaluate_step(train, 0)?;
        println!(
            "{}",
            serde_json::json!({
                "config": serde_json::from_str::<serde_json::Value>(&cfg.to_canonical_json()?)?,
                "step0": {"l_bert": r.l_bert, "l_visual": r.l_visual, "l_cross": r.l_cross, "l_total": r.l_total},
            })
        );
        return Ok(());
    }

    let out = resolve_out(out);
    echo(&out, "config.json", &cfg.to_canonical_json()?)?;
    if init_only {
        let path = out.join("init.cbtk");
        Checkpoint::from_trainer(&trainer, Some(&corpus.spec), CheckpointKind::Regular).save(&path)?;
        println!("{}", serde_json::json!({"checkpoint": path.display().to_string(), "step": 0}));
        return Ok(());
    }
    let (trainer, result) = train_with_artifacts(trainer, train, &corpus.spec, &out)?;
    if let Err(e) = result {
        if matches!(e, CbtError::NonFinite { .. }) {
            let path = out.join("diagnostic.cbtk");
            Checkpoint::from_trainer(&trainer, Some(&corpus.spec), CheckpointKind::Diagnostic).save(&path)?;
            eprintln!("wrote {}", path.display());
        }
        return Err(e);
    }
    let final_path = out.join("final.cbtk");
    Checkpoint::from_trainer(&trainer, Some(&corpus.spec), CheckpointKind::Regular).save(&final_path)?;
    let last = trainer.evaluate_step(train, trainer.step)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": final_path.display().to_string(),
            "step": trainer.step,
            "l_total": last.l_total,
        })
    );
    Ok(())
}

/// Runs the trainer to its budget, writing metrics and periodic
/// checkpoints. Setup failures are returned as the outer error; a failure
/// during training is returned alongside the trainer state at that point.
fn train_with_artifacts(
    mut trainer: Trainer,
    data: &[cbt_core::synthdata::LabeledSequence],
    spec: &CorpusSpec,
    out: &Path,
) -> Result<(Trainer, Result<()>)> {
    let mut metrics = std::io::BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let start = Instant::now();
    let every = trainer.train.checkpoint_every;
    let steps = trainer.train.steps;
    let result = trainer.run(data, |t, r| {
        MetricsRecord::new(r, start.elapsed().as_millis() as u64).write_line(&mut metrics)?;
        if r.step % 50 == 0 || r.step == steps {
            eprintln!("{:?} step {} loss {:.4}", r.phase, r.step, r.l_total);
        }
        if every > 0 && t.warmup_finished() && t.step % every == 0 && t.step < steps {
            metrics.flush()?;
            Checkpoint::from_trainer(t, Some(spec), CheckpointKind::Regular)
                .save(&out.join(format!("step{:06}.cbtk", t.step)))?;
        }
        Ok(())
    });
    metrics.flush()?;
    Ok((trainer, result))
}

struct ProbeArgs<'a> {
    checkpoint: &'a Path,
    corpus: &'a Path,
    probe_config: Option<&'a Path>,
    task: Option<ProbeTask>,
    windows: &'a [usize],
    baseline: bool,
    seed: Option<u64>,
    test_fraction: f64,
}

fn load_probe_configs(path: Option<&Path>) -> Result<Vec<ProbeConfig>> {
    let Some(path) = path else {
        return Ok(vec![ProbeConfig::default()]);
    };
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let list = match value {
        serde_json::Value::Array(items) => items,
        one => vec![one],
    };
    list.into_iter()
        .map(|v| Ok(serde_json::from_value::<ProbeConfig>(v)?))
        .collect()
}

fn probe(a: ProbeArgs) -> Result<()> {
    let ck = Checkpoint::load(a.checkpoint)?;
    let corpus = Corpus::load(a.corpus)?;
    let model = &ck.meta.model;
    if corpus.spec.feature_dim != model.encoder.input_dim {
        return Err(CbtError::Config(format!(
            "corpus feature_dim {} does not match checkpoint input width {}",
            corpus.spec.feature_dim, model.encoder.input_dim
        )));
    }
    let (train, test) = corpus.split(a.test_fraction)?;
    let data = ProbeData {
        train,
        test,
        num_classes: corpus.spec.num_latent_classes,
    };
    let mut configs = load_probe_configs(a.probe_config)?;
    for c in &mut configs {
        if let Some(t) = a.task {
            c.task = t;
        }
        if let Some(s) = a.seed {
            c.seed = s;
        }
        c.validate()?;
    }
    let dir = a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();

    if !a.windows.is_empty() {
        let cfg = configs.first().cloned().unwrap_or_default();
        let mut reports: Vec<ProbeReport> = window_ablation(data, &ck.store, model, &cfg, a.windows)?;
        if !a.baseline {
            reports.retain(|r| r.method == "cbt");
        }
        let csv = reports_csv(&reports);
        fs::write(dir.join("probe_windows.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }

    let mut reports = Vec::with_capacity(configs.len());
    for cfg in &configs {
        eprintln!("probe {:?} {:?}", cfg.task, cfg.mode);
        reports.push(train_probe(data, &ck.store, model, cfg)?.report);
    }
    let json = serde_json::to_string(&reports)?;
    fs::write(dir.join("probe_report.json"), format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

#[derive(Debug, PartialEq)]
struct Cell {
    layers: usize,
    heads: usize,
}

fn parse_grid(grid: &str) -> Result<Vec<Cell>> {
    let mut layers = vec![];
    let mut heads = vec![];
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| CbtError::Config(format!("grid entry {part:?} lacks '='")))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CbtError::Config(format!("grid entry {part:?}: {e}")))?;
        match key.trim() {
            "layers" => layers = values,
            "heads" => heads = values,
            other => return Err(CbtError::Config(format!("unknown grid axis {other:?}"))),
        }
    }
    if layers.is_empty() || heads.is_empty() {
        return Err(CbtError::Config("grid needs both layers= and heads=".into()));
    }
    Ok(layers
        .iter()
        .flat_map(|&l| heads.iter().map(move |&h| Cell { layers: l, heads: h }))
        .collect())
}

fn ablate_cell(cfg: &RunConfig, cell: &Cell, corpus: &Corpus, dir: &Path) -> Result<ProbeReport> {
    let mut c = cfg.clone();
    c.model.visual.layers = cell.layers;
    c.model.visual.heads = cell.heads;
    c.validate()?;
    let (train, test) = corpus.split(c.test_fraction)?;
    fs::create_dir_all(dir)?;
    echo(dir, "config.json", &c.to_canonical_json()?)?;
    let trainer = Trainer::new(c.model.clone(), c.train.clone())?;
    let (trainer, result) = train_with_artifacts(trainer, train, &corpus.spec, dir)?;
    result?;
    let probe = c.probes.first().cloned().unwrap_or_default();
    let data = ProbeData {
        train,
        test,
        num_classes: corpus.spec.num_latent_classes,
    };
    Ok(train_probe(data, &trainer.store, &c.model, &probe)?.report)
}

fn ablate(grid: &str, config: Option<&Path>, corpus_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cells = parse_grid(grid)?;
    let mut cfg = load_config(config, seed)?;
    let corpus = Corpus::load(corpus_path)?;
    cfg.corpus = corpus.spec.clone();
    check_corpus(&cfg, &corpus)?;
    let out = resolve_out(out);
    echo(&out, "config.json", &cfg.to_canonical_json()?)?;
    let mut csv = String::from("layers,heads,accuracy\n");
    for cell in &cells {
        eprintln!("cell layers={} heads={}", cell.layers, cell.heads);
        let dir = out.join(format!("L{}_A{}", cell.layers, cell.heads));
        let acc = match ablate_cell(&cfg, cell, &corpus, &dir) {
            Ok(r) => r.accuracy.to_string(),
            Err(e) => {
                eprintln!("cell layers={} heads={} failed: {e}", cell.layers, cell.heads);
                "error".to_string()
            }
        };
        csv.push_str(&format!("{},{},{acc}\n", cell.layers, cell.heads));
    }
    fs::write(out.join("ablate.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
