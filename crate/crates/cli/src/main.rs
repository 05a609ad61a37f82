use std::fs;
use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use motionmap::config::RunConfig;
use motionmap::data::{generate_synthetic_corpus, load_corpus, load_index, mine_multimodal_gt, save_corpus, save_index, window_corpus};
use motionmap::export::{
    check_manifest, render_exports, write_exports, FigureManifest, DENSITY_ANALOGUE, MANIFEST_FILE, OVERLAY_ANALOGUE,
    RANKED_ANALOGUE,
};
use motionmap::pipeline::{MotionMapModel, Protocol};
use motionmap::train::{evaluate_run, run_training, Checkpoint, Dataset, TrainHooks};
use motionmap::{Error, Result};
use motionmap_explorer::SessionState;

const CONFIG_ECHO: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.mmap";
const CORPUS_FILE: &str = "corpus.mmcorpus";

/// Multimodal pose forecasting with MotionMaps: generate data, train,
/// evaluate, export figures and serve the explorer API.
#[derive(Debug, Parser)]
#[command(name = "motionmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set motionmap.m=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its multimodal ground-truth index.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every training stage and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Train on this corpus instead of generating one.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from a partially trained checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute the metrics report on the held-out split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of forecasts per sample.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
    },
    /// Write density maps, heatmap overlays and ranked forecasts.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        /// Which exports to write.
        #[arg(long, value_enum, default_value_t = ExportKind::All)]
        what: ExportKind,
    },
    /// Serve the explorer HTTP API over a checkpoint.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Verify that an export directory matches its manifest.
    CheckManifest {
        /// Export directory holding `manifest.toml`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportKind {
    All,
    Density,
    Overlay,
    Ranked,
}

impl ExportKind {
    fn includes(self, analogue: &str) -> bool {
        match self {
            Self::All => true,
            Self::Density => analogue == DENSITY_ANALOGUE,
            Self::Overlay => analogue == OVERLAY_ANALOGUE,
            Self::Ranked => analogue == RANKED_ANALOGUE,
        }
    }
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ConfigArgs {
    fn overrides(&self, extra: Vec<String>) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(seed) = self.seed {
            all.push(format!("seed={seed}"));
        }
        all.extend(extra);
        all
    }

    fn resolve(&self, extra: Vec<String>) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        RunConfig::from_toml_with(&text, &self.overrides(extra))
    }

    /// Starts from `--config` or the checkpoint's own configuration; the
    /// result must describe the same training run.
    fn resolve_for(&self, checkpoint: &Checkpoint, extra: Vec<String>) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => checkpoint.config()?.to_toml(),
        };
        let cfg = RunConfig::from_toml_with(&base, &self.overrides(extra))?;
        if cfg.training_hash() != checkpoint.spec_hash() {
            return Err(Error::VersionMismatch(
                "configuration differs from the one the checkpoint was trained with".into(),
            ));
        }
        Ok(cfg)
    }
}

fn eval_overrides(budget: Option<usize>, protocol: Option<Protocol>) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(b) = budget {
        v.push(format!("evaluate.budget={b}"));
    }
    if let Some(p) = protocol {
        v.push(format!("evaluate.protocol=\"{p}\""));
    }
    v
}

fn create_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(CONFIG_ECHO), cfg.to_toml().as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_model(checkpoint: &Checkpoint, cfg: &RunConfig) -> Result<MotionMapModel> {
    let mut model = checkpoint.model()?;
    model.inference = cfg.inference;
    Ok(model)
}

fn cmd_generate(config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = config.resolve(vec![])?;
    create_out(out, &cfg)?;
    let corpus = generate_synthetic_corpus(&cfg.generator, cfg.seed)?;
    let samples = window_corpus(&corpus, &cfg.window)?;
    let index = mine_multimodal_gt(&samples, &corpus.topology, cfg.mining.threshold)?;
    let path = out.join(CORPUS_FILE);
    save_corpus(&corpus, &path)?;
    save_index(&index, &path.with_extension("mmgt"))?;
    eprintln!(
        "generated {} sequences, {} windows -> {}",
        corpus.sequences.len(),
        samples.len(),
        path.display()
    );
    Ok(())
}

fn training_data(cfg: &RunConfig, corpus: Option<&Path>) -> Result<Dataset> {
    let Some(path) = corpus else {
        return Dataset::synthetic(cfg);
    };
    let corpus = load_corpus(path)?;
    let sidecar = path.with_extension("mmgt");
    let index = match sidecar.exists() {
        true => Some(load_index(&sidecar)?).filter(|i| i.threshold == cfg.mining.threshold),
        false => None,
    };
    Dataset::prepare(cfg, corpus, index)
}

fn cmd_train(config: &ConfigArgs, out: &Path, corpus: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = config.resolve(vec![])?;
    create_out(out, &cfg)?;
    let data = training_data(&cfg, corpus)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let progress_path = out.join("progress.jsonl");
    let mut progress = fs::File::create(&progress_path).map_err(|e| Error::io(&progress_path, e))?;
    let mut io_error = None;
    let ck_path = out.join(CHECKPOINT_FILE);
    let started = Instant::now();
    let checkpoint = {
        let progress = &mut progress;
        let io_error = &mut io_error;
        let mut hooks = TrainHooks {
            on_epoch: Box::new(move |r| {
                let line = serde_json::to_string(&r).expect("record serializes");
                if let Err(e) = writeln!(progress, "{line}") {
                    io_error.get_or_insert(e);
                }
            }),
            on_stage: Box::new(|stage, ck| {
                eprintln!("[{:>7.1}s] finished {stage}", started.elapsed().as_secs_f64());
                ck.save(&ck_path)
            }),
        };
        run_training(&cfg, &data, resume, &mut hooks)?
    };
    if let Some(e) = io_error {
        return Err(Error::io(&progress_path, e));
    }
    checkpoint.save(&ck_path)?;
    let log = checkpoint.log()?;
    let log_json = serde_json::to_string_pretty(&log).expect("log serializes");
    write(&out.join("training_log.json"), format!("{log_json}\n").as_bytes())?;
    eprintln!("stages: {}", checkpoint.stages()?.join(" -> "));
    eprintln!("checkpoint: {}", ck_path.display());
    Ok(())
}

fn cmd_evaluate(config: &ConfigArgs, checkpoint: &Path, out: &Path, extra: Vec<String>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = config.resolve_for(&ck, extra)?;
    create_out(out, &cfg)?;
    let model = load_model(&ck, &cfg)?;
    let data = ck.dataset()?;
    let eval = evaluate_run(&model, &data, &cfg)?;
    let table = eval.report.to_table();
    write(&out.join("metrics.txt"), table.as_bytes())?;
    write(&out.join("metrics.jsonl"), eval.report.to_jsonl().as_bytes())?;
    let summary = serde_json::to_string_pretty(&eval.summary()).expect("summary serializes");
    write(&out.join("summary.json"), format!("{summary}\n").as_bytes())?;
    let per_sample: String = eval
        .per_sample
        .iter()
        .map(|s| serde_json::to_string(s).expect("sample serializes") + "\n")
        .collect();
    write(&out.join("per_sample.jsonl"), per_sample.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_export(config: &ConfigArgs, checkpoint: &Path, out: &Path, extra: Vec<String>, what: ExportKind) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = config.resolve_for(&ck, extra)?;
    create_out(out, &cfg)?;
    let model = load_model(&ck, &cfg)?;
    let data = ck.dataset()?;
    let topo = &data.corpus.topology;
    let index = motionmap::pipeline::mine_for_protocol(
        &data.samples,
        &data.split,
        topo,
        cfg.mining.threshold,
        cfg.evaluate.protocol,
    )?;
    let (train, test) = (data.train_samples(), data.test_samples());
    let chosen: Vec<_> = test.iter().take(cfg.evaluate.export_samples).collect();
    let command = format!("motionmap export --checkpoint {}", checkpoint.display());
    let (mut files, mut manifest) = render_exports(
        &model,
        &train,
        &test,
        &index,
        &chosen,
        cfg.evaluate.budget,
        cfg.motionmap.sigma,
        &command,
    )?;
    manifest.entries.retain(|e| what.includes(&e.analogue));
    files.retain(|path, _| manifest.entries.iter().any(|e| &e.export == path));
    write_exports(out, &files, &manifest)?;
    eprintln!("wrote {} exports to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_serve(config: &ConfigArgs, checkpoint: &Path, port: Option<u16>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let extra = port.map(|p| vec![format!("serve.port={p}")]).unwrap_or_default();
    let cfg = config.resolve_for(&ck, extra)?;
    let ck = ck.with_inference(&cfg)?;
    let state = Arc::new(SessionState::from_checkpoint(&ck)?);
    let host: IpAddr = cfg
        .serve
        .host
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("serve.host `{}` is not an IP address", cfg.serve.host)))?;
    let addr = SocketAddr::new(host, cfg.serve.port);
    let static_dir = cfg.serve.static_dir.as_ref().map(PathBuf::from);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io(checkpoint, e))?;
    eprintln!("serving {} on http://{addr}", checkpoint.display());
    runtime
        .block_on(motionmap_explorer::serve(state, addr, static_dir))
        .map_err(|e| Error::io(checkpoint, e))
}

fn cmd_check_manifest(dir: &Path) -> Result<bool> {
    let manifest = FigureManifest::load(&dir.join(MANIFEST_FILE))?;
    let issues = check_manifest(&manifest, dir)?;
    for i in &issues {
        println!("{i}");
    }
    if issues.is_empty() {
        println!("ok: {} exports match the manifest", manifest.entries.len());
    }
    Ok(issues.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { config, out } => cmd_generate(&config, &out)?,
        Command::Train {
            config,
            out,
            corpus,
            resume,
        } => cmd_train(&config, &out, corpus.as_deref(), resume.as_deref())?,
        Command::Evaluate {
            config,
            checkpoint,
            out,
            budget,
            protocol,
        } => cmd_evaluate(&config, &checkpoint, &out, eval_overrides(budget, protocol))?,
        Command::Export {
            config,
            checkpoint,
            out,
            budget,
            protocol,
            what,
        } => cmd_export(&config, &checkpoint, &out, eval_overrides(budget, protocol), what)?,
        Command::Serve { config, checkpoint, port } => cmd_serve(&config, &checkpoint, port)?,
        Command::CheckManifest { out } => return cmd_check_manifest(&out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
