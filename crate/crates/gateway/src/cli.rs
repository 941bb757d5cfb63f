use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ond_core::benchkit::{build_benchmark, filter_classes_by_frequency, Benchmark};
use ond_core::evalkit::{baseline_scores, export_scores, model_score, render_score_export, Baseline, EvalReport, ScoreSet};
use ond_core::featurestore::{generate_synthetic, load_dataset, write_dataset, Dataset, Format};
use ond_core::looprunner::{initial_session, run_oracle_session, RunDir, SessionState, SEEN_GROUP};
use ond_core::optim::{parse_key_values, Method, TrainConfig};

use crate::config::{parse_overrides, read_pairs, Settings};
use crate::report::{emit_report, render_table};

#[derive(Debug, Parser)]
#[command(name = "ond", version, about = "Incremental novelty detection with a human feedback loop")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run directory.
    #[arg(long, global = true, env = "OND_RUN_DIR", default_value = "ond-run")]
    pub run_dir: PathBuf,
    /// Seed for data synthesis, benchmark split and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra KEY=VALUE setting, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnnotatorArg {
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalGroup {
    Holdout,
    Seen,
}

impl EvalGroup {
    fn name(self) -> &'static str {
        match self {
            EvalGroup::Holdout => "holdout",
            EvalGroup::Seen => SEEN_GROUP,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic feature dataset.
    Synth {
        /// Output file; `.jsonl` selects JSON lines, anything else binary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into session groups and lay out a run directory.
    BuildBench {
        /// Dataset to split; a synthetic one is generated when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run session S_0 on G_0.
    Train,
    /// Run one oracle-annotated session on a benchmark group.
    Session {
        #[arg(long)]
        group: usize,
        #[arg(long, value_enum, default_value = "oracle")]
        annotator: AnnotatorArg,
    },
    /// Run S_0 and the following oracle sessions, then print the history.
    Loop {
        #[arg(long, default_value_t = 5)]
        sessions: usize,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, value_enum, default_value = "oracle")]
        annotator: AnnotatorArg,
        /// Discard an existing trained state first.
        #[arg(long)]
        fresh: bool,
    },
    /// Score the current head and the logit baselines on one group.
    Eval {
        #[arg(long, value_enum, default_value = "holdout")]
        group: EvalGroup,
    },
    /// Write per-record scores and a histogram for one group and method.
    ExportScores {
        #[arg(long, value_enum, default_value = "holdout")]
        group: EvalGroup,
        /// `iconp`, `ibce`, `msp`, `energy` or `maxlogit`; defaults to the trained method.
        #[arg(long)]
        method: Option<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metric history table.
    Report,
    /// Serve the feedback API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Directory of static console assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => read_pairs(path)?,
            None => Vec::new(),
        };
        pairs.extend(parse_overrides(&self.set)?);
        Ok(pairs)
    }

    /// Settings for a new dataset or run.
    pub fn settings(&self) -> Result<Settings> {
        let mut s = Settings::from_pairs(&self.overrides()?)?;
        if let Some(seed) = self.seed {
            s.set_seed(seed);
        }
        Ok(s)
    }
}

fn synthesize(settings: &Settings) -> Result<Dataset> {
    Ok(generate_synthetic(&settings.synth)?)
}

fn split(dataset: &Dataset, settings: &Settings) -> Result<Benchmark> {
    let b = &settings.bench;
    let classes = filter_classes_by_frequency(dataset, b.min_class_count);
    let id = classes.iter().copied().filter(|c| dataset.header.is_id_class(*c)).collect();
    let ood = classes.iter().copied().filter(|c| !dataset.header.is_id_class(*c)).collect();
    Ok(build_benchmark(dataset, &id, &ood, b.sessions, b.g0_classes, b.seed)?)
}

fn create_run(root: &Path, settings: &Settings, dataset: Option<&Path>) -> Result<RunDir> {
    let dataset = match dataset {
        Some(path) => load_dataset(path, Format::from_path(path))?,
        None => synthesize(settings)?,
    };
    let bench = split(&dataset, settings)?;
    Ok(RunDir::create(root, &dataset, &bench, &settings.train)?)
}

fn run_exists(root: &Path) -> bool {
    root.join(RunDir::MANIFEST).exists()
}

/// Opens the run, creating it from the settings when absent. Settings on
/// the command line are layered over the stored training config (over the
/// method defaults if they switch method); the result replaces the stored
/// config, which is refused once the run has been trained with another.
fn open_run(common: &Common, method: Option<Method>, create: bool) -> Result<(RunDir, TrainConfig)> {
    let root = &common.run_dir;
    let mut overrides = common.overrides()?;
    if let Some(m) = method {
        overrides.push(("method".to_string(), m.to_string()));
    }
    if !run_exists(root) {
        if !create {
            bail!("no checkpoint in {}: no run has been built there", root.display());
        }
        let mut settings = Settings::from_pairs(&overrides)?;
        if let Some(seed) = common.seed {
            settings.set_seed(seed);
        }
        let run = create_run(root, &settings, None)?;
        return Ok((run, settings.train));
    }
    let run = RunDir::new(root);
    let stored = run.load_config()?;
    if overrides.is_empty() && common.seed.is_none() {
        return Ok((run, stored));
    }
    let mut train = Settings::from_pairs(&overrides)?.train;
    if train.method == stored.method {
        let mut pairs = parse_key_values(&stored.to_key_values())?;
        pairs.extend(overrides);
        train = Settings::from_pairs(&pairs)?.train;
    }
    if let Some(seed) = common.seed {
        train.seed = seed;
    }
    if train == stored {
        return Ok((run, stored));
    }
    if run.has_state() {
        bail!(
            "{} was trained with a different config; use a new run directory or loop --fresh",
            root.display()
        );
    }
    run.save_config(&train)?;
    Ok((run, train))
}

fn reset_run(run: &RunDir) -> Result<()> {
    for name in [RunDir::STATE, RunDir::LEDGER, RunDir::HISTORY] {
        let p = run.path(name);
        if p.exists() {
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    let ckpt = run.root().join("checkpoints");
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt).with_context(|| format!("removing {}", ckpt.display()))?;
    }
    Ok(())
}

struct Loaded {
    run: RunDir,
    dataset: Dataset,
    bench: Benchmark,
    cfg: TrainConfig,
}

fn load(common: &Common, method: Option<Method>, create: bool) -> Result<Loaded> {
    let (run, cfg) = open_run(common, method, create)?;
    let dataset = run.load_dataset()?;
    let bench = run.load_benchmark(&dataset)?;
    Ok(Loaded { run, dataset, bench, cfg })
}

fn new_rows(state: &SessionState, before: usize) -> String {
    render_table(&state.history[before..])
}

fn group_scores(l: &Loaded, state: &SessionState, group: EvalGroup, method: &str) -> Result<ScoreSet> {
    let g = match group {
        EvalGroup::Holdout => l.bench.holdout.clone(),
        EvalGroup::Seen => state.seen_group(&l.bench),
    };
    let name = group.name();
    if method == state.method.to_string() {
        return Ok(model_score(&state.model, &l.dataset, &g.records(), method, name)?);
    }
    let baseline: Baseline = method
        .parse()
        .with_context(|| format!("method {method:?} is neither the trained method nor a baseline"))?;
    Ok(baseline_scores(&l.dataset, &g.id_records, &g.ood_records, baseline, name)?)
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Synth { out: path } => {
            let ds = synthesize(&common.settings()?)?;
            let bytes = write_dataset(&ds.records, &ds.header, &path, Format::from_path(&path))?;
            writeln!(out, "wrote {} records ({bytes} bytes) to {}", ds.len(), path.display())?;
        }
        Command::BuildBench { dataset } => {
            let run = create_run(&common.run_dir, &common.settings()?, dataset.as_deref())?;
            let ds = run.load_dataset()?;
            let bench = run.load_benchmark(&ds)?;
            for g in bench.groups.iter().chain([&bench.holdout]) {
                writeln!(
                    out,
                    "group {}: {} id, {} ood records, {} ood classes",
                    g.tag,
                    g.id_records.len(),
                    g.ood_records.len(),
                    g.ood_classes.len()
                )?;
            }
            writeln!(out, "digest sha256:{}", bench.manifest_digest)?;
        }
        Command::Train => {
            let l = load(common, None, true)?;
            if l.run.has_state() {
                bail!("{} already holds a trained state", l.run.root().display());
            }
            let state = initial_session(&l.dataset, &l.bench, &l.cfg)?;
            l.run.save_state(&state)?;
            write!(out, "{}", new_rows(&state, 0))?;
        }
        Command::Session { group, annotator: AnnotatorArg::Oracle } => {
            let l = load(common, None, false)?;
            let state = l.run.load_state()?;
            let before = state.history.len();
            let next = run_oracle_session(&state, &l.dataset, &l.bench, group, &l.cfg)?;
            l.run.save_state(&next)?;
            write!(out, "{}", new_rows(&next, before))?;
        }
        Command::Loop {
            sessions,
            method,
            annotator: AnnotatorArg::Oracle,
            fresh,
        } => {
            if fresh && run_exists(&common.run_dir) {
                reset_run(&RunDir::new(&common.run_dir))?;
            }
            let l = load(common, method, true)?;
            if l.run.has_state() {
                bail!("{} already holds a trained state; pass --fresh to retrain", l.run.root().display());
            }
            if sessions == 0 || sessions > l.bench.trainable_count() {
                bail!("--sessions must be in 1..={}", l.bench.trainable_count());
            }
            let mut state = initial_session(&l.dataset, &l.bench, &l.cfg)?;
            l.run.save_state(&state)?;
            for group in 1..sessions {
                state = run_oracle_session(&state, &l.dataset, &l.bench, group, &l.cfg)?;
                l.run.save_state(&state)?;
            }
            write!(out, "{}", emit_report(&state.history)?)?;
        }
        Command::Eval { group } => {
            let l = load(common, None, false)?;
            let state = l.run.load_state()?;
            let session = state.sessions_completed - 1;
            let mut rows: Vec<EvalReport> = Vec::new();
            let methods = std::iter::once(state.method.to_string()).chain(Baseline::ALL.iter().map(|b| b.to_string()));
            for m in methods {
                rows.push(EvalReport::from_scores(&group_scores(&l, &state, group, &m)?, session)?);
            }
            write!(out, "{}", render_table(&rows))?;
        }
        Command::ExportScores { group, method, out: path } => {
            let l = load(common, None, false)?;
            let state = l.run.load_state()?;
            let method = method.unwrap_or_else(|| state.method.to_string());
            let scores = group_scores(&l, &state, group, &method)?;
            match path {
                Some(p) => {
                    export_scores(&scores, &p)?;
                    writeln!(out, "wrote {} scores to {}", scores.id_scores.len() + scores.ood_scores.len(), p.display())?;
                }
                None => write!(out, "{}", render_score_export(&scores)?)?,
            }
        }
        Command::Report => {
            let (run, _) = open_run(common, None, false)?;
            write!(out, "{}", emit_report(&run.load_history()?)?)?;
        }
        Command::Serve { port, bind, static_dir } => {
            let (run, _) = open_run(common, None, false)?;
            let svc = Arc::new(crate::api::Service::open(run)?);
            let app = crate::api::router(svc, static_dir);
            let addr = SocketAddr::new(bind, port);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
