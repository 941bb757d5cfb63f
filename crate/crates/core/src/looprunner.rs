//! The incremental feedback loop.
//!
//! Session `S_0` trains the head from scratch on `G_0`. Every later session
//! takes a batch of newly labelled records (from an oracle or from human
//! accept/reject verdicts), adds it to the replay store and retrains the
//! warm-started head on the whole store. After each session the head is
//! evaluated on the holdout group and on the union of the groups seen so
//! far.
//!
//! Labels in the replay store are the resolved feedback labels, not the
//! dataset's ground truth; with the oracle annotator the two coincide.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::benchkit::{benchmark_manifest, parse_manifest, Benchmark, Group, GroupTag};
use crate::error::{Error, Result};
use crate::evalkit::{baseline_scores, model_score, model_scores, Baseline, EvalReport};
use crate::featurestore::{load_dataset, write_dataset, Dataset, Format};
use crate::losses::{bce_head_loss, bce_with_logits, supcon_loss};
use crate::ndnet::{
    feature_matrix, init_model, Gradients, MixPlan, Mixup, Mode, NdModel, RegularizerConfig, ScorePath, Upstream,
};
use crate::optim::{early_stop_check, lr_at, parse_key_values, Adam, Method, Optimizer, Phase, Sgd, TrainConfig};
use crate::rng;

/// `nu >= 0.5` is an id verdict.
pub const VERDICT_THRESHOLD: f64 = 0.5;
/// Group label used for the union of every consumed group.
pub const SEEN_GROUP: &str = "seen";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Id,
    Ood,
}

impl Verdict {
    pub fn from_score(nu: f64) -> Self {
        if nu >= VERDICT_THRESHOLD {
            Verdict::Id
        } else {
            Verdict::Ood
        }
    }

    pub fn from_is_id(is_id: bool) -> Self {
        if is_id {
            Verdict::Id
        } else {
            Verdict::Ood
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Verdict::Id => Verdict::Ood,
            Verdict::Ood => Verdict::Id,
        }
    }

    pub fn is_id(self) -> bool {
        self == Verdict::Id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotator {
    Oracle,
    Human,
}

/// A model verdict awaiting an annotator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record: usize,
    pub verdict: Verdict,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub record: usize,
    pub model_verdict: Verdict,
    pub score: f64,
    pub answer: Answer,
    /// The model verdict if accepted, its opposite if rejected.
    pub resolved: Verdict,
    pub annotator: Annotator,
    /// Position in the ledger.
    pub sequence: u64,
    /// Wall-clock milliseconds; absent for simulated annotators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

/// One answer from an annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackInput {
    pub record: usize,
    pub answer: Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub record: usize,
    pub is_id: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub method: Method,
    pub model: NdModel,
    /// Sessions completed so far; the next session has this index.
    pub sessions_completed: usize,
    pub replay: Vec<ReplayEntry>,
    /// Benchmark groups whose records have been handed out for feedback.
    pub consumed_groups: BTreeSet<usize>,
    /// Verdicts served for annotation and not yet answered.
    pub awaiting: BTreeMap<usize, Prediction>,
    /// Answered records not yet trained on; they form the next group.
    pub pending: Vec<ReplayEntry>,
    pub ledger: Vec<FeedbackRecord>,
    pub history: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub last_loss: f64,
    /// Epoch whose parameters were kept, when early stopping was active.
    pub best_epoch: Option<usize>,
}

fn split_batches(n: usize, batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Loss and gradients of one training step.
///
/// iConP: contrastive loss on `z` plus BCE on the detached projection.
/// Embeddings with zero norm (all ReLUs off) sit out the contrastive term;
/// their ReLU gradient would be zero regardless.
///
/// iBCE: BCE on the score logit through the whole network, with the
/// configured dropout and mixup.
pub fn step_gradients(
    model: &NdModel,
    x: &Array2<f64>,
    labels: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, Gradients)> {
    match cfg.method {
        Method::Iconp => {
            let fwd = model.forward(x.view(), Mode::Train, &RegularizerConfig::default(), seed)?;
            let live: Vec<usize> = (0..fwd.z.nrows())
                .filter(|&i| fwd.z.row(i).iter().any(|&v| v != 0.0))
                .collect();
            let mut d_z = Array2::zeros(fwd.z.raw_dim());
            let mut loss = 0.0;
            if live.len() >= 2 {
                let z_live = fwd.z.select(Axis(0), &live);
                let y_live: Vec<f64> = live.iter().map(|&i| labels[i]).collect();
                match supcon_loss(z_live.view(), &y_live, cfg.temperature) {
                    Ok(con) => {
                        loss += con.value;
                        for (k, &i) in live.iter().enumerate() {
                            d_z.row_mut(i).assign(&con.grad_embeddings.row(k));
                        }
                    }
                    Err(Error::NoPositivePairs) => {}
                    Err(e) => return Err(e),
                }
            }
            let bce = bce_head_loss(fwd.z.view(), labels, model.projection.view())?;
            loss += bce.value;
            let d_logit = bce.grad_logits.expect("bce populates logit gradients");
            let grads = model.backward(
                &fwd,
                Upstream {
                    d_embedding: Some(d_z.view()),
                    d_logit: Some(d_logit.view()),
                    score_path: ScorePath::Detached,
                },
            )?;
            Ok((loss, grads))
        }
        Method::Ibce => {
            let reg = cfg.regularizer;
            let mut mix_rng = rng::stream(seed, 40);
            let (x_in, mut targets) = if reg.mixup == Mixup::Input && x.nrows() >= 2 {
                let plan = MixPlan::draw(x.nrows(), &reg, &mut mix_rng);
                (plan.mix_rows(x.view()), plan.mix_labels(labels))
            } else {
                (x.clone(), labels.to_vec())
            };
            let fwd = model.forward(x_in.view(), Mode::Train, &reg, seed)?;
            if let Some((_, plan)) = &fwd.manifold_mix {
                targets = plan.mix_labels(&targets);
            }
            let (loss, d_logit) = bce_with_logits(fwd.logits.view(), &targets)?;
            let grads = model.backward(
                &fwd,
                Upstream {
                    d_embedding: None,
                    d_logit: Some(d_logit.view()),
                    score_path: ScorePath::Attached,
                },
            )?;
            Ok((loss, grads))
        }
    }
}

fn labelled_matrix(dataset: &Dataset, pool: &[ReplayEntry]) -> Result<(Array2<f64>, Vec<f64>)> {
    if let Some(e) = pool.iter().find(|e| e.record >= dataset.len()) {
        return Err(Error::UnknownRecord(e.record));
    }
    let x = feature_matrix(
        pool.iter().map(|e| dataset.records[e.record].feature.as_slice()),
        dataset.feature_dim(),
    )?;
    let y = pool.iter().map(|e| if e.is_id { 1.0 } else { 0.0 }).collect();
    Ok((x, y))
}

/// Stratified validation split: a `fraction` of each label class.
fn validation_split(pool: &[ReplayEntry], fraction: f64, rng: &mut rng::Rng) -> (Vec<ReplayEntry>, Vec<ReplayEntry>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [true, false] {
        let mut side: Vec<ReplayEntry> = pool.iter().copied().filter(|e| e.is_id == label).collect();
        side.shuffle(rng);
        let n_val = ((side.len() as f64 * fraction).round() as usize).min(side.len().saturating_sub(1));
        val.extend_from_slice(&side[..n_val]);
        train.extend_from_slice(&side[n_val..]);
    }
    (train, val)
}

/// Trains `model` in place on `pool` for one session.
pub fn train_session(
    model: &mut NdModel,
    dataset: &Dataset,
    pool: &[ReplayEntry],
    cfg: &TrainConfig,
    phase: Phase,
    session: usize,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if pool.len() < 2 {
        return Err(Error::Insufficient(format!("training pool of {} records cannot form a batch", pool.len())));
    }
    let mut rng = rng::stream(cfg.seed, 100 + session as u64);
    let early_stopping = cfg.method == Method::Ibce && phase == Phase::Initial && cfg.validation_fraction > 0.0;
    let (train_pool, val_pool) = if early_stopping {
        validation_split(pool, cfg.validation_fraction, &mut rng)
    } else {
        (pool.to_vec(), Vec::new())
    };
    let (x, y) = labelled_matrix(dataset, &train_pool)?;
    let val = if val_pool.is_empty() {
        None
    } else {
        Some(labelled_matrix(dataset, &val_pool)?)
    };

    let mut optimizer: Box<dyn Optimizer> = match cfg.method {
        Method::Iconp => Box::new(Sgd::new(cfg.momentum)),
        Method::Ibce => Box::new(Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)),
    };
    let epochs = cfg.session_epochs(phase);
    let mut val_history: Vec<f64> = Vec::new();
    let mut best: Option<NdModel> = None;
    let mut summary = TrainSummary {
        epochs_run: 0,
        last_loss: f64::NAN,
        best_epoch: None,
    };
    for epoch in 0..epochs {
        let lr = lr_at(epoch, cfg, phase)?;
        let mut epoch_loss = 0.0;
        let batches = split_batches(x.nrows(), cfg.batch_size, &mut rng);
        for batch in &batches {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (loss, grads) = step_gradients(model, &xb, &yb, cfg, rng.random())?;
            optimizer.step(&mut model.parameters_mut(), &grads.tensors(), lr)?;
            epoch_loss += loss * batch.len() as f64;
        }
        summary.epochs_run = epoch + 1;
        summary.last_loss = epoch_loss / x.nrows() as f64;
        if !model.is_finite() {
            return Err(Error::InvalidConfig(format!("training diverged in epoch {epoch}")));
        }

        if let Some((vx, vy)) = &val {
            let logits = model.predict(vx.view())?.logits;
            let (vloss, _) = bce_with_logits(logits.view(), vy)?;
            val_history.push(vloss);
            let es = early_stop_check(&val_history, cfg.early_stopping_window)?;
            if es.best_epoch == epoch {
                best = Some(model.clone());
            }
            summary.best_epoch = Some(es.best_epoch);
            if es.stop {
                break;
            }
        }
    }
    if let Some(best) = best {
        *model = best;
    }
    Ok(summary)
}

fn group_entries(dataset: &Dataset, group: &Group) -> Vec<ReplayEntry> {
    group
        .records()
        .into_iter()
        .map(|record| ReplayEntry {
            record,
            is_id: dataset.records[record].is_id,
        })
        .collect()
}

impl SessionState {
    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn next_session(&self) -> usize {
        self.sessions_completed
    }

    /// Union of every consumed group, for the cumulative evaluation.
    pub fn seen_group(&self, bench: &Benchmark) -> Group {
        let mut acc = Group {
            tag: GroupTag::Session(self.sessions_completed.saturating_sub(1)),
            id_records: Vec::new(),
            ood_records: Vec::new(),
            ood_classes: BTreeSet::new(),
        };
        for &g in &self.consumed_groups {
            let g = &bench.groups[g];
            acc.id_records.extend(&g.id_records);
            acc.ood_records.extend(&g.ood_records);
            acc.ood_classes.extend(&g.ood_classes);
        }
        acc.id_records.sort_unstable();
        acc.ood_records.sort_unstable();
        acc
    }

    /// Evaluates the current head on the holdout and on the seen groups.
    pub fn evaluate(&self, dataset: &Dataset, bench: &Benchmark, session: usize) -> Result<Vec<EvalReport>> {
        let method = self.method.to_string();
        let mut reports = Vec::with_capacity(2);
        for (name, group) in [("holdout", bench.holdout.clone()), (SEEN_GROUP, self.seen_group(bench))] {
            let scores = model_score(&self.model, dataset, &group.records(), method.clone(), name)?;
            reports.push(EvalReport::from_scores(&scores, session)?);
        }
        Ok(reports)
    }

    /// Current head's verdicts on arbitrary records.
    pub fn predict(&self, dataset: &Dataset, records: &[usize]) -> Result<Vec<Prediction>> {
        let scores = model_scores(&self.model, dataset, records)?;
        Ok(records
            .iter()
            .zip(scores)
            .map(|(&record, score)| Prediction {
                record,
                verdict: Verdict::from_score(score),
                score,
            })
            .collect())
    }

    /// Serves benchmark group `group` for annotation: every record gets the
    /// current head's verdict and waits in [`SessionState::awaiting`].
    pub fn open_group(&mut self, dataset: &Dataset, bench: &Benchmark, group: usize) -> Result<Vec<Prediction>> {
        if self.consumed_groups.contains(&group) {
            return Err(Error::GroupConsumed(group));
        }
        let g = bench
            .groups
            .get(group)
            .ok_or_else(|| Error::InvalidConfig(format!("benchmark has no group {group}")))?;
        let predictions = self.predict(dataset, &g.records())?;
        for p in &predictions {
            self.awaiting.insert(p.record, *p);
        }
        self.consumed_groups.insert(group);
        Ok(predictions)
    }

    /// Opens the lowest unconsumed trainable group, if any is left.
    pub fn open_next_group(&mut self, dataset: &Dataset, bench: &Benchmark) -> Result<Option<usize>> {
        match (0..bench.trainable_count()).find(|g| !self.consumed_groups.contains(g)) {
            Some(g) => {
                self.open_group(dataset, bench, g)?;
                Ok(Some(g))
            }
            None => Ok(None),
        }
    }

    /// Records annotator answers against the stored verdicts.
    ///
    /// All-or-nothing: if any answer refers to an unknown, unserved or
    /// already answered record, nothing is written.
    pub fn ingest_feedback(
        &mut self,
        batch: &[FeedbackInput],
        annotator: Annotator,
        timestamp_ms: Option<u64>,
    ) -> Result<Vec<FeedbackRecord>> {
        let mut seen = BTreeSet::new();
        for input in batch {
            if !seen.insert(input.record) || self.ledger.iter().any(|f| f.record == input.record) {
                return Err(Error::DuplicateFeedback(input.record));
            }
            if !self.awaiting.contains_key(&input.record) {
                return Err(Error::UnknownRecord(input.record));
            }
        }
        let mut written = Vec::with_capacity(batch.len());
        for input in batch {
            let p = self.awaiting.remove(&input.record).expect("checked above");
            let resolved = match input.answer {
                Answer::Accept => p.verdict,
                Answer::Reject => p.verdict.flipped(),
            };
            let record = FeedbackRecord {
                record: p.record,
                model_verdict: p.verdict,
                score: p.score,
                answer: input.answer,
                resolved,
                annotator,
                sequence: self.ledger.len() as u64,
                timestamp_ms,
            };
            self.pending.push(ReplayEntry {
                record: p.record,
                is_id: resolved.is_id(),
            });
            self.ledger.push(record.clone());
            written.push(record);
        }
        Ok(written)
    }
}

/// Simulated annotator: accepts a verdict exactly when it matches the
/// record's ground truth.
pub fn oracle_annotate(dataset: &Dataset, predictions: &[Prediction]) -> Vec<FeedbackInput> {
    predictions
        .iter()
        .map(|p| FeedbackInput {
            record: p.record,
            answer: if p.verdict == Verdict::from_is_id(dataset.records[p.record].is_id) {
                Answer::Accept
            } else {
                Answer::Reject
            },
        })
        .collect()
}

/// Human-feedback entry point; see [`SessionState::ingest_feedback`].
pub fn ingest_human_feedback(state: &mut SessionState, batch: &[FeedbackInput], timestamp_ms: Option<u64>) -> Result<Vec<FeedbackRecord>> {
    state.ingest_feedback(batch, Annotator::Human, timestamp_ms)
}

/// Session `S_0`: a fresh head trained on the ground-truth labels of `G_0`.
pub fn initial_session(dataset: &Dataset, bench: &Benchmark, cfg: &TrainConfig) -> Result<SessionState> {
    cfg.validate()?;
    let g0 = bench
        .groups
        .first()
        .ok_or_else(|| Error::Insufficient("benchmark has no trainable group".into()))?;
    let pool = group_entries(dataset, g0);
    if pool.len() < 2 {
        return Err(Error::Insufficient("G_0 is too small to form a batch".into()));
    }
    let mut model = init_model(dataset.feature_dim(), &cfg.widths, cfg.seed)?;
    train_session(&mut model, dataset, &pool, cfg, Phase::Initial, 0)?;
    let mut state = SessionState {
        method: cfg.method,
        model,
        sessions_completed: 1,
        replay: pool,
        consumed_groups: [0].into_iter().collect(),
        awaiting: BTreeMap::new(),
        pending: Vec::new(),
        ledger: Vec::new(),
        history: Vec::new(),
    };
    let reports = state.evaluate(dataset, bench, 0)?;
    state.history.extend(reports);
    Ok(state)
}

/// One incremental session on the replay store plus every pending
/// answered record. With nothing pending this is a replay-only session.
pub fn run_session(state: &SessionState, dataset: &Dataset, bench: &Benchmark, cfg: &TrainConfig) -> Result<SessionState> {
    if cfg.method != state.method {
        return Err(Error::InvalidConfig(format!(
            "state was trained with {}, config asks for {}",
            state.method, cfg.method
        )));
    }
    let session = state.sessions_completed;
    let mut next = state.clone();
    next.replay.append(&mut next.pending);
    train_session(&mut next.model, dataset, &next.replay, cfg, Phase::Incremental, session)?;
    next.sessions_completed += 1;
    let reports = next.evaluate(dataset, bench, session)?;
    next.history.extend(reports);
    Ok(next)
}

/// Serves benchmark group `group`, answers it with the oracle and runs the
/// session on it.
pub fn run_oracle_session(
    state: &SessionState,
    dataset: &Dataset,
    bench: &Benchmark,
    group: usize,
    cfg: &TrainConfig,
) -> Result<SessionState> {
    let mut staged = state.clone();
    let predictions = staged.open_group(dataset, bench, group)?;
    let answers = oracle_annotate(dataset, &predictions);
    staged.ingest_feedback(&answers, Annotator::Oracle, None)?;
    run_session(&staged, dataset, bench, cfg)
}

/// `S_0` followed by oracle sessions on `G_1..` until `sessions` sessions
/// have run or the benchmark runs out of groups.
pub fn run_oracle_loop(dataset: &Dataset, bench: &Benchmark, cfg: &TrainConfig, sessions: usize) -> Result<SessionState> {
    let mut state = initial_session(dataset, bench, cfg)?;
    for group in 1..sessions.min(bench.trainable_count()) {
        state = run_oracle_session(&state, dataset, bench, group, cfg)?;
    }
    Ok(state)
}

/// Baseline reports on the holdout and on groups `0..=upto`.
pub fn baseline_reports(dataset: &Dataset, bench: &Benchmark, upto: usize, session: usize) -> Result<Vec<EvalReport>> {
    let seen = bench.cumulative(upto);
    let mut out = Vec::new();
    for baseline in Baseline::ALL {
        for (name, g) in [("holdout", &bench.holdout), (SEEN_GROUP, &seen)] {
            let scores = baseline_scores(dataset, &g.id_records, &g.ood_records, baseline, name)?;
            out.push(EvalReport::from_scores(&scores, session)?);
        }
    }
    Ok(out)
}

const HISTORY_HEADER: &str = "session\tgroup\tmethod\tfpr95\tauroc\tn_id\tn_ood\tthreshold";

/// The metric history as a tab-separated table.
pub fn render_history(history: &[EvalReport]) -> String {
    let mut s = String::new();
    writeln!(s, "{HISTORY_HEADER}").unwrap();
    for r in history {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.session, r.group, r.method, r.fpr_at_95, r.auroc, r.n_id, r.n_ood, r.threshold
        )
        .unwrap();
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<EvalReport>> {
    let bad = |d: String| Error::malformed("history", d);
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(bad("missing header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 8 {
                return Err(bad(format!("row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("number {s:?}")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("integer {s:?}")));
            Ok(EvalReport {
                session: int(c[0])?,
                group: c[1].to_string(),
                method: c[2].to_string(),
                fpr_at_95: num(c[3])?,
                auroc: num(c[4])?,
                n_id: int(c[5])?,
                n_ood: int(c[6])?,
                threshold: num(c[7])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateFile {
    method: Method,
    sessions_completed: usize,
    replay: Vec<ReplayEntry>,
    consumed_groups: BTreeSet<usize>,
    awaiting: Vec<Prediction>,
    pending: Vec<ReplayEntry>,
}

/// On-disk layout of a run:
///
/// ```text
/// dataset.ondf          the feature records
/// benchmark.manifest    group -> record indices, with digest
/// train.conf            training config, key=value
/// state.json            replay store, queue and session counter
/// ledger.jsonl          append-only feedback ledger
/// history.tsv           metric history
/// checkpoints/session_NNN.ondm
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub const DATASET: &'static str = "dataset.ondf";
    pub const MANIFEST: &'static str = "benchmark.manifest";
    pub const CONFIG: &'static str = "train.conf";
    pub const STATE: &'static str = "state.json";
    pub const LEDGER: &'static str = "ledger.jsonl";
    pub const HISTORY: &'static str = "history.tsv";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint_path(&self, session: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("session_{session:03}.ondm"))
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    fn read(&self, name: &str) -> Result<String> {
        let path = self.path(name);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    /// Lays out a fresh run; refuses to overwrite an existing one.
    pub fn create(root: impl Into<PathBuf>, dataset: &Dataset, bench: &Benchmark, cfg: &TrainConfig) -> Result<Self> {
        let dir = Self::new(root);
        bench.validate(dataset)?;
        cfg.validate()?;
        if dir.path(Self::MANIFEST).exists() {
            return Err(Error::InvalidConfig(format!("{} already holds a run", dir.root.display())));
        }
        fs::create_dir_all(dir.root.join("checkpoints")).map_err(|e| Error::io(&dir.root, e))?;
        write_dataset(&dataset.records, &dataset.header, &dir.path(Self::DATASET), Format::Binary)?;
        dir.write(Self::MANIFEST, benchmark_manifest(bench).as_bytes())?;
        dir.write(Self::CONFIG, cfg.to_key_values().as_bytes())?;
        Ok(dir)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        load_dataset(&self.path(Self::DATASET), Format::Binary)
    }

    pub fn load_benchmark(&self, dataset: &Dataset) -> Result<Benchmark> {
        let bench = parse_manifest(&self.read(Self::MANIFEST)?)?;
        bench.validate(dataset)?;
        Ok(bench)
    }

    pub fn load_config(&self) -> Result<TrainConfig> {
        let pairs = parse_key_values(&self.read(Self::CONFIG)?)?;
        TrainConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn save_config(&self, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        self.write(Self::CONFIG, cfg.to_key_values().as_bytes())
    }

    pub fn has_state(&self) -> bool {
        self.path(Self::STATE).exists()
    }

    pub fn load_history(&self) -> Result<Vec<EvalReport>> {
        if !self.path(Self::HISTORY).exists() {
            return Ok(Vec::new());
        }
        parse_history(&self.read(Self::HISTORY)?)
    }

    pub fn load_ledger(&self) -> Result<Vec<FeedbackRecord>> {
        let path = self.path(Self::LEDGER);
        if !path.exists() {
            return Ok(Vec::new());
        }
        self.read(Self::LEDGER)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::malformed("ledger", e.to_string())))
            .collect()
    }

    pub fn load_state(&self) -> Result<SessionState> {
        if !self.has_state() {
            return Err(Error::NoCheckpoint(self.root.clone()));
        }
        let file: StateFile =
            serde_json::from_str(&self.read(Self::STATE)?).map_err(|e| Error::malformed("state", e.to_string()))?;
        let last = file
            .sessions_completed
            .checked_sub(1)
            .ok_or_else(|| Error::NoCheckpoint(self.root.clone()))?;
        let ckpt = self.checkpoint_path(last);
        if !ckpt.exists() {
            return Err(Error::NoCheckpoint(self.root.clone()));
        }
        Ok(SessionState {
            method: file.method,
            model: NdModel::load(&ckpt)?,
            sessions_completed: file.sessions_completed,
            replay: file.replay,
            consumed_groups: file.consumed_groups,
            awaiting: file.awaiting.into_iter().map(|p| (p.record, p)).collect(),
            pending: file.pending,
            ledger: self.load_ledger()?,
            history: self.load_history()?,
        })
    }

    /// Persists `state`. The ledger file only ever grows: entries already on
    /// disk are kept, newer ones appended.
    pub fn save_state(&self, state: &SessionState) -> Result<()> {
        let last = state
            .sessions_completed
            .checked_sub(1)
            .ok_or_else(|| Error::InvalidConfig("no completed session to save".into()))?;
        let ckpt = self.checkpoint_path(last);
        if let Some(parent) = ckpt.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if !ckpt.exists() {
            state.model.save(&ckpt)?;
        }
        self.append_ledger(&state.ledger)?;
        self.write(Self::HISTORY, render_history(&state.history).as_bytes())?;
        let file = StateFile {
            method: state.method,
            sessions_completed: state.sessions_completed,
            replay: state.replay.clone(),
            consumed_groups: state.consumed_groups.clone(),
            awaiting: state.awaiting.values().copied().collect(),
            pending: state.pending.clone(),
        };
        let json = serde_json::to_vec_pretty(&file).map_err(|e| Error::malformed("state", e.to_string()))?;
        self.write(Self::STATE, &json)
    }

    /// Appends the ledger entries not yet on disk.
    pub fn append_ledger(&self, ledger: &[FeedbackRecord]) -> Result<()> {
        let on_disk = self.load_ledger()?.len();
        if ledger.len() < on_disk {
            return Err(Error::InvalidConfig("ledger on disk is longer than in memory".into()));
        }
        if ledger.len() == on_disk {
            return Ok(());
        }
        let path = self.path(Self::LEDGER);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = Vec::new();
        for f in &ledger[on_disk..] {
            serde_json::to_writer(&mut buf, f).map_err(|e| Error::malformed("ledger", e.to_string()))?;
            buf.push(b'\n');
        }
        file.write_all(&buf).map_err(|e| Error::io(&path, e))
    }
}

/// Mean of `values`; `NaN` when empty.
pub fn mean(values: &[f64]) -> f64 {
    Array1::from(values.to_vec()).mean().unwrap_or(f64::NAN)
}
