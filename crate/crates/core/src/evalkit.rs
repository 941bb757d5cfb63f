//! Scoring and metrics.
//!
//! Every score is an id score: higher means "more in-distribution". The
//! classification rule is `score >= threshold => id`, inclusive on both
//! sides.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::Dataset;
use crate::ndnet::{feature_matrix, NdModel};

pub const DEFAULT_TPR: f64 = 0.95;
pub const HISTOGRAM_BINS: usize = 50;

/// Training-free scores computed from detector logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Msp,
    Energy,
    MaxLogit,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Msp, Baseline::Energy, Baseline::MaxLogit];

    pub fn score(self, logits: &[f32]) -> Result<f64> {
        match self {
            Baseline::Msp => msp_score(logits),
            Baseline::Energy => energy_score(logits, 1.0),
            Baseline::MaxLogit => maxlogit_score(logits),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Msp => "msp",
            Baseline::Energy => "energy",
            Baseline::MaxLogit => "maxlogit",
        })
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(Baseline::Msp),
            "energy" => Ok(Baseline::Energy),
            "maxlogit" => Ok(Baseline::MaxLogit),
            _ => Err(Error::InvalidConfig(format!("unknown baseline {s:?}"))),
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn non_empty(logits: &[f32]) -> Result<()> {
    if logits.is_empty() {
        Err(Error::Empty("logits"))
    } else {
        Ok(())
    }
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f32]) -> Result<f64> {
    non_empty(logits)?;
    let max = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    Ok(1.0 / denom)
}

pub fn maxlogit_score(logits: &[f32]) -> Result<f64> {
    non_empty(logits)?;
    Ok(logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max))
}

/// Negative free energy `T * log sum_k exp(l_k / T)`.
pub fn energy_score(logits: &[f32], temperature: f64) -> Result<f64> {
    non_empty(logits)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("energy temperature {temperature} must be > 0")));
    }
    Ok(temperature * log_sum_exp(logits.iter().map(|&v| v as f64 / temperature)))
}

/// Id and ood scores of one method on one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub method: String,
    pub group: String,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>, method: impl Into<String>, group: impl Into<String>) -> Self {
        Self {
            id_scores,
            ood_scores,
            method: method.into(),
            group: group.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() {
            return Err(Error::Empty("id scores"));
        }
        if self.ood_scores.is_empty() {
            return Err(Error::Empty("ood scores"));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|v| !v.is_finite()) {
            return Err(Error::malformed("scores", "non-finite score"));
        }
        Ok(())
    }
}

/// Scores the given records with a logit baseline.
pub fn baseline_scores(
    dataset: &Dataset,
    id_records: &[usize],
    ood_records: &[usize],
    baseline: Baseline,
    group: impl Into<String>,
) -> Result<ScoreSet> {
    let score = |idx: &usize| -> Result<f64> {
        let r = dataset.records.get(*idx).ok_or(Error::UnknownRecord(*idx))?;
        baseline.score(&r.logits)
    };
    let id = id_records.iter().map(score).collect::<Result<_>>()?;
    let ood = ood_records.iter().map(score).collect::<Result<_>>()?;
    Ok(ScoreSet::new(id, ood, baseline.to_string(), group))
}

/// Eval-mode scores `nu` for arbitrary records, in the given order.
pub fn model_scores(model: &NdModel, dataset: &Dataset, records: &[usize]) -> Result<Vec<f64>> {
    if let Some(&bad) = records.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::UnknownRecord(bad));
    }
    let x = feature_matrix(
        records.iter().map(|&i| dataset.records[i].feature.as_slice()),
        dataset.feature_dim(),
    )?;
    if x.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: x.ncols(),
        });
    }
    Ok(model.predict(x.view())?.nu.to_vec())
}

/// Scores records with the learned head, split by their id flag.
pub fn model_score(
    model: &NdModel,
    dataset: &Dataset,
    records: &[usize],
    method: impl Into<String>,
    group: impl Into<String>,
) -> Result<ScoreSet> {
    let scores = model_scores(model, dataset, records)?;
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for (&idx, s) in records.iter().zip(scores) {
        if dataset.records[idx].is_id {
            id.push(s);
        } else {
            ood.push(s);
        }
    }
    let set = ScoreSet::new(id, ood, method, group);
    set.validate()?;
    Ok(set)
}

/// Smallest `k` with `k / n >= target`.
fn required_hits(n: usize, target: f64) -> usize {
    let mut k = ((target * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= target {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < target {
        k += 1;
    }
    k
}

/// FPR at the largest threshold keeping at least `tpr_target` of the id
/// scores. Returns `(fpr, threshold)`.
pub fn fpr_at_tpr(scores: &ScoreSet, tpr_target: f64) -> Result<(f64, f64)> {
    scores.validate()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidConfig(format!("tpr target {tpr_target} not in (0, 1]")));
    }
    let mut id = scores.id_scores.clone();
    id.sort_by(|a, b| b.total_cmp(a));
    let k = required_hits(id.len(), tpr_target);
    let threshold = id[k - 1];
    let false_pos = scores.ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok((false_pos as f64 / scores.ood_scores.len() as f64, threshold))
}

/// Mann-Whitney AUROC from average ranks; ties count one half.
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let mut all: Vec<(f64, bool)> = scores
        .id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps every term an integer.
    let mut id_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j average to (i + 1 + j) / 2
        let ids_in_tie = all[i..j].iter().filter(|e| e.1).count() as u128;
        id_rank_sum2 += ids_in_tie * (i + 1 + j) as u128;
        i = j;
    }
    let n_id = scores.id_scores.len() as u128;
    let n_ood = scores.ood_scores.len() as u128;
    let u2 = id_rank_sum2 - n_id * (n_id + 1);
    Ok(u2 as f64 / (2 * n_id * n_ood) as f64)
}

/// Metrics of one method on one group after one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub session: usize,
    pub group: String,
    pub method: String,
    pub fpr_at_95: f64,
    pub auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub threshold: f64,
}

impl EvalReport {
    pub fn from_scores(scores: &ScoreSet, session: usize) -> Result<Self> {
        let (fpr, threshold) = fpr_at_tpr(scores, DEFAULT_TPR)?;
        Ok(Self {
            session,
            group: scores.group.clone(),
            method: scores.method.clone(),
            fpr_at_95: fpr,
            auroc: auroc(scores)?,
            n_id: scores.id_scores.len(),
            n_ood: scores.ood_scores.len(),
            threshold,
        })
    }

    /// One flat `key=value` record.
    pub fn to_key_values(&self) -> String {
        format!(
            "session={} group={} method={} fpr95={} auroc={} n_id={} n_ood={} threshold={}",
            self.session, self.group, self.method, self.fpr_at_95, self.auroc, self.n_id, self.n_ood, self.threshold
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub id_counts: Vec<usize>,
    pub ood_counts: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.id_counts.len()
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + width * b as f64, self.lo + width * (b + 1) as f64)
    }
}

/// Equal-width bins over the joint score range (widened by 0.5 on each
/// side when all scores coincide). The top edge is inclusive.
pub fn histogram(scores: &ScoreSet, bins: usize) -> Result<Histogram> {
    scores.validate()?;
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let all = scores.id_scores.iter().chain(&scores.ood_scores);
    let mut lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let bin_of = |s: f64| (((s - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut id_counts = vec![0; bins];
    let mut ood_counts = vec![0; bins];
    for &s in &scores.id_scores {
        id_counts[bin_of(s)] += 1;
    }
    for &s in &scores.ood_scores {
        ood_counts[bin_of(s)] += 1;
    }
    Ok(Histogram {
        lo,
        hi,
        id_counts,
        ood_counts,
    })
}

/// Renders the score export: a header, the two-column `score\tis_id`
/// table (id rows first, each side in input order) and a commented
/// histogram block.
pub fn render_score_export(scores: &ScoreSet) -> Result<String> {
    let hist = histogram(scores, HISTOGRAM_BINS)?;
    let mut s = String::new();
    writeln!(s, "# ond score export v1").unwrap();
    writeln!(
        s,
        "# method={} group={} n_id={} n_ood={}",
        scores.method,
        scores.group,
        scores.id_scores.len(),
        scores.ood_scores.len()
    )
    .unwrap();
    writeln!(s, "score\tis_id").unwrap();
    for v in &scores.id_scores {
        writeln!(s, "{v}\t1").unwrap();
    }
    for v in &scores.ood_scores {
        writeln!(s, "{v}\t0").unwrap();
    }
    writeln!(s, "# histogram bins={} lo={} hi={}", hist.bins(), hist.lo, hist.hi).unwrap();
    writeln!(s, "# bin\tlo\thi\tid\tood").unwrap();
    for b in 0..hist.bins() {
        let (l, h) = hist.bin_edges(b);
        writeln!(s, "# {b}\t{l}\t{h}\t{}\t{}", hist.id_counts[b], hist.ood_counts[b]).unwrap();
    }
    Ok(s)
}

pub fn export_scores(scores: &ScoreSet, path: &Path) -> Result<()> {
    let text = render_score_export(scores)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A parsed score export.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreExport {
    pub scores: ScoreSet,
    pub histogram: Histogram,
}

pub fn parse_score_export(text: &str) -> Result<ScoreExport> {
    let bad = |d: String| Error::malformed("score export", d);
    let mut method = String::new();
    let mut group = String::new();
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    let mut hist: Option<Histogram> = None;
    let mut seen_columns = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            let fields: Vec<(&str, &str)> = rest.split_whitespace().filter_map(|t| t.split_once('=')).collect();
            let get = |k: &str| fields.iter().find(|(key, _)| *key == k).map(|(_, v)| *v);
            if rest.starts_with("method=") {
                method = get("method").unwrap_or_default().to_string();
                group = get("group").unwrap_or_default().to_string();
            } else if rest.starts_with("histogram") {
                let num = |k: &str| -> Result<f64> {
                    get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("histogram {k}")))
                };
                let bins = num("bins")? as usize;
                hist = Some(Histogram {
                    lo: num("lo")?,
                    hi: num("hi")?,
                    id_counts: Vec::with_capacity(bins),
                    ood_counts: Vec::with_capacity(bins),
                });
            } else if let Some(h) = hist.as_mut() {
                let cols: Vec<&str> = rest.split('\t').collect();
                if cols.len() == 5 && cols[0] != "bin" {
                    let count = |c: &str| c.parse::<usize>().map_err(|_| bad(format!("bin count {c:?}")));
                    h.id_counts.push(count(cols[3])?);
                    h.ood_counts.push(count(cols[4])?);
                }
            }
            continue;
        }
        if line == "score\tis_id" {
            seen_columns = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (score, flag) = line.split_once('\t').ok_or_else(|| bad(format!("row {line:?}")))?;
        let score: f64 = score.parse().map_err(|_| bad(format!("score {score:?}")))?;
        match flag {
            "1" => id.push(score),
            "0" => ood.push(score),
            _ => return Err(bad(format!("is_id {flag:?}"))),
        }
    }
    if !seen_columns {
        return Err(bad("missing column header".into()));
    }
    let histogram = hist.ok_or_else(|| bad("missing histogram block".into()))?;
    Ok(ScoreExport {
        scores: ScoreSet::new(id, ood, method, group),
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn set(id: &[f64], ood: &[f64]) -> ScoreSet {
        ScoreSet::new(id.to_vec(), ood.to_vec(), "t", "g")
    }

    /// Exhaustive sweep: the largest candidate threshold with TPR >= target.
    pub(crate) fn fpr_oracle(s: &ScoreSet, target: f64) -> (f64, f64) {
        let mut candidates: Vec<f64> = s.id_scores.iter().chain(&s.ood_scores).copied().collect();
        candidates.sort_by(|a, b| b.total_cmp(a));
        for t in candidates {
            let tpr = s.id_scores.iter().filter(|&&v| v >= t).count() as f64 / s.id_scores.len() as f64;
            if tpr >= target {
                let fpr = s.ood_scores.iter().filter(|&&v| v >= t).count() as f64 / s.ood_scores.len() as f64;
                return (fpr, t);
            }
        }
        unreachable!("the minimum score accepts everything")
    }

    pub(crate) fn auroc_oracle(s: &ScoreSet) -> f64 {
        let mut wins = 0.0;
        for &a in &s.id_scores {
            for &b in &s.ood_scores {
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
        wins / (s.id_scores.len() * s.ood_scores.len()) as f64
    }

    #[test]
    fn msp_examples() {
        assert!((msp_score(&[1.0; 4]).unwrap() - 0.25).abs() < 1e-15);
        let e10 = 10f64.exp();
        assert!((msp_score(&[10.0, 0.0, 0.0]).unwrap() - e10 / (e10 + 2.0)).abs() < 1e-12);
        assert!((msp_score(&[10.0, 0.0, 0.0]).unwrap() - 0.99991).abs() < 1e-5);
        let a = msp_score(&[0.3, -1.2, 2.5]).unwrap();
        let b = msp_score(&[100.3, 98.8, 102.5]).unwrap();
        assert!((a - b).abs() < 1e-5);
        assert!(msp_score(&[]).is_err());
    }

    #[test]
    fn maxlogit_examples() {
        assert!((maxlogit_score(&[3.2, -1.0, 0.5]).unwrap() - 3.2f32 as f64).abs() < 1e-15);
        assert_eq!(maxlogit_score(&[1.5; 3]).unwrap(), 1.5);
        let mut r = rng::stream(1, 1);
        let logits: Vec<f32> = (0..5).map(|_| r.random_range(-4.0..4.0)).collect();
        let shifted: Vec<f32> = logits.iter().map(|v| v + 2.0).collect();
        let d = maxlogit_score(&shifted).unwrap() - maxlogit_score(&logits).unwrap();
        assert!((d - 2.0).abs() < 1e-5);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy_score(&[1.25], 1.0).unwrap(), 1.25);
        assert!((energy_score(&[0.0, 0.0], 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = energy_score(&[1000.0, 0.0], 1.0).unwrap();
        assert!(big.is_finite() && (big - 1000.0).abs() < 1e-9);
        assert!(energy_score(&[1.0], 0.0).is_err());
    }

    #[test]
    fn energy_approaches_maxlogit_at_low_temperature() {
        let mut r = rng::stream(2, 2);
        for _ in 0..50 {
            let logits: Vec<f32> = (0..6).map(|_| r.random_range(-5.0..5.0)).collect();
            let e = energy_score(&logits, 1e-3).unwrap();
            assert!((e - maxlogit_score(&logits).unwrap()).abs() < 1e-2);
        }
    }

    #[test]
    fn fpr_examples() {
        let (fpr, t) = fpr_at_tpr(&set(&[0.9, 0.8, 0.7], &[0.1, 0.2]), 0.95).unwrap();
        assert_eq!((fpr, t), (0.0, 0.7));
        let (fpr, _) = fpr_at_tpr(&set(&[0.4; 5], &[0.4; 3]), 0.95).unwrap();
        assert_eq!(fpr, 1.0);
        assert!(fpr_at_tpr(&set(&[0.4], &[]), 0.95).is_err());
    }

    #[test]
    fn exact_tpr_boundary_keeps_nineteen_of_twenty() {
        let id: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let (_, t) = fpr_at_tpr(&set(&id, &[0.5]), 0.95).unwrap();
        // 19/20 = 0.95 exactly, so the 19th largest score is the threshold.
        assert_eq!(t, 1.0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8], &[0.1, 0.2, 0.3])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 0.0);
        assert_eq!(auroc(&set(&[0.5; 4], &[0.5; 7])).unwrap(), 0.5);
        assert!(auroc(&set(&[], &[0.1])).is_err());
    }

    #[test]
    fn histogram_and_export_round_trip() {
        let s = set(&[0.91, 0.8, 0.75, 0.1], &[0.05, 0.3, 0.31]);
        let text = render_score_export(&s).unwrap();
        assert!(text.contains("# histogram bins=50 "));
        let parsed = parse_score_export(&text).unwrap();
        assert_eq!(parsed.scores, s);
        assert_eq!(parsed.histogram, histogram(&s, HISTOGRAM_BINS).unwrap());
        assert_eq!(parsed.histogram.id_counts.iter().sum::<usize>(), 4);
        assert_eq!(parsed.histogram.ood_counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn export_refuses_empty_side() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_scores(&set(&[0.5], &[]), &dir.path().join("s.tsv")).is_err());
    }

    fn arb_scores() -> impl Strategy<Value = ScoreSet> {
        // Few distinct values so ties are common.
        let v = prop_oneof![(0u8..12).prop_map(|k| k as f64 / 4.0), -3.0f64..3.0];
        (
            prop::collection::vec(v.clone(), 1..60),
            prop::collection::vec(v, 1..60),
        )
            .prop_map(|(id, ood)| ScoreSet::new(id, ood, "p", "g"))
    }

    proptest! {
        #[test]
        fn metrics_match_oracles(s in arb_scores()) {
            let (fpr, t) = fpr_at_tpr(&s, 0.95).unwrap();
            let (ofpr, ot) = fpr_oracle(&s, 0.95);
            prop_assert_eq!(t, ot);
            prop_assert!((fpr - ofpr).abs() <= 1e-9);
            prop_assert!((auroc(&s).unwrap() - auroc_oracle(&s)).abs() <= 1e-9);
        }

        #[test]
        fn monotone_transform_invariance(s in arb_scores()) {
            let f = |v: f64| (v * 0.7).exp() + v * 3.0;
            let t = ScoreSet::new(
                s.id_scores.iter().map(|&v| f(v)).collect(),
                s.ood_scores.iter().map(|&v| f(v)).collect(),
                "p",
                "g",
            );
            prop_assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());
            let (a, ta) = fpr_at_tpr(&s, 0.95).unwrap();
            let (b, tb) = fpr_at_tpr(&t, 0.95).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(f(ta), tb);
        }

        #[test]
        fn msp_shift_invariant(logits in prop::collection::vec(-20.0f32..20.0, 1..8), c in -30.0f32..30.0) {
            let shifted: Vec<f32> = logits.iter().map(|v| v + c).collect();
            // f32 rounding of the shifted logits bounds the agreement
            prop_assert!((msp_score(&logits).unwrap() - msp_score(&shifted).unwrap()).abs() < 1e-4);
        }
    }
}
