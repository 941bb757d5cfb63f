//! Plain-text metric tables.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use ond_core::evalkit::EvalReport;
use ond_core::looprunner::SEEN_GROUP;

/// Display name of an evaluation group: `G^holdout`, or `G_{0,1,..,i}`
/// for the groups seen up to session `i`.
pub fn group_label(report: &EvalReport) -> String {
    if report.group == SEEN_GROUP {
        let ids: Vec<String> = (0..=report.session).map(|i| i.to_string()).collect();
        format!("G_{{{}}}", ids.join(","))
    } else if report.group == "holdout" {
        "G^holdout".to_string()
    } else {
        report.group.clone()
    }
}

/// One row per report, FPR@95 and AUROC in percent.
pub fn render_table(rows: &[EvalReport]) -> String {
    let labels: Vec<String> = rows.iter().map(group_label).collect();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max("group".len());
    let mut s = String::new();
    writeln!(s, "session  {:<width$}  method    FPR@95(-)  AUROC(+)  n_id  n_ood", "group").unwrap();
    for (r, label) in rows.iter().zip(&labels) {
        writeln!(
            s,
            "S_{:<6} {:<width$}  {:<8}  {:>9.2}  {:>8.2}  {:>4}  {:>5}",
            r.session,
            label,
            r.method,
            100.0 * r.fpr_at_95,
            100.0 * r.auroc,
            r.n_id,
            r.n_ood
        )
        .unwrap();
    }
    s
}

/// The session-by-session table of a run's metric history.
pub fn emit_report(history: &[EvalReport]) -> Result<String> {
    if history.is_empty() {
        bail!("empty history: no session has completed");
    }
    Ok(render_table(history))
}
