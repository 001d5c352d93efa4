//! Report emission: JSON for machines, aligned-column text for humans.
//! Reports carry no timestamps or wall-clock data, so reruns with the same
//! seed produce byte-identical files.

use crate::error::{Error, Result};
use crate::harness::gradcheck::GradcheckReport;
use crate::harness::metrics::{ArmMetrics, EvalReport, MetricsReport};
use crate::harness::train::{AblationReport, AlphaStudyReport};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialization")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value) + "\n").map_err(|e| Error::io(path, e))
}

fn arm_line(out: &mut String, name: &str, aligned: f64, perturbed: f64) {
    let _ = writeln!(out, "{name:<18} {aligned:>10.4} {perturbed:>10.4} {:>10.4}", aligned - perturbed);
}

fn render_eval(out: &mut String, eval: &EvalReport) {
    let _ = writeln!(out, "== evaluation ==");
    let _ = writeln!(
        out,
        "perturbation: rotation_std={} translation_std={} scale_std={}",
        eval.perturb.rotation_std, eval.perturb.translation_std, eval.perturb.scale_std
    );
    let _ = writeln!(
        out,
        "probes: {}   genuine pairs: {}   impostor pairs: {}",
        eval.n_probes, eval.n_genuine_pairs, eval.n_impostor_pairs
    );
    let _ = writeln!(out, "{:<18} {:>10} {:>10} {:>10}", "metric", "aligned", "perturbed", "gap");
    arm_line(out, "accuracy", eval.aligned.accuracy, eval.perturbed.accuracy);
    arm_line(out, "rank1", eval.aligned.rank1, eval.perturbed.rank1);
    arm_line(out, "rank5", eval.aligned.rank5, eval.perturbed.rank5);
    let tar_rows = |a: &ArmMetrics| a.tar.clone();
    for (ta, tp) in tar_rows(&eval.aligned).iter().zip(tar_rows(&eval.perturbed).iter()) {
        let flag = if ta.reliable && tp.reliable { "" } else { " !" };
        let name = format!("tar@far={}{flag}", ta.far);
        arm_line(out, &name, ta.tar, tp.tar);
    }
    if eval.aligned.tar.iter().any(|t| !t.reliable) {
        let _ = writeln!(out, "(!) entry not resolvable by the impostor-pair count");
    }
}

pub fn render_metrics(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode: {}", report.mode);
    if let Some(t) = &report.training {
        let _ = writeln!(out, "== training ==");
        let _ = writeln!(out, "iterations: {}", t.l2.len());
        if let (Some(first), Some(last)) = (t.l2.first(), t.l2.last()) {
            let _ = writeln!(out, "benign loss (l2): first {first:.6}  last {last:.6}");
        }
        if let (Some(first), Some(last)) = (t.l1.first(), t.l1.last()) {
            let _ = writeln!(out, "adversarial loss (l1): first {first:.6}  last {last:.6}");
        }
    }
    if let Some(a) = &report.attack {
        let _ = writeln!(out, "== attack ==");
        let _ = writeln!(
            out,
            "samples: {}  feasible: {}  ascent fraction: {:.4}",
            a.samples, a.feasible, a.ascent_fraction
        );
        let _ = writeln!(
            out,
            "pre-projection deviation (all-nonzero-gradient samples, n={}): mean {:.6}  std {:.6}",
            a.all_nonzero_grad_samples, a.mean_pre_projection_deviation, a.std_pre_projection_deviation
        );
    }
    if let Some(e) = &report.evaluation {
        render_eval(&mut out, e);
    }
    out
}

pub fn render_gradcheck(report: &GradcheckReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<26} {:>7} {:>8} {:>14} {:>10} {:>6}",
        "suite", "trials", "ok", "worst_rel_err", "tolerance", "pass"
    );
    for e in &report.entries {
        let _ = writeln!(
            out,
            "{:<26} {:>7} {:>8} {:>14.3e} {:>10.0e} {:>6}",
            e.suite,
            e.trials,
            e.within_tolerance,
            e.worst_rel_err,
            e.tolerance,
            if e.pass { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(out, "overall: {}", if report.pass { "pass" } else { "FAIL" });
    out
}

pub fn render_ablation(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<9} {:<12} {:>12} {:>14} {:>10} {:>10}",
        "scale", "rotation", "translation", "acc_aligned", "acc_perturbed", "rank1_al", "rank1_pt"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:<6} {:<9} {:<12} {:>12.4} {:>14.4} {:>10.4} {:>10.4}",
            mark(row.scale),
            mark(row.rotation),
            mark(row.translation),
            row.eval.aligned.accuracy,
            row.eval.perturbed.accuracy,
            row.eval.aligned.rank1,
            row.eval.perturbed.rank1,
        );
    }
    out
}

pub fn render_alpha_study(report: &AlphaStudyReport) -> String {
    let mut out = String::new();
    for (name, arm) in [("fixed", &report.fixed), ("random", &report.random)] {
        let _ = writeln!(out, "---- alpha {name} ----");
        out.push_str(&render_metrics(arm));
    }
    out
}

/// Render a JSON report of any known schema as text.
pub fn render_report_file(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(r) = serde_json::from_str::<MetricsReport>(&text) {
        return Ok(render_metrics(&r));
    }
    if let Ok(r) = serde_json::from_str::<GradcheckReport>(&text) {
        return Ok(render_gradcheck(&r));
    }
    if let Ok(r) = serde_json::from_str::<AblationReport>(&text) {
        return Ok(render_ablation(&r));
    }
    if let Ok(r) = serde_json::from_str::<AlphaStudyReport>(&text) {
        return Ok(render_alpha_study(&r));
    }
    Err(Error::Format {
        what: "report",
        path: path.to_path_buf(),
        detail: "not a recognized report schema".into(),
    })
}

/// Write `<stem>.json` and `<stem>.txt` into `dir`.
pub fn write_metrics(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(format!("{stem}.json")), report)?;
    let path = dir.join(format!("{stem}.txt"));
    std::fs::write(&path, render_metrics(report)).map_err(|e| Error::io(&path, e))
}
