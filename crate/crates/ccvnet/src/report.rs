//! Text, JSON and CSV renderings of a [`RunReport`].
//!
//! The text report is `key = value` lines followed by the confusion
//! matrix (rows are true classes, columns predicted classes, both in label
//! order) and the echoed configuration:
//!
//! ```text
//! format_version = 1
//! task = synthetic
//! ...
//! [val_confusion]
//! class0 8 0 0
//! ...
//! [config]
//! seed = 0
//! ...
//! ```

use std::fmt::Write;

use ccvnet_core::train::{CurvePoint, Metrics};
use ccvnet_core::RunReport;

pub const CURVES_HEADER: &str = "epoch,stage,train_loss,val_loss,val_acc";

const STAGE_NAMES: [&str; 4] = ["cnn", "rnn", "dae", "head"];

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
}

fn metrics_block(s: &mut String, prefix: &str, m: &Metrics, classes: &[String]) {
    let _ = writeln!(s, "{prefix}_count = {}", m.count);
    let _ = writeln!(s, "{prefix}_accuracy = {:.6}", m.accuracy);
    let _ = writeln!(s, "{prefix}_precision = {}", join(&m.precision));
    let _ = writeln!(s, "{prefix}_recall = {}", join(&m.recall));
    let _ = writeln!(s, "[{prefix}_confusion]");
    s.push_str(&confusion_table(m, classes));
}

/// One row per true class: name followed by predicted-class counts.
pub fn confusion_table(m: &Metrics, classes: &[String]) -> String {
    let width = classes.iter().map(String::len).max().unwrap_or(0);
    let mut s = String::new();
    for (name, row) in classes.iter().zip(&m.confusion) {
        let counts: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
        let _ = writeln!(s, "{name:<width$} {}", counts.join(" "));
    }
    s
}

pub fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format_version = {}", r.format_version);
    let _ = writeln!(s, "task = {}", r.task);
    let _ = writeln!(s, "subject = {}", r.subject);
    let _ = writeln!(s, "classes = {}", r.class_names.join(","));
    for (name, e) in STAGE_NAMES.iter().zip(r.selected_epochs) {
        let _ = writeln!(s, "selected_epoch_{name} = {e}");
    }
    for (i, t) in r.wall_clock_secs.iter().enumerate() {
        let _ = writeln!(s, "wall_clock_stage{}_s = {t:.3}", i + 1);
    }
    metrics_block(&mut s, "train", &r.train, &r.class_names);
    if let Some(v) = &r.validation {
        metrics_block(&mut s, "val", v, &r.class_names);
    }
    s.push_str("[config]\n");
    s.push_str(&r.config.to_kv());
    s
}

pub fn render_json(r: &RunReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes")
}

pub fn parse_json(text: &str) -> Result<RunReport, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

pub fn render_curves(curves: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for p in curves {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.epoch,
            p.stage,
            p.train_loss,
            opt(p.val_loss),
            opt(p.val_acc)
        );
    }
    s
}

pub fn parse_curves(text: &str) -> Result<Vec<CurvePoint>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVES_HEADER) {
        return Err(format!("curves must start with header {CURVES_HEADER:?}"));
    }
    let opt = |s: &str| -> Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| format!("bad number {s:?}"))
        }
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(format!("line {}: expected 5 fields", i + 2));
            }
            Ok(CurvePoint {
                epoch: f[0].parse().map_err(|_| format!("line {}: bad epoch", i + 2))?,
                stage: f[1].to_string(),
                train_loss: f[2].parse().map_err(|_| format!("line {}: bad train_loss", i + 2))?,
                val_loss: opt(f[3])?,
                val_acc: opt(f[4])?,
            })
        })
        .collect()
}

/// Human-readable digest of a finished run.
pub fn summary(r: &RunReport, curves: &[CurvePoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "task {} subject {} classes {}",
        r.task,
        r.subject,
        r.class_names.join(",")
    );
    for (name, selected) in STAGE_NAMES.iter().zip(r.selected_epochs) {
        let pts: Vec<&CurvePoint> = curves.iter().filter(|p| p.stage == *name).collect();
        let (Some(first), Some(last)) = (pts.first(), pts.last()) else {
            let _ = writeln!(s, "{name:<5} no curve");
            continue;
        };
        let _ = write!(
            s,
            "{name:<5} epochs {:>4}  train loss {:.4} -> {:.4}",
            last.epoch, first.train_loss, last.train_loss
        );
        let best = pts
            .iter()
            .filter_map(|p| p.val_loss.map(|v| (v, p.epoch, p.val_acc)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((v, e, acc)) = best {
            let _ = write!(s, "  best val loss {v:.4} @ {e}");
            if let Some(a) = acc {
                let _ = write!(s, " (acc {a:.3})");
            }
        }
        let _ = writeln!(s, "  selected {selected}");
    }
    let _ = writeln!(s, "train accuracy {:.4} ({} trials)", r.train.accuracy, r.train.count);
    if let Some(v) = &r.validation {
        let _ = writeln!(s, "validation accuracy {:.4} ({} trials)", v.accuracy, v.count);
        s.push_str(&confusion_table(v, &r.class_names));
    }
    s
}
