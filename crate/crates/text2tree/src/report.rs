//! Human-readable reports and JSON summaries of evaluation runs.

use std::fmt::Write as _;

use serde::Serialize;
use text2tree_core::fmt::g17;
use text2tree_core::label_tree::CodeTree;
use text2tree_core::metrics::MetricsReport;

/// Text report: `key = value` header, per-label table, group scores and
/// the epoch log.
pub fn render(title: &str, header: &[(&str, String)], report: &MetricsReport, tree: &CodeTree) -> String {
    let mut out = String::new();
    writeln!(out, "# {title}").unwrap();
    for (k, v) in header {
        writeln!(out, "{k} = {v}").unwrap();
    }
    writeln!(out, "macro_f1 = {}", g17(report.macro_f1)).unwrap();
    writeln!(out, "micro_f1 = {}", g17(report.micro_f1)).unwrap();
    let group_of = group_index(report);
    writeln!(out, "\n# label\tf1\ttp\tfp\tfn\tgroup").unwrap();
    for (c, code) in tree.target_codes().iter().enumerate() {
        let counts = &report.counts[c];
        let group = group_of[c].map_or("-".to_string(), |g| g.to_string());
        writeln!(
            out,
            "{code}\t{}\t{}\t{}\t{}\t{group}",
            g17(report.per_label_f1[c]),
            counts.tp,
            counts.fp,
            counts.fn_
        )
        .unwrap();
    }
    writeln!(out, "\n# group\tsize\tmacro_f1").unwrap();
    for (g, (members, f1)) in report.groups.iter().zip(&report.group_f1).enumerate() {
        writeln!(out, "{g}\t{}\t{}", members.len(), g17(*f1)).unwrap();
    }
    if !report.epoch_log.is_empty() {
        writeln!(out, "\n# epoch\ttrain_loss\tdev_macro_f1\tdev_micro_f1").unwrap();
        for e in &report.epoch_log {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.epoch,
                g17(e.train_loss),
                g17(e.dev_macro_f1),
                g17(e.dev_micro_f1)
            )
            .unwrap();
        }
    }
    out
}

fn group_index(report: &MetricsReport) -> Vec<Option<usize>> {
    let mut out = vec![None; report.per_label_f1.len()];
    for (g, members) in report.groups.iter().enumerate() {
        for &c in members {
            out[c] = Some(g);
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub split: String,
    pub mode: String,
    pub seed: u64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub group_f1: Vec<f64>,
    pub per_label_f1: Vec<(String, f64)>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
}

impl Summary {
    pub fn new(split: &str, mode: String, seed: u64, report: &MetricsReport, tree: &CodeTree) -> Self {
        Self {
            split: split.to_string(),
            mode,
            seed,
            macro_f1: report.macro_f1,
            micro_f1: report.micro_f1,
            group_f1: report.group_f1.clone(),
            per_label_f1: tree.target_codes().into_iter().zip(report.per_label_f1.iter().copied()).collect(),
            best_epoch: None,
            epochs_run: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}
