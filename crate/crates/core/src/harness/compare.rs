use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::PathBuf;

use serde::Serialize;

use super::train::read_metrics;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub path: String,
    pub label: String,
    pub seed: u64,
    pub final_step: usize,
    pub final_loss: f64,
    pub final_perplexity: f64,
    /// `final_loss` minus the first run's.
    pub delta_vs_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub mean_final_loss: f64,
    pub mean_final_perplexity: f64,
    /// Mean final loss minus the first group's.
    pub delta_vs_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub runs: Vec<RunRow>,
    /// One row per label, in order of first appearance.
    pub groups: Vec<GroupRow>,
}

/// Final-step losses of several runs side by side, grouped by label. Every
/// file must log the same steps.
pub fn compare_runs(paths: &[PathBuf]) -> Result<Comparison> {
    if paths.len() < 2 {
        return Err(Error::Usage("compare needs at least two metrics files".into()));
    }
    let mut runs = Vec::new();
    let mut reference: Option<(Vec<usize>, &PathBuf)> = None;
    for p in paths {
        let m = read_metrics(p)?;
        let last = m
            .last()
            .ok_or_else(|| Error::Comparison(format!("{} has no steps", p.display())))?;
        let steps: Vec<usize> = m.iter().map(|r| r.step).collect();
        match &reference {
            None => reference = Some((steps, p)),
            Some((s, first)) if *s != steps => {
                return Err(Error::Comparison(format!(
                    "{} logs {} steps that do not line up with the {} of {}",
                    p.display(),
                    steps.len(),
                    s.len(),
                    first.display()
                )))
            }
            _ => {}
        }
        runs.push(RunRow {
            path: p.display().to_string(),
            label: last.label.clone(),
            seed: last.seed,
            final_step: last.step,
            final_loss: last.loss,
            final_perplexity: last.perplexity,
            delta_vs_first: 0.0,
        });
    }
    let first = runs[0].final_loss;
    for r in &mut runs {
        r.delta_vs_first = r.final_loss - first;
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_label: BTreeMap<String, Vec<&RunRow>> = BTreeMap::new();
    for r in &runs {
        if !by_label.contains_key(&r.label) {
            order.push(r.label.clone());
        }
        by_label.entry(r.label.clone()).or_default().push(r);
    }
    let mut groups: Vec<GroupRow> = order
        .iter()
        .map(|label| {
            let rs = &by_label[label];
            let n = rs.len() as f64;
            GroupRow {
                label: label.clone(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                mean_final_loss: rs.iter().map(|r| r.final_loss).sum::<f64>() / n,
                mean_final_perplexity: rs.iter().map(|r| r.final_perplexity).sum::<f64>() / n,
                delta_vs_first: 0.0,
            }
        })
        .collect();
    let base = groups[0].mean_final_loss;
    for g in &mut groups {
        g.delta_vs_first = g.mean_final_loss - base;
    }
    Ok(Comparison { runs, groups })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>6} {:>8} {:>12} {:>12} {:>10}", "run", "seed", "step", "loss", "perplexity", "delta");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>8} {:>12.6} {:>12.4} {:>+10.6}",
                r.label, r.seed, r.final_step, r.final_loss, r.final_perplexity, r.delta_vs_first
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>6} {:>12} {:>12} {:>10}", "group", "seeds", "mean loss", "mean ppl", "delta");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>12.6} {:>12.4} {:>+10.6}",
                g.label,
                g.seeds.len(),
                g.mean_final_loss,
                g.mean_final_perplexity,
                g.delta_vs_first
            );
        }
        s
    }
}
