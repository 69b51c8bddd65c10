//! Rouge-L, perplexity, and a model-by-task evaluation grid.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::data::vocab::EOS;
use crate::data::{model_prompt, TaskExample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Real};
use crate::train::{prepare_rows, row_loss};

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure over token ids. Empty input scores 0 (with a warning).
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        log::warn!(
            "rouge_l on an empty sequence (candidate {}, reference {}) scores 0",
            candidate.len(),
            reference.len()
        );
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// `exp` of the token-weighted mean cross-entropy over every target token
/// (end token included).
pub fn perplexity<F: Real>(model: &Model<F>, data: &[TaskExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("perplexity of an empty dataset".into()));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for ex in data {
        let rows = prepare_rows(model.kind(), std::slice::from_ref(ex))?;
        let row = &rows[0];
        let mut g = Graph::no_grad();
        let loss = row_loss(&mut g, model, row)?;
        let n = row.target_tokens();
        nll += g.scalar(loss).as_f64() * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

/// Greedy generation for `x`, with the end token stripped.
pub fn generate_answer(model: &Model, x: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let mut out = model.greedy_decode(&model_prompt(model.kind(), x), max_new, EOS)?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(out)
}

/// Mean Rouge-L of greedy outputs against targets, and the number of
/// examples whose generation failed (each scored 0).
pub fn rouge_on(model: &Model, examples: &[TaskExample]) -> Result<(f64, usize)> {
    if examples.is_empty() {
        return Err(Error::Config("no evaluation examples".into()));
    }
    let mut total = 0.0;
    let mut failures = 0;
    for (i, ex) in examples.iter().enumerate() {
        match generate_answer(model, &ex.x, ex.y.len() + 1) {
            Ok(out) => total += rouge_l(&out, &ex.y),
            Err(e) => {
                log::warn!("generation failed on example {i}, scored 0: {e}");
                failures += 1;
            }
        }
    }
    Ok((total / examples.len() as f64, failures))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RougeL,
    Perplexity,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RougeL => "rouge_l",
            Metric::Perplexity => "perplexity",
        }
    }
}

/// One trained model evaluated on one task's eval set.
pub struct GridCell<'m> {
    pub model_label: String,
    pub task_label: String,
    pub seed: u64,
    pub model: &'m Model,
    pub examples: &'m [TaskExample],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellScore {
    pub model: String,
    pub task: String,
    pub seed: u64,
    pub score: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub model: String,
    pub task: String,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub raw: Vec<CellScore>,
    pub rows: Vec<GridRow>,
}

/// Scores every cell, then aggregates per `(model, task)` over seeds in order
/// of first appearance. `std` is the sample standard deviation (0 for one seed).
pub fn eval_grid(cells: &[GridCell<'_>], metric: Metric) -> Result<GridResult> {
    let mut raw = Vec::with_capacity(cells.len());
    for c in cells {
        let (score, failures) = match metric {
            Metric::RougeL => rouge_on(c.model, c.examples)?,
            Metric::Perplexity => (perplexity(c.model, c.examples)?, 0),
        };
        raw.push(CellScore {
            model: c.model_label.clone(),
            task: c.task_label.clone(),
            seed: c.seed,
            score,
            failures,
        });
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for s in &raw {
        let k = (s.model.clone(), s.task.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let rows = keys
        .into_iter()
        .map(|(m, t)| {
            let v: Vec<f64> = raw.iter().filter(|s| s.model == m && s.task == t).map(|s| s.score).collect();
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            GridRow {
                model: m,
                task: t,
                metric: metric.as_str(),
                mean,
                std,
                n_seeds: n,
            }
        })
        .collect();
    Ok(GridResult { raw, rows })
}

impl GridResult {
    pub fn row(&self, model: &str, task: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.model == model && r.task == task)
    }

    /// `model,task,metric,mean,std,n_seeds`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io(std::path::Path::new("<grid>"), e))
    }

    /// `model,task,seed,score,failures`
    pub fn write_raw_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.raw {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io(std::path::Path::new("<grid>"), e))
    }

    /// Aligned plain-text table of the aggregated rows.
    pub fn text_table(&self) -> String {
        let head = ["model", "task", "metric", "mean", "std", "n_seeds"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    r.task.clone(),
                    r.metric.to_string(),
                    format!("{:.4}", r.mean),
                    format!("{:.4}", r.std),
                    r.n_seeds.to_string(),
                ]
            })
            .collect();
        let mut width = head.map(str::len);
        for row in &body {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: &[&str]| {
            let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &head);
        let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(s, "{}", rule.join("  "));
        for row in &body {
            let cells: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut s, &cells);
        }
        s
    }
}
