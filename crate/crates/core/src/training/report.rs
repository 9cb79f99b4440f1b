use std::fmt::Write as _;
use std::path::PathBuf;

use crate::retrieval::MetricsReport;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub validation: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Strictly increasing in `iteration`.
    pub records: Vec<EvalRecord>,
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EvalRecord> {
        let it = self.best_iteration?;
        self.records.iter().find(|r| r.iteration == it)
    }

    /// One line per evaluation.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = write!(out, "iteration={} loss={}", r.iteration, r.train_loss);
            for (n, m) in &r.validation.at {
                let _ = write!(
                    out,
                    " recall@{n}={} ndcg@{n}={} hit_rate@{n}={}",
                    m.recall, m.ndcg, m.hit_rate
                );
            }
            out.push('\n');
        }
        out
    }

    /// `key = value` summary of the run and its best record.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "iterations = {}", self.iterations);
        let _ = writeln!(out, "evaluations = {}", self.records.len());
        let _ = writeln!(out, "stopped_early = {}", self.stopped_early);
        if let Some(best) = self.best() {
            let _ = writeln!(out, "best_iteration = {}", best.iteration);
            let _ = writeln!(out, "best_train_loss = {}", best.train_loss);
            for (n, m) in &best.validation.at {
                let _ = writeln!(out, "best_recall@{n} = {}", m.recall);
                let _ = writeln!(out, "best_ndcg@{n} = {}", m.ndcg);
                let _ = writeln!(out, "best_hit_rate@{n} = {}", m.hit_rate);
            }
        }
        if let Some(p) = &self.best_checkpoint {
            if let Some(name) = p.file_name() {
                let _ = writeln!(out, "best_checkpoint = {}", name.to_string_lossy());
            }
        }
        out
    }
}
