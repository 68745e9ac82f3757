//! Per-domain result tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One domain's scores. `general_score` is the unadapted general model on the
/// domain's test set, `target_score` the adapted model(s) on the same set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub domain: String,
    pub general_score: f64,
    pub target_score: f64,
    pub general_bleu: f64,
    pub target_bleu: f64,
    pub tuned_param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: String,
    pub seed: u64,
    /// Free-form label distinguishing reports within a sweep.
    #[serde(default)]
    pub label: String,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn row(&self, domain: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.domain == domain)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            let acc_ok = (0.0..=1.0).contains(&r.general_score) && (0.0..=1.0).contains(&r.target_score);
            let bleu_ok = (0.0..=1.0).contains(&r.general_bleu) && (0.0..=1.0).contains(&r.target_bleu);
            if !acc_ok || !bleu_ok {
                return Err(Error::contract(format!("scores for `{}` out of range", r.domain)));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let title = if self.label.is_empty() {
            format!("{} (seed {})", self.strategy, self.seed)
        } else {
            format!("{} [{}] (seed {})", self.strategy, self.label, self.seed)
        };
        writeln!(s, "{title}").unwrap();
        writeln!(
            s,
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>10}",
            "domain", "general", "adapted", "gen-bleu", "ada-bleu", "tuned"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10}",
                r.domain, r.general_score, r.target_score, r.general_bleu, r.target_bleu, r.tuned_param_count
            )
            .unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Write `rows` under `header` as comma-separated values.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::contract(format!("CSV row has {} fields, header {}", r.len(), header.len())));
        }
        s.push_str(&r.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_lists_every_row() {
        let r = MetricReport {
            strategy: "prune-tune".into(),
            seed: 3,
            label: String::new(),
            rows: vec![ReportRow {
                domain: "general".into(),
                general_score: 0.9,
                target_score: 0.9,
                general_bleu: 0.8,
                target_bleu: 0.8,
                tuned_param_count: 10,
            }],
        };
        r.validate().unwrap();
        let text = r.render();
        assert!(text.contains("prune-tune (seed 3)"));
        assert!(text.contains("general") && text.contains("0.9000"));
    }
}
