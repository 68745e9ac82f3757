//! Sweeps over pruning rate, target-data fraction and domain order.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::experiment::{prepare_data, run_with_corpora, Corpora, ExperimentConfig, Method, Workspace};
use super::report::{write_csv, MetricReport};
use crate::adaptation::GENERAL;
use crate::error::{Error, Result};
use crate::model::Pair;
use crate::pruning::prune_count;

/// `floor(fraction * len)` pairs drawn without replacement, in corpus order.
/// A fraction of 1 returns the corpus unchanged.
pub fn subsample(pairs: &[Pair], fraction: f64, seed: u64) -> Result<Vec<Pair>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = prune_count(fraction, pairs.len());
    if n == 0 {
        return Err(Error::contract(format!(
            "fraction {fraction} of {} sentences leaves an empty corpus",
            pairs.len()
        )));
    }
    if n == pairs.len() {
        return Ok(pairs.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pairs.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pairs[i].clone()).collect())
}

/// Prune-Tune at each final sparsity; the general model is trained once.
pub fn sparsity_sweep(cfg: &ExperimentConfig, out_dir: &Path, sparsities: &[f64]) -> Result<Vec<MetricReport>> {
    let ws = Workspace::new(out_dir)?;
    let corpora = prepare_data(cfg, &ws.data())?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &s in sparsities {
        let mut c = cfg.clone();
        c.method = Method::PruneTune;
        c.extraction.schedule.final_sparsity = s;
        c.extraction.schedule.initial_sparsity = c.extraction.schedule.initial_sparsity.min(s);
        let r = run_with_corpora(&c, &corpora, &ws, &format!("sparsity{s}"))?;
        for row in &r.rows {
            rows.push(vec![
                format!("{s}"),
                row.domain.clone(),
                format!("{}", row.general_score),
                format!("{}", row.target_score),
                row.tuned_param_count.to_string(),
            ]);
        }
        reports.push(r);
    }
    write_csv(
        &ws.reports().join("sweep-sparsity.csv"),
        &["sparsity", "domain", "general_score", "target_score", "tuned_param_count"],
        &rows,
    )?;
    Ok(reports)
}

/// Prune-Tune and full fine-tuning on seeded subsamples of every target
/// training split. Writes one CSV row per fraction and strategy: the
/// general-domain accuracy after adaptation and the mean target accuracy.
pub fn lowresource_sweep(cfg: &ExperimentConfig, out_dir: &Path, fractions: &[f64]) -> Result<Vec<MetricReport>> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::contract(format!("fraction {f} outside (0, 1]")));
        }
    }
    let ws = Workspace::new(out_dir)?;
    let full = prepare_data(cfg, &ws.data())?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &f in fractions {
        let mut corpora = Corpora {
            general: full.general.clone(),
            domains: full.domains.clone(),
        };
        for (i, d) in corpora.domains.iter_mut().enumerate() {
            d.train = subsample(&d.train, f, cfg.seed.wrapping_add(500 + i as u64))?;
        }
        let sentences: usize = corpora.domains.iter().map(|d| d.train.len()).sum();
        for method in [Method::PruneTune, Method::Finetune] {
            let mut c = cfg.clone();
            c.method = method;
            let r = run_with_corpora(&c, &corpora, &ws, &format!("fraction{f}"))?;
            let general = r.row(GENERAL).map_or(0.0, |g| g.target_score);
            let targets: Vec<f64> = r.rows.iter().filter(|x| x.domain != GENERAL).map(|x| x.target_score).collect();
            let mean = if targets.is_empty() {
                0.0
            } else {
                targets.iter().sum::<f64>() / targets.len() as f64
            };
            rows.push(vec![
                format!("{f}"),
                method.name().to_string(),
                sentences.to_string(),
                format!("{general}"),
                format!("{mean}"),
            ]);
            reports.push(r);
        }
    }
    write_csv(
        &ws.reports().join("lowresource.csv"),
        &["fraction", "strategy", "train_sentences", "general_score", "target_score"],
        &rows,
    )?;
    Ok(reports)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Sequential Prune-Tune over every ordering of the target domains.
pub fn order_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<MetricReport>> {
    if cfg.domains.len() > 5 {
        return Err(Error::contract("order sweeps are limited to five domains"));
    }
    let ws = Workspace::new(out_dir)?;
    let corpora = prepare_data(cfg, &ws.data())?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for perm in permutations(cfg.domains.len()) {
        let mut c = cfg.clone();
        c.method = Method::PruneTune;
        c.sequential = true;
        c.domains = perm.iter().map(|&i| cfg.domains[i].clone()).collect();
        let ordered = Corpora {
            general: corpora.general.clone(),
            domains: perm.iter().map(|&i| corpora.domains[i].clone()).collect(),
        };
        let names: Vec<&str> = c.domains.iter().map(|d| d.data.name.as_str()).collect();
        let label = format!("order-{}", names.join("-"));
        let r = run_with_corpora(&c, &ordered, &ws, &label)?;
        for row in &r.rows {
            rows.push(vec![
                names.join(">"),
                row.domain.clone(),
                format!("{}", row.target_score),
            ]);
        }
        reports.push(r);
    }
    write_csv(&ws.reports().join("sweep-order.csv"), &["order", "domain", "target_score"], &rows)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_complete_and_distinct() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        let mut q = p.clone();
        q.dedup();
        assert_eq!(q.len(), 6);
    }

    #[test]
    fn subsample_keeps_order_and_size() {
        let pairs: Vec<Pair> = (0..10).map(|i| Pair::new(vec![i], vec![i])).collect();
        assert_eq!(subsample(&pairs, 1.0, 0).unwrap(), pairs);
        let half = subsample(&pairs, 0.5, 3).unwrap();
        assert_eq!(half.len(), 5);
        assert!(half.windows(2).all(|w| w[0].src < w[1].src));
        assert!(subsample(&pairs, 0.05, 0).is_err());
        assert!(subsample(&pairs, 0.0, 0).is_err());
    }
}
