//! Sparsity schedules and per-tensor magnitude pruning interleaved with training.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Pair;
use crate::tensor::BinaryMask;
use crate::train::{Batcher, StepSpec, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cubic,
    Linear,
    /// A single prune to the final sparsity at the start step.
    OneShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub kind: ScheduleKind,
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    /// First prune event, in steps from the start of the pruning run.
    pub start_step: u64,
    pub prune_interval: u64,
    pub num_prunings: u64,
}

impl PruneSchedule {
    pub fn cubic(final_sparsity: f64, start_step: u64, prune_interval: u64, num_prunings: u64) -> Self {
        PruneSchedule {
            kind: ScheduleKind::Cubic,
            initial_sparsity: 0.0,
            final_sparsity,
            start_step,
            prune_interval,
            num_prunings,
        }
    }

    pub fn one_shot(final_sparsity: f64) -> Self {
        PruneSchedule {
            kind: ScheduleKind::OneShot,
            initial_sparsity: 0.0,
            final_sparsity,
            start_step: 0,
            prune_interval: 1,
            num_prunings: 1,
        }
    }

    /// A schedule with zero final sparsity is accepted and never prunes.
    pub fn validate(&self) -> Result<()> {
        let (si, sf) = (self.initial_sparsity, self.final_sparsity);
        if !(0.0..1.0).contains(&si) || !(0.0..=1.0).contains(&sf) {
            return Err(Error::contract(format!("sparsities {si}, {sf} out of range")));
        }
        if si > sf || (si == sf && sf > 0.0) {
            return Err(Error::contract(format!("initial sparsity {si} must be below final {sf}")));
        }
        if self.prune_interval == 0 || self.num_prunings == 0 {
            return Err(Error::contract("prune_interval and num_prunings must be positive"));
        }
        Ok(())
    }

    /// Steps spanned by the ramp.
    pub fn span(&self) -> u64 {
        self.prune_interval * self.num_prunings
    }

    pub fn end_step(&self) -> u64 {
        match self.kind {
            ScheduleKind::OneShot => self.start_step,
            _ => self.start_step + self.span(),
        }
    }

    pub fn sparsity_at(&self, t: u64) -> f64 {
        let (si, sf) = (self.initial_sparsity, self.final_sparsity);
        if t < self.start_step {
            return si;
        }
        let progress = ((t - self.start_step) as f64 / self.span() as f64).clamp(0.0, 1.0);
        match self.kind {
            ScheduleKind::Cubic => sf + (si - sf) * (1.0 - progress).powi(3),
            ScheduleKind::Linear => sf + (si - sf) * (1.0 - progress),
            ScheduleKind::OneShot => sf,
        }
    }

    /// Steps (relative to the run start) at which pruning happens.
    pub fn event_steps(&self) -> Vec<u64> {
        match self.kind {
            ScheduleKind::OneShot => vec![self.start_step],
            _ => (0..=self.num_prunings)
                .map(|k| self.start_step + k * self.prune_interval)
                .collect(),
        }
    }
}

/// Chooses `count` of the `candidates` with the smallest magnitude; ties go to the lower index.
fn smallest(values: &[f64], candidates: &[bool], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| candidates[i]).collect();
    idx.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Marks the `count` candidates of smallest magnitude (1 = pruned), lower index first on ties.
pub fn prune_smallest(values: &[f64], candidates: &[bool], count: usize) -> Vec<bool> {
    let mut out = vec![false; values.len()];
    for i in smallest(values, candidates, count) {
        out[i] = true;
    }
    out
}

/// Marks `floor(target_sparsity * popcount(eligible))` eligible elements of
/// smallest magnitude (1 = pruned).
pub fn magnitude_prune_layer(values: &[f64], eligible: &[bool], target_sparsity: f64) -> Result<Vec<bool>> {
    if values.len() != eligible.len() {
        return Err(Error::shape("magnitude_prune_layer", "values and eligibility differ in length"));
    }
    if !(0.0..=1.0).contains(&target_sparsity) {
        return Err(Error::contract(format!("target sparsity {target_sparsity} outside [0, 1]")));
    }
    let n = eligible.iter().filter(|&&b| b).count();
    Ok(prune_smallest(values, eligible, prune_count(target_sparsity, n)))
}

/// `floor(s * n)`, robust to `s * n` landing a hair below an integer.
pub fn prune_count(sparsity: f64, n: usize) -> usize {
    let x = sparsity * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.floor() };
    (k as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorPruneStat {
    pub name: String,
    pub eligible: usize,
    pub pruned: usize,
    pub newly_pruned: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Steps since the start of the pruning run.
    pub local_step: u64,
    /// Optimizer step counter at the event.
    pub step: u64,
    pub target_sparsity: f64,
    pub tensors: Vec<TensorPruneStat>,
}

impl PruneEvent {
    pub fn overall_sparsity(&self) -> f64 {
        let (p, e) = self
            .tensors
            .iter()
            .fold((0, 0), |(p, e), t| (p + t.pruned, e + t.eligible));
        if e == 0 {
            0.0
        } else {
            p as f64 / e as f64
        }
    }
}

pub fn write_prune_log(path: &Path, events: &[PruneEvent]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ev in events {
        let line = serde_json::to_string(ev)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_prune_log(path: &Path) -> Result<Vec<PruneEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Inputs of a pruning run besides the schedule.
#[derive(Debug, Clone, Copy)]
pub struct PruneRun<'a> {
    pub corpus: &'a [Pair],
    pub steps: usize,
    pub seed: u64,
    /// Elements that may be pruned.
    pub eligible: &'a BinaryMask,
    /// Elements training may update; pruned ones are removed from it.
    pub update: &'a BinaryMask,
    pub forward: Option<&'a BinaryMask>,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    /// Eligible elements that survived (1 = kept).
    pub keep: BinaryMask,
    pub events: Vec<PruneEvent>,
}

/// Prunes every eligible tensor to `sparsity`, keeping earlier prunes. Pruned
/// values are set to 0.0 and cleared from `keep`.
pub fn prune_to(trainer: &mut Trainer, eligible: &BinaryMask, keep: &mut BinaryMask, sparsity: f64, local_step: u64) -> Result<PruneEvent> {
    let mut stats = Vec::new();
    for (name, t) in trainer.params.iter_mut() {
        let elig = eligible.bits(name).ok_or_else(|| Error::shape(name, "missing from eligibility mask"))?;
        let kept = keep.bits_mut(name).ok_or_else(|| Error::shape(name, "missing from keep mask"))?;
        let n = elig.iter().filter(|&&b| b).count();
        if n == 0 {
            continue;
        }
        let target = prune_count(sparsity, n);
        let already = elig.iter().zip(kept.iter()).filter(|(&e, &k)| e && !k).count();
        let mut newly = 0;
        if target > already {
            let candidates: Vec<bool> = elig.iter().zip(kept.iter()).map(|(&e, &k)| e && k).collect();
            for i in smallest(t.data(), &candidates, target - already) {
                kept[i] = false;
                newly += 1;
            }
        }
        let values = t.data_mut();
        for i in 0..values.len() {
            if elig[i] && !kept[i] {
                values[i] = 0.0;
            }
        }
        let pruned = already + newly;
        stats.push(TensorPruneStat {
            name: name.to_string(),
            eligible: n,
            pruned,
            newly_pruned: newly,
            sparsity: pruned as f64 / n as f64,
        });
    }
    Ok(PruneEvent {
        local_step,
        step: trainer.adam.step(),
        target_sparsity: sparsity,
        tensors: stats,
    })
}

/// Train on `run.corpus` for `run.steps` steps, pruning per tensor at every
/// scheduled event. If the run ends before the last event, a final prune to
/// the target sparsity is applied after the last step.
pub fn gradual_prune(trainer: &mut Trainer, schedule: &PruneSchedule, run: &PruneRun) -> Result<PruneOutcome> {
    schedule.validate()?;
    run.eligible.check_congruent(&trainer.params)?;
    run.update.check_congruent(&trainer.params)?;
    let mut keep = run.eligible.clone();
    let mut events = Vec::new();
    if schedule.final_sparsity == 0.0 {
        let spec = StepSpec {
            update: run.update,
            forward: run.forward,
            ewc: None,
            distill: None,
        };
        trainer.run(run.corpus, run.steps, run.seed, &spec, |_, _| Ok(()))?;
        return Ok(PruneOutcome { keep, events });
    }

    let event_steps = schedule.event_steps();
    let mut next_event = 0;
    let mut batcher = if run.steps > 0 {
        Some(Batcher::new(run.corpus.len(), run.seed)?)
    } else {
        None
    };
    let mut update = run.update.and(&keep)?.or(&run.update.and_not(run.eligible)?)?;
    for t in 0..=run.steps as u64 {
        let mut pruned_now = false;
        while next_event < event_steps.len() && event_steps[next_event] == t {
            let s = schedule.sparsity_at(t);
            events.push(prune_to(trainer, run.eligible, &mut keep, s, t)?);
            next_event += 1;
            pruned_now = true;
        }
        if pruned_now {
            update = run.update.and(&keep)?.or(&run.update.and_not(run.eligible)?)?;
        }
        if t == run.steps as u64 {
            break;
        }
        let b = batcher.as_mut().expect("steps > 0");
        let batch: Vec<Pair> = b
            .next_batch(trainer.config.batch_size)
            .into_iter()
            .map(|i| run.corpus[i].clone())
            .collect();
        let spec = StepSpec {
            update: &update,
            forward: run.forward,
            ewc: None,
            distill: None,
        };
        trainer.step(&batch, &spec)?;
    }
    if next_event < event_steps.len() {
        events.push(prune_to(
            trainer,
            run.eligible,
            &mut keep,
            schedule.final_sparsity,
            run.steps as u64,
        )?);
    }
    Ok(PruneOutcome { keep, events })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_midpoint() {
        let s = PruneSchedule::cubic(0.5, 0, 100, 10);
        assert!((s.sparsity_at(500) - 0.4375).abs() < 1e-12);
        assert_eq!(s.sparsity_at(0), 0.0);
        assert_eq!(s.sparsity_at(1000), 0.5);
        assert_eq!(s.sparsity_at(5000), 0.5);
    }

    #[test]
    fn prune_examples() {
        let m = magnitude_prune_layer(&[0.1, -0.5, 0.3, -0.2], &[true; 4], 0.5).unwrap();
        assert_eq!(m, vec![true, false, false, true]);
        let none = magnitude_prune_layer(&[0.1, -0.5], &[true; 2], 0.0).unwrap();
        assert_eq!(none, vec![false, false]);
        let tie = magnitude_prune_layer(&[0.2, 0.2, 0.2], &[true; 3], 1.0 / 3.0).unwrap();
        assert_eq!(tie, vec![true, false, false]);
    }

    #[test]
    fn ineligible_never_pruned() {
        let m = magnitude_prune_layer(&[0.0, 1.0, 2.0, 3.0], &[false, true, true, true], 1.0).unwrap();
        assert_eq!(m, vec![false, true, true, true]);
    }

    #[test]
    fn floor_count_is_exact() {
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.7, 10), 7);
        assert_eq!(prune_count(0.25, 7), 1);
        assert_eq!(prune_count(1.0, 5), 5);
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut s = PruneSchedule::cubic(0.5, 0, 100, 10);
        s.initial_sparsity = 0.6;
        assert!(s.validate().is_err());
        s = PruneSchedule::cubic(0.5, 0, 0, 10);
        assert!(s.validate().is_err());
        assert!(PruneSchedule::cubic(0.0, 0, 10, 1).validate().is_ok());
    }
}
