//! Batch plans: pseudo-label stratified (guided) and uniformly shuffled
//! (random baseline).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cluster::PseudoLabelAssignment;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    batches: Vec<Vec<usize>>,
    batch_size: usize,
    epoch_seed: u64,
}

impl BatchPlan {
    pub fn new(batches: Vec<Vec<usize>>, batch_size: usize, epoch_seed: u64) -> Self {
        Self {
            batches,
            batch_size,
            epoch_seed,
        }
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn epoch_seed(&self) -> u64 {
        self.epoch_seed
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn num_indices(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

fn check_batch_size(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(())
}

/// Index of the cluster with the most remaining members, lowest id on ties.
fn fullest(pools: &[Vec<usize>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, pool) in pools.iter().enumerate() {
        if !pool.is_empty() && best.is_none_or(|b| pool.len() > pools[b].len()) {
            best = Some(j);
        }
    }
    best
}

/// Stratified sampling without replacement. Each batch takes one index from
/// each of the `p` clusters with the most remaining members; once fewer than
/// `p` clusters are left, the batch is topped up from the fullest clusters,
/// so labels can repeat only in that exhausted regime.
pub fn build_guided_plan(assignment: &PseudoLabelAssignment, p: usize, epoch_seed: u64) -> Result<BatchPlan> {
    check_batch_size(p)?;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); assignment.k()];
    for (i, &l) in assignment.labels().iter().enumerate() {
        pools[l].push(i);
    }
    for (j, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut seed::rng(seed::derive(
            epoch_seed,
            &[seed::tag("guided"), j as u64],
        )));
    }
    let mut remaining = assignment.len();
    let mut batches = Vec::with_capacity(remaining.div_ceil(p));
    while remaining > 0 {
        let mut order: Vec<usize> = (0..pools.len()).filter(|&j| !pools[j].is_empty()).collect();
        order.sort_by_key(|&j| (std::cmp::Reverse(pools[j].len()), j));
        order.truncate(p);
        let mut batch: Vec<usize> = order.iter().map(|&j| pools[j].pop().expect("nonempty pool")).collect();
        while batch.len() < p {
            match fullest(&pools) {
                Some(j) => batch.push(pools[j].pop().expect("nonempty pool")),
                None => break,
            }
        }
        remaining -= batch.len();
        batches.push(batch);
    }
    Ok(BatchPlan::new(batches, p, epoch_seed))
}

/// Seeded Fisher-Yates shuffle of `0..n`, cut into batches of `p`.
pub fn build_random_plan(n: usize, p: usize, epoch_seed: u64) -> Result<BatchPlan> {
    check_batch_size(p)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive(epoch_seed, &[seed::tag("random")])));
    let batches = idx.chunks(p).map(<[usize]>::to_vec).collect();
    Ok(BatchPlan::new(batches, p, epoch_seed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub distinct_labels: Vec<usize>,
    /// Same-label pairs per batch: `Σ_label C(count, 2)`.
    pub violations: Vec<usize>,
    pub total_violations: usize,
    /// Violations counted over batches of exactly `p` indices.
    pub full_batch_violations: usize,
}

fn list(items: &[usize]) -> String {
    const SHOWN: usize = 20;
    let mut s = items
        .iter()
        .take(SHOWN)
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    if items.len() > SHOWN {
        s.push_str(&format!(", … ({} total)", items.len()));
    }
    s
}

/// Verifies that `plan` is an exact partition of `0..n` with every batch but
/// the last holding `p` indices, and counts same-label pairs per batch.
pub fn validate_plan(plan: &BatchPlan, assignment: &PseudoLabelAssignment) -> Result<PlanDiagnostics> {
    let n = assignment.len();
    let mut seen = vec![0usize; n];
    let mut out_of_range = Vec::new();
    for &i in plan.batches.iter().flatten() {
        match seen.get_mut(i) {
            Some(c) => *c += 1,
            None => out_of_range.push(i),
        }
    }
    let repeated: Vec<usize> = (0..n).filter(|&i| seen[i] > 1).collect();
    let missing: Vec<usize> = (0..n).filter(|&i| seen[i] == 0).collect();
    let mut problems = Vec::new();
    if !out_of_range.is_empty() {
        problems.push(format!("indices out of range for n = {n}: {}", list(&out_of_range)));
    }
    if !repeated.is_empty() {
        problems.push(format!("repeated indices: {}", list(&repeated)));
    }
    if !missing.is_empty() {
        problems.push(format!("missing indices: {}", list(&missing)));
    }
    let last = plan.batches.len().saturating_sub(1);
    let bad_sizes: Vec<usize> = plan
        .batches
        .iter()
        .enumerate()
        .filter(|&(b, batch)| {
            batch.is_empty() || batch.len() > plan.batch_size || (b < last && batch.len() != plan.batch_size)
        })
        .map(|(b, _)| b)
        .collect();
    if !bad_sizes.is_empty() {
        problems.push(format!(
            "batches with a size other than {}: {}",
            plan.batch_size,
            list(&bad_sizes)
        ));
    }
    if !problems.is_empty() {
        return Err(Error::InvalidPlan(problems.join("; ")));
    }

    let labels = assignment.labels();
    let mut diag = PlanDiagnostics {
        distinct_labels: Vec::with_capacity(plan.len()),
        violations: Vec::with_capacity(plan.len()),
        total_violations: 0,
        full_batch_violations: 0,
    };
    for batch in &plan.batches {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in batch {
            *counts.entry(labels[i]).or_default() += 1;
        }
        let v: usize = counts.values().map(|&c| c * (c - 1) / 2).sum();
        diag.distinct_labels.push(counts.len());
        diag.violations.push(v);
        diag.total_violations += v;
        if batch.len() == plan.batch_size {
            diag.full_batch_violations += v;
        }
    }
    Ok(diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Guided,
    Random,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Guided => "guided",
            PlanMode::Random => "random",
        }
    }
}

impl std::str::FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(PlanMode::Guided),
            "random" => Ok(PlanMode::Random),
            other => Err(Error::InvalidArgument(format!(
                "mode must be guided or random, got {other:?}"
            ))),
        }
    }
}

/// Produces the plan for each training epoch.
#[derive(Debug, Clone)]
pub struct PlanSource {
    kind: PlanKind,
    batch_size: usize,
    seed: u64,
    reshuffle_per_epoch: bool,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Guided(PseudoLabelAssignment),
    Random(usize),
    Fixed { plans: Vec<BatchPlan>, mode: PlanMode },
}

impl PlanSource {
    pub fn guided(assignment: PseudoLabelAssignment, batch_size: usize, seed: u64, reshuffle_per_epoch: bool) -> Self {
        Self {
            kind: PlanKind::Guided(assignment),
            batch_size,
            seed,
            reshuffle_per_epoch,
        }
    }

    pub fn random(n: usize, batch_size: usize, seed: u64, reshuffle_per_epoch: bool) -> Self {
        Self {
            kind: PlanKind::Random(n),
            batch_size,
            seed,
            reshuffle_per_epoch,
        }
    }

    /// Replays precomputed plans, one per epoch.
    pub fn fixed(plans: Vec<BatchPlan>, mode: PlanMode) -> Result<Self> {
        let Some(first) = plans.first() else {
            return Err(Error::InvalidPlan("no epochs in plan list".into()));
        };
        let (batch_size, seed) = (first.batch_size, first.epoch_seed);
        if let Some(e) = plans.iter().position(|p| p.batch_size != batch_size) {
            return Err(Error::InvalidPlan(format!(
                "epoch {e} uses batch size {}, epoch 0 uses {batch_size}",
                plans[e].batch_size
            )));
        }
        Ok(Self {
            kind: PlanKind::Fixed { plans, mode },
            batch_size,
            seed,
            reshuffle_per_epoch: true,
        })
    }

    pub fn mode(&self) -> PlanMode {
        match &self.kind {
            PlanKind::Guided(_) => PlanMode::Guided,
            PlanKind::Random(_) => PlanMode::Random,
            PlanKind::Fixed { mode, .. } => *mode,
        }
    }

    pub fn num_images(&self) -> usize {
        match &self.kind {
            PlanKind::Guided(a) => a.len(),
            PlanKind::Random(n) => *n,
            PlanKind::Fixed { plans, .. } => plans[0].num_indices(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        let e = if self.reshuffle_per_epoch { epoch as u64 } else { 0 };
        seed::derive(self.seed, &[seed::tag("plan"), e])
    }

    pub fn plan(&self, epoch: usize) -> Result<BatchPlan> {
        let s = self.epoch_seed(epoch);
        match &self.kind {
            PlanKind::Guided(a) => build_guided_plan(a, self.batch_size, s),
            PlanKind::Random(n) => build_random_plan(*n, self.batch_size, s),
            PlanKind::Fixed { plans, .. } => plans.get(epoch).cloned().ok_or_else(|| {
                Error::InvalidPlan(format!("plans cover {} epochs, epoch {epoch} requested", plans.len()))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanLine {
    pub epoch: usize,
    pub batch_index: usize,
    pub indices: Vec<usize>,
}

/// One JSON object per batch: `{"epoch", "batch_index", "indices"}`.
pub fn write_plan_jsonl<W: Write>(plans: &[BatchPlan], mut writer: W) -> Result<()> {
    for (epoch, plan) in plans.iter().enumerate() {
        for (b, batch) in plan.batches.iter().enumerate() {
            let line = PlanLine {
                epoch,
                batch_index: b,
                indices: batch.clone(),
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n").map_err(serde_json::Error::io)?;
        }
    }
    Ok(())
}

/// Reads plan lines back, grouped by epoch. Lines starting with `#` are
/// skipped.
pub fn read_plan_jsonl<R: BufRead>(reader: R) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut epochs: Vec<Vec<Vec<usize>>> = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let l: PlanLine = serde_json::from_str(&line)?;
        if l.epoch >= epochs.len() {
            epochs.resize(l.epoch + 1, Vec::new());
        }
        epochs[l.epoch].push(l.indices);
    }
    Ok(epochs)
}
