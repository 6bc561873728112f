//! Sparse multivariate longitudinal data in long format.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One measurement. `subject` indexes [`LongDataset::subject_labels`];
/// `outcome` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: usize,
    pub outcome: usize,
    pub time: f64,
    pub value: f64,
}

/// Unvalidated input row.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject: String,
    pub outcome: usize,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongDataset {
    observations: Vec<Observation>,
    subject_labels: Vec<String>,
    outcome_labels: Vec<String>,
    domain: (f64, f64),
    dropped_rows: usize,
}

/// Affine time map `u = (t − offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub offset: f64,
    pub scale: f64,
}

impl TimeMap {
    pub const IDENTITY: TimeMap = TimeMap {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn to_unit(&self, t: f64) -> f64 {
        (t - self.offset) / self.scale
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.offset + self.scale * u
    }

    /// Random intercept/slope covariance `(σ0², σ01, σ1²)` fitted on the unit
    /// scale, re-expressed for the original time axis.
    pub fn null_params_to_original(&self, params: (f64, f64, f64)) -> (f64, f64, f64) {
        let (v0, c01, v1) = params;
        let (a, s) = (self.offset, self.scale);
        (
            v0 - 2.0 * c01 * a / s + v1 * a * a / (s * s),
            c01 / s - v1 * a / (s * s),
            v1 / (s * s),
        )
    }
}

impl LongDataset {
    /// Validates records; `outcome_labels[k - 1]` names outcome `k`. Rows are
    /// ordered by (subject, outcome, time) and subjects numbered by first
    /// appearance in that order.
    pub fn new(records: Vec<Record>, outcome_labels: Vec<String>) -> Result<Self> {
        Self::with_dropped(records, outcome_labels, 0)
    }

    pub fn with_dropped(
        records: Vec<Record>,
        outcome_labels: Vec<String>,
        dropped_rows: usize,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid!("no usable rows"));
        }
        let k = outcome_labels.len();
        if k == 0 {
            return Err(invalid!("at least one outcome required"));
        }
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut labels: Vec<String> = Vec::new();
        let mut present = alloc::vec![false; k];
        let mut observations = Vec::with_capacity(records.len());
        for (row, r) in records.into_iter().enumerate() {
            if !r.time.is_finite() || !r.value.is_finite() {
                return Err(invalid!("row {row}: non-finite time or value"));
            }
            if r.outcome == 0 || r.outcome > k {
                return Err(invalid!("row {row}: outcome {} outside 1..={k}", r.outcome));
            }
            present[r.outcome - 1] = true;
            let next = labels.len();
            let id = *ids.entry(r.subject.clone()).or_insert(next);
            if id == next {
                labels.push(r.subject);
            }
            observations.push(Observation {
                subject: id,
                outcome: r.outcome,
                time: r.time,
                value: r.value,
            });
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(invalid!("outcome {} has no rows", missing + 1));
        }
        Ok(Self::assemble(observations, labels, outcome_labels, dropped_rows))
    }

    fn assemble(
        mut observations: Vec<Observation>,
        subject_labels: Vec<String>,
        outcome_labels: Vec<String>,
        dropped_rows: usize,
    ) -> Self {
        observations.sort_by(|a, b| {
            subject_labels[a.subject]
                .cmp(&subject_labels[b.subject])
                .then(a.outcome.cmp(&b.outcome))
                .then(a.time.total_cmp(&b.time))
        });
        // renumber subjects by sorted label so equal inputs give equal datasets
        let mut order: Vec<usize> = (0..subject_labels.len()).collect();
        order.sort_by(|&a, &b| subject_labels[a].cmp(&subject_labels[b]));
        let mut used = alloc::vec![false; subject_labels.len()];
        for o in &observations {
            used[o.subject] = true;
        }
        let mut remap = alloc::vec![usize::MAX; subject_labels.len()];
        let mut new_labels = Vec::new();
        for old in order {
            if used[old] {
                remap[old] = new_labels.len();
                new_labels.push(subject_labels[old].clone());
            }
        }
        for o in &mut observations {
            o.subject = remap[o.subject];
        }
        let (lo, hi) = observations.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
            (lo.min(o.time), hi.max(o.time))
        });
        Self {
            observations,
            subject_labels: new_labels,
            outcome_labels,
            domain: (lo, hi),
            dropped_rows,
        }
    }

    /// Builds directly from indexed observations (used by generators).
    pub fn from_observations(
        observations: Vec<Observation>,
        subject_labels: Vec<String>,
        outcome_labels: Vec<String>,
    ) -> Result<Self> {
        let records = observations
            .into_iter()
            .map(|o| Record {
                subject: subject_labels[o.subject].clone(),
                outcome: o.outcome,
                time: o.time,
                value: o.value,
            })
            .collect();
        Self::new(records, outcome_labels)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn subject_labels(&self) -> &[String] {
        &self.subject_labels
    }

    pub fn outcome_labels(&self) -> &[String] {
        &self.outcome_labels
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_labels.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_labels.len()
    }

    pub fn n_rows(&self) -> usize {
        self.observations.len()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    /// `J_ik` for outcome `k` (1-based), indexed by subject.
    pub fn visit_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.n_subjects()];
        for o in self.observations.iter().filter(|o| o.outcome == k) {
            counts[o.subject] += 1;
        }
        counts
    }

    /// Subjects with `J_ik ≤ 1`; they enter the mean fit but contribute no
    /// covariance pairs.
    pub fn single_visit_subjects(&self, k: usize) -> Vec<usize> {
        self.visit_counts(k)
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// Maps times affinely onto `[0, 1]`. Data already inside `[0, 1]` keep
    /// the identity map.
    pub fn rescale_time(&self) -> Result<(LongDataset, TimeMap)> {
        let (lo, hi) = self.domain;
        if !(hi > lo) {
            return Err(invalid!("all observation times equal {lo}; time domain is degenerate"));
        }
        let map = if lo >= 0.0 && hi <= 1.0 {
            TimeMap::IDENTITY
        } else {
            TimeMap {
                offset: lo,
                scale: hi - lo,
            }
        };
        Ok((self.apply_time_map(&map), map))
    }

    pub fn apply_time_map(&self, map: &TimeMap) -> LongDataset {
        let mut out = self.clone();
        for o in &mut out.observations {
            let u = map.to_unit(o.time);
            // rounding can push the extremes just outside [0, 1]
            o.time = if (-1e-12..0.0).contains(&u) {
                0.0
            } else if u > 1.0 && u <= 1.0 + 1e-12 {
                1.0
            } else {
                u
            };
        }
        out.domain = (
            out.observations.iter().map(|o| o.time).fold(f64::INFINITY, f64::min),
            out.observations.iter().map(|o| o.time).fold(f64::NEG_INFINITY, f64::max),
        );
        out
    }

    pub fn invert_time_map(&self, map: &TimeMap) -> LongDataset {
        let mut out = self.clone();
        for o in &mut out.observations {
            o.time = map.from_unit(o.time);
        }
        out.domain = (map.from_unit(self.domain.0), map.from_unit(self.domain.1));
        out
    }

    /// Outcome `k` (1-based) alone, as a K = 1 dataset over the same subjects.
    pub fn split_by_outcome(&self, k: usize) -> Result<LongDataset> {
        if k == 0 || k > self.n_outcomes() {
            return Err(invalid!("outcome {k} outside 1..={}", self.n_outcomes()));
        }
        let observations: Vec<Observation> = self
            .observations
            .iter()
            .filter(|o| o.outcome == k)
            .map(|o| Observation { outcome: 1, ..*o })
            .collect();
        let (lo, hi) = observations.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
            (lo.min(o.time), hi.max(o.time))
        });
        Ok(LongDataset {
            observations,
            subject_labels: self.subject_labels.clone(),
            outcome_labels: alloc::vec![self.outcome_labels[k - 1].clone()],
            domain: (lo, hi),
            dropped_rows: 0,
        })
    }

    /// Drops, per outcome, subjects with fewer than `min_visits` observations.
    pub fn retain_min_visits(&self, min_visits: usize) -> Result<LongDataset> {
        let counts: Vec<Vec<usize>> = (1..=self.n_outcomes()).map(|k| self.visit_counts(k)).collect();
        let observations: Vec<Observation> = self
            .observations
            .iter()
            .filter(|o| counts[o.outcome - 1][o.subject] >= min_visits)
            .copied()
            .collect();
        Self::from_observations(observations, self.subject_labels.clone(), self.outcome_labels.clone())
    }

    /// Per-subject series of outcome `k` (1-based).
    pub fn panel(&self, k: usize) -> Result<Panel> {
        if k == 0 || k > self.n_outcomes() {
            return Err(invalid!("outcome {k} outside 1..={}", self.n_outcomes()));
        }
        let mut panel = Panel::default();
        let mut current: Option<usize> = None;
        for o in self.observations.iter().filter(|o| o.outcome == k) {
            if current != Some(o.subject) {
                panel.start_curve(o.subject);
                current = Some(o.subject);
            }
            panel.push(o.time, o.value);
        }
        Ok(panel)
    }
}

/// One outcome's observations grouped by subject, in compressed-row layout:
/// curve `i` occupies `offsets[i]..offsets[i + 1]` of `times` and `values`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Panel {
    pub subjects: Vec<usize>,
    pub offsets: Vec<usize>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Panel {
    pub fn with_capacity(curves: usize, points: usize) -> Self {
        Self {
            subjects: Vec::with_capacity(curves),
            offsets: Vec::with_capacity(curves + 1),
            times: Vec::with_capacity(points),
            values: Vec::with_capacity(points),
        }
    }

    pub fn start_curve(&mut self, subject: usize) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.subjects.push(subject);
        self.offsets.push(self.times.len());
    }

    /// Appends a point to the last curve started.
    pub fn push(&mut self, time: f64, value: f64) {
        self.times.push(time);
        self.values.push(value);
        if let Some(last) = self.offsets.last_mut() {
            *last = self.times.len();
        }
    }

    pub fn n_curves(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn curve(&self, i: usize) -> (&[f64], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.times[r.clone()], &self.values[r])
    }

    pub fn curves(&self) -> impl Iterator<Item = (&[f64], &[f64])> + '_ {
        (0..self.n_curves()).map(move |i| self.curve(i))
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Ordered pairs `(j, j′)`, `j ≠ j′`, summed over curves.
    pub fn n_ordered_pairs(&self) -> usize {
        (0..self.n_curves())
            .map(|i| {
                let j = self.len_of(i);
                j * j.saturating_sub(1)
            })
            .sum()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Panel {
        debug_assert_eq!(values.len(), self.times.len());
        Panel {
            subjects: self.subjects.clone(),
            offsets: self.offsets.clone(),
            times: self.times.clone(),
            values,
        }
    }
}
