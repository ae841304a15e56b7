//! The recursive resampling algorithm with full call tracing.
//!
//! ```text
//! Algorithm:
//!   sample every variable
//!   while some event occurs: Resample(least indexed occurring event)    <- root call
//!   output the assignment
//!
//! Resample(E_i):
//!   redraw the variables in scope(E_i)
//!   while some E_j in N_i occurs: Resample(least indexed such E_j)        <- recursive call
//! ```
//!
//! The recursion runs on an explicit stack so nesting depth is bounded only
//! by `max_calls`. Occurrence is re-evaluated from the current assignment at
//! every loop head.
//!
//! Draw discipline: one `u64` from a ChaCha8 stream (seeded with
//! `seed_from_u64(seed)`) per variable draw. A draw `u` selects the smallest
//! value `k` with `u < ceil(F_k * 2^64)`, where `F_k` is the exact cumulative
//! weight of values `0..=k`. Initial sampling draws variables in id order and
//! a resample draws its scope in ascending id order.

use std::fmt;
use std::ops::Deref;

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::model::{evaluate_event, EventSystem, Rational, VariableSpec};

pub const DEFAULT_MAX_CALLS: u64 = 1_000_000;

/// Largest joint domain accepted by [`randomness_test`].
pub const RANDOMNESS_TEST_DOMAIN_CAP: u128 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplerError {
    #[error("record {seq} has no assignment snapshots; rerun with snapshots enabled")]
    SnapshotsMissing { seq: usize },
    #[error("joint domain has {size} assignments, limit is {RANDOMNESS_TEST_DOMAIN_CAP}")]
    DomainTooLarge { size: u128 },
    #[error("event never occurred in {samples} samples")]
    EventNeverOccurs { samples: u64 },
    #[error("event {event} does not exist (m = {m})")]
    NoSuchEvent { event: usize, m: usize },
}

/// One value per variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(values: Vec<usize>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn into_values(self) -> Vec<usize> {
        self.0
    }

    pub fn is_valid_for(&self, system: &EventSystem) -> bool {
        self.0.len() == system.num_variables()
            && self
                .0
                .iter()
                .zip(system.variables())
                .all(|(&v, var)| v < var.domain_size())
    }
}

impl Deref for Assignment {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Maps 64-bit uniform draws onto variable values through exact cumulative thresholds.
#[derive(Debug, Clone)]
pub struct DrawTable {
    thresholds: Vec<Vec<u128>>,
}

impl DrawTable {
    pub fn new(variables: &[VariableSpec]) -> Self {
        let scale = BigInt::from(1u128 << 64);
        let thresholds = variables
            .iter()
            .map(|var| {
                let mut cumulative = Rational::zero();
                var.weights()
                    .iter()
                    .map(|w| {
                        cumulative += w;
                        let scaled = &cumulative * Rational::from_integer(scale.clone());
                        scaled.ceil().to_integer().to_u128().expect("threshold fits in u128")
                    })
                    .collect()
            })
            .collect();
        Self { thresholds }
    }

    pub fn value(&self, variable: usize, draw: u64) -> usize {
        let draw = draw as u128;
        let t = &self.thresholds[variable];
        t.iter().position(|&bound| draw < bound).unwrap_or(t.len() - 1)
    }
}

/// Seeded variable sampler: the only source of randomness in a run.
pub struct VariableSampler<'a> {
    rng: ChaCha8Rng,
    table: &'a DrawTable,
}

impl<'a> VariableSampler<'a> {
    pub fn new(table: &'a DrawTable, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            table,
        }
    }

    pub fn draw(&mut self, variable: usize) -> usize {
        self.table.value(variable, self.rng.next_u64())
    }

    pub fn sample_all(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|x| self.draw(x)).collect()
    }

    pub fn resample(&mut self, scope: &[usize], values: &mut [usize]) {
        for &x in scope {
            values[x] = self.draw(x);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Root,
    Recursive,
}

impl Serialize for CallKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            CallKind::Root => "ROOT",
            CallKind::Recursive => "RECURSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResampleRecord {
    pub event_id: usize,
    pub kind: CallKind,
    /// Sequence number of the calling record; `None` for root calls.
    pub parent_call: Option<usize>,
    pub sequence_number: usize,
    /// Assignment when the call began.
    pub pre_assignment: Option<Assignment>,
    /// Assignment right after the scope was redrawn.
    pub resampled_assignment: Option<Assignment>,
    /// Assignment when the call returned; absent for calls cut off mid-flight.
    pub post_assignment: Option<Assignment>,
}

impl ResampleRecord {
    pub fn new(event_id: usize, sequence_number: usize, parent_call: Option<usize>) -> Self {
        Self {
            event_id,
            kind: if parent_call.is_some() {
                CallKind::Recursive
            } else {
                CallKind::Root
            },
            parent_call,
            sequence_number,
            pre_assignment: None,
            resampled_assignment: None,
            post_assignment: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// No event occurs under the final assignment.
    Success,
    /// The call budget ran out first.
    Cutoff,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Success => "SUCCESS",
            Outcome::Cutoff => "CUTOFF",
        })
    }
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub seed: u64,
    pub outcome: Outcome,
    /// Assignment at termination (at the cutoff point for `Cutoff`).
    pub final_assignment: Assignment,
    pub records: Vec<ResampleRecord>,
    /// Sequence numbers of the root calls.
    pub phase_boundaries: Vec<usize>,
}

impl ExecutionTrace {
    pub fn resample_calls(&self) -> usize {
        self.records.len()
    }

    pub fn phases(&self) -> usize {
        self.phase_boundaries.len()
    }

    pub fn root_events(&self) -> impl Iterator<Item = usize> + '_ {
        self.records
            .iter()
            .filter(|r| r.kind == CallKind::Root)
            .map(|r| r.event_id)
    }

    pub fn has_snapshots(&self) -> bool {
        self.records.iter().all(|r| r.pre_assignment.is_some())
    }

    /// Stable JSON: seed, outcome, final_assignment, records, phase_boundaries.
    /// Event ids are 1-based; `seq` and `parent` are 0-based call positions.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct RecordJson {
            event_id: usize,
            kind: CallKind,
            parent: Option<usize>,
            seq: usize,
        }
        #[derive(Serialize)]
        struct TraceJson<'a> {
            seed: u64,
            outcome: Outcome,
            final_assignment: &'a Assignment,
            records: Vec<RecordJson>,
            phase_boundaries: &'a [usize],
        }
        let json = TraceJson {
            seed: self.seed,
            outcome: self.outcome,
            final_assignment: &self.final_assignment,
            records: self
                .records
                .iter()
                .map(|r| RecordJson {
                    event_id: r.event_id + 1,
                    kind: r.kind,
                    parent: r.parent_call,
                    seq: r.sequence_number,
                })
                .collect(),
            phase_boundaries: &self.phase_boundaries,
        };
        serde_json::to_string(&json).expect("trace serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub max_calls: u64,
    /// Record pre/resampled/post assignments on every call.
    pub snapshots: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_calls: DEFAULT_MAX_CALLS,
            snapshots: false,
        }
    }
}

/// Runs the algorithm without snapshots.
pub fn run(system: &EventSystem, seed: u64, max_calls: u64) -> ExecutionTrace {
    run_with(
        system,
        seed,
        RunOptions {
            max_calls,
            snapshots: false,
        },
    )
}

pub fn run_with(system: &EventSystem, seed: u64, options: RunOptions) -> ExecutionTrace {
    let table = DrawTable::new(system.variables());
    run_with_table(system, &table, seed, options)
}

/// As [`run_with`], reusing a prebuilt draw table for repeated runs.
pub fn run_with_table(
    system: &EventSystem,
    table: &DrawTable,
    seed: u64,
    options: RunOptions,
) -> ExecutionTrace {
    assert!(options.max_calls >= 1, "max_calls must be positive");
    let events = system.events();
    let graph = system.dependency();
    let m = events.len();
    let mut sampler = VariableSampler::new(table, seed);
    let mut values = sampler.sample_all(system.num_variables());
    let mut records: Vec<ResampleRecord> = Vec::new();
    let mut phase_boundaries: Vec<usize> = Vec::new();
    // (event id, record index) of the active Resample calls
    let mut stack: Vec<(usize, usize)> = Vec::new();

    let mut begin = |records: &mut Vec<ResampleRecord>,
                     event: usize,
                     parent: Option<usize>,
                     values: &mut Vec<usize>| {
        let seq = records.len();
        let mut rec = ResampleRecord::new(event, seq, parent);
        if options.snapshots {
            rec.pre_assignment = Some(Assignment(values.clone()));
        }
        sampler.resample(events[event].scope(), values);
        if options.snapshots {
            rec.resampled_assignment = Some(Assignment(values.clone()));
        }
        records.push(rec);
        seq
    };

    let outcome = 'run: loop {
        let Some(root) = (0..m).find(|&i| evaluate_event(&events[i], &values)) else {
            break Outcome::Success;
        };
        if records.len() as u64 >= options.max_calls {
            break Outcome::Cutoff;
        }
        if let Some(&last) = phase_boundaries.last() {
            assert!(
                root > records[last].event_id,
                "root calls must have increasing event ids"
            );
        }
        phase_boundaries.push(records.len());
        assert!(phase_boundaries.len() <= m, "more phases than events");

        let seq = begin(&mut records, root, None, &mut values);
        stack.push((root, seq));
        while let Some(&(event, seq)) = stack.last() {
            let next = graph
                .neighborhood(event)
                .iter()
                .copied()
                .find(|&j| evaluate_event(&events[j], &values));
            match next {
                Some(j) => {
                    if records.len() as u64 >= options.max_calls {
                        break 'run Outcome::Cutoff;
                    }
                    let child = begin(&mut records, j, Some(seq), &mut values);
                    stack.push((j, child));
                }
                None => {
                    stack.pop();
                    if options.snapshots {
                        records[seq].post_assignment = Some(Assignment(values.clone()));
                    }
                }
            }
        }
    };

    ExecutionTrace {
        seed,
        outcome,
        final_assignment: Assignment(values),
        records,
        phase_boundaries,
    }
}

/// An event that did not occur when a call began but occurred when it returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressViolation {
    pub sequence_number: usize,
    pub event_id: usize,
}

/// A variable outside the resampled scope that changed during the redraw step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityViolation {
    pub sequence_number: usize,
    pub variable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProgressReport {
    /// Calls that completed and were checked.
    pub checked_calls: usize,
    pub violations: Vec<ProgressViolation>,
    pub locality_violations: Vec<LocalityViolation>,
}

impl ProgressReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.locality_violations.is_empty()
    }
}

/// Checks that every completed call leaves non-occurring events non-occurring,
/// and that each redraw touches only the call's scope.
pub fn verify_progress(
    trace: &ExecutionTrace,
    system: &EventSystem,
) -> Result<ProgressReport, SamplerError> {
    let mut report = ProgressReport::default();
    for rec in &trace.records {
        let pre = rec
            .pre_assignment
            .as_ref()
            .ok_or(SamplerError::SnapshotsMissing {
                seq: rec.sequence_number,
            })?;
        if let Some(mid) = &rec.resampled_assignment {
            let scope = system.events()[rec.event_id].scope();
            for (x, (a, b)) in pre.iter().zip(mid.iter()).enumerate() {
                if a != b && scope.binary_search(&x).is_err() {
                    report.locality_violations.push(LocalityViolation {
                        sequence_number: rec.sequence_number,
                        variable: x,
                    });
                }
            }
        }
        let Some(post) = &rec.post_assignment else {
            continue;
        };
        report.checked_calls += 1;
        for (j, event) in system.events().iter().enumerate() {
            if !evaluate_event(event, pre) && evaluate_event(event, post) {
                report.violations.push(ProgressViolation {
                    sequence_number: rec.sequence_number,
                    event_id: j,
                });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WitnessNode {
    pub label: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Pass/fail for each structural condition a valid forest must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuralChecks {
    /// Forest preorder reproduces the call order.
    pub preorder_matches: bool,
    /// Every non-root label neighbors its parent's label.
    pub neighbor_of_parent: bool,
    /// Sibling labels, and root labels, strictly increase.
    pub increasing_siblings: bool,
    /// At most `m` trees.
    pub tree_count_within_m: bool,
}

impl StructuralChecks {
    pub fn all_pass(&self) -> bool {
        self.preorder_matches
            && self.neighbor_of_parent
            && self.increasing_siblings
            && self.tree_count_within_m
    }
}

/// Forest of Resample calls. Node `k` is the call with sequence number `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WitnessForest {
    pub nodes: Vec<WitnessNode>,
    pub roots: Vec<usize>,
    pub checks: StructuralChecks,
}

impl WitnessForest {
    /// Labels of the nodes in forest preorder.
    pub fn preorder_labels(&self) -> Vec<usize> {
        self.preorder().into_iter().map(|k| self.nodes[k].label).collect()
    }

    fn preorder(&self) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<usize> = self.roots.iter().rev().copied().collect();
        while let Some(k) = stack.pop() {
            if std::mem::replace(&mut seen[k], true) {
                continue;
            }
            order.push(k);
            stack.extend(self.nodes[k].children.iter().rev());
        }
        order
    }
}

/// Rebuilds the forest of calls from parent links and checks its structure.
pub fn reconstruct_witness_forest(trace: &ExecutionTrace, system: &EventSystem) -> WitnessForest {
    let graph = system.dependency();
    let k = trace.records.len();
    let mut nodes: Vec<WitnessNode> = trace
        .records
        .iter()
        .map(|r| WitnessNode {
            label: r.event_id,
            parent: r.parent_call,
            children: Vec::new(),
        })
        .collect();
    let mut roots = Vec::new();
    let mut linked = true;
    for (idx, rec) in trace.records.iter().enumerate() {
        linked &= rec.sequence_number == idx;
        match rec.parent_call {
            None => roots.push(idx),
            Some(p) if p < idx => nodes[p].children.push(idx),
            Some(_) => linked = false,
        }
    }

    let mut forest = WitnessForest {
        nodes,
        roots,
        checks: StructuralChecks {
            preorder_matches: false,
            neighbor_of_parent: true,
            increasing_siblings: true,
            tree_count_within_m: true,
        },
    };
    forest.checks.preorder_matches = linked && forest.preorder().into_iter().eq(0..k);
    forest.checks.neighbor_of_parent = forest.nodes.iter().all(|node| match node.parent {
        Some(p) if p < k => graph.are_neighbors(forest.nodes[p].label, node.label),
        _ => true,
    });
    let increasing = |ids: &[usize]| {
        ids.windows(2)
            .all(|w| forest.nodes[w[0]].label < forest.nodes[w[1]].label)
    };
    forest.checks.increasing_siblings =
        increasing(&forest.roots) && forest.nodes.iter().all(|n| increasing(&n.children));
    forest.checks.tree_count_within_m = forest.roots.len() <= system.num_events();
    forest
}

/// Estimates the total-variation distance between the law of the assignment
/// obtained by redrawing the scope of `event` (given that it occurred) and the
/// product distribution.
pub fn randomness_test(
    system: &EventSystem,
    event: usize,
    samples: u64,
    seed: u64,
) -> Result<f64, SamplerError> {
    let m = system.num_events();
    if event >= m {
        return Err(SamplerError::NoSuchEvent { event, m });
    }
    let vars = system.variables();
    let size = vars
        .iter()
        .map(|v| v.domain_size() as u128)
        .fold(1u128, |a, d| a.saturating_mul(d));
    if size > RANDOMNESS_TEST_DOMAIN_CAP {
        return Err(SamplerError::DomainTooLarge { size });
    }
    let size = size as usize;
    let index = |values: &[usize]| {
        values
            .iter()
            .zip(vars)
            .fold(0usize, |acc, (&v, var)| acc * var.domain_size() + v)
    };

    let mut exact = vec![1.0f64; size];
    for (slot, p) in exact.iter_mut().enumerate() {
        let mut rest = slot;
        for var in vars.iter().rev() {
            let d = var.domain_size();
            *p *= var.weights()[rest % d].to_f64().unwrap_or(0.0);
            rest /= d;
        }
    }

    let table = DrawTable::new(vars);
    let mut sampler = VariableSampler::new(&table, seed);
    let target = &system.events()[event];
    let mut counts = vec![0u64; size];
    let mut hits = 0u64;
    for _ in 0..samples {
        let mut values = sampler.sample_all(vars.len());
        if evaluate_event(target, &values) {
            sampler.resample(target.scope(), &mut values);
            counts[index(&values)] += 1;
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(SamplerError::EventNeverOccurs { samples });
    }
    let tv = counts
        .iter()
        .zip(&exact)
        .map(|(&c, &p)| (c as f64 / hits as f64 - p).abs())
        .sum::<f64>()
        / 2.0;
    Ok(tv)
}
