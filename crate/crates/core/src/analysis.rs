//! Exact analysis of a dependency structure: the local lemma condition, the
//! valid-tree recurrence `Q_{n,i}`, its generating-function fixed point, a
//! brute-force tree enumerator used as an oracle, and the binomial bound chain
//! ending in `M^n`.
//!
//! Everything here is exact rational arithmetic. Floats appear only as
//! labeled renderings in [`DecayReport`].

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_integer::binomial;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::model::{parse_ratio, render_ratio, DependencyGraph, Rational};

/// Largest tree size accepted by [`enumerate_valid_trees`] by default.
pub const DEFAULT_TREE_SIZE_CAP: usize = 8;
/// Largest event count accepted by [`enumerate_valid_trees`] by default.
pub const DEFAULT_TREE_EVENT_CAP: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("{what}: expected {expected} entries, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("chi[{index}] = {value} is not in (0, 1)")]
    ChiOutOfRange { index: usize, value: String },
    #[error("cannot parse chi entry {0:?}")]
    BadChi(String),
    #[error("{what} = {value} exceeds the enumeration cap {cap}")]
    CapExceeded {
        what: &'static str,
        value: usize,
        cap: usize,
    },
    #[error("event {event} does not exist (m = {m})")]
    NoSuchEvent { event: usize, m: usize },
    #[error("length must be at least 1")]
    ZeroLength,
    #[error("n_vec must have a positive sum")]
    EmptyComposition,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AnalysisError> {
    if expected == got {
        Ok(())
    } else {
        Err(AnalysisError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn ser_ratio<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&render_ratio(r))
}

pub(crate) fn ser_ratios<S: Serializer>(rs: &[Rational], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(rs.iter().map(render_ratio))
}

/// Natural log of a positive rational, robust to numerators and denominators
/// far outside the `f64` range.
pub fn ln_rational(r: &Rational) -> f64 {
    if !r.is_positive() {
        return f64::NEG_INFINITY;
    }
    ln_bigint(r.numer()) - ln_bigint(r.denom())
}

fn ln_bigint(x: &BigInt) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().expect("fits").ln();
    }
    let shift = bits - 64;
    (x >> shift).to_f64().expect("fits").ln() + shift as f64 * std::f64::consts::LN_2
}

/// Per-event `chi_i`, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChiVector(Vec<Rational>);

impl ChiVector {
    pub fn new(chi: Vec<Rational>) -> Result<Self, AnalysisError> {
        for (index, c) in chi.iter().enumerate() {
            if !c.is_positive() || *c >= Rational::one() {
                return Err(AnalysisError::ChiOutOfRange {
                    index,
                    value: render_ratio(c),
                });
            }
        }
        Ok(Self(chi))
    }

    /// Parses comma- or whitespace-separated entries such as `1/4, 1/3, 0.5`.
    pub fn parse(text: &str) -> Result<Self, AnalysisError> {
        let entries = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| parse_chi_entry(t).ok_or_else(|| AnalysisError::BadChi(t.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries)
    }

    pub fn values(&self) -> &[Rational] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn parse_chi_entry(text: &str) -> Option<Rational> {
    if let Some((int, frac)) = text.split_once('.') {
        if text.contains('/') {
            return None;
        }
        let digits = format!("{int}{frac}");
        let numer: BigInt = digits.parse().ok()?;
        let denom = num_traits::pow(BigInt::from(10), frac.len());
        return Some(Rational::new(numer, denom));
    }
    parse_ratio(text)
}

/// One row of the condition check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LllRow {
    /// 1-based event index.
    pub event: usize,
    pub holds: bool,
    #[serde(serialize_with = "ser_ratio")]
    pub lhs: Rational,
    #[serde(serialize_with = "ser_ratio")]
    pub rhs: Rational,
    /// `rhs - lhs`; nonnegative iff the row holds.
    #[serde(serialize_with = "ser_ratio")]
    pub slack: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LllReport {
    pub all_hold: bool,
    pub rows: Vec<LllRow>,
}

/// Compares `Pr(E_i)` with `chi_i * prod_{j in N_i} (1 - chi_j)` for every event.
pub fn check_lll_condition(
    graph: &DependencyGraph,
    chi: &ChiVector,
    probs: &[Rational],
) -> Result<LllReport, AnalysisError> {
    let m = graph.len();
    check_len("chi", m, chi.len())?;
    check_len("probabilities", m, probs.len())?;
    let rows: Vec<LllRow> = (0..m)
        .map(|i| {
            let rhs = graph
                .neighborhood(i)
                .iter()
                .fold(chi.0[i].clone(), |acc, &j| acc * (Rational::one() - &chi.0[j]));
            let lhs = probs[i].clone();
            LllRow {
                event: i + 1,
                holds: lhs <= rhs,
                slack: &rhs - &lhs,
                lhs,
                rhs,
            }
        })
        .collect();
    Ok(LllReport {
        all_hold: rows.iter().all(|r| r.holds),
        rows,
    })
}

/// `chi_i = 1/|N_i|`, or `1/2` for an isolated event.
pub fn default_chi(graph: &DependencyGraph) -> ChiVector {
    let chi = (0..graph.len())
        .map(|i| {
            let degree = graph.neighborhood(i).len().max(2);
            Rational::new(BigInt::one(), BigInt::from(degree))
        })
        .collect();
    ChiVector(chi)
}

/// `max_i (1 - chi_i)`.
pub fn m_bound(chi: &ChiVector) -> Rational {
    chi.0
        .iter()
        .map(|c| Rational::one() - c)
        .max()
        .unwrap_or_else(Rational::zero)
}

/// Coefficients `c_0..=c_N` of a power series truncated after degree `N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruncatedSeries {
    #[serde(serialize_with = "ser_ratios")]
    coefficients: Vec<Rational>,
}

impl TruncatedSeries {
    pub fn zero(degree: usize) -> Self {
        Self {
            coefficients: vec![Rational::zero(); degree + 1],
        }
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn coefficients(&self) -> &[Rational] {
        &self.coefficients
    }

    pub fn coeff(&self, k: usize) -> &Rational {
        &self.coefficients[k]
    }

    fn one_plus(&self) -> Self {
        let mut out = self.clone();
        out.coefficients[0] += Rational::one();
        out
    }

    fn mul(&self, other: &Self) -> Self {
        let deg = self.degree().min(other.degree());
        let mut out = Self::zero(deg);
        for (a, x) in self.coefficients.iter().enumerate().take(deg + 1) {
            if x.is_zero() {
                continue;
            }
            for (b, y) in other.coefficients.iter().enumerate().take(deg + 1 - a) {
                out.coefficients[a + b] += x * y;
            }
        }
        out
    }

    /// `c * z * self`, truncated at the same degree.
    fn shift_scale(&self, c: &Rational) -> Self {
        let mut out = Self::zero(self.degree());
        for k in 1..=self.degree() {
            out.coefficients[k] = c * &self.coefficients[k - 1];
        }
        out
    }
}

/// Exact `Q_{n,i}` for `1 <= n <= N`, with the boundary row `Q_{0,j} = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTable {
    rows: Vec<Vec<Rational>>,
}

impl QTable {
    pub fn max_length(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn num_events(&self) -> usize {
        self.rows[0].len()
    }

    pub fn value(&self, n: usize, event: usize) -> &Rational {
        &self.rows[n][event]
    }

    pub fn row(&self, n: usize) -> &[Rational] {
        &self.rows[n]
    }

    pub fn row_sum(&self, n: usize) -> Rational {
        self.rows[n].iter().sum()
    }

    /// `{"max_length": N, "rows": [{"n": 1, "values": ["a/b", ...]}, ...]}`.
    pub fn to_json_value(&self) -> serde_json::Value {
        let rows: Vec<_> = (1..=self.max_length())
            .map(|n| {
                serde_json::json!({
                    "n": n,
                    "values": self.rows[n].iter().map(render_ratio).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({ "max_length": self.max_length(), "rows": rows })
    }

    /// `n,event,value` with 1-based events and float renderings of the values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,event,value\n");
        for n in 1..=self.max_length() {
            for (i, v) in self.rows[n].iter().enumerate() {
                out.push_str(&format!("{n},{},{:e}\n", i + 1, v.to_f64().unwrap_or(f64::NAN)));
            }
        }
        out
    }
}

/// Fills `Q_{n,i} = Pr(E_i) * sum_{n_1+..+n_l = n-1} prod_k Q_{n_k, i_k}` bottom-up,
/// where `i_1..i_l` enumerate `N_i`.
pub fn q_table(
    graph: &DependencyGraph,
    probs: &[Rational],
    max_length: usize,
) -> Result<QTable, AnalysisError> {
    let m = graph.len();
    check_len("probabilities", m, probs.len())?;
    if max_length == 0 {
        return Err(AnalysisError::ZeroLength);
    }
    let mut rows = vec![vec![Rational::one(); m]];
    for n in 1..=max_length {
        let budget = n - 1;
        let row = (0..m)
            .map(|i| {
                // conv[s] = sum over compositions of s across the neighbors seen so far
                let mut conv = vec![Rational::zero(); budget + 1];
                conv[0] = Rational::one();
                for &j in graph.neighborhood(i) {
                    let mut next = vec![Rational::zero(); budget + 1];
                    for (s, acc) in conv.iter().enumerate() {
                        if acc.is_zero() {
                            continue;
                        }
                        for (part, row) in rows.iter().enumerate().take(budget - s + 1) {
                            next[s + part] += acc * &row[j];
                        }
                    }
                    conv = next;
                }
                &probs[i] * &conv[budget]
            })
            .collect();
        rows.push(row);
    }
    Ok(QTable { rows })
}

/// Solves `Q_i(z) = z * Pr(E_i) * prod_{j in N_i} (Q_j(z) + 1)` on series
/// truncated at degree `N` by fixed-point iteration from zero. Each pass
/// settles one more coefficient, so at most `N + 1` passes are needed.
pub fn q_series(
    graph: &DependencyGraph,
    probs: &[Rational],
    degree: usize,
) -> Result<Vec<TruncatedSeries>, AnalysisError> {
    let m = graph.len();
    check_len("probabilities", m, probs.len())?;
    if degree == 0 {
        return Err(AnalysisError::ZeroLength);
    }
    let mut current = vec![TruncatedSeries::zero(degree); m];
    for _ in 0..=degree + 1 {
        let plus_one: Vec<TruncatedSeries> = current.iter().map(|q| q.one_plus()).collect();
        let next: Vec<TruncatedSeries> = (0..m)
            .map(|i| {
                let mut product = TruncatedSeries::zero(degree).one_plus();
                for &j in graph.neighborhood(i) {
                    product = product.mul(&plus_one[j]);
                }
                product.shift_scale(&probs[i])
            })
            .collect();
        if next == current {
            return Ok(current);
        }
        current = next;
    }
    unreachable!("fixed point of a degree-{degree} system must settle in {} passes", degree + 1)
}

/// Tree with event labels, stored in preorder: node 0 is the root and
/// `parents[k] < k` for every other node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidTree {
    pub labels: Vec<usize>,
    pub parents: Vec<Option<usize>>,
}

impl ValidTree {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn preorder_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn weight(&self, probs: &[Rational]) -> Rational {
        self.labels
            .iter()
            .fold(Rational::one(), |acc, &l| acc * &probs[l])
    }

    /// Checks the neighbor-of-parent and increasing-siblings conditions directly.
    pub fn is_valid(&self, graph: &DependencyGraph) -> bool {
        let mut last_child: Vec<Option<usize>> = vec![None; self.size()];
        for k in 1..self.size() {
            let Some(p) = self.parents[k] else {
                return false;
            };
            if p >= k || !graph.are_neighbors(self.labels[p], self.labels[k]) {
                return false;
            }
            if let Some(prev) = last_child[p] {
                if self.labels[prev] >= self.labels[k] {
                    return false;
                }
            }
            last_child[p] = Some(k);
        }
        self.parents.first() == Some(&None)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEnumeration {
    pub trees: Vec<ValidTree>,
    pub weight: Rational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationCaps {
    pub max_size: usize,
    pub max_events: usize,
}

impl Default for EnumerationCaps {
    fn default() -> Self {
        Self {
            max_size: DEFAULT_TREE_SIZE_CAP,
            max_events: DEFAULT_TREE_EVENT_CAP,
        }
    }
}

/// All preorder parent arrays of plane trees with `size` nodes. A new node in
/// preorder may only hang off the current rightmost path.
fn plane_tree_shapes(size: usize) -> Vec<Vec<Option<usize>>> {
    fn grow(
        size: usize,
        parents: &mut Vec<Option<usize>>,
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        let k = parents.len();
        if k == size {
            out.push(parents.clone());
            return;
        }
        for depth in 0..path.len() {
            let saved: Vec<usize> = path.drain(depth + 1..).collect();
            let p = path[depth];
            parents.push(Some(p));
            path.push(k);
            grow(size, parents, path, out);
            path.pop();
            parents.pop();
            path.extend(saved);
        }
    }
    let mut out = Vec::new();
    if size == 0 {
        return out;
    }
    grow(size, &mut vec![None], &mut vec![0], &mut out);
    out
}

/// Lists every tree with exactly `size` nodes and root label `root` whose
/// non-root labels neighbor their parent's label and whose sibling labels
/// strictly increase. Exponential by construction; guarded by `caps`.
pub fn enumerate_valid_trees(
    graph: &DependencyGraph,
    probs: &[Rational],
    root: usize,
    size: usize,
    caps: EnumerationCaps,
) -> Result<TreeEnumeration, AnalysisError> {
    let m = graph.len();
    check_len("probabilities", m, probs.len())?;
    if root >= m {
        return Err(AnalysisError::NoSuchEvent { event: root, m });
    }
    if size == 0 {
        return Err(AnalysisError::ZeroLength);
    }
    if size > caps.max_size {
        return Err(AnalysisError::CapExceeded {
            what: "tree size",
            value: size,
            cap: caps.max_size,
        });
    }
    if m > caps.max_events {
        return Err(AnalysisError::CapExceeded {
            what: "event count",
            value: m,
            cap: caps.max_events,
        });
    }

    fn label(
        k: usize,
        shape: &[Option<usize>],
        prev_sibling: &[Option<usize>],
        labels: &mut Vec<usize>,
        graph: &DependencyGraph,
        out: &mut Vec<ValidTree>,
    ) {
        if k == shape.len() {
            out.push(ValidTree {
                labels: labels.clone(),
                parents: shape.to_vec(),
            });
            return;
        }
        let parent = shape[k].expect("non-root node");
        let floor = prev_sibling[k].map(|s| labels[s] + 1).unwrap_or(0);
        for &candidate in graph.neighborhood(labels[parent]) {
            if candidate < floor {
                continue;
            }
            labels.push(candidate);
            label(k + 1, shape, prev_sibling, labels, graph, out);
            labels.pop();
        }
    }

    let mut trees = Vec::new();
    for shape in plane_tree_shapes(size) {
        let mut prev_sibling = vec![None; size];
        let mut last_child: Vec<Option<usize>> = vec![None; size];
        for k in 1..size {
            let p = shape[k].expect("non-root node");
            prev_sibling[k] = last_child[p];
            last_child[p] = Some(k);
        }
        label(1, &shape, &prev_sibling, &mut vec![root], graph, &mut trees);
    }
    // trees sharing a label multiset share a weight
    let mut multisets: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    for t in &trees {
        let mut counts = vec![0; m];
        for &l in &t.labels {
            counts[l] += 1;
        }
        *multisets.entry(counts).or_default() += 1;
    }
    let weight = multisets
        .into_iter()
        .map(|(counts, copies)| {
            counts
                .iter()
                .zip(probs)
                .fold(Rational::from_integer(copies.into()), |acc, (&c, p)| {
                    acc * num_traits::pow(p.clone(), c)
                })
        })
        .sum();
    Ok(TreeEnumeration { trees, weight })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleRow {
    pub n: usize,
    /// 1-based event index.
    pub event: usize,
    #[serde(serialize_with = "ser_ratio")]
    pub recurrence: Rational,
    #[serde(serialize_with = "ser_ratio")]
    pub enumeration: Rational,
    pub pass: bool,
}

/// Compares every `Q_{n,i}` (n <= N) with the total weight of enumerated trees.
pub fn oracle_check_q(
    graph: &DependencyGraph,
    probs: &[Rational],
    max_length: usize,
    caps: EnumerationCaps,
) -> Result<Vec<OracleRow>, AnalysisError> {
    let table = q_table(graph, probs, max_length)?;
    let mut rows = Vec::new();
    for n in 1..=max_length {
        for i in 0..graph.len() {
            let enumeration = enumerate_valid_trees(graph, probs, i, n, caps)?.weight;
            let recurrence = table.value(n, i).clone();
            rows.push(OracleRow {
                n,
                event: i + 1,
                pass: recurrence == enumeration,
                recurrence,
                enumeration,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct BoundTermInput<'a> {
    /// Multiplicity `n_i` of every event; must have a positive sum.
    pub n_vec: &'a [u64],
    pub chi: &'a ChiVector,
    pub graph: &'a DependencyGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BoundTerm {
    /// `prod_i chi_i^{n_i} (1-chi_i)^{s_i} C(s_i, n_i)` with `s_i = sum_{j in N_i} n_j`.
    #[serde(serialize_with = "ser_ratio")]
    pub term: Rational,
    /// Same product with `C(s_i - 1, n_i - 1)`, before the `n/k` identity.
    #[serde(serialize_with = "ser_ratio")]
    pub pre_identity_term: Rational,
    /// `prod_i (1-chi_i)^{n_i}`.
    #[serde(serialize_with = "ser_ratio")]
    pub bound: Rational,
    pub holds: bool,
}

/// Evaluates the per-tree term of the coefficient bound and its
/// `prod (1 - chi_i)^{n_i}` majorant. Events with `n_i = 0` contribute 1.
pub fn bound_term(input: &BoundTermInput<'_>) -> Result<BoundTerm, AnalysisError> {
    let m = input.graph.len();
    check_len("n_vec", m, input.n_vec.len())?;
    check_len("chi", m, input.chi.len())?;
    if input.n_vec.iter().all(|&k| k == 0) {
        return Err(AnalysisError::EmptyComposition);
    }
    // integer numerators over shared denominators, normalized once at the end
    let mut term_num = BigInt::one();
    let mut pre_num = BigInt::one();
    let mut term_den = BigInt::one();
    let mut bound_num = BigInt::one();
    let mut bound_den = BigInt::one();
    for i in 0..m {
        let n_i = input.n_vec[i];
        if n_i == 0 {
            continue;
        }
        let s_i: u64 = input
            .graph
            .neighborhood(i)
            .iter()
            .map(|&j| input.n_vec[j])
            .sum();
        let chi = &input.chi.0[i];
        let (a, b) = (chi.numer(), chi.denom());
        let rest = b - a;
        let common = num_traits::pow(a.clone(), n_i as usize) * num_traits::pow(rest.clone(), s_i as usize);
        term_num *= &common * binomial(BigInt::from(s_i), BigInt::from(n_i));
        pre_num *= common * binomial(BigInt::from(s_i - 1), BigInt::from(n_i - 1));
        term_den *= num_traits::pow(b.clone(), (n_i + s_i) as usize);
        bound_num *= num_traits::pow(rest, n_i as usize);
        bound_den *= num_traits::pow(b.clone(), n_i as usize);
    }
    let holds = &term_num * &bound_den < &bound_num * &term_den;
    let term = Rational::new(term_num, term_den.clone());
    let pre_identity_term = Rational::new(pre_num, term_den);
    let bound = Rational::new(bound_num, bound_den);
    Ok(BoundTerm {
        holds,
        term,
        pre_identity_term,
        bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub n: usize,
    /// `sum_i Q_{n,i}`.
    #[serde(serialize_with = "ser_ratio")]
    pub sum_q: Rational,
    #[serde(serialize_with = "ser_ratio")]
    pub m_pow_n: Rational,
    /// `sum_q / M^n`.
    #[serde(serialize_with = "ser_ratio")]
    pub ratio: Rational,
    /// Float rendering of `sum_q`.
    pub sum_q_f64: f64,
    /// Float rendering of `M^n`.
    pub m_pow_n_f64: f64,
    /// Float rendering of `ratio`.
    pub ratio_f64: f64,
    /// `ln sum_q(n) - ln sum_q(n-1)`; absent for `n = 1` or a zero row.
    pub log_slope: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayWarning {
    /// No condition check was supplied, or it failed.
    ConditionNotVerified,
}

impl fmt::Display for DecayWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ConditionNotVerified")
    }
}

impl Serialize for DecayWarning {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    #[serde(serialize_with = "ser_ratio")]
    pub m: Rational,
    pub log_m: f64,
    pub warning: Option<DecayWarning>,
    pub rows: Vec<DecayRow>,
}

impl DecayReport {
    pub fn row(&self, n: usize) -> &DecayRow {
        &self.rows[n - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,sum_q,m_pow_n,ratio,log_slope\n");
        for r in &self.rows {
            let slope = r.log_slope.map(|s| format!("{s:e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{}\n",
                r.n, r.sum_q_f64, r.m_pow_n_f64, r.ratio_f64, slope
            ));
        }
        out
    }
}

/// Tabulates `sum_i Q_{n,i}` against `M^n`. `condition` should be the check
/// for the probabilities the table was built from; without a passing one the
/// report carries a warning.
pub fn decay_report(
    table: &QTable,
    chi: &ChiVector,
    condition: Option<&LllReport>,
) -> Result<DecayReport, AnalysisError> {
    check_len("chi", table.num_events(), chi.len())?;
    let m = m_bound(chi);
    let mut rows = Vec::with_capacity(table.max_length());
    let mut m_pow = Rational::one();
    let mut prev_log: Option<f64> = None;
    for n in 1..=table.max_length() {
        m_pow *= &m;
        let sum_q = table.row_sum(n);
        let ratio = &sum_q / &m_pow;
        let log = ln_rational(&sum_q);
        let log_slope = match prev_log {
            Some(p) if p.is_finite() && log.is_finite() => Some(log - p),
            _ => None,
        };
        prev_log = Some(log);
        rows.push(DecayRow {
            n,
            sum_q_f64: sum_q.to_f64().unwrap_or(0.0),
            m_pow_n_f64: m_pow.to_f64().unwrap_or(0.0),
            ratio_f64: ratio.to_f64().unwrap_or(f64::NAN),
            sum_q,
            m_pow_n: m_pow.clone(),
            ratio,
            log_slope,
        });
    }
    let verified = condition.is_some_and(|c| c.all_hold);
    Ok(DecayReport {
        log_m: ln_rational(&m),
        m,
        warning: (!verified).then_some(DecayWarning::ConditionNotVerified),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(a: i64, b: i64) -> Rational {
        Rational::new(a.into(), b.into())
    }

    fn graph(adj: &[&[usize]]) -> DependencyGraph {
        DependencyGraph::from_neighborhoods(adj.iter().map(|n| n.to_vec()).collect()).unwrap()
    }

    fn single() -> DependencyGraph {
        graph(&[&[0]])
    }

    fn mutual() -> DependencyGraph {
        graph(&[&[0, 1], &[0, 1]])
    }

    fn path3() -> DependencyGraph {
        graph(&[&[0, 1], &[0, 1, 2], &[1, 2]])
    }

    fn catalan(n: u64) -> BigInt {
        binomial(BigInt::from(2 * n), BigInt::from(n)) / BigInt::from(n + 1)
    }

    fn chi(v: &[(i64, i64)]) -> ChiVector {
        ChiVector::new(v.iter().map(|&(a, b)| r(a, b)).collect()).unwrap()
    }

    #[test]
    fn condition_holds_for_mutual_pair() {
        let rep = check_lll_condition(&mutual(), &chi(&[(1, 4), (1, 4)]), &[r(1, 8), r(1, 8)]).unwrap();
        assert!(rep.all_hold);
        assert_eq!(rep.rows[0].rhs, r(9, 64));
        assert_eq!(rep.rows[0].slack, r(1, 64));
    }

    #[test]
    fn condition_fails_for_mutual_pair() {
        let rep = check_lll_condition(&mutual(), &chi(&[(1, 2), (1, 2)]), &[r(1, 4), r(1, 4)]).unwrap();
        assert!(!rep.all_hold);
        assert_eq!(rep.rows[1].rhs, r(1, 8));
        assert!(!rep.rows[1].holds);
    }

    #[test]
    fn zero_probability_always_holds() {
        for c in [(1, 10), (1, 2), (9, 10)] {
            let rep = check_lll_condition(&mutual(), &chi(&[c, c]), &[r(0, 1), r(0, 1)]).unwrap();
            assert!(rep.all_hold);
        }
    }

    #[test]
    fn condition_dimension_mismatch() {
        let err = check_lll_condition(&mutual(), &chi(&[(1, 2)]), &[r(0, 1), r(0, 1)]).unwrap_err();
        assert!(matches!(err, AnalysisError::DimensionMismatch { what: "chi", .. }));
    }

    #[test]
    fn chi_validation_and_parsing() {
        assert!(ChiVector::new(vec![r(0, 1)]).is_err());
        assert!(ChiVector::new(vec![r(1, 1)]).is_err());
        assert_eq!(ChiVector::parse("1/4, 0.5 3/4").unwrap(), chi(&[(1, 4), (1, 2), (3, 4)]));
        assert!(matches!(ChiVector::parse("1/4,x"), Err(AnalysisError::BadChi(_))));
        assert!(matches!(ChiVector::parse("1.5"), Err(AnalysisError::ChiOutOfRange { .. })));
    }

    #[test]
    fn default_chi_rule() {
        assert_eq!(default_chi(&single()), chi(&[(1, 2)]));
        let star = graph(&[&[0, 1, 2, 3], &[0, 1], &[0, 2], &[0, 3]]);
        assert_eq!(default_chi(&star).values()[0], r(1, 4));
        assert_eq!(default_chi(&star).values()[1], r(1, 2));
        let triangle = graph(&[&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]]);
        assert_eq!(default_chi(&triangle), chi(&[(1, 3), (1, 3), (1, 3)]));
    }

    #[test]
    fn m_bound_examples() {
        assert_eq!(m_bound(&chi(&[(1, 4), (1, 2)])), r(3, 4));
        assert_eq!(m_bound(&chi(&[(1, 2), (1, 2), (1, 2)])), r(1, 2));
        assert_eq!(m_bound(&chi(&[(9, 10)])), r(1, 10));
    }

    #[test]
    fn q_table_geometric() {
        let t = q_table(&single(), &[r(1, 2)], 5).unwrap();
        assert_eq!(*t.value(3, 0), r(1, 8));
        for n in 1..=5 {
            assert_eq!(*t.value(n, 0), num_traits::pow(r(1, 2), n));
        }
    }

    #[test]
    fn q_table_catalan() {
        let p = r(1, 10);
        let t = q_table(&mutual(), &[p.clone(), p.clone()], 8).unwrap();
        assert_eq!(*t.value(2, 0), r(2, 100));
        assert_eq!(*t.value(3, 0), r(5, 1000));
        for n in 1..=8 {
            let expected = Rational::from_integer(catalan(n as u64)) * num_traits::pow(p.clone(), n);
            assert_eq!(*t.value(n, 0), expected);
            assert_eq!(t.value(n, 0), t.value(n, 1));
        }
    }

    #[test]
    fn q_table_first_row_is_probabilities() {
        let probs = vec![r(1, 3), r(1, 8), r(1, 10)];
        let t = q_table(&path3(), &probs, 1).unwrap();
        assert_eq!(t.row(1), &probs[..]);
        assert!(matches!(q_table(&path3(), &probs, 0), Err(AnalysisError::ZeroLength)));
    }

    #[test]
    fn q_series_geometric() {
        let s = q_series(&single(), &[r(1, 2)], 4).unwrap();
        assert_eq!(s[0].coefficients(), &[r(0, 1), r(1, 2), r(1, 4), r(1, 8), r(1, 16)]);
    }

    #[test]
    fn q_series_matches_table() {
        let probs = vec![r(1, 3), r(1, 8), r(1, 10)];
        let series = q_series(&path3(), &probs, 9).unwrap();
        let table = q_table(&path3(), &probs, 9).unwrap();
        for (i, s) in series.iter().enumerate() {
            assert!(s.coeff(0).is_zero());
            for n in 1..=9 {
                assert_eq!(s.coeff(n), table.value(n, i));
            }
        }
    }

    #[test]
    fn shapes_are_catalan_many() {
        for size in 1..=7 {
            assert_eq!(
                BigInt::from(plane_tree_shapes(size).len()),
                catalan(size as u64 - 1)
            );
        }
    }

    #[test]
    fn enumerate_mutual_pair() {
        let p = r(1, 7);
        let probs = [p.clone(), p.clone()];
        let caps = EnumerationCaps::default();
        let two = enumerate_valid_trees(&mutual(), &probs, 0, 2, caps).unwrap();
        let mut seqs: Vec<_> = two.trees.iter().map(|t| t.labels.clone()).collect();
        seqs.sort();
        assert_eq!(seqs, vec![vec![0, 0], vec![0, 1]]);
        assert_eq!(two.weight, r(2, 1) * &p * &p);
        let three = enumerate_valid_trees(&mutual(), &probs, 0, 3, caps).unwrap();
        assert_eq!(three.trees.len(), 5);
        assert_eq!(three.weight, r(5, 1) * &p * &p * &p);
        assert!(three.trees.iter().all(|t| t.is_valid(&mutual())));
        let one = enumerate_valid_trees(&mutual(), &probs, 1, 1, caps).unwrap();
        assert_eq!(one.trees.len(), 1);
        assert_eq!(one.weight, p);
    }

    #[test]
    fn enumerate_caps() {
        let probs = [r(1, 2), r(1, 2)];
        let caps = EnumerationCaps::default();
        assert!(matches!(
            enumerate_valid_trees(&mutual(), &probs, 0, 9, caps),
            Err(AnalysisError::CapExceeded { what: "tree size", .. })
        ));
        let big = DependencyGraph::from_neighborhoods((0..7).map(|i| vec![i]).collect()).unwrap();
        assert!(matches!(
            enumerate_valid_trees(&big, &vec![r(1, 2); 7], 0, 2, caps),
            Err(AnalysisError::CapExceeded { what: "event count", .. })
        ));
        assert!(matches!(
            enumerate_valid_trees(&mutual(), &probs, 2, 2, caps),
            Err(AnalysisError::NoSuchEvent { .. })
        ));
    }

    #[test]
    fn oracle_mutual_and_path() {
        let caps = EnumerationCaps::default();
        let rows = oracle_check_q(&mutual(), &[r(1, 10), r(1, 10)], 5, caps).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.pass));
        let rows = oracle_check_q(&path3(), &[r(1, 3), r(1, 8), r(1, 10)], 4, caps).unwrap();
        assert!(rows.iter().all(|r| r.pass));
        let rows = oracle_check_q(&path3(), &[r(1, 3), r(1, 8), r(1, 10)], 1, caps).unwrap();
        assert!(rows.iter().all(|r| r.pass && r.n == 1));
    }

    #[test]
    fn bound_term_examples() {
        let g = single();
        let c = chi(&[(1, 2)]);
        let b = bound_term(&BoundTermInput { n_vec: &[2], chi: &c, graph: &g }).unwrap();
        assert_eq!((b.term.clone(), b.bound.clone(), b.holds), (r(1, 16), r(1, 4), true));
        let b = bound_term(&BoundTermInput { n_vec: &[1], chi: &c, graph: &g }).unwrap();
        assert_eq!((b.term, b.bound, b.holds), (r(1, 4), r(1, 2), true));

        let g = mutual();
        let c = chi(&[(1, 3), (1, 3)]);
        let b = bound_term(&BoundTermInput { n_vec: &[1, 1], chi: &c, graph: &g }).unwrap();
        assert_eq!(b.term, r(64, 729));
        assert_eq!(b.bound, r(4, 9));
        // C(1, 0) = 1 per factor: ((1/3)(4/9))^2
        assert_eq!(b.pre_identity_term, r(16, 729));
        assert!(b.holds);
    }

    #[test]
    fn bound_term_zero_coordinates() {
        let g = mutual();
        let c = chi(&[(1, 3), (1, 4)]);
        let b = bound_term(&BoundTermInput { n_vec: &[2, 0], chi: &c, graph: &g }).unwrap();
        // only i = 0: (1/3)^2 (2/3)^2 C(2,2)
        assert_eq!(b.term, r(4, 81));
        assert_eq!(b.bound, r(4, 9));
        assert!(matches!(
            bound_term(&BoundTermInput { n_vec: &[0, 0], chi: &c, graph: &g }),
            Err(AnalysisError::EmptyComposition)
        ));
    }

    #[test]
    fn decay_single_event() {
        let t = q_table(&single(), &[r(1, 8)], 10).unwrap();
        let c = chi(&[(1, 2)]);
        let cond = check_lll_condition(&single(), &c, &[r(1, 8)]).unwrap();
        let rep = decay_report(&t, &c, Some(&cond)).unwrap();
        assert!(rep.warning.is_none());
        assert_eq!(rep.m, r(1, 2));
        for n in 1..=10 {
            assert_eq!(rep.row(n).ratio, num_traits::pow(r(1, 4), n));
        }
        assert_eq!(rep.row(1).sum_q, r(1, 8));
        let slope = rep.row(10).log_slope.unwrap();
        assert!((slope - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        let unchecked = decay_report(&t, &c, None).unwrap();
        assert_eq!(unchecked.warning, Some(DecayWarning::ConditionNotVerified));
    }

    #[test]
    fn decay_catalan_slope_below_log_m() {
        let p = r(1, 20);
        let probs = [p.clone(), p];
        let c = chi(&[(1, 4), (1, 4)]);
        let cond = check_lll_condition(&mutual(), &c, &probs).unwrap();
        assert!(cond.all_hold);
        let t = q_table(&mutual(), &probs, 30).unwrap();
        let rep = decay_report(&t, &c, Some(&cond)).unwrap();
        let slope = rep.row(30).log_slope.unwrap();
        // ln(C_30 / C_29 / 20) = ln(118 / 620)
        assert!((slope - (118.0f64 / 620.0).ln()).abs() < 1e-12);
        assert!(slope < rep.log_m);
        assert_eq!(rep.row(1).sum_q, r(1, 10));
    }

    #[test]
    fn ln_rational_large_values() {
        let big = num_traits::pow(r(1, 3), 2000);
        assert!((ln_rational(&big) - 2000.0 * (1.0f64 / 3.0).ln()).abs() < 1e-9);
        assert_eq!(ln_rational(&r(0, 1)), f64::NEG_INFINITY);
    }

    fn arb_graph() -> impl Strategy<Value = DependencyGraph> {
        (1usize..=4).prop_flat_map(|m| {
            prop::collection::vec(any::<bool>(), m * (m - 1) / 2).prop_map(move |bits| {
                let mut adj: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
                let mut k = 0;
                for i in 0..m {
                    for j in i + 1..m {
                        if bits[k] {
                            adj[i].push(j);
                            adj[j].push(i);
                        }
                        k += 1;
                    }
                }
                DependencyGraph::from_neighborhoods(adj).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn q_table_monotone_in_probabilities(
            g in arb_graph(),
            base in prop::collection::vec(1i64..20, 4),
            bump in prop::collection::vec(0i64..5, 4),
        ) {
            let m = g.len();
            let lo: Vec<Rational> = base[..m].iter().map(|&b| r(b, 40)).collect();
            let hi: Vec<Rational> = base[..m].iter().zip(&bump).map(|(&b, &d)| r(b + d, 40)).collect();
            let a = q_table(&g, &lo, 7).unwrap();
            let b = q_table(&g, &hi, 7).unwrap();
            for n in 1..=7 {
                for i in 0..m {
                    prop_assert!(a.value(n, i) <= b.value(n, i));
                    prop_assert!(!a.value(n, i).is_negative());
                }
            }
        }

        #[test]
        fn condition_monotone_in_probabilities(
            g in arb_graph(),
            chis in prop::collection::vec(1i64..10, 4),
            probs in prop::collection::vec(0i64..50, 4),
            cut in prop::collection::vec(0i64..50, 4),
        ) {
            let m = g.len();
            let c = ChiVector::new(chis[..m].iter().map(|&x| r(x, 10)).collect()).unwrap();
            let p: Vec<Rational> = probs[..m].iter().map(|&x| r(x, 200)).collect();
            let lower: Vec<Rational> = probs[..m].iter().zip(&cut).map(|(&x, &d)| r((x - d).max(0), 200)).collect();
            let before = check_lll_condition(&g, &c, &p).unwrap();
            let after = check_lll_condition(&g, &c, &lower).unwrap();
            for (x, y) in before.rows.iter().zip(&after.rows) {
                prop_assert!(!x.holds || y.holds);
            }
        }

        #[test]
        fn series_and_table_agree(
            g in arb_graph(),
            probs in prop::collection::vec(1i64..10, 4),
        ) {
            let m = g.len();
            let p: Vec<Rational> = probs[..m].iter().map(|&x| r(x, 17)).collect();
            let table = q_table(&g, &p, 8).unwrap();
            let series = q_series(&g, &p, 8).unwrap();
            for (i, s) in series.iter().enumerate() {
                for n in 1..=8 {
                    prop_assert_eq!(s.coeff(n), table.value(n, i));
                }
            }
        }
    }
}
