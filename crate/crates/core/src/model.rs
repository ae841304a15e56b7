//! Variables, events, scopes and the dependency graph of the variable setting.
//!
//! An [`EventSystem`] owns `n` independent discrete variables and `m` events.
//! Every event declares a scope (the variables it reads) and a predicate over
//! the values of that scope. Two events are neighbors in the dependency graph
//! iff their scopes intersect, so every event is its own neighbor.
//!
//! Indices are 0-based here. Anything rendered for people (CLI output,
//! reports) shifts them by one.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact rational used throughout the analysis path.
pub type Rational = num_rational::BigRational;

/// Upper bound on the number of scope tuples enumerated by default.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("variable {variable}: domain must be nonempty")]
    EmptyDomain { variable: usize },
    #[error("variable {variable}: expected {expected} weights, got {got}")]
    WeightCount {
        variable: usize,
        expected: usize,
        got: usize,
    },
    #[error("variable {variable}: weight {weight} is negative")]
    NegativeWeight { variable: usize, weight: String },
    #[error("variable {variable}: weights sum to {sum}, not 1")]
    WeightSum { variable: usize, sum: String },
    #[error("variable {variable}: cannot parse weight {text:?}")]
    BadWeight { variable: usize, text: String },
    #[error("scope must be nonempty")]
    EmptyScope,
    #[error("scope must be strictly increasing, got {scope:?}")]
    UnsortedScope { scope: Vec<usize> },
    #[error("forbidden tuple {tuple:?} has arity {got}, scope has {expected} variables")]
    TupleArity {
        tuple: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("scope variable {variable} does not exist (n = {n})")]
    VariableOutOfRange { variable: usize, n: usize },
    #[error("forbidden tuple {tuple:?}: value {value} is outside the domain of variable {variable}")]
    TupleValueOutOfRange {
        tuple: Vec<usize>,
        variable: usize,
        value: usize,
    },
    #[error("event {event}: {source}")]
    Event {
        event: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("scope domain has {size} tuples, enumeration cap is {cap}")]
    EnumerationCapExceeded { size: u128, cap: u64 },
    #[error("instance declares n = {declared} but lists {listed} variables")]
    VariableCount { declared: usize, listed: usize },
    #[error("event {event} has an intensional predicate and cannot be written to a file")]
    NotFileRepresentable { event: usize },
    #[error("neighborhoods are not a valid dependency graph: {0}")]
    InvalidGraph(String),
    #[error("invalid instance JSON: {0}")]
    Json(String),
}

impl ModelError {
    fn at_event(self, event: usize) -> Self {
        ModelError::Event {
            event,
            source: Box::new(self),
        }
    }
}

/// A discrete variable with an exact distribution over `0..domain_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableSpec {
    weights: Vec<Rational>,
}

impl VariableSpec {
    pub fn uniform(domain_size: usize) -> Result<Self, ModelError> {
        if domain_size == 0 {
            return Err(ModelError::EmptyDomain { variable: 0 });
        }
        let w = Rational::new(BigInt::one(), BigInt::from(domain_size));
        Ok(Self {
            weights: vec![w; domain_size],
        })
    }

    pub fn binary() -> Self {
        Self::uniform(2).expect("two-point domain")
    }

    /// Builds a variable from explicit weights, which must be nonnegative and sum to 1.
    pub fn weighted(weights: Vec<Rational>) -> Result<Self, ModelError> {
        if weights.is_empty() {
            return Err(ModelError::EmptyDomain { variable: 0 });
        }
        if let Some(w) = weights.iter().find(|w| w.is_negative()) {
            return Err(ModelError::NegativeWeight {
                variable: 0,
                weight: w.to_string(),
            });
        }
        let sum: Rational = weights.iter().sum();
        if !sum.is_one() {
            return Err(ModelError::WeightSum {
                variable: 0,
                sum: sum.to_string(),
            });
        }
        Ok(Self { weights })
    }

    pub fn domain_size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Rational] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.iter().all(|w| *w == self.weights[0])
    }
}

/// Black-box predicate over the scope restriction of an assignment.
pub type ScopePredicate = Arc<dyn Fn(&[usize]) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum Predicate {
    /// The event occurs iff the scope tuple is one of these.
    Extensional(BTreeSet<Vec<usize>>),
    /// The event occurs iff the function returns true on the scope tuple.
    Intensional(ScopePredicate),
}

impl fmt::Debug for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Extensional(t) => f.debug_tuple("Extensional").field(t).finish(),
            Predicate::Intensional(_) => f.write_str("Intensional(<fn>)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EventSpec {
    scope: Vec<usize>,
    predicate: Predicate,
}

impl EventSpec {
    pub fn extensional<I>(scope: Vec<usize>, forbidden: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = Vec<usize>>,
    {
        check_scope(&scope)?;
        let mut tuples = BTreeSet::new();
        for tuple in forbidden {
            if tuple.len() != scope.len() {
                return Err(ModelError::TupleArity {
                    expected: scope.len(),
                    got: tuple.len(),
                    tuple,
                });
            }
            tuples.insert(tuple);
        }
        Ok(Self {
            scope,
            predicate: Predicate::Extensional(tuples),
        })
    }

    pub fn intensional<F>(scope: Vec<usize>, predicate: F) -> Result<Self, ModelError>
    where
        F: Fn(&[usize]) -> bool + Send + Sync + 'static,
    {
        check_scope(&scope)?;
        Ok(Self {
            scope,
            predicate: Predicate::Intensional(Arc::new(predicate)),
        })
    }

    pub fn scope(&self) -> &[usize] {
        &self.scope
    }

    pub fn predicate(&self) -> &Predicate {
        &self.predicate
    }

    /// Forbidden tuples for extensional events, `None` otherwise.
    pub fn forbidden(&self) -> Option<&BTreeSet<Vec<usize>>> {
        match &self.predicate {
            Predicate::Extensional(t) => Some(t),
            Predicate::Intensional(_) => None,
        }
    }

    /// Evaluates the predicate on a scope tuple (one value per scope variable).
    pub fn holds_on_tuple(&self, tuple: &[usize]) -> bool {
        match &self.predicate {
            Predicate::Extensional(t) => t.contains(tuple),
            Predicate::Intensional(f) => f(tuple),
        }
    }

    fn validate(&self, variables: &[VariableSpec]) -> Result<(), ModelError> {
        let n = variables.len();
        if let Some(&v) = self.scope.iter().find(|&&v| v >= n) {
            return Err(ModelError::VariableOutOfRange { variable: v, n });
        }
        if let Predicate::Extensional(tuples) = &self.predicate {
            for tuple in tuples {
                for (&value, &var) in tuple.iter().zip(&self.scope) {
                    if value >= variables[var].domain_size() {
                        return Err(ModelError::TupleValueOutOfRange {
                            tuple: tuple.clone(),
                            variable: var,
                            value,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_scope(scope: &[usize]) -> Result<(), ModelError> {
    if scope.is_empty() {
        return Err(ModelError::EmptyScope);
    }
    if scope.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::UnsortedScope {
            scope: scope.to_vec(),
        });
    }
    Ok(())
}

/// True iff `event` occurs under the full assignment `values`.
///
/// Only the scope restriction of `values` is read.
pub fn evaluate_event(event: &EventSpec, values: &[usize]) -> bool {
    match &event.predicate {
        Predicate::Extensional(tuples) if tuples.len() <= 8 => tuples
            .iter()
            .any(|t| t.iter().zip(&event.scope).all(|(&v, &x)| values[x] == v)),
        _ => {
            let tuple: Vec<usize> = event.scope.iter().map(|&x| values[x]).collect();
            event.holds_on_tuple(&tuple)
        }
    }
}

/// Exact probability that `event` occurs under the product distribution.
///
/// Extensional events sum the weights of their forbidden tuples directly, so
/// the cap only limits the enumeration needed by intensional predicates.
pub fn event_probability(
    event: &EventSpec,
    variables: &[VariableSpec],
    cap: u64,
) -> Result<Rational, ModelError> {
    match &event.predicate {
        Predicate::Extensional(tuples) => Ok(tuples
            .iter()
            .map(|t| tuple_weight(t, &event.scope, variables))
            .sum()),
        Predicate::Intensional(f) => {
            let mut total = Rational::zero();
            for_each_scope_tuple(&event.scope, variables, cap, |t| {
                if f(t) {
                    total += tuple_weight(t, &event.scope, variables);
                }
            })?;
            Ok(total)
        }
    }
}

fn tuple_weight(tuple: &[usize], scope: &[usize], variables: &[VariableSpec]) -> Rational {
    tuple
        .iter()
        .zip(scope)
        .map(|(&v, &x)| &variables[x].weights[v])
        .fold(Rational::one(), |acc, w| acc * w)
}

/// Number of tuples in the product domain of `scope`.
pub fn scope_domain_size(scope: &[usize], variables: &[VariableSpec]) -> u128 {
    scope
        .iter()
        .map(|&x| variables[x].domain_size() as u128)
        .fold(1u128, |acc, d| acc.saturating_mul(d))
}

/// Calls `visit` on every tuple of the scope's product domain, odometer order
/// with the last scope variable varying fastest.
pub fn for_each_scope_tuple<F>(
    scope: &[usize],
    variables: &[VariableSpec],
    cap: u64,
    mut visit: F,
) -> Result<(), ModelError>
where
    F: FnMut(&[usize]),
{
    let size = scope_domain_size(scope, variables);
    if size > cap as u128 {
        return Err(ModelError::EnumerationCapExceeded { size, cap });
    }
    let dims: Vec<usize> = scope.iter().map(|&x| variables[x].domain_size()).collect();
    let mut tuple = vec![0usize; scope.len()];
    loop {
        visit(&tuple);
        let mut k = tuple.len();
        loop {
            if k == 0 {
                return Ok(());
            }
            k -= 1;
            tuple[k] += 1;
            if tuple[k] < dims[k] {
                break;
            }
            tuple[k] = 0;
        }
    }
}

/// Lint for over-declared scopes: returns the scope variables the predicate
/// provably ignores. Only extensional events can be checked; intensional
/// events yield `None`.
pub fn redundant_scope_variables(
    event: &EventSpec,
    variables: &[VariableSpec],
    cap: u64,
) -> Result<Option<Vec<usize>>, ModelError> {
    if matches!(event.predicate, Predicate::Intensional(_)) {
        return Ok(None);
    }
    let mut relevant = vec![false; event.scope.len()];
    let mut probe = Vec::with_capacity(event.scope.len());
    for_each_scope_tuple(&event.scope, variables, cap, |t| {
        let base = event.holds_on_tuple(t);
        for (k, &var) in event.scope.iter().enumerate() {
            if relevant[k] {
                continue;
            }
            probe.clear();
            probe.extend_from_slice(t);
            for v in 0..variables[var].domain_size() {
                probe[k] = v;
                if event.holds_on_tuple(&probe) != base {
                    relevant[k] = true;
                    break;
                }
            }
        }
    })?;
    Ok(Some(
        event
            .scope
            .iter()
            .zip(relevant)
            .filter(|(_, r)| !r)
            .map(|(&x, _)| x)
            .collect(),
    ))
}

/// Closed neighborhoods of the dependency graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    adjacency: Vec<Vec<usize>>,
}

impl DependencyGraph {
    /// Connects two events iff their scopes share a variable.
    pub fn build(events: &[EventSpec]) -> Self {
        let n = events
            .iter()
            .flat_map(|e| e.scope.iter().copied())
            .max()
            .map_or(0, |v| v + 1);
        let mut readers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, e) in events.iter().enumerate() {
            for &x in &e.scope {
                readers[x].push(i);
            }
        }
        let adjacency = events
            .iter()
            .map(|e| {
                let set: BTreeSet<usize> = e
                    .scope
                    .iter()
                    .flat_map(|&x| readers[x].iter().copied())
                    .collect();
                set.into_iter().collect()
            })
            .collect();
        Self { adjacency }
    }

    /// Accepts explicit closed neighborhoods, for analysing a dependency
    /// structure without a concrete instance behind it.
    pub fn from_neighborhoods(mut adjacency: Vec<Vec<usize>>) -> Result<Self, ModelError> {
        let m = adjacency.len();
        for (i, nb) in adjacency.iter_mut().enumerate() {
            nb.sort_unstable();
            nb.dedup();
            if let Some(&j) = nb.iter().find(|&&j| j >= m) {
                return Err(ModelError::InvalidGraph(format!(
                    "event {i} lists neighbor {j} but m = {m}"
                )));
            }
            if nb.binary_search(&i).is_err() {
                return Err(ModelError::InvalidGraph(format!(
                    "event {i} is missing from its own neighborhood"
                )));
            }
        }
        let graph = Self { adjacency };
        if !graph.is_symmetric() {
            return Err(ModelError::InvalidGraph("not symmetric".into()));
        }
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    /// `N_i`, sorted ascending, including `i` itself.
    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn neighborhoods(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn is_reflexive(&self) -> bool {
        (0..self.len()).all(|i| self.are_neighbors(i, i))
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency
            .iter()
            .enumerate()
            .all(|(i, nb)| nb.iter().all(|&j| self.are_neighbors(j, i)))
    }
}

/// Variables, events and the derived dependency graph. Immutable once built.
#[derive(Debug, Clone)]
pub struct EventSystem {
    variables: Vec<VariableSpec>,
    events: Vec<EventSpec>,
    dependency: DependencyGraph,
}

impl EventSystem {
    pub fn new(variables: Vec<VariableSpec>, events: Vec<EventSpec>) -> Result<Self, ModelError> {
        for (i, e) in events.iter().enumerate() {
            e.validate(&variables).map_err(|err| err.at_event(i))?;
        }
        let dependency = DependencyGraph::build(&events);
        Ok(Self {
            variables,
            events,
            dependency,
        })
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn events(&self) -> &[EventSpec] {
        &self.events
    }

    pub fn dependency(&self) -> &DependencyGraph {
        &self.dependency
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn event_probability(&self, event: usize, cap: u64) -> Result<Rational, ModelError> {
        event_probability(&self.events[event], &self.variables, cap)
            .map_err(|err| err.at_event(event))
    }

    /// `Pr(E_i)` for every event, in index order.
    pub fn event_probabilities(&self, cap: u64) -> Result<Vec<Rational>, ModelError> {
        (0..self.events.len())
            .map(|i| self.event_probability(i, cap))
            .collect()
    }

    /// Indices of the events occurring under `values`.
    pub fn occurring(&self, values: &[usize]) -> Vec<usize> {
        (0..self.events.len())
            .filter(|&i| evaluate_event(&self.events[i], values))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: InstanceFile =
            serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        file.into_system()
    }

    pub fn to_instance_file(&self) -> Result<InstanceFile, ModelError> {
        let variables = self
            .variables
            .iter()
            .map(|v| VariableEntry {
                domain_size: v.domain_size(),
                weights: (!v.is_uniform())
                    .then(|| v.weights.iter().map(render_ratio).collect()),
            })
            .collect();
        let events = self
            .events
            .iter()
            .enumerate()
            .map(|(i, e)| match &e.predicate {
                Predicate::Extensional(t) => Ok(EventEntry {
                    scope: e.scope.clone(),
                    forbidden: t.iter().cloned().collect(),
                }),
                Predicate::Intensional(_) => Err(ModelError::NotFileRepresentable { event: i }),
            })
            .collect::<Result<_, _>>()?;
        Ok(InstanceFile {
            n: self.variables.len(),
            variables,
            events,
        })
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let file = self.to_instance_file()?;
        Ok(serde_json::to_string_pretty(&file).expect("instance serializes"))
    }
}

/// Renders a rational as `a/b`, including integers (`1/1`).
pub fn render_ratio(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

pub fn parse_ratio(text: &str) -> Option<Rational> {
    let text = text.trim();
    let r = match text.split_once('/') {
        Some((a, b)) => {
            let a: BigInt = a.trim().parse().ok()?;
            let b: BigInt = b.trim().parse().ok()?;
            if b.is_zero() {
                return None;
            }
            Rational::new(a, b)
        }
        None => Rational::from_integer(text.parse().ok()?),
    };
    Some(r)
}

/// On-disk JSON form of an extensional instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub n: usize,
    pub variables: Vec<VariableEntry>,
    pub events: Vec<EventEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableEntry {
    pub domain_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventEntry {
    pub scope: Vec<usize>,
    #[serde(default)]
    pub forbidden: Vec<Vec<usize>>,
}

impl InstanceFile {
    pub fn into_system(self) -> Result<EventSystem, ModelError> {
        if self.n != self.variables.len() {
            return Err(ModelError::VariableCount {
                declared: self.n,
                listed: self.variables.len(),
            });
        }
        let variables = self
            .variables
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.into_spec().map_err(|e| renumber_variable(e, i)))
            .collect::<Result<Vec<_>, _>>()?;
        let events = self
            .events
            .into_iter()
            .enumerate()
            .map(|(i, e)| EventSpec::extensional(e.scope, e.forbidden).map_err(|err| err.at_event(i)))
            .collect::<Result<Vec<_>, _>>()?;
        EventSystem::new(variables, events)
    }
}

impl VariableEntry {
    fn into_spec(self) -> Result<VariableSpec, ModelError> {
        match self.weights {
            None => VariableSpec::uniform(self.domain_size),
            Some(ws) => {
                if ws.len() != self.domain_size {
                    return Err(ModelError::WeightCount {
                        variable: 0,
                        expected: self.domain_size,
                        got: ws.len(),
                    });
                }
                let parsed = ws
                    .into_iter()
                    .map(|w| {
                        parse_ratio(&w).ok_or(ModelError::BadWeight {
                            variable: 0,
                            text: w,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                VariableSpec::weighted(parsed)
            }
        }
    }
}

fn renumber_variable(err: ModelError, index: usize) -> ModelError {
    match err {
        ModelError::EmptyDomain { .. } => ModelError::EmptyDomain { variable: index },
        ModelError::WeightCount { expected, got, .. } => ModelError::WeightCount {
            variable: index,
            expected,
            got,
        },
        ModelError::NegativeWeight { weight, .. } => ModelError::NegativeWeight {
            variable: index,
            weight,
        },
        ModelError::WeightSum { sum, .. } => ModelError::WeightSum {
            variable: index,
            sum,
        },
        ModelError::BadWeight { text, .. } => ModelError::BadWeight {
            variable: index,
            text,
        },
        other => other,
    }
}
