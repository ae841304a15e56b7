//! Concrete instances: DIMACS CNF formulas, hypergraph 2-coloring, and seeded
//! random generators for both.
//!
//! Boolean variables use value `1` for true and `0` for false.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EventSpec, EventSystem, VariableSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DimacsErrorKind {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("literal {literal} is out of range for {num_vars} variables")]
    LiteralOutOfRange { literal: i64, num_vars: usize },
    #[error("header declares {declared} clauses but {found} were found")]
    ClauseCountMismatch { declared: usize, found: usize },
    #[error("clause {clause} contains both {var} and -{var}")]
    TautologicalClause { clause: usize, var: usize },
    #[error("clause {clause} is empty")]
    EmptyClause { clause: usize },
    #[error("invalid token {0:?}")]
    InvalidToken(String),
}

/// A DIMACS parse failure with its 1-based line number.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct DimacsError {
    pub line: usize,
    pub kind: DimacsErrorKind,
}

/// CNF formula with DIMACS literals: `v` is variable `v` true, `-v` false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnfFormula {
    num_vars: usize,
    clauses: Vec<Vec<i64>>,
}

impl CnfFormula {
    pub fn new(num_vars: usize, clauses: Vec<Vec<i64>>) -> Result<Self, DimacsErrorKind> {
        for (c, clause) in clauses.iter().enumerate() {
            check_clause(c + 1, clause, num_vars)?;
        }
        Ok(Self { num_vars, clauses })
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn clauses(&self) -> &[Vec<i64>] {
        &self.clauses
    }

    /// Independent clause evaluator over a 0/1 assignment.
    pub fn is_satisfied_by(&self, values: &[usize]) -> bool {
        self.clauses.iter().all(|clause| {
            clause.iter().any(|&lit| {
                let v = values[lit.unsigned_abs() as usize - 1];
                (lit > 0) == (v == 1)
            })
        })
    }

    /// Canonical DIMACS text: header, then one clause per line.
    pub fn to_dimacs(&self) -> String {
        let mut out = format!("p cnf {} {}\n", self.num_vars, self.clauses.len());
        for clause in &self.clauses {
            for lit in clause {
                out.push_str(&lit.to_string());
                out.push(' ');
            }
            out.push_str("0\n");
        }
        out
    }
}

impl fmt::Display for CnfFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_dimacs())
    }
}

fn check_clause(index: usize, clause: &[i64], num_vars: usize) -> Result<(), DimacsErrorKind> {
    if clause.is_empty() {
        return Err(DimacsErrorKind::EmptyClause { clause: index });
    }
    for &lit in clause {
        if lit == 0 || lit.unsigned_abs() as usize > num_vars {
            return Err(DimacsErrorKind::LiteralOutOfRange {
                literal: lit,
                num_vars,
            });
        }
        if clause.contains(&-lit) {
            return Err(DimacsErrorKind::TautologicalClause {
                clause: index,
                var: lit.unsigned_abs() as usize,
            });
        }
    }
    Ok(())
}

/// Parses DIMACS CNF: `c` comment lines, one `p cnf <vars> <clauses>` header,
/// then `0`-terminated clauses that may span lines. Everything after a line
/// starting with `%` is ignored. A final clause missing its `0` is accepted.
pub fn parse_dimacs(text: &str) -> Result<CnfFormula, DimacsError> {
    let mut header: Option<(usize, usize)> = None;
    let mut clauses: Vec<Vec<i64>> = Vec::new();
    let mut current: Vec<i64> = Vec::new();
    let mut last_line = 0;
    let err = |line: usize, kind| DimacsError { line, kind };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        if line.starts_with('%') {
            break;
        }
        if line.starts_with('p') {
            if header.is_some() {
                return Err(err(line_no, DimacsErrorKind::MalformedHeader("duplicate header".into())));
            }
            header = Some(parse_header(line).map_err(|k| err(line_no, k))?);
            continue;
        }
        let Some((num_vars, _)) = header else {
            return Err(err(
                line_no,
                DimacsErrorKind::MalformedHeader("clause data before the p cnf line".into()),
            ));
        };
        for token in line.split_whitespace() {
            let lit: i64 = token
                .parse()
                .map_err(|_| err(line_no, DimacsErrorKind::InvalidToken(token.into())))?;
            if lit == 0 {
                let clause = std::mem::take(&mut current);
                check_clause(clauses.len() + 1, &clause, num_vars).map_err(|k| err(line_no, k))?;
                clauses.push(clause);
            } else {
                if lit.unsigned_abs() as usize > num_vars {
                    return Err(err(
                        line_no,
                        DimacsErrorKind::LiteralOutOfRange {
                            literal: lit,
                            num_vars,
                        },
                    ));
                }
                current.push(lit);
            }
        }
    }

    let Some((num_vars, declared)) = header else {
        return Err(err(
            last_line.max(1),
            DimacsErrorKind::MalformedHeader("missing p cnf line".into()),
        ));
    };
    if !current.is_empty() {
        check_clause(clauses.len() + 1, &current, num_vars).map_err(|k| err(last_line, k))?;
        clauses.push(current);
    }
    if clauses.len() != declared {
        return Err(err(
            last_line,
            DimacsErrorKind::ClauseCountMismatch {
                declared,
                found: clauses.len(),
            },
        ));
    }
    Ok(CnfFormula { num_vars, clauses })
}

fn parse_header(line: &str) -> Result<(usize, usize), DimacsErrorKind> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["p", "cnf", vars, clauses] => {
            let vars = vars
                .parse()
                .map_err(|_| DimacsErrorKind::MalformedHeader(format!("bad variable count {vars:?}")))?;
            let clauses = clauses
                .parse()
                .map_err(|_| DimacsErrorKind::MalformedHeader(format!("bad clause count {clauses:?}")))?;
            Ok((vars, clauses))
        }
        _ => Err(DimacsErrorKind::MalformedHeader(format!(
            "expected \"p cnf <vars> <clauses>\", got {line:?}"
        ))),
    }
}

/// One uniform binary variable per CNF variable, one "clause violated" event
/// per clause with the all-literals-false tuple as its only forbidden tuple.
pub fn cnf_to_event_system(formula: &CnfFormula) -> EventSystem {
    let variables = vec![VariableSpec::binary(); formula.num_vars];
    let events = formula
        .clauses
        .iter()
        .map(|clause| {
            let falsifying: BTreeSet<(usize, usize)> = clause
                .iter()
                .map(|&lit| (lit.unsigned_abs() as usize - 1, usize::from(lit < 0)))
                .collect();
            let (scope, tuple): (Vec<usize>, Vec<usize>) = falsifying.into_iter().unzip();
            EventSpec::extensional(scope, [tuple]).expect("validated clause")
        })
        .collect();
    EventSystem::new(variables, events).expect("validated formula")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HypergraphError {
    #[error("edge {edge} has fewer than two vertices")]
    EdgeTooSmall { edge: usize },
    #[error("edge {edge} mentions vertex {vertex} but there are {num_vertices} vertices")]
    VertexOutOfRange {
        edge: usize,
        vertex: usize,
        num_vertices: usize,
    },
    #[error("edge {edge} repeats vertex {vertex}")]
    DuplicateVertex { edge: usize, vertex: usize },
    #[error("invalid hypergraph JSON: {0}")]
    Json(String),
}

/// Hypergraph with 0-based vertices; each edge is stored sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypergraph {
    num_vertices: usize,
    edges: Vec<Vec<usize>>,
}

impl Hypergraph {
    pub fn new(num_vertices: usize, edges: Vec<Vec<usize>>) -> Result<Self, HypergraphError> {
        let mut sorted = Vec::with_capacity(edges.len());
        for (e, mut edge) in edges.into_iter().enumerate() {
            if edge.len() < 2 {
                return Err(HypergraphError::EdgeTooSmall { edge: e });
            }
            if let Some(&v) = edge.iter().find(|&&v| v >= num_vertices) {
                return Err(HypergraphError::VertexOutOfRange {
                    edge: e,
                    vertex: v,
                    num_vertices,
                });
            }
            edge.sort_unstable();
            if let Some(w) = edge.windows(2).find(|w| w[0] == w[1]) {
                return Err(HypergraphError::DuplicateVertex {
                    edge: e,
                    vertex: w[0],
                });
            }
            sorted.push(edge);
        }
        Ok(Self {
            num_vertices,
            edges: sorted,
        })
    }

    /// `{"num_vertices": int, "edges": [[int, ...], ...]}`.
    pub fn from_json(text: &str) -> Result<Self, HypergraphError> {
        #[derive(Deserialize)]
        struct Raw {
            num_vertices: usize,
            edges: Vec<Vec<usize>>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| HypergraphError::Json(e.to_string()))?;
        Self::new(raw.num_vertices, raw.edges)
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn is_properly_colored(&self, colors: &[usize]) -> bool {
        self.edges
            .iter()
            .all(|e| e.iter().any(|&v| colors[v] != colors[e[0]]))
    }
}

/// One uniform color bit per vertex, one "edge monochromatic" event per edge.
pub fn hypergraph_2coloring_system(h: &Hypergraph) -> EventSystem {
    let variables = vec![VariableSpec::binary(); h.num_vertices];
    let events = h
        .edges
        .iter()
        .map(|edge| {
            let k = edge.len();
            EventSpec::extensional(edge.clone(), [vec![0; k], vec![1; k]]).expect("validated edge")
        })
        .collect();
    EventSystem::new(variables, events).expect("validated hypergraph")
}

/// Random `k`-CNF: each clause picks `k` distinct variables and independent signs.
pub fn random_k_cnf(num_vars: usize, num_clauses: usize, k: usize, seed: u64) -> CnfFormula {
    assert!(k >= 1 && k <= num_vars, "need 1 <= k <= num_vars");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clauses = (0..num_clauses)
        .map(|_| {
            let mut vars = sample(&mut rng, num_vars, k).into_vec();
            vars.sort_unstable();
            vars.into_iter()
                .map(|v| {
                    let lit = v as i64 + 1;
                    if rng.random_bool(0.5) {
                        lit
                    } else {
                        -lit
                    }
                })
                .collect()
        })
        .collect();
    CnfFormula { num_vars, clauses }
}

/// Random `k`-uniform hypergraph with independently chosen edges.
pub fn random_uniform_hypergraph(
    num_vertices: usize,
    num_edges: usize,
    k: usize,
    seed: u64,
) -> Hypergraph {
    assert!(k >= 2 && k <= num_vertices, "need 2 <= k <= num_vertices");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = (0..num_edges)
        .map(|_| {
            let mut e = sample(&mut rng, num_vertices, k).into_vec();
            e.sort_unstable();
            e
        })
        .collect();
    Hypergraph {
        num_vertices,
        edges,
    }
}
