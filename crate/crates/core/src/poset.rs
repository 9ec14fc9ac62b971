//! Safety poset: constraint indices with a strict-priority relation, plus
//! enumeration and sampling of linear extensions.
//!
//! The stored relation is always the irreflexive transitive closure. A pair
//! `(i, j)` means `i ≺ j`: constraint `j` has strictly higher priority than
//! `i`, so in every linear extension `i` is enforced earlier and `j` later.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PosetError {
    #[error("priority relation contains a cycle through {path:?}")]
    CycleDetected { path: Vec<usize> },
    #[error("self-relation on constraint {0}")]
    SelfRelation(usize),
    #[error("constraint index {index} out of range for poset of size {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("poset parse error: {0}")]
    Parse(String),
}

/// Partially ordered set over constraint indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyPoset {
    n: usize,
    /// Irreflexive transitive closure of the strict-priority relation.
    relations: BTreeSet<(usize, usize)>,
}

/// Total order over constraint indices consistent with a poset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearExtension {
    order: Vec<usize>,
}

impl LinearExtension {
    /// Builds an extension, checking that `order` is a permutation of `0..n`
    /// respecting the poset: every `i ≺ j` has `i` positioned before `j`.
    pub fn new(order: Vec<usize>, poset: &SafetyPoset) -> Result<Self, PosetError> {
        let ext = Self::new_unchecked(order);
        ext.check_against(poset)?;
        Ok(ext)
    }

    /// Builds an extension without validating it against any poset. Used by
    /// the order-sensitivity ablation, which deliberately runs orders that
    /// break the scenario poset.
    pub fn new_unchecked(order: Vec<usize>) -> Self {
        Self { order }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn check_against(&self, poset: &SafetyPoset) -> Result<(), PosetError> {
        if self.order.len() != poset.len() {
            return Err(PosetError::Parse(format!(
                "extension length {} does not match poset size {}",
                self.order.len(),
                poset.len()
            )));
        }
        let mut pos = vec![usize::MAX; poset.len()];
        for (p, &j) in self.order.iter().enumerate() {
            if j >= poset.len() || pos[j] != usize::MAX {
                return Err(PosetError::Parse(format!("order is not a permutation: {:?}", self.order)));
            }
            pos[j] = p;
        }
        for &(i, j) in &poset.relations {
            if pos[i] >= pos[j] {
                return Err(PosetError::Parse(format!(
                    "order {:?} places {} after {} despite {} ≺ {}",
                    self.order, i, j, i, j
                )));
            }
        }
        Ok(())
    }
}

impl SafetyPoset {
    /// Builds a poset from an arbitrary pair set, computing the transitive
    /// closure. Fails on self-relations or cycles.
    pub fn new<I>(n: usize, relations: I) -> Result<Self, PosetError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut pairs = BTreeSet::new();
        for (i, j) in relations {
            for &k in &[i, j] {
                if k >= n {
                    return Err(PosetError::IndexOutOfRange { index: k, n });
                }
            }
            if i == j {
                return Err(PosetError::SelfRelation(i));
            }
            pairs.insert((i, j));
        }
        let closed = Self::close(n, &pairs)?;
        Ok(Self { n, relations: closed })
    }

    /// Empty relation on `n` elements (an antichain).
    pub fn antichain(n: usize) -> Self {
        Self { n, relations: BTreeSet::new() }
    }

    fn close(n: usize, pairs: &BTreeSet<(usize, usize)>) -> Result<BTreeSet<(usize, usize)>, PosetError> {
        // Warshall reachability over the n x n adjacency matrix.
        let mut reach = vec![false; n * n];
        for &(i, j) in pairs {
            reach[i * n + j] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if reach[i * n + k] {
                    for j in 0..n {
                        if reach[k * n + j] {
                            reach[i * n + j] = true;
                        }
                    }
                }
            }
        }
        for i in 0..n {
            if reach[i * n + i] {
                return Err(PosetError::CycleDetected { path: Self::find_cycle(n, pairs, i) });
            }
        }
        let mut closed = BTreeSet::new();
        for i in 0..n {
            for j in 0..n {
                if reach[i * n + j] {
                    closed.insert((i, j));
                }
            }
        }
        Ok(closed)
    }

    /// DFS path from `start` back to itself through the raw pair set.
    fn find_cycle(n: usize, pairs: &BTreeSet<(usize, usize)>, start: usize) -> Vec<usize> {
        let mut succ = vec![Vec::new(); n];
        for &(i, j) in pairs {
            succ[i].push(j);
        }
        let mut stack = vec![(start, 0usize)];
        let mut path = vec![start];
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < succ[node].len() {
                let child = succ[node][*next];
                *next += 1;
                if child == start {
                    path.push(start);
                    return path;
                }
                if !path.contains(&child) {
                    path.push(child);
                    stack.push((child, 0));
                }
            } else {
                stack.pop();
                path.pop();
            }
        }
        vec![start, start]
    }

    /// Checks that an arbitrary pair set is a valid strict-priority relation.
    pub fn validate<I>(n: usize, relations: I) -> Result<(), PosetError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        Self::new(n, relations).map(|_| ())
    }

    /// Returns a poset whose relation is the transitive closure of this one.
    /// Idempotent: the stored relation is already closed.
    pub fn transitive_closure(&self) -> Self {
        self.clone()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// The closed relation as ordered pairs `(i, j)` with `i ≺ j`.
    pub fn relations(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.relations.iter().copied()
    }

    /// True iff `i ≺ j` in the closure.
    pub fn precedes(&self, i: usize, j: usize) -> bool {
        self.relations.contains(&(i, j))
    }

    fn check_index(&self, i: usize) -> Result<(), PosetError> {
        if i >= self.n {
            Err(PosetError::IndexOutOfRange { index: i, n: self.n })
        } else {
            Ok(())
        }
    }

    /// True iff neither `i ≺ j` nor `j ≺ i`.
    pub fn incomparable(&self, i: usize, j: usize) -> Result<bool, PosetError> {
        self.check_index(i)?;
        self.check_index(j)?;
        Ok(!self.precedes(i, j) && !self.precedes(j, i))
    }

    /// True iff no `j` has `i ≺ j`.
    pub fn is_maximal(&self, i: usize) -> Result<bool, PosetError> {
        self.check_index(i)?;
        Ok((0..self.n).all(|j| !self.precedes(i, j)))
    }

    pub fn maximal_elements(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.is_maximal(i).unwrap()).collect()
    }

    /// Enumerates linear extensions in lexicographic order on indices,
    /// stopping after `limit` extensions. An `n = 0` poset yields one empty
    /// extension.
    pub fn enumerate_linear_extensions(&self, limit: usize) -> Vec<LinearExtension> {
        assert!(limit >= 1, "limit must be >= 1");
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.n);
        let mut used = vec![false; self.n];
        self.enumerate_rec(&mut prefix, &mut used, limit, &mut out);
        out
    }

    fn enumerate_rec(
        &self,
        prefix: &mut Vec<usize>,
        used: &mut [bool],
        limit: usize,
        out: &mut Vec<LinearExtension>,
    ) {
        if out.len() >= limit {
            return;
        }
        if prefix.len() == self.n {
            out.push(LinearExtension::new_unchecked(prefix.clone()));
            return;
        }
        for cand in 0..self.n {
            if used[cand] || !self.available(cand, used) {
                continue;
            }
            used[cand] = true;
            prefix.push(cand);
            self.enumerate_rec(prefix, used, limit, out);
            prefix.pop();
            used[cand] = false;
            if out.len() >= limit {
                return;
            }
        }
    }

    /// `cand` can be placed next iff all its predecessors are already placed.
    fn available(&self, cand: usize, used: &[bool]) -> bool {
        (0..self.n).all(|p| !self.precedes(p, cand) || used[p])
    }

    /// Total number of linear extensions (no limit). Exponential; intended
    /// for small posets.
    pub fn count_linear_extensions(&self) -> usize {
        self.enumerate_linear_extensions(usize::MAX).len()
    }

    /// Samples an extension by repeatedly drawing uniformly among the
    /// currently available minimal elements. Deterministic given the RNG
    /// state. This is greedy-uniform over topological choices, not exactly
    /// uniform over extensions.
    pub fn sample_linear_extension<R: Rng>(&self, rng: &mut R) -> LinearExtension {
        let mut used = vec![false; self.n];
        let mut order = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let avail: Vec<usize> = (0..self.n)
                .filter(|&c| !used[c] && self.available(c, &used))
                .collect();
            let pick = avail[rng.gen_range(0..avail.len())];
            used[pick] = true;
            order.push(pick);
        }
        LinearExtension::new_unchecked(order)
    }

    /// Serializes to the text format: header `n=<count>`, then one relation
    /// per line `i < j` (cover relations only).
    pub fn to_text(&self) -> String {
        let mut s = format!("n={}\n", self.n);
        for (i, j) in self.cover_relations() {
            s.push_str(&format!("{} < {}\n", i, j));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PosetError> {
        let mut n = None;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("n=") {
                n = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|e| PosetError::Parse(format!("line {}: {}", lineno + 1, e)))?,
                );
            } else if let Some((lhs, rhs)) = line.split_once('<') {
                let i = lhs
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| PosetError::Parse(format!("line {}: {}", lineno + 1, e)))?;
                let j = rhs
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| PosetError::Parse(format!("line {}: {}", lineno + 1, e)))?;
                pairs.push((i, j));
            } else {
                return Err(PosetError::Parse(format!("line {}: expected `i < j`", lineno + 1)));
            }
        }
        let n = n.ok_or_else(|| PosetError::Parse("missing `n=<count>` header".into()))?;
        Self::new(n, pairs)
    }

    /// Cover relations (transitive reduction): `i ≺ j` with no `k` strictly
    /// between them.
    pub fn cover_relations(&self) -> Vec<(usize, usize)> {
        self.relations
            .iter()
            .copied()
            .filter(|&(i, j)| {
                !(0..self.n).any(|k| self.precedes(i, k) && self.precedes(k, j))
            })
            .collect()
    }

    /// Hasse diagram in DOT format; edges point from lower to higher
    /// priority. Optional labels override the numeric node names.
    pub fn to_dot(&self, labels: Option<&[String]>) -> String {
        let name = |i: usize| -> String {
            match labels {
                Some(ls) if i < ls.len() => ls[i].clone(),
                _ => format!("c{}", i),
            }
        };
        let mut s = String::from("digraph hasse {\n  rankdir=BT;\n");
        for i in 0..self.n {
            s.push_str(&format!("  {} [label=\"{}\"];\n", i, name(i)));
        }
        for (i, j) in self.cover_relations() {
            s.push_str(&format!("  {} -> {};\n", i, j));
        }
        s.push_str("}\n");
        s
    }
}
