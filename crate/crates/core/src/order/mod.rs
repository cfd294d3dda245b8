//! Order matrices, instance masks and scene annotations.
//!
//! Entry conventions for an `n×n` order matrix `G`:
//!
//! * occlusion: `G[i][j] = 1` if instance `i` occludes `j`, `0` otherwise.
//!   Both `G[i][j]` and `G[j][i]` may be 1 (bidirectional occlusion).
//! * depth: `G[i][j] = 1` if `i` is in front of `j`, `0` if it is not, `2` if
//!   the two share overlapping depth ranges (then `G[j][i] = 2` as well).
//!
//! Diagonal entries are meaningless and hold `-1`.

pub mod annotation;
pub mod dot;
pub mod mask;

pub use annotation::{DepthPair, DepthRelation, SceneAnnotation};
pub use mask::{downsample_labels, Bitmap, InstanceMask};

use std::fmt;

use crate::error::{dim_err, Error, Result};

/// Depth class indices used by losses and decoders.
pub const NOT_FRONT: i8 = 0;
pub const FRONT: i8 = 1;
pub const OVERLAP: i8 = 2;
pub const DIAGONAL: i8 = -1;

fn square(rows: &[Vec<i8>]) -> Result<(usize, Vec<i8>)> {
    let n = rows.len();
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(dim_err!("order matrix is not square: {} rows, a row of {}", n, r.len()));
    }
    Ok((n, rows.concat()))
}

fn empty_entries(n: usize) -> Vec<i8> {
    let mut e = vec![0; n * n];
    for i in 0..n {
        e[i * n + i] = DIAGONAL;
    }
    e
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OcclusionMatrix {
    n: usize,
    entries: Vec<i8>,
}

impl OcclusionMatrix {
    /// No occlusions: `-1` diagonal, zeros elsewhere.
    pub fn empty(n: usize) -> Self {
        OcclusionMatrix {
            n,
            entries: empty_entries(n),
        }
    }

    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let (n, entries) = square(rows)?;
        Ok(OcclusionMatrix { n, entries })
    }

    pub fn from_flat(n: usize, entries: Vec<i8>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(dim_err!("{} entries for a {n}×{n} matrix", entries.len()));
        }
        Ok(OcclusionMatrix { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: i8) {
        self.entries[i * self.n + j] = v;
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn occludes(&self, i: usize, j: usize) -> bool {
        i != j && self.get(i, j) == 1
    }

    /// `out[a][b] = self[perm[a]][perm[b]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        OcclusionMatrix {
            n: perm.len(),
            entries: permute(&self.entries, self.n, perm),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_occlusion(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMatrix {
    n: usize,
    entries: Vec<i8>,
    /// Symmetric per-pair weights `w = 2 / count`.
    weights: Option<Vec<f64>>,
}

impl DepthMatrix {
    pub fn empty(n: usize) -> Self {
        DepthMatrix {
            n,
            entries: empty_entries(n),
            weights: None,
        }
    }

    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let (n, entries) = square(rows)?;
        Ok(DepthMatrix {
            n,
            entries,
            weights: None,
        })
    }

    pub fn from_flat(n: usize, entries: Vec<i8>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(dim_err!("{} entries for a {n}×{n} matrix", entries.len()));
        }
        Ok(DepthMatrix {
            n,
            entries,
            weights: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: i8) {
        self.entries[i * self.n + j] = v;
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    /// Marks `i` in front of `j`.
    pub fn set_front(&mut self, i: usize, j: usize) {
        self.set(i, j, FRONT);
        self.set(j, i, NOT_FRONT);
    }

    pub fn set_overlap(&mut self, i: usize, j: usize) {
        self.set(i, j, OVERLAP);
        self.set(j, i, OVERLAP);
    }

    /// Pair weight; 1.0 when no annotation counts are attached.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i * self.n + j])
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Sets `w = 2 / count` for a pair (both orientations).
    pub fn set_count(&mut self, i: usize, j: usize, count: u32) -> Result<()> {
        if count == 0 {
            return Err(Error::Data(format!("pair ({i},{j}) has an annotation count of 0")));
        }
        let v = 2.0 / count as f64;
        if self.weights.is_none() && v == 1.0 {
            return Ok(());
        }
        let n = self.n;
        let w = self.weights.get_or_insert_with(|| vec![1.0; n * n]);
        w[i * n + j] = v;
        w[j * n + i] = v;
        Ok(())
    }

    pub fn with_weights(mut self, weights: Option<Vec<f64>>) -> Result<Self> {
        if let Some(w) = &weights {
            if w.len() != self.n * self.n {
                return Err(dim_err!("{} weights for a {}×{} matrix", w.len(), self.n, self.n));
            }
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        DepthMatrix {
            n: perm.len(),
            entries: permute(&self.entries, self.n, perm),
            weights: self.weights.as_ref().map(|w| permute(w, self.n, perm)),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_depth(self)
    }
}

fn permute<T: Copy>(entries: &[T], n: usize, perm: &[usize]) -> Vec<T> {
    let m = perm.len();
    let mut out = Vec::with_capacity(m * m);
    for &a in perm {
        for &b in perm {
            out.push(entries[a * n + b]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    Diagonal,
    OcclusionRange,
    DepthRange,
    Antisymmetry,
    OverlapMutual,
    Unrelated,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Diagonal => "diagonal must be -1",
            Rule::OcclusionRange => "occlusion entries must be 0 or 1",
            Rule::DepthRange => "depth entries must be 0, 1 or 2",
            Rule::Antisymmetry => "antisymmetry: front on one side requires 0 on the other",
            Rule::OverlapMutual => "overlap must be mutual",
            Rule::Unrelated => "pair has no depth relation in either direction",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub i: usize,
    pub j: usize,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}): {}", self.i, self.j, self.rule)
    }
}

pub fn validate_occlusion(m: &OcclusionMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..m.n {
        for j in 0..m.n {
            let v = m.get(i, j);
            let rule = if i == j {
                (v != DIAGONAL).then_some(Rule::Diagonal)
            } else {
                (v != 0 && v != 1).then_some(Rule::OcclusionRange)
            };
            if let Some(rule) = rule {
                out.push(Violation { i, j, rule });
            }
        }
    }
    out
}

/// Depth matrices must be complete: every off-diagonal pair is exactly one
/// of front/behind (`1`/`0`) or overlap (`2`/`2`). A `0`/`0` pair is reported
/// as [`Rule::Unrelated`].
pub fn validate_depth(m: &DepthMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..m.n {
        for j in 0..m.n {
            let v = m.get(i, j);
            if i == j {
                if v != DIAGONAL {
                    out.push(Violation { i, j, rule: Rule::Diagonal });
                }
                continue;
            }
            if !(0..=2).contains(&v) {
                out.push(Violation { i, j, rule: Rule::DepthRange });
                continue;
            }
            let t = m.get(j, i);
            if v == FRONT && t != NOT_FRONT {
                out.push(Violation { i, j, rule: Rule::Antisymmetry });
            }
            if (v == OVERLAP) != (t == OVERLAP) && (0..=2).contains(&t) {
                out.push(Violation { i, j, rule: Rule::OverlapMutual });
            }
            if v == NOT_FRONT && t == NOT_FRONT && i < j {
                out.push(Violation { i, j, rule: Rule::Unrelated });
            }
        }
    }
    out
}

/// Fails with [`Error::Validation`] listing the first violations.
pub fn ensure_valid(violations: &[Violation], what: &str) -> Result<()> {
    if violations.is_empty() {
        return Ok(());
    }
    let shown: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
    Err(Error::Validation(format!(
        "{what}: {} violation(s): {}",
        violations.len(),
        shown.join("; ")
    )))
}
