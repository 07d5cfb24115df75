//! Intrinsic Gaussian Markov random field numerics over a binary graph.
//!
//! The random effects have precision `(D(B) - B) / sigma2_eps` restricted to
//! the subspace where every connected component sums to zero. Determinants
//! and solves go through the component-anchored matrix
//! `M = L + sum_C (1/|C|) 1_C 1_C^T`, which is positive definite and block
//! diagonal by component, with `det M = pdet(L)`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Below this `1 - R_ij` an edge removal is checked for being a bridge.
const BRIDGE_TOL: f64 = 1e-7;
/// Sherman-Morrison is skipped in favor of a block rebuild below this pivot.
const PIVOT_TOL: f64 = 1e-6;

/// Checks that a matrix is square, symmetric, 0/1 with a zero diagonal.
pub fn validate_binary(b: &DMatrix<u8>) -> Result<()> {
    let n = b.nrows();
    if b.ncols() != n {
        return Err(Error::InvalidAdjacency(format!("{}x{} is not square", n, b.ncols())));
    }
    for i in 0..n {
        if b[(i, i)] != 0 {
            return Err(Error::InvalidAdjacency(format!("self-neighbor at unit {i}")));
        }
        for j in 0..n {
            if b[(i, j)] > 1 {
                return Err(Error::InvalidAdjacency(format!("entry ({i},{j}) is not binary")));
            }
            if b[(i, j)] != b[(j, i)] {
                return Err(Error::InvalidAdjacency(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// A binary neighborhood graph with cached Laplacian quantities.
#[derive(Debug, Clone)]
pub struct AdjacencyState {
    n: usize,
    edges: Vec<bool>,
    degrees: Vec<usize>,
    edge_count: usize,
    /// Internal component label of each unit.
    labels: Vec<usize>,
    /// Units of each label, sorted; empty for unused labels.
    members: Vec<Vec<usize>>,
    free_labels: Vec<usize>,
    n_components: usize,
    pseudo_logdet: f64,
    /// `M^{-1}`, block diagonal by component.
    anchored_inv: SymPacked,
}

/// How a single toggle of `B_ij` changes the graph.
#[derive(Debug, Clone, PartialEq)]
pub enum FlipKind {
    /// New edge inside one component.
    AddWithin,
    /// Non-bridge edge removed.
    RemoveWithin,
    /// New edge joining two components.
    Merge,
    /// Bridge removed; `side` holds the units still reachable from `i`.
    Split { side: Vec<usize> },
}

/// Outcome of [`AdjacencyState::flip_effect`], consumed by
/// [`AdjacencyState::apply_flip`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlipEffect {
    pub i: usize,
    pub j: usize,
    pub kind: FlipKind,
    /// Change in the log pseudo-determinant of the Laplacian.
    pub delta_logdet: f64,
    /// `u^T M^{-1} u` for `u = e_i - e_j` when both ends share a component.
    pub resistance: f64,
}

impl FlipEffect {
    pub fn connectivity_changed(&self) -> bool {
        matches!(self.kind, FlipKind::Merge | FlipKind::Split { .. })
    }

    /// Change in the number of connected components.
    pub fn delta_components(&self) -> i64 {
        match self.kind {
            FlipKind::Merge => -1,
            FlipKind::Split { .. } => 1,
            _ => 0,
        }
    }

    pub fn adds_edge(&self) -> bool {
        matches!(self.kind, FlipKind::AddWithin | FlipKind::Merge)
    }
}

impl AdjacencyState {
    pub fn from_matrix(b: &DMatrix<u8>) -> Result<Self> {
        validate_binary(b)?;
        let n = b.nrows();
        let edges: Vec<bool> = (0..n * n).map(|k| b[(k / n, k % n)] == 1).collect();
        Self::from_edge_flags(n, edges)
    }

    /// Graph on `n` units from an undirected edge list.
    pub fn from_edge_list(n: usize, list: &[(usize, usize)]) -> Result<Self> {
        let mut b = DMatrix::<u8>::zeros(n, n);
        for &(i, j) in list {
            if i >= n || j >= n || i == j {
                return Err(Error::InvalidAdjacency(format!("bad edge ({i},{j})")));
            }
            b[(i, j)] = 1;
            b[(j, i)] = 1;
        }
        Self::from_matrix(&b)
    }

    pub fn empty(n: usize) -> Self {
        Self::from_edge_flags(n, vec![false; n * n]).expect("empty graph is valid")
    }

    fn from_edge_flags(n: usize, edges: Vec<bool>) -> Result<Self> {
        let degrees: Vec<usize> = (0..n)
            .map(|i| edges[i * n..(i + 1) * n].iter().filter(|e| **e).count())
            .collect();
        let edge_count = degrees.iter().sum::<usize>() / 2;
        let mut state = Self {
            n,
            edges,
            degrees,
            edge_count,
            labels: vec![usize::MAX; n],
            members: vec![Vec::new(); n],
            free_labels: Vec::new(),
            n_components: 0,
            pseudo_logdet: 0.0,
            anchored_inv: SymPacked::zeros(n),
        };
        state.refresh()?;
        Ok(state)
    }

    /// Recomputes components and every cached factorization from the edges.
    pub fn refresh(&mut self) -> Result<()> {
        let n = self.n;
        self.labels.iter_mut().for_each(|l| *l = usize::MAX);
        self.members.iter_mut().for_each(Vec::clear);
        let mut next = 0;
        for start in 0..n {
            if self.labels[start] != usize::MAX {
                continue;
            }
            let mut comp = self.reachable_from(start, None);
            comp.sort_unstable();
            for &u in &comp {
                self.labels[u] = next;
            }
            self.members[next] = comp;
            next += 1;
        }
        self.n_components = next;
        self.free_labels = (next..n).rev().collect();
        self.anchored_inv.fill(0.0);
        self.pseudo_logdet = 0.0;
        for label in 0..next {
            self.pseudo_logdet += self.rebuild_block(label)?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.n + j]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// `log` of the product of the nonzero Laplacian eigenvalues.
    pub fn pseudo_logdet(&self) -> f64 {
        self.pseudo_logdet
    }

    pub fn anchored_inverse(&self) -> DMatrix<f64> {
        self.anchored_inv.to_dense()
    }

    pub fn same_component(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }

    /// Members of the component containing `i`, sorted.
    pub fn component_of(&self, i: usize) -> &[usize] {
        &self.members[self.labels[i]]
    }

    /// Components ordered by their smallest unit.
    pub fn components(&self) -> Vec<&[usize]> {
        let mut comps: Vec<&[usize]> = self
            .members
            .iter()
            .filter(|m| !m.is_empty())
            .map(Vec::as_slice)
            .collect();
        comps.sort_unstable_by_key(|m| m[0]);
        comps
    }

    /// Component labels `0..c`, numbered by first appearance.
    pub fn component_labels(&self) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for (k, comp) in self.components().iter().enumerate() {
            for &u in comp.iter() {
                out[u] = k;
            }
        }
        out
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.degrees[i] as f64
            } else if self.has_edge(i, j) {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn to_matrix(&self) -> DMatrix<u8> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| self.has_edge(i, j) as u8)
    }

    /// Upper-triangle indicators packed row-major into 64-bit words.
    pub fn edge_bits(&self) -> Vec<u64> {
        let pairs = self.n * self.n.saturating_sub(1) / 2;
        let mut bits = vec![0u64; pairs.div_ceil(64)];
        let mut k = 0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.has_edge(i, j) {
                    bits[k / 64] |= 1 << (k % 64);
                }
                k += 1;
            }
        }
        bits
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| {
            ((i + 1)..self.n)
                .filter(move |&j| self.has_edge(i, j))
                .map(move |j| (i, j))
        })
    }

    /// `x^T (D - B) x = sum over edges (x_i - x_j)^2`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.edges().map(|(i, j)| (x[i] - x[j]).powi(2)).sum()
    }

    /// Per-component sums of `x`, in [`Self::components`] order.
    pub fn component_sums(&self, x: &[f64]) -> Vec<f64> {
        self.components()
            .iter()
            .map(|c| c.iter().map(|&u| x[u]).sum())
            .collect()
    }

    fn reachable_from(&self, start: usize, skip: Option<(usize, usize)>) -> Vec<usize> {
        let n = self.n;
        let mut seen = vec![false; n];
        let mut out = vec![start];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if seen[v] || !self.edges[u * n + v] {
                    continue;
                }
                if let Some((a, b)) = skip {
                    if (u == a && v == b) || (u == b && v == a) {
                        continue;
                    }
                }
                seen[v] = true;
                out.push(v);
                queue.push_back(v);
            }
        }
        out
    }

    fn anchored_block(&self, comp: &[usize]) -> DMatrix<f64> {
        let s = comp.len();
        let anchor = 1.0 / s as f64;
        DMatrix::from_fn(s, s, |a, b| {
            let (u, v) = (comp[a], comp[b]);
            let lap = if a == b {
                self.degrees[u] as f64
            } else if self.has_edge(u, v) {
                -1.0
            } else {
                0.0
            };
            lap + anchor
        })
    }

    /// Refactors one component block and returns its log determinant.
    fn rebuild_block(&mut self, label: usize) -> Result<f64> {
        let comp = self.members[label].clone();
        if comp.len() == 1 {
            self.anchored_inv.set(comp[0], comp[0], 1.0);
            return Ok(0.0);
        }
        let block = self.anchored_block(&comp);
        let chol = block.cholesky().ok_or_else(|| {
            Error::Numerical("anchored Laplacian block is not positive definite".into())
        })?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv = chol.inverse();
        for (a, &u) in comp.iter().enumerate() {
            for (b, &v) in comp.iter().enumerate().skip(a) {
                self.anchored_inv.set(u, v, inv[(b, a)]);
            }
        }
        Ok(logdet)
    }

    fn block_logdet(&self, comp: &[usize]) -> f64 {
        if comp.len() == 1 {
            return 0.0;
        }
        self.anchored_block(comp)
            .cholesky()
            .map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Writes the block of `comp` from its resistance distances:
    /// `M^{-1} = L^+ + J / s` with `L^+ = -1/2 (I - J/s) R (I - J/s)`.
    fn write_block_from_resistance(&mut self, comp: &[usize], r: &DMatrix<f64>) {
        let s = comp.len();
        let row_means: Vec<f64> = (0..s).map(|a| r.column(a).sum() / s as f64).collect();
        let grand = row_means.iter().sum::<f64>() / s as f64;
        let anchor = 1.0 / s as f64;
        for (a, &u) in comp.iter().enumerate() {
            for (b, &v) in comp.iter().enumerate().skip(a) {
                let x = -0.5 * (r[(a, b)] - row_means[a] - row_means[b] + grand) + anchor;
                self.anchored_inv.set(u, v, x);
            }
        }
    }

    /// Resistance distances within `comp` from the current inverse.
    fn block_resistance(&self, comp: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(comp.len(), comp.len(), |a, b| self.anchored_inv.quad_diff(comp[a], comp[b]))
    }

    fn resistance(&self, i: usize, j: usize) -> f64 {
        self.anchored_inv.quad_diff(i, j)
    }

    /// Effect of toggling `B_ij` on components and the pseudo-determinant.
    ///
    /// Within a component the matrix determinant lemma gives
    /// `log(1 +- u^T M^{-1} u)`. Merges and splits follow from
    /// `pdet(L_C) = |C| * tau(C)` (tau = spanning-tree count) and the fact
    /// that a bridge multiplies spanning-tree counts.
    pub fn flip_effect(&self, i: usize, j: usize) -> FlipEffect {
        assert!(i != j, "flip on a self-pair");
        let adding = !self.has_edge(i, j);
        if adding {
            if self.same_component(i, j) {
                let r = self.resistance(i, j);
                FlipEffect {
                    i,
                    j,
                    kind: FlipKind::AddWithin,
                    delta_logdet: r.ln_1p(),
                    resistance: r,
                }
            } else {
                let a = self.component_of(i).len() as f64;
                let b = self.component_of(j).len() as f64;
                FlipEffect {
                    i,
                    j,
                    kind: FlipKind::Merge,
                    delta_logdet: (a + b).ln() - a.ln() - b.ln(),
                    resistance: f64::NAN,
                }
            }
        } else {
            let r = self.resistance(i, j);
            if 1.0 - r > BRIDGE_TOL {
                return FlipEffect {
                    i,
                    j,
                    kind: FlipKind::RemoveWithin,
                    delta_logdet: (-r).ln_1p(),
                    resistance: r,
                };
            }
            let side = self.reachable_from(i, Some((i, j)));
            if side.contains(&j) {
                // Nearly a bridge but not quite: evaluate the determinant directly.
                let comp = self.component_of(i);
                let before = self.block_logdet(comp);
                let mut trial = self.clone();
                trial.set_edge(i, j, false);
                let after = trial.block_logdet(comp);
                FlipEffect {
                    i,
                    j,
                    kind: FlipKind::RemoveWithin,
                    delta_logdet: after - before,
                    resistance: r,
                }
            } else {
                let total = self.component_of(i).len() as f64;
                let a = side.len() as f64;
                let b = total - a;
                let mut side = side;
                side.sort_unstable();
                FlipEffect {
                    i,
                    j,
                    kind: FlipKind::Split { side },
                    delta_logdet: a.ln() + b.ln() - total.ln(),
                    resistance: r,
                }
            }
        }
    }

    /// `(delta pseudo-log-det, connectivity changed)` for toggling `B_ij`.
    pub fn flip_logdet_ratio(&self, i: usize, j: usize) -> (f64, bool) {
        let e = self.flip_effect(i, j);
        (e.delta_logdet, e.connectivity_changed())
    }

    fn set_edge(&mut self, i: usize, j: usize, on: bool) {
        let n = self.n;
        if self.edges[i * n + j] == on {
            return;
        }
        self.edges[i * n + j] = on;
        self.edges[j * n + i] = on;
        if on {
            self.degrees[i] += 1;
            self.degrees[j] += 1;
            self.edge_count += 1;
        } else {
            self.degrees[i] -= 1;
            self.degrees[j] -= 1;
            self.edge_count -= 1;
        }
    }

    /// Applies a flip computed by [`Self::flip_effect`] on this same state,
    /// updating every cache.
    pub fn apply_flip(&mut self, effect: &FlipEffect) -> Result<()> {
        let (i, j) = (effect.i, effect.j);
        self.set_edge(i, j, effect.adds_edge());
        match &effect.kind {
            FlipKind::AddWithin | FlipKind::RemoveWithin => {
                let label = self.labels[i];
                let sign = if effect.adds_edge() { 1.0 } else { -1.0 };
                let pivot = 1.0 + sign * effect.resistance;
                if pivot > PIVOT_TOL {
                    let w = self.anchored_inv.column_diff(i, j);
                    self.anchored_inv.rank_one_update(&w, -sign / pivot);
                } else {
                    self.rebuild_block(label)?;
                }
                self.pseudo_logdet += effect.delta_logdet;
            }
            FlipKind::Merge => {
                // Across the new bridge R(u, v) = R(u, i) + 1 + R(j, v).
                let ca = self.component_of(i).to_vec();
                let cb = self.component_of(j).to_vec();
                let joined: Vec<usize> = ca.iter().chain(&cb).copied().collect();
                let mut r = DMatrix::zeros(joined.len(), joined.len());
                r.view_mut((0, 0), (ca.len(), ca.len())).copy_from(&self.block_resistance(&ca));
                r.view_mut((ca.len(), ca.len()), (cb.len(), cb.len()))
                    .copy_from(&self.block_resistance(&cb));
                let m = &self.anchored_inv;
                let to_i: Vec<f64> = ca.iter().map(|&u| m.quad_diff(u, i)).collect();
                let to_j: Vec<f64> = cb.iter().map(|&v| m.quad_diff(v, j)).collect();
                for (a, ri) in to_i.iter().enumerate() {
                    for (b, rj) in to_j.iter().enumerate() {
                        let x = ri + 1.0 + rj;
                        r[(a, ca.len() + b)] = x;
                        r[(ca.len() + b, a)] = x;
                    }
                }
                self.write_block_from_resistance(&joined, &r);

                let (mut keep, mut gone) = (self.labels[i], self.labels[j]);
                if self.members[keep].len() < self.members[gone].len() {
                    std::mem::swap(&mut keep, &mut gone);
                }
                let moved = std::mem::take(&mut self.members[gone]);
                for &u in &moved {
                    self.labels[u] = keep;
                }
                self.members[keep].extend(moved);
                self.members[keep].sort_unstable();
                self.free_labels.push(gone);
                self.pseudo_logdet += effect.delta_logdet;
                self.n_components -= 1;
            }
            FlipKind::Split { side } => {
                let old_label = self.labels[i];
                let new_label = self
                    .free_labels
                    .pop()
                    .ok_or_else(|| Error::Numerical("no free component label".into()))?;
                for &u in side {
                    self.labels[u] = new_label;
                }
                let rest: Vec<usize> = self.members[old_label]
                    .iter()
                    .copied()
                    .filter(|u| self.labels[*u] == old_label)
                    .collect();
                // Resistances within each side do not route through a bridge.
                let r_side = self.block_resistance(side);
                let r_rest = self.block_resistance(&rest);
                for &u in side {
                    for &v in &rest {
                        self.anchored_inv.set(u, v, 0.0);
                    }
                }
                self.write_block_from_resistance(side, &r_side);
                self.write_block_from_resistance(&rest, &r_rest);
                self.members[new_label] = side.clone();
                self.members[old_label] = rest;
                self.pseudo_logdet += effect.delta_logdet;
                self.n_components += 1;
            }
        }
        Ok(())
    }

    /// A new state with `B_ij` toggled.
    pub fn flipped(&self, i: usize, j: usize) -> Result<Self> {
        let mut next = self.clone();
        let effect = self.flip_effect(i, j);
        next.apply_flip(&effect)?;
        Ok(next)
    }
}

/// Symmetric matrix stored as its packed lower triangle, column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPacked {
    n: usize,
    data: Vec<f64>,
}

impl SymPacked {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * (n + 1) / 2],
        }
    }

    /// Packs the lower triangle of `m`.
    pub fn from_lower(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut data = Vec::with_capacity(n * (n + 1) / 2);
        for c in 0..n {
            data.extend(m.column(c).iter().skip(c));
        }
        Self { n, data }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |u, v| self.get(u, v))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn offset(&self, col: usize) -> usize {
        col * (2 * self.n - col + 1) / 2
    }

    #[inline]
    fn index(&self, u: usize, v: usize) -> usize {
        let (r, c) = if u >= v { (u, v) } else { (v, u) };
        self.offset(c) + r - c
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[self.index(u, v)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: f64) {
        let k = self.index(u, v);
        self.data[k] = x;
    }

    pub fn fill(&mut self, x: f64) {
        self.data.fill(x);
    }

    /// `(e_i - e_j)^T M (e_i - e_j)`.
    #[inline]
    pub fn quad_diff(&self, i: usize, j: usize) -> f64 {
        self.get(i, i) + self.get(j, j) - 2.0 * self.get(i, j)
    }

    /// `M e_i - M e_j`.
    pub fn column_diff(&self, i: usize, j: usize) -> Vec<f64> {
        let mut out = self.column(i);
        let mut k = 0;
        self.for_each_in_column(j, |x| {
            out[k] -= x;
            k += 1;
        });
        out
    }

    /// Column `c` as a dense vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n);
        self.for_each_in_column(c, |x| out.push(x));
        out
    }

    /// Visits `M[r, c]` for `r = 0..n` in order.
    #[inline]
    fn for_each_in_column(&self, c: usize, mut f: impl FnMut(f64)) {
        // Above the diagonal the entries sit in earlier packed columns.
        let mut k = c;
        for r in 0..c {
            f(self.data[k]);
            k += self.n - r - 1;
        }
        let start = self.offset(c);
        for &x in &self.data[start..start + self.n - c] {
            f(x);
        }
    }

    /// `M += c w w^T`, skipping columns where `w` vanishes.
    pub fn rank_one_update(&mut self, w: &[f64], c: f64) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // Same operations in the same order, on wider vectors; no FMA, so
            // results match the portable path bit for bit.
            unsafe { rank_one_update_avx2(self, w, c) };
            return;
        }
        rank_one_update_portable(self, w, c);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn rank_one_update_avx2(m: &mut SymPacked, w: &[f64], c: f64) {
    rank_one_update_portable(m, w, c);
}

#[inline(always)]
fn rank_one_update_portable(m: &mut SymPacked, w: &[f64], c: f64) {
    let mut rest = m.data.as_mut_slice();
    for (k, wc) in w.iter().enumerate() {
        let (col, tail) = rest.split_at_mut(w.len() - k);
        rest = tail;
        let f = c * wc;
        if f == 0.0 {
            continue;
        }
        for (x, wi) in col.iter_mut().zip(&w[k..]) {
            *x += f * wi;
        }
    }
}

/// Alias for [`AdjacencyState::from_matrix`].
pub fn build_adjacency(b: &DMatrix<u8>) -> Result<AdjacencyState> {
    AdjacencyState::from_matrix(b)
}

/// Log pseudo-determinant of a graph Laplacian, via the anchored matrix.
pub fn pseudo_logdet(laplacian: &DMatrix<f64>) -> Result<f64> {
    let n = laplacian.nrows();
    let b = DMatrix::from_fn(n, n, |i, j| (i != j && laplacian[(i, j)] != 0.0) as u8);
    let state = AdjacencyState::from_matrix(&b)?;
    let mut m = laplacian.clone();
    for comp in state.components() {
        let w = 1.0 / comp.len() as f64;
        for &u in comp {
            for &v in comp {
                m[(u, v)] += w;
            }
        }
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("anchored Laplacian is not positive definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Random effects satisfying the per-component sum-to-zero constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects(DVector<f64>);

impl RandomEffects {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    /// Wraps `values`, failing if a component sum or isolated unit is off by
    /// more than `tol`.
    pub fn new(values: DVector<f64>, graph: &AdjacencyState, tol: f64) -> Result<Self> {
        check_constraint(values.as_slice(), graph, tol)?;
        Ok(Self(values))
    }

    /// Projects arbitrary values onto the constraint.
    pub fn projected(values: &[f64], graph: &AdjacencyState) -> Self {
        Self(DVector::from_vec(project_sum_to_zero(
            values,
            &graph.component_labels(),
        )))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest absolute per-component sum.
    pub fn max_component_sum(&self, graph: &AdjacencyState) -> f64 {
        graph
            .component_sums(self.as_slice())
            .into_iter()
            .fold(0.0, |m, s| m.max(s.abs()))
    }
}

fn check_constraint(values: &[f64], graph: &AdjacencyState, tol: f64) -> Result<()> {
    if values.len() != graph.n() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: graph.n(),
        });
    }
    for comp in graph.components() {
        let sum: f64 = comp.iter().map(|&u| values[u]).sum();
        if sum.abs() > tol {
            return Err(Error::Constraint(format!(
                "component containing unit {} sums to {sum:e}",
                comp[0]
            )));
        }
    }
    Ok(())
}

/// Subtracts each component's mean from its members; singletons become 0.
pub fn project_sum_to_zero(eps: &[f64], labels: &[usize]) -> Vec<f64> {
    let c = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (v, &l) in eps.iter().zip(labels) {
        sums[l] += v;
        counts[l] += 1;
    }
    eps.iter()
        .zip(labels)
        .map(|(v, &l)| {
            if counts[l] == 1 {
                0.0
            } else {
                v - sums[l] / counts[l] as f64
            }
        })
        .collect()
}

/// Intrinsic GMRF log-density on the constraint subspace:
/// `-((N-c)/2) log(2 pi s2) + pdet/2 - eps^T L eps / (2 s2)`.
pub fn icar_logdensity(eps: &RandomEffects, graph: &AdjacencyState, sigma2_eps: f64) -> Result<f64> {
    let scale = eps.values().amax().max(1.0) * graph.n() as f64;
    check_constraint(eps.as_slice(), graph, 1e-9 * scale)?;
    let rank = (graph.n() - graph.n_components()) as f64;
    let q = graph.quadratic_form(eps.as_slice());
    Ok(-0.5 * rank * (2.0 * PI * sigma2_eps).ln() + 0.5 * graph.pseudo_logdet()
        - q / (2.0 * sigma2_eps))
}

fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Full-conditional precision `Q = L / sigma2_eps + I / sigma2_mu`.
pub fn conditional_precision(graph: &AdjacencyState, sigma2_eps: f64, sigma2_mu: f64) -> DMatrix<f64> {
    let mut q = graph.laplacian() / sigma2_eps;
    for i in 0..graph.n() {
        q[(i, i)] += 1.0 / sigma2_mu;
    }
    q
}

/// Draws `eps | mu, X beta, B, sigma2_eps, sigma2_mu` under the constraint.
///
/// Samples the unconstrained Gaussian `N(Q^{-1} (mu - X beta) / sigma2_mu, Q^{-1})`
/// and corrects it by kriging on the per-component sums. `Q` is block
/// diagonal by component, so the correction decouples across components.
pub fn sample_epsilon_conditional<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    xb: &DVector<f64>,
    graph: &AdjacencyState,
    sigma2_eps: f64,
    sigma2_mu: f64,
    rng: &mut R,
) -> Result<RandomEffects> {
    assert!(sigma2_mu.is_finite() && sigma2_mu > 0.0 && sigma2_eps > 0.0);
    let n = graph.n();
    let q = conditional_precision(graph, sigma2_eps, sigma2_mu);
    let chol = q
        .cholesky()
        .ok_or_else(|| Error::Numerical("conditional precision is not positive definite".into()))?;
    let b = (mu - xb) / sigma2_mu;
    let mean = chol.solve(&b);
    let z = standard_normal_vector(n, rng);
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let mut x = mean + noise;

    for comp in graph.components() {
        let mut indicator = DVector::zeros(n);
        for &u in comp {
            indicator[u] = 1.0;
        }
        let v = chol.solve(&indicator);
        let w: f64 = comp.iter().map(|&u| v[u]).sum();
        let s: f64 = comp.iter().map(|&u| x[u]).sum();
        assert!(w > 0.0, "singular constrained system");
        for &u in comp {
            x[u] -= v[u] * s / w;
        }
    }
    Ok(RandomEffects::projected(x.as_slice(), graph))
}

/// Draws from the intrinsic GMRF prior `N(0, sigma2_eps L^+)` on the
/// constraint subspace.
///
/// `x ~ N(0, M^{-1})` has covariance `L^+ + P` with `P` the projector onto
/// per-component constants, so removing component means leaves exactly
/// `N(0, L^+)`.
pub fn sample_icar_prior<R: Rng + ?Sized>(
    graph: &AdjacencyState,
    sigma2_eps: f64,
    rng: &mut R,
) -> Result<RandomEffects> {
    let n = graph.n();
    let mut out = DVector::zeros(n);
    for comp in graph.components() {
        if comp.len() == 1 {
            continue;
        }
        let block = graph.anchored_block(comp);
        let chol = block
            .cholesky()
            .ok_or_else(|| Error::Numerical("anchored block is not positive definite".into()))?;
        let z = standard_normal_vector(comp.len(), rng);
        let x = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        for (a, &u) in comp.iter().enumerate() {
            out[u] = x[a] * sigma2_eps.sqrt();
        }
    }
    Ok(RandomEffects::projected(out.as_slice(), graph))
}

/// `log N(r; 0, sigma2_mu I + sigma2_eps L^+)`: the density of
/// `r = mu - X beta` with the random effects integrated out.
///
/// With `Q = L/s_e + I/s_m` and `b = r/s_m`:
/// `log det Cov = c log s_m + N log(s_m s_e) + log det Q - c log s_e - pdet`,
/// `r^T Cov^{-1} r = r^T r / s_m - b^T Q^{-1} b + sum_C (sum_C r)^2 / (|C| s_m)`.
pub fn marginal_loglik(
    r: &DVector<f64>,
    graph: &AdjacencyState,
    sigma2_eps: f64,
    sigma2_mu: f64,
) -> Result<f64> {
    let n = graph.n() as f64;
    let c = graph.n_components() as f64;
    let q = conditional_precision(graph, sigma2_eps, sigma2_mu);
    let chol = q
        .cholesky()
        .ok_or_else(|| Error::Numerical("conditional precision is not positive definite".into()))?;
    let logdet_q = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let b = r / sigma2_mu;
    let m = chol.solve(&b);
    let kernel: f64 = graph
        .components()
        .iter()
        .map(|comp| {
            let s: f64 = comp.iter().map(|&u| r[u]).sum();
            s * s / comp.len() as f64
        })
        .sum();
    let logdet_cov = c * sigma2_mu.ln() + n * (sigma2_mu * sigma2_eps).ln() + logdet_q
        - c * sigma2_eps.ln()
        - graph.pseudo_logdet();
    let quad = r.norm_squared() / sigma2_mu - b.dot(&m) + kernel / sigma2_mu;
    Ok(-0.5 * (n * (2.0 * PI).ln() + logdet_cov + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> AdjacencyState {
        AdjacencyState::from_edge_list(3, &[(0, 1), (1, 2)]).unwrap()
    }

    /// Eigenvalue oracle: sum of log nonzero eigenvalues and the rank.
    fn eigen_pdet(l: &DMatrix<f64>) -> (f64, usize) {
        let eig = l.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax().max(1.0);
        let nonzero: Vec<f64> = eig
            .eigenvalues
            .iter()
            .copied()
            .filter(|v| *v > 1e-8 * max)
            .collect();
        (nonzero.iter().map(|v| v.ln()).sum(), nonzero.len())
    }

    fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> AdjacencyState {
        let mut b = DMatrix::<u8>::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    b[(i, j)] = 1;
                    b[(j, i)] = 1;
                }
            }
        }
        AdjacencyState::from_matrix(&b).unwrap()
    }

    #[test]
    fn path_graph_caches() {
        let g = path3();
        assert_eq!(g.degrees(), &[1, 2, 1]);
        assert_eq!(g.n_components(), 1);
        assert_eq!(
            g.laplacian(),
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0])
        );
        assert_abs_diff_eq!(g.pseudo_logdet(), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn empty_and_two_edges() {
        let g = AdjacencyState::empty(4);
        assert_eq!(g.n_components(), 4);
        assert_eq!(g.pseudo_logdet(), 0.0);
        let g = AdjacencyState::from_edge_list(4, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(g.n_components(), 2);
        assert_abs_diff_eq!(g.pseudo_logdet(), 2.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_invalid_matrices() {
        let asym = DMatrix::from_row_slice(2, 2, &[0u8, 1, 0, 0]);
        assert!(AdjacencyState::from_matrix(&asym).is_err());
        let nonbinary = DMatrix::from_row_slice(2, 2, &[0u8, 2, 2, 0]);
        assert!(AdjacencyState::from_matrix(&nonbinary).is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[1u8, 0, 0, 0]);
        assert!(AdjacencyState::from_matrix(&diag).is_err());
    }

    #[test]
    fn pseudo_logdet_examples() {
        assert_abs_diff_eq!(pseudo_logdet(&path3().laplacian()).unwrap(), 3f64.ln(), epsilon = 1e-12);
        let tri = AdjacencyState::from_edge_list(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_abs_diff_eq!(pseudo_logdet(&tri.laplacian()).unwrap(), 9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(tri.pseudo_logdet(), 9f64.ln(), epsilon = 1e-12);
        assert_eq!(pseudo_logdet(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn laplacian_spectrum_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.random_range(2..15);
            let g = random_graph(n, rng.random_range(0.05..0.6), &mut rng);
            let l = g.laplacian();
            for i in 0..n {
                assert_eq!(l.row(i).sum(), 0.0);
            }
            let eig = l.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-10);
            let (logdet, rank) = eigen_pdet(&l);
            assert_eq!(n - rank, g.n_components());
            assert_abs_diff_eq!(g.pseudo_logdet(), logdet, epsilon = 1e-8);
        }
    }

    #[test]
    fn icar_density_path_example() {
        let g = path3();
        let eps = RandomEffects::new(DVector::from_vec(vec![1.0, 0.0, -1.0]), &g, 1e-12).unwrap();
        assert_eq!(g.quadratic_form(eps.as_slice()), 2.0);
        let expected = -(2.0 * PI).ln() + 0.5 * 3f64.ln() - 1.0;
        assert_abs_diff_eq!(icar_logdensity(&eps, &g, 1.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn icar_density_zero_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_graph(8, 0.3, &mut rng);
        let s2 = 0.7;
        let expected = -((8 - g.n_components()) as f64 / 2.0) * (2.0 * PI * s2).ln()
            + 0.5 * g.pseudo_logdet();
        let eps = RandomEffects::zeros(8);
        assert_abs_diff_eq!(icar_logdensity(&eps, &g, s2).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn icar_density_rejects_constraint_violation() {
        let eps = RandomEffects(DVector::from_vec(vec![1.0, 0.0, 0.0]));
        assert!(matches!(icar_logdensity(&eps, &path3(), 1.0), Err(Error::Constraint(_))));
    }

    #[test]
    fn icar_density_invariant_to_componentwise_shift() {
        let g = AdjacencyState::from_edge_list(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let base = RandomEffects::projected(&[0.3, -1.0, 0.4, 2.0, -0.1], &g);
        let shifted: Vec<f64> = base
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i < 3 { 5.0 } else { -2.0 })
            .collect();
        let reprojected = RandomEffects::projected(&shifted, &g);
        assert_abs_diff_eq!(
            icar_logdensity(&base, &g, 1.3).unwrap(),
            icar_logdensity(&reprojected, &g, 1.3).unwrap(),
            epsilon = 1e-12
        );
    }

    /// Dense oracle: Gaussian density restricted to the range of `L`,
    /// evaluated in the eigenbasis.
    fn dense_icar_logdensity(eps: &[f64], l: &DMatrix<f64>, s2: f64) -> f64 {
        let eig = l.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax().max(1.0);
        let mut out = 0.0;
        for (k, lam) in eig.eigenvalues.iter().enumerate() {
            if *lam <= 1e-8 * max {
                continue;
            }
            let coord: f64 = eig.eigenvectors.column(k).iter().zip(eps).map(|(a, b)| a * b).sum();
            let var = s2 / lam;
            out += -0.5 * (2.0 * PI * var).ln() - coord * coord / (2.0 * var);
        }
        out
    }

    #[test]
    fn icar_density_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..40 {
            let n = rng.random_range(2..=8);
            let g = random_graph(n, rng.random_range(0.1..0.8), &mut rng);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let eps = RandomEffects::projected(&raw, &g);
            let s2 = rng.random_range(0.2..3.0);
            assert_abs_diff_eq!(
                icar_logdensity(&eps, &g, s2).unwrap(),
                dense_icar_logdensity(eps.as_slice(), &g.laplacian(), s2),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn packed_rank_one_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 7;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut dense = &a * a.transpose();
        let mut packed = SymPacked::from_lower(&dense);
        assert_eq!(packed.to_dense(), dense);
        for _ in 0..5 {
            let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            w[2] = 0.0;
            let c = rng.random_range(-0.5..0.5);
            let wv = DVector::from_column_slice(&w);
            dense += c * &wv * wv.transpose();
            packed.rank_one_update(&w, c);
        }
        assert!((packed.to_dense() - &dense).amax() < 1e-12);
        let d = packed.column_diff(1, 4);
        for (r, x) in d.iter().enumerate() {
            assert_abs_diff_eq!(*x, dense[(r, 1)] - dense[(r, 4)], epsilon = 1e-12);
        }
    }

    #[test]
    fn flip_examples() {
        let (delta, changed) = path3().flip_logdet_ratio(0, 2);
        assert!(!changed);
        assert_abs_diff_eq!(delta, 9f64.ln() - 3f64.ln(), epsilon = 1e-12);

        let k2 = AdjacencyState::from_edge_list(2, &[(0, 1)]).unwrap();
        let (delta, changed) = k2.flip_logdet_ratio(0, 1);
        assert!(changed);
        assert_abs_diff_eq!(delta, -2f64.ln(), epsilon = 1e-12);
        let after = k2.flipped(0, 1).unwrap();
        assert_abs_diff_eq!(after.pseudo_logdet(), 0.0, epsilon = 1e-12);
        assert_eq!(after.n_components(), 2);
    }

    #[test]
    fn random_flips_match_full_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 30;
        let mut g = random_graph(n, 0.08, &mut rng);
        for _ in 0..1000 {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            let effect = g.flip_effect(i, j);
            g.apply_flip(&effect).unwrap();
            let (reference, rank) = eigen_pdet(&g.laplacian());
            assert_eq!(n - rank, g.n_components());
            assert_abs_diff_eq!(g.pseudo_logdet(), reference, epsilon = 1e-8);
        }
        let mut fresh = g.clone();
        fresh.refresh().unwrap();
        assert!((fresh.anchored_inverse() - g.anchored_inverse()).amax() < 1e-8);
    }

    #[test]
    fn flip_and_reverse_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = random_graph(12, 0.25, &mut rng);
        for _ in 0..100 {
            let i = rng.random_range(0..12);
            let j = (i + rng.random_range(1..12)) % 12;
            let (forward, _) = g.flip_logdet_ratio(i, j);
            let (back, _) = g.flipped(i, j).unwrap().flip_logdet_ratio(i, j);
            assert_abs_diff_eq!(forward + back, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_sum_to_zero(&[1.0, 2.0, 3.0], &[0, 0, 0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(project_sum_to_zero(&[1.0, 2.0, 10.0], &[0, 0, 1]), vec![-0.5, 0.5, 0.0]);
        let once = project_sum_to_zero(&[0.3, 1.7, -2.2, 4.0, 0.1], &[0, 1, 0, 1, 2]);
        let twice = project_sum_to_zero(&once, &[0, 1, 0, 1, 2]);
        for (a, b) in once.iter().zip(&twice) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn conditional_sampler_empty_graph_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let g = AdjacencyState::empty(4);
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let eps = sample_epsilon_conditional(&mu, &DVector::zeros(4), &g, 1.0, 0.5, &mut rng).unwrap();
        assert!(eps.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conditional_sampler_matches_closed_form() {
        // Oracle: parameterize the constrained space of the 3-path by an
        // orthonormal basis U of {1}^perp; eps = U t with
        // t ~ N(Pt^{-1} U^T r / s_m, Pt^{-1}), Pt = U^T Q U.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = path3();
        let (s_e, s_m) = (0.8, 0.5);
        let mu = DVector::from_vec(vec![1.0, -0.4, 0.9]);
        let xb = DVector::from_vec(vec![0.2, 0.1, -0.3]);
        let r = &mu - &xb;
        let u = DMatrix::from_row_slice(
            3,
            2,
            &[
                1.0 / 2f64.sqrt(),
                1.0 / 6f64.sqrt(),
                -1.0 / 2f64.sqrt(),
                1.0 / 6f64.sqrt(),
                0.0,
                -2.0 / 6f64.sqrt(),
            ],
        );
        let q = conditional_precision(&g, s_e, s_m);
        let pt = u.transpose() * &q * &u;
        let cov_t = pt.clone().try_inverse().unwrap();
        let mean = &u * (&cov_t * (u.transpose() * &r / s_m));
        let cov = &u * cov_t * u.transpose();

        let draws = 50_000;
        let mut sum = DVector::zeros(3);
        let mut outer = DMatrix::zeros(3, 3);
        for _ in 0..draws {
            let e = sample_epsilon_conditional(&mu, &xb, &g, s_e, s_m, &mut rng).unwrap();
            assert!(e.max_component_sum(&g) <= 1e-10);
            sum += e.values();
            outer += e.values() * e.values().transpose();
        }
        let m = &sum / draws as f64;
        let c = &outer / draws as f64 - &m * m.transpose();
        for i in 0..3 {
            let sd = cov[(i, i)].sqrt();
            assert!((m[i] - mean[i]).abs() < 0.02 * mean[i].abs().max(sd), "mean {i}");
            for j in 0..3 {
                let scale = (cov[(i, i)] * cov[(j, j)]).sqrt();
                assert!((c[(i, j)] - cov[(i, j)]).abs() < 0.02 * scale, "cov {i}{j}");
            }
        }
    }

    #[test]
    fn prior_sampler_covariance_is_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let g = AdjacencyState::from_edge_list(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let pinv = g.laplacian().pseudo_inverse(1e-10).unwrap();
        let draws = 40_000;
        let mut outer = DMatrix::zeros(5, 5);
        for _ in 0..draws {
            let e = sample_icar_prior(&g, 2.0, &mut rng).unwrap();
            assert!(e.max_component_sum(&g) <= 1e-10);
            outer += e.values() * e.values().transpose();
        }
        let c = outer / draws as f64;
        for i in 0..5 {
            for j in 0..5 {
                assert!((c[(i, j)] - 2.0 * pinv[(i, j)]).abs() < 0.05, "{i}{j}");
            }
        }
    }

    #[test]
    fn marginal_loglik_matches_dense_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..30 {
            let n = rng.random_range(2..9);
            let g = random_graph(n, rng.random_range(0.1..0.7), &mut rng);
            let (s_e, s_m) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
            let r = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let pinv = g.laplacian().pseudo_inverse(1e-10).unwrap();
            let cov = DMatrix::identity(n, n) * s_m + pinv * s_e;
            let chol = cov.clone().cholesky().unwrap();
            let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let quad = r.dot(&chol.solve(&r));
            let reference = -0.5 * (n as f64 * (2.0 * PI).ln() + logdet + quad);
            assert_abs_diff_eq!(marginal_loglik(&r, &g, s_e, s_m).unwrap(), reference, epsilon = 1e-9);
        }
    }

    #[test]
    fn edge_bits_pack_upper_triangle() {
        let g = AdjacencyState::from_edge_list(3, &[(0, 2), (1, 2)]).unwrap();
        // pairs in order (0,1), (0,2), (1,2)
        assert_eq!(g.edge_bits(), vec![0b110]);
    }
}
