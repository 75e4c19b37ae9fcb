//! Matrix form of the lumped network DAE on a circular time grid.
//!
//! For a refined graph with incidence matrix `A` (nodes × segments, `+1`
//! where a segment enters a node, `-1` where it leaves) and the weighted
//! incidence `B(t)` carrying compression ratios, the discretized system is
//!
//! ```text
//! mass (per non-slack node, time n):
//!     |A_d| X Λ · D[|Bᵀ| ρᴺ][n]  -  4 (A_d X Φ[n] - d[n])  = 0
//! momentum (per segment, time n):
//!     Λ K (Φ[n] ⊙ |Φ[n]|)  +  Bᵀρᴺ[n] ⊙ |Bᵀ|ρᴺ[n]       = 0
//! ```
//!
//! where `ρᴺ = (s, ρ)` stacks slack and non-slack densities and `D` is the
//! circular central difference `(v[n+1] - v[n-1]) / (2Δt)`. `D` acts on the
//! edge-end densities `|B(t)ᵀ| ρᴺ(t)`, so the scheme conserves mass over a
//! period even when compression ratios vary in time; with constant ratios it
//! is `|B_dᵀ| Dρ + |B_sᵀ| Ds`.
//!
//! Unknowns and residuals are stored time-major: block `n` holds the `M`
//! non-slack densities followed by the `E` segment fluxes (resp. the `M`
//! mass residuals followed by the `E` momentum residuals).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refinement::RefinedNetwork;
use crate::sparse::CsrMatrix;

/// Default smoothing of `Φ|Φ|` used in solver residuals.
pub const DEFAULT_SMOOTHING: f64 = 1e-8;

/// Uniform periodic grid: `steps` points `t_n = n·T/steps`; index `steps` is index 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps < 4 {
            return Err(Error::InvalidConfig(format!(
                "time grid needs at least 4 steps, got {steps}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "time horizon must be positive, got {horizon}"
            )));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn next(&self, n: usize) -> usize {
        (n + 1) % self.steps
    }

    pub fn prev(&self, n: usize) -> usize {
        (n + self.steps - 1) % self.steps
    }
}

/// `Φ·sqrt(Φ² + ε²)`; the exact `Φ|Φ|` when `eps == 0`.
pub fn signed_square(phi: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        phi * phi.abs()
    } else {
        phi * (phi * phi + eps * eps).sqrt()
    }
}

pub fn signed_square_d1(phi: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        2.0 * phi.abs()
    } else {
        let s = phi * phi + eps * eps;
        (2.0 * phi * phi + eps * eps) / s.sqrt()
    }
}

pub fn signed_square_d2(phi: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        2.0 * phi.signum()
    } else {
        let s = phi * phi + eps * eps;
        phi * (2.0 * phi * phi + 3.0 * eps * eps) / (s * s.sqrt())
    }
}

/// Nodal densities and segment fluxes over one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeState {
    pub grid: TimeGrid,
    /// M: non-slack nodes.
    pub num_free: usize,
    /// Number of segments.
    pub num_edges: usize,
    pub num_slack: usize,
    /// `rho[n·M + j]`
    pub rho: Vec<f64>,
    /// `phi[n·E + k]`
    pub phi: Vec<f64>,
    /// `supply[n·b + i]`, the prescribed slack densities.
    pub supply: Vec<f64>,
}

impl SpaceTimeState {
    pub fn zeros(grid: TimeGrid, num_free: usize, num_edges: usize, num_slack: usize) -> Self {
        SpaceTimeState {
            grid,
            num_free,
            num_edges,
            num_slack,
            rho: vec![0.0; grid.steps * num_free],
            phi: vec![0.0; grid.steps * num_edges],
            supply: vec![0.0; grid.steps * num_slack],
        }
    }

    pub fn rho_at(&self, n: usize) -> &[f64] {
        &self.rho[n * self.num_free..(n + 1) * self.num_free]
    }

    pub fn phi_at(&self, n: usize) -> &[f64] {
        &self.phi[n * self.num_edges..(n + 1) * self.num_edges]
    }

    pub fn supply_at(&self, n: usize) -> &[f64] {
        &self.supply[n * self.num_slack..(n + 1) * self.num_slack]
    }

    /// `ρᴺ` at time `n`: slack densities followed by non-slack densities.
    pub fn nodal(&self, n: usize) -> Vec<f64> {
        let mut v = self.supply_at(n).to_vec();
        v.extend_from_slice(self.rho_at(n));
        v
    }

    /// Packs `(ρ, Φ)` time-major, the simulator's unknown vector.
    pub fn pack(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.rho.len() + self.phi.len());
        for n in 0..self.grid.steps {
            x.extend_from_slice(self.rho_at(n));
            x.extend_from_slice(self.phi_at(n));
        }
        x
    }

    pub fn unpack(&mut self, x: &[f64]) {
        let (m, e) = (self.num_free, self.num_edges);
        for n in 0..self.grid.steps {
            let block = &x[n * (m + e)..(n + 1) * (m + e)];
            self.rho[n * m..(n + 1) * m].copy_from_slice(&block[..m]);
            self.phi[n * e..(n + 1) * e].copy_from_slice(&block[m..]);
        }
    }
}

/// Incidence structure and diagonal parameters of a refined network.
#[derive(Debug, Clone)]
pub struct IncidenceMatrices {
    /// Nodes × segments.
    pub a: CsrMatrix,
    pub a_s: CsrMatrix,
    pub a_d: CsrMatrix,
    /// Λ: segment lengths.
    pub lengths: Vec<f64>,
    /// K: `ℓ0·λ/D` per segment.
    pub friction: Vec<f64>,
    /// X: segment cross-sections.
    pub areas: Vec<f64>,
}

pub fn build_incidence(refined: &RefinedNetwork) -> IncidenceMatrices {
    let (nv, ne, b) = (
        refined.num_nodes(),
        refined.num_segments(),
        refined.num_slack,
    );
    let mut t = Vec::with_capacity(2 * ne);
    for (k, s) in refined.segments.iter().enumerate() {
        t.push((s.to, k, 1.0));
        t.push((s.from, k, -1.0));
    }
    let a = CsrMatrix::from_triplets(nv, ne, &t);
    IncidenceMatrices {
        a_s: a.row_block(0, b),
        a_d: a.row_block(b, nv),
        a,
        lengths: refined.segments.iter().map(|s| s.length).collect(),
        friction: (0..ne)
            .map(|k| {
                refined.segments[k].friction_group
                    * refined.parent_friction[refined.segments[k].parent]
            })
            .collect(),
        areas: refined.segments.iter().map(|s| s.area).collect(),
    }
}

/// Compression ratios at the `from` (tail) and `to` (head) end of every
/// segment at time index `n`; 1 where no compressor acts.
pub fn segment_ratios(
    refined: &RefinedNetwork,
    ratios: &[Vec<f64>],
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let lookup = |c: Option<usize>| -> Result<f64> {
        match c {
            None => Ok(1.0),
            Some(c) => ratios
                .get(c)
                .and_then(|s| s.get(n))
                .copied()
                .ok_or_else(|| Error::MissingRatio {
                    compressor: refined.compressor_ids[c].clone(),
                    index: n,
                }),
        }
    };
    let mut tail = Vec::with_capacity(refined.num_segments());
    let mut head = Vec::with_capacity(refined.num_segments());
    for s in &refined.segments {
        tail.push(lookup(s.tail_compressor)?);
        head.push(lookup(s.head_compressor)?);
    }
    Ok((tail, head))
}

/// `B(t_n)`: `ᾱ` where a segment enters a node, `-α̱` where it leaves.
pub fn build_weighted_incidence(
    refined: &RefinedNetwork,
    ratios: &[Vec<f64>],
    n: usize,
) -> Result<CsrMatrix> {
    let (tail, head) = segment_ratios(refined, ratios, n)?;
    let mut t = Vec::with_capacity(2 * refined.num_segments());
    for (k, s) in refined.segments.iter().enumerate() {
        t.push((s.to, k, head[k]));
        t.push((s.from, k, -tail[k]));
    }
    Ok(CsrMatrix::from_triplets(
        refined.num_nodes(),
        refined.num_segments(),
        &t,
    ))
}

/// `Λ K (Φ ⊙ |Φ|) + Bᵀρᴺ ⊙ |Bᵀ|ρᴺ`, with `Φ|Φ|` smoothed by `eps`.
pub fn momentum_residual(
    nodal: &[f64],
    phi: &[f64],
    weighted: &CsrMatrix,
    lengths: &[f64],
    friction: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let ne = weighted.ncols();
    if nodal.len() != weighted.nrows() {
        return Err(Error::dims(
            "nodal densities",
            weighted.nrows(),
            nodal.len(),
        ));
    }
    for (what, v) in [
        ("fluxes", phi),
        ("lengths", lengths),
        ("friction", friction),
    ] {
        if v.len() != ne {
            return Err(Error::dims(what, ne, v.len()));
        }
    }
    let diff = weighted.matvec_t(nodal);
    let sum = weighted.abs().matvec_t(nodal);
    Ok((0..ne)
        .map(|k| lengths[k] * friction[k] * signed_square(phi[k], eps) + diff[k] * sum[k])
        .collect())
}

/// Precomputed matrices of the DAE over a whole time grid.
#[derive(Debug, Clone)]
pub struct DaeSystem {
    pub grid: TimeGrid,
    pub incidence: IncidenceMatrices,
    /// `B(t_n)` for every `n`.
    pub weighted: Vec<CsrMatrix>,
    weighted_abs: Vec<CsrMatrix>,
    /// `|A_d| X Λ`
    storage: CsrMatrix,
    /// Tail and head ratios `[n][k]`.
    tail_ratio: Vec<Vec<f64>>,
    head_ratio: Vec<Vec<f64>>,
    /// Per-segment endpoints and parent.
    ends: Vec<(usize, usize, usize)>,
    friction_group: Vec<f64>,
    num_slack: usize,
    num_free: usize,
    num_physical_free: usize,
    pub eps: f64,
}

/// Column placement of the unknowns for Jacobian assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub num_free: usize,
    pub num_edges: usize,
    pub steps: usize,
    /// First column of the withdrawal block (physical non-slack nodes,
    /// time-major), when withdrawals are unknowns.
    pub withdrawal_offset: Option<usize>,
    pub num_withdrawal: usize,
    /// First column of the per-pipe friction block, when friction is unknown.
    pub friction_offset: Option<usize>,
}

impl VarLayout {
    pub fn state_only(num_free: usize, num_edges: usize, steps: usize) -> Self {
        VarLayout {
            num_free,
            num_edges,
            steps,
            withdrawal_offset: None,
            num_withdrawal: 0,
            friction_offset: None,
        }
    }

    pub fn rho(&self, n: usize, j: usize) -> usize {
        n * (self.num_free + self.num_edges) + j
    }

    pub fn phi(&self, n: usize, k: usize) -> usize {
        n * (self.num_free + self.num_edges) + self.num_free + k
    }

    pub fn withdrawal(&self, n: usize, j: usize) -> Option<usize> {
        match self.withdrawal_offset {
            Some(off) if j < self.num_withdrawal => Some(off + n * self.num_withdrawal + j),
            _ => None,
        }
    }

    pub fn state_len(&self) -> usize {
        self.steps * (self.num_free + self.num_edges)
    }
}

impl DaeSystem {
    /// `ratios` are the compressor ratio series on `grid`.
    pub fn new(
        refined: &RefinedNetwork,
        grid: TimeGrid,
        ratios: &[Vec<f64>],
        eps: f64,
    ) -> Result<Self> {
        let incidence = build_incidence(refined);
        let mut weighted = Vec::with_capacity(grid.steps);
        let mut tail_ratio = Vec::with_capacity(grid.steps);
        let mut head_ratio = Vec::with_capacity(grid.steps);
        for n in 0..grid.steps {
            weighted.push(build_weighted_incidence(refined, ratios, n)?);
            let (t, h) = segment_ratios(refined, ratios, n)?;
            tail_ratio.push(t);
            head_ratio.push(h);
        }
        let weighted_abs = weighted.iter().map(CsrMatrix::abs).collect();
        let storage_t: Vec<_> = incidence
            .a_d
            .triplets()
            .map(|(j, k, v)| (j, k, v.abs() * incidence.areas[k] * incidence.lengths[k]))
            .collect();
        let storage =
            CsrMatrix::from_triplets(incidence.a_d.nrows(), incidence.a_d.ncols(), &storage_t);
        Ok(DaeSystem {
            grid,
            storage,
            weighted,
            weighted_abs,
            tail_ratio,
            head_ratio,
            ends: refined
                .segments
                .iter()
                .map(|s| (s.from, s.to, s.parent))
                .collect(),
            friction_group: refined.segments.iter().map(|s| s.friction_group).collect(),
            num_slack: refined.num_slack,
            num_free: refined.num_free(),
            num_physical_free: refined.num_physical_free(),
            incidence,
            eps,
        })
    }

    pub fn num_free(&self) -> usize {
        self.num_free
    }

    pub fn num_edges(&self) -> usize {
        self.ends.len()
    }

    pub fn num_slack(&self) -> usize {
        self.num_slack
    }

    pub fn num_physical_free(&self) -> usize {
        self.num_physical_free
    }

    pub fn num_parents(&self) -> usize {
        self.ends.iter().map(|e| e.2 + 1).max().unwrap_or(0)
    }

    pub fn residual_len(&self) -> usize {
        self.grid.steps * (self.num_free + self.num_edges())
    }

    /// Ratios at the tail and head of segment `k` at time `n`.
    pub fn ratios(&self, n: usize, k: usize) -> (f64, f64) {
        (self.tail_ratio[n][k], self.head_ratio[n][k])
    }

    /// `K` per segment for per-pipe friction factors.
    pub fn segment_friction(&self, friction: &[f64]) -> Vec<f64> {
        self.ends
            .iter()
            .zip(&self.friction_group)
            .map(|(&(_, _, p), g)| g * friction[p])
            .collect()
    }

    /// Edge-end density sums `|B(t_n)ᵀ| ρᴺ[n]`.
    pub fn end_sums(&self, n: usize, nodal: &[f64]) -> Vec<f64> {
        self.weighted_abs[n].matvec_t(nodal)
    }

    /// Momentum residual at time `n` (matrix form).
    pub fn momentum_residual(
        &self,
        n: usize,
        nodal: &[f64],
        phi: &[f64],
        friction: &[f64],
    ) -> Result<Vec<f64>> {
        let k = self.segment_friction(friction);
        momentum_residual(
            nodal,
            phi,
            &self.weighted[n],
            &self.incidence.lengths,
            &k,
            self.eps,
        )
    }

    /// Mass residual at time `n` from nodal densities at `n ± 1`, fluxes and
    /// withdrawals at `n`. `withdrawal` has one entry per non-slack node.
    pub fn mass_residual(
        &self,
        n: usize,
        nodal_prev: &[f64],
        nodal_next: &[f64],
        phi: &[f64],
        withdrawal: &[f64],
    ) -> Result<Vec<f64>> {
        if withdrawal.len() != self.num_free {
            return Err(Error::dims("withdrawals", self.num_free, withdrawal.len()));
        }
        if phi.len() != self.num_edges() {
            return Err(Error::dims("fluxes", self.num_edges(), phi.len()));
        }
        let (p, q) = (self.grid.prev(n), self.grid.next(n));
        let after = self.end_sums(q, nodal_next);
        let before = self.end_sums(p, nodal_prev);
        let two_dt = 2.0 * self.grid.dt();
        let rate: Vec<f64> = after
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) / two_dt)
            .collect();
        let storage = self.storage.matvec(&rate);
        let xphi: Vec<f64> = phi
            .iter()
            .zip(&self.incidence.areas)
            .map(|(f, x)| f * x)
            .collect();
        let flow = self.incidence.a_d.matvec(&xphi);
        Ok((0..self.num_free)
            .map(|j| storage[j] - 4.0 * (flow[j] - withdrawal[j]))
            .collect())
    }

    /// Stacked residual over the grid. `withdrawal[n·M + j]` covers every
    /// non-slack node (auxiliary nodes are normally zero).
    pub fn residual(
        &self,
        state: &SpaceTimeState,
        withdrawal: &[f64],
        friction: &[f64],
    ) -> Result<Vec<f64>> {
        let (m, e, nt) = (self.num_free, self.num_edges(), self.grid.steps);
        if state.num_free != m || state.num_edges != e || state.grid.steps != nt {
            return Err(Error::dims(
                "state",
                self.residual_len(),
                state.rho.len() + state.phi.len(),
            ));
        }
        if withdrawal.len() != m * nt {
            return Err(Error::dims(
                "withdrawal trajectory",
                m * nt,
                withdrawal.len(),
            ));
        }
        let nodal: Vec<Vec<f64>> = (0..nt).map(|n| state.nodal(n)).collect();
        let mut out = Vec::with_capacity(self.residual_len());
        for n in 0..nt {
            let (p, q) = (self.grid.prev(n), self.grid.next(n));
            out.extend(self.mass_residual(
                n,
                &nodal[p],
                &nodal[q],
                state.phi_at(n),
                &withdrawal[n * m..(n + 1) * m],
            )?);
            out.extend(self.momentum_residual(n, &nodal[n], state.phi_at(n), friction)?);
        }
        Ok(out)
    }

    /// Jacobian triplets of [`DaeSystem::residual`] with respect to the
    /// unknowns placed by `layout`. Every structural position is emitted,
    /// zeros included, so the pattern does not depend on the values.
    pub fn jacobian_triplets(
        &self,
        state: &SpaceTimeState,
        friction: &[f64],
        layout: &VarLayout,
    ) -> Vec<(usize, usize, f64)> {
        let (m, e, nt, b) = (
            self.num_free,
            self.num_edges(),
            self.grid.steps,
            self.num_slack,
        );
        let two_dt = 2.0 * self.grid.dt();
        let areas = &self.incidence.areas;
        let lengths = &self.incidence.lengths;
        let kseg = self.segment_friction(friction);
        let mut t = Vec::with_capacity(nt * (8 * e + m));
        for n in 0..nt {
            let row0 = n * (m + e);
            let (p, q) = (self.grid.prev(n), self.grid.next(n));
            // Mass rows: storage terms through both segment ends at n ± 1,
            // flux terms at n.
            for (k, &(from, to, _)) in self.ends.iter().enumerate() {
                let xl = areas[k] * lengths[k] / two_dt;
                for &(node, sign) in &[(from, -1.0), (to, 1.0)] {
                    if node < b {
                        continue;
                    }
                    let row = row0 + node - b;
                    for &(end, is_tail) in &[(from, true), (to, false)] {
                        if end < b {
                            continue;
                        }
                        let (tq, hq) = self.ratios(q, k);
                        let (tp, hp) = self.ratios(p, k);
                        let (wq, wp) = if is_tail { (tq, tp) } else { (hq, hp) };
                        t.push((row, layout.rho(q, end - b), xl * wq));
                        t.push((row, layout.rho(p, end - b), -xl * wp));
                    }
                    t.push((row, layout.phi(n, k), -4.0 * sign * areas[k]));
                }
            }
            if layout.withdrawal_offset.is_some() {
                for j in 0..m {
                    if let Some(col) = layout.withdrawal(n, j) {
                        t.push((row0 + j, col, 4.0));
                    }
                }
            }
            // Momentum rows.
            let rho = state.rho_at(n);
            let sup = state.supply_at(n);
            let density = |i: usize| if i < b { sup[i] } else { rho[i - b] };
            let phi = state.phi_at(n);
            for (k, &(from, to, parent)) in self.ends.iter().enumerate() {
                let row = row0 + m + k;
                let (tr, hr) = self.ratios(n, k);
                let lower = tr * density(from);
                let upper = hr * density(to);
                t.push((
                    row,
                    layout.phi(n, k),
                    lengths[k] * kseg[k] * signed_square_d1(phi[k], self.eps),
                ));
                if to >= b {
                    t.push((row, layout.rho(n, to - b), 2.0 * hr * upper));
                }
                if from >= b {
                    t.push((row, layout.rho(n, from - b), -2.0 * tr * lower));
                }
                if let Some(off) = layout.friction_offset {
                    t.push((
                        row,
                        off + parent,
                        lengths[k] * self.friction_group[k] * signed_square(phi[k], self.eps),
                    ));
                }
            }
        }
        t
    }

    /// Sparse Jacobian with respect to the simulator unknowns `(ρ, Φ)`.
    pub fn state_jacobian(&self, state: &SpaceTimeState, friction: &[f64]) -> CsrMatrix {
        let layout = VarLayout::state_only(self.num_free, self.num_edges(), self.grid.steps);
        let t = self.jacobian_triplets(state, friction, &layout);
        CsrMatrix::from_triplets(self.residual_len(), layout.state_len(), &t)
    }

    /// `Φ₋ = (φ̄ - φ̱)/2` per segment at time `n`, recovered from the
    /// storage relation `|Bᵀ|ρ̇ᴺ = -4 Λ⁻¹ Φ₋`.
    pub fn half_flux_difference(&self, state: &SpaceTimeState, n: usize) -> Vec<f64> {
        let (p, q) = (self.grid.prev(n), self.grid.next(n));
        let after = self.end_sums(q, &state.nodal(q));
        let before = self.end_sums(p, &state.nodal(p));
        let two_dt = 2.0 * self.grid.dt();
        (0..self.num_edges())
            .map(|k| -0.25 * self.incidence.lengths[k] * (after[k] - before[k]) / two_dt)
            .collect()
    }

    /// Edge-end fluxes `(φ̱, φ̄)` at time `n`.
    pub fn end_fluxes(&self, state: &SpaceTimeState, n: usize) -> (Vec<f64>, Vec<f64>) {
        let minus = self.half_flux_difference(state, n);
        let phi = state.phi_at(n);
        let lower = phi.iter().zip(&minus).map(|(f, d)| f - d).collect();
        let upper = phi.iter().zip(&minus).map(|(f, d)| f + d).collect();
        (lower, upper)
    }

    /// Mass flow delivered into the network by each slack node at time `n`.
    pub fn slack_supply(&self, state: &SpaceTimeState, n: usize) -> Vec<f64> {
        let minus = self.half_flux_difference(state, n);
        let phi = state.phi_at(n);
        let mut out = vec![0.0; self.num_slack];
        for (k, &(from, to, _)) in self.ends.iter().enumerate() {
            let x = self.incidence.areas[k];
            if from < self.num_slack {
                out[from] += x * (phi[k] - minus[k]);
            }
            if to < self.num_slack {
                out[to] -= x * (phi[k] + minus[k]);
            }
        }
        out
    }

    /// Largest `|ρ̄ - ρ̱| / (ρ̄ + ρ̱)` over segments and times.
    pub fn lumping_diagnostic(&self, state: &SpaceTimeState) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..self.grid.steps {
            let nodal = state.nodal(n);
            let diff = self.weighted[n].matvec_t(&nodal);
            let sum = self.end_sums(n, &nodal);
            for (d, s) in diff.iter().zip(&sum) {
                if *s > 0.0 {
                    worst = worst.max(d.abs() / s);
                }
            }
        }
        worst
    }

    /// Jacobian sparsity pattern in coordinate text form.
    pub fn sparsity_text(&self, state: &SpaceTimeState, friction: &[f64]) -> String {
        self.state_jacobian(state, friction).to_coordinate_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Orientation;
    use crate::nondim::{NdCompressor, NdJunction, NdPipe, NondimNetwork};
    use crate::refinement::refine_graph;

    fn path3(slack_first: bool) -> RefinedNetwork {
        let j = |id: &str, slack| NdJunction {
            id: id.into(),
            slack,
            density_min: 0.1,
            density_max: 10.0,
        };
        let p = |id: &str, from, to| NdPipe {
            id: id.into(),
            from,
            to,
            length: 1.0,
            friction: 0.01,
            friction_group: 100.0,
            area: 0.3,
        };
        let net = NondimNetwork {
            junctions: vec![j("1", slack_first), j("2", false), j("3", false)],
            pipes: vec![p("a", 0, 1), p("b", 1, 2)],
            compressors: vec![],
            num_slack: usize::from(slack_first),
        };
        refine_graph(&net, 10.0).unwrap()
    }

    #[test]
    fn path_incidence() {
        let r = path3(true);
        let inc = build_incidence(&r);
        assert_eq!(
            inc.a.to_dense(),
            vec![vec![-1.0, 0.0], vec![1.0, -1.0], vec![0.0, 1.0]]
        );
        assert_eq!(inc.a_s.to_dense(), vec![vec![-1.0, 0.0]]);
        assert_eq!(inc.a_d.nrows(), 2);
        assert!((inc.friction[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_incidence_with_boost() {
        let net = NondimNetwork {
            junctions: vec![
                NdJunction {
                    id: "1".into(),
                    slack: true,
                    density_min: 0.1,
                    density_max: 10.0,
                },
                NdJunction {
                    id: "2".into(),
                    slack: false,
                    density_min: 0.1,
                    density_max: 10.0,
                },
            ],
            pipes: vec![NdPipe {
                id: "p".into(),
                from: 0,
                to: 1,
                length: 1.0,
                friction: 0.01,
                friction_group: 1.0,
                area: 1.0,
            }],
            compressors: vec![NdCompressor {
                id: "c".into(),
                pipe: 0,
                orientation: Orientation::Plus,
                min_ratio: 1.0,
            }],
            num_slack: 1,
        };
        let r = refine_graph(&net, 10.0).unwrap();
        let b = build_weighted_incidence(&r, &[vec![1.5; 4]], 2).unwrap();
        assert_eq!(b.to_dense(), vec![vec![-1.5], vec![1.0]]);
        // ρ̱ = α̱·ρ₁ through the column.
        let nodal = [2.0, 1.0];
        let sums = b.abs().matvec_t(&nodal);
        assert_eq!(sums[0], 1.5 * 2.0 + 1.0);
        assert!(matches!(
            build_weighted_incidence(&r, &[vec![1.5; 2]], 3),
            Err(Error::MissingRatio { .. })
        ));
        let none = build_weighted_incidence(&path3(true), &[], 0).unwrap();
        assert_eq!(none, build_incidence(&path3(true)).a);
    }

    #[test]
    fn momentum_closed_form_zero() {
        let r = path3(true);
        let inc = build_incidence(&r);
        let c = 0.36;
        let phi = ((1.2f64 * 1.2 - 1.0) / c).sqrt();
        let weighted = CsrMatrix::from_triplets(2, 1, &[(0, 0, -1.0), (1, 0, 1.0)]);
        let res = momentum_residual(&[1.2, 1.0], &[phi], &weighted, &[1.0], &[c], 0.0).unwrap();
        assert!(res[0].abs() < 1e-14);
        let zero = momentum_residual(
            &[1.1, 1.1, 1.1],
            &[0.0, 0.0],
            &inc.a,
            &inc.lengths,
            &inc.friction,
            0.0,
        )
        .unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(momentum_residual(
            &[1.0],
            &[0.0, 0.0],
            &inc.a,
            &inc.lengths,
            &inc.friction,
            0.0
        )
        .is_err());
    }

    #[test]
    fn steady_mass_balance() {
        let r = path3(true);
        let grid = TimeGrid::new(8.0, 8).unwrap();
        let sys = DaeSystem::new(&r, grid, &[], 0.0).unwrap();
        // Single through-flow Φ, everything withdrawn at node 3.
        let phi = [0.2, 0.2];
        let d = [0.0, 0.3 * 0.2];
        let nodal = [1.0, 0.9, 0.8];
        let res = sys.mass_residual(0, &nodal, &nodal, &phi, &d).unwrap();
        assert!(res.iter().all(|v| v.abs() < 1e-15));
        let bad = sys
            .mass_residual(0, &nodal, &nodal, &phi, &[0.0, 0.0])
            .unwrap();
        assert!(bad[1].abs() > 0.0);
    }

    #[test]
    fn residual_length() {
        let r = path3(true);
        let grid = TimeGrid::new(8.0, 8).unwrap();
        let sys = DaeSystem::new(&r, grid, &[], DEFAULT_SMOOTHING).unwrap();
        let mut st = SpaceTimeState::zeros(grid, 2, 2, 1);
        st.supply.iter_mut().for_each(|v| *v = 1.0);
        let res = sys.residual(&st, &vec![0.0; 16], &[0.01, 0.01]).unwrap();
        assert_eq!(res.len(), 32);
    }

    #[test]
    fn smoothing_derivatives() {
        for &eps in &[0.0, 1e-3] {
            for &x in &[-0.7, -0.01, 0.02, 0.5] {
                let h = 1e-6;
                let d1 = (signed_square(x + h, eps) - signed_square(x - h, eps)) / (2.0 * h);
                let d2 = (signed_square_d1(x + h, eps) - signed_square_d1(x - h, eps)) / (2.0 * h);
                assert!((d1 - signed_square_d1(x, eps)).abs() < 1e-8);
                assert!((d2 - signed_square_d2(x, eps)).abs() < 1e-6);
            }
        }
    }

    /// Loop network with a boosted pipe, a reverse compressor and refined
    /// pipes, with time-varying ratios.
    fn looped() -> (RefinedNetwork, Vec<Vec<f64>>) {
        let j = |id: &str, slack| NdJunction {
            id: id.into(),
            slack,
            density_min: 0.1,
            density_max: 10.0,
        };
        let p = |id: &str, from, to, length| NdPipe {
            id: id.into(),
            from,
            to,
            length,
            friction: 0.012,
            friction_group: 80.0,
            area: 0.25,
        };
        let net = NondimNetwork {
            junctions: vec![j("s", true), j("a", false), j("b", false), j("c", false)],
            pipes: vec![
                p("p0", 0, 1, 1.0),
                p("p1", 1, 2, 2.5),
                p("p2", 2, 3, 0.7),
                p("p3", 3, 1, 1.6),
            ],
            compressors: vec![
                NdCompressor {
                    id: "c0".into(),
                    pipe: 1,
                    orientation: Orientation::Plus,
                    min_ratio: 1.0,
                },
                NdCompressor {
                    id: "c1".into(),
                    pipe: 3,
                    orientation: Orientation::Minus,
                    min_ratio: 1.0,
                },
            ],
            num_slack: 1,
        };
        let r = refine_graph(&net, 1.0).unwrap();
        let ratios = vec![
            (0..6).map(|n| 1.2 + 0.05 * (n as f64).sin()).collect(),
            (0..6).map(|n| 1.1 + 0.03 * (n as f64).cos()).collect(),
        ];
        (r, ratios)
    }

    fn random_state(sys: &DaeSystem, seed: u64) -> (SpaceTimeState, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (m, e, b) = (sys.num_free(), sys.num_edges(), sys.num_slack());
        let mut st = SpaceTimeState::zeros(sys.grid, m, e, b);
        st.rho
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.8..1.3));
        st.phi
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
        st.supply
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.9..1.2));
        let d = (0..m * sys.grid.steps)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        (st, d)
    }

    /// Per-node and per-segment loops over the lumped relations, written
    /// without any incidence matrix.
    fn scalar_residual(
        r: &RefinedNetwork,
        ratios: &[Vec<f64>],
        st: &SpaceTimeState,
        d: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let (m, e, b, nt) = (st.num_free, st.num_edges, st.num_slack, st.grid.steps);
        let dt = st.grid.dt();
        let dens = |n: usize, i: usize| {
            if i < b {
                st.supply_at(n)[i]
            } else {
                st.rho_at(n)[i - b]
            }
        };
        let ratio = |c: Option<usize>, n: usize| c.map_or(1.0, |c| ratios[c][n]);
        let ends = |n: usize, k: usize| {
            let s = &r.segments[k];
            (
                ratio(s.tail_compressor, n) * dens(n, s.from),
                ratio(s.head_compressor, n) * dens(n, s.to),
            )
        };
        let mut out = Vec::new();
        for n in 0..nt {
            let (p, q) = ((n + nt - 1) % nt, (n + 1) % nt);
            let phi_minus: Vec<f64> = (0..e)
                .map(|k| {
                    let (lq, uq) = ends(q, k);
                    let (lp, up) = ends(p, k);
                    -r.segments[k].length / 4.0 * ((lq + uq) - (lp + up)) / (2.0 * dt)
                })
                .collect();
            for j in 0..m {
                let node = j + b;
                let mut balance = -d[n * m + j];
                for (k, s) in r.segments.iter().enumerate() {
                    let f = st.phi_at(n)[k];
                    if s.to == node {
                        balance += s.area * (f + phi_minus[k]);
                    }
                    if s.from == node {
                        balance -= s.area * (f - phi_minus[k]);
                    }
                }
                out.push(-4.0 * balance);
            }
            for (k, s) in r.segments.iter().enumerate() {
                let (lo, up) = ends(n, k);
                let c = s.length * s.friction_group * r.parent_friction[s.parent];
                out.push(c * signed_square(st.phi_at(n)[k], eps) - (lo - up) * (lo + up));
            }
        }
        out
    }

    #[test]
    fn matrix_form_matches_scalar_form() {
        let (r, ratios) = looped();
        let grid = TimeGrid::new(3.0, 6).unwrap();
        for eps in [0.0, DEFAULT_SMOOTHING] {
            let sys = DaeSystem::new(&r, grid, &ratios, eps).unwrap();
            for seed in 0..5 {
                let (st, d) = random_state(&sys, seed);
                let a = sys.residual(&st, &d, &r.parent_friction).unwrap();
                let b = scalar_residual(&r, &ratios, &st, &d, eps);
                assert_eq!(a.len(), b.len());
                let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-12 * scale, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (r, ratios) = looped();
        let grid = TimeGrid::new(3.0, 6).unwrap();
        let sys = DaeSystem::new(&r, grid, &ratios, 1e-3).unwrap();
        let (st, d) = random_state(&sys, 7);
        let (m, e, nt) = (sys.num_free(), sys.num_edges(), grid.steps);
        let mp = sys.num_physical_free();
        let np = sys.num_parents();
        let mut layout = VarLayout::state_only(m, e, nt);
        layout.withdrawal_offset = Some(layout.state_len());
        layout.num_withdrawal = mp;
        layout.friction_offset = Some(layout.state_len() + mp * nt);
        let nvar = layout.state_len() + mp * nt + np;
        let jac = CsrMatrix::from_triplets(
            sys.residual_len(),
            nvar,
            &sys.jacobian_triplets(&st, &r.parent_friction, &layout),
        );

        let eval = |x: &[f64]| {
            let mut s = st.clone();
            s.unpack(&x[..layout.state_len()]);
            let mut dd = d.clone();
            for n in 0..nt {
                for j in 0..mp {
                    dd[n * m + j] = x[layout.withdrawal(n, j).unwrap()];
                }
            }
            let f = &x[layout.friction_offset.unwrap()..];
            sys.residual(&s, &dd, f).unwrap()
        };
        let mut x = st.pack();
        for n in 0..nt {
            for j in 0..mp {
                x.push(d[n * m + j]);
            }
        }
        x.extend_from_slice(&r.parent_friction);
        let h = 1e-6;
        for col in 0..nvar {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let (fp, fm) = (eval(&xp), eval(&xm));
            for row in 0..sys.residual_len() {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                let an = jac.get(row, col);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "row {row} col {col}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn period_mass_is_conserved() {
        let (r, ratios) = looped();
        let grid = TimeGrid::new(3.0, 6).unwrap();
        let sys = DaeSystem::new(&r, grid, &ratios, 0.0).unwrap();
        let (st, _) = random_state(&sys, 3);
        let m = sys.num_free();
        // Withdrawals that make every mass residual vanish for this state.
        let zero = vec![0.0; m * grid.steps];
        let res = sys.residual(&st, &zero, &r.parent_friction).unwrap();
        let mut d = vec![0.0; m * grid.steps];
        for n in 0..grid.steps {
            for j in 0..m {
                d[n * m + j] = -res[n * (m + sys.num_edges()) + j] / 4.0;
            }
        }
        let supplied: f64 = (0..grid.steps)
            .map(|n| sys.slack_supply(&st, n).iter().sum::<f64>())
            .sum();
        let withdrawn: f64 = d.iter().sum();
        assert!((supplied - withdrawn).abs() < 1e-12 * (1.0 + withdrawn.abs()));
    }

    #[test]
    fn density_scale_invariance() {
        // Scaling all densities by c and fluxes by c leaves the relations
        // homogeneous of degree 2 (momentum) and 1 (mass).
        let (r, ratios) = looped();
        let grid = TimeGrid::new(3.0, 6).unwrap();
        let sys = DaeSystem::new(&r, grid, &ratios, 0.0).unwrap();
        let (st, d) = random_state(&sys, 9);
        let c = 1.7;
        let mut sc = st.clone();
        sc.rho
            .iter_mut()
            .chain(sc.phi.iter_mut())
            .chain(sc.supply.iter_mut())
            .for_each(|v| *v *= c);
        let dc: Vec<f64> = d.iter().map(|v| v * c).collect();
        let a = sys.residual(&st, &d, &r.parent_friction).unwrap();
        let b = sys.residual(&sc, &dc, &r.parent_friction).unwrap();
        let (m, e) = (sys.num_free(), sys.num_edges());
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            let power = if i % (m + e) < m { 1 } else { 2 };
            assert!((x * c.powi(power) - y).abs() < 1e-12 * (1.0 + y.abs()));
        }
    }
}
