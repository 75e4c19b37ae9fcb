//! Steady-state and periodic transient simulation, plus synthetic
//! measurement generation.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dae::{
    signed_square, signed_square_d1, DaeSystem, SpaceTimeState, TimeGrid, DEFAULT_SMOOTHING,
};
use crate::error::{Error, Result};
use crate::network::{GasNetwork, MeasurementSet};
use crate::nondim::{nondimensionalize_network, nondimensionalize_profiles, NondimNetwork, Scales};
use crate::refinement::{refine_graph, RefinedNetwork, LUMPING_WARN};
use crate::sparse::{norm_inf, CsrMatrix, LdlSymbolic, SquareSolver};
use crate::timeseries::SeriesTable;

pub use crate::profiles::BoundaryProfiles;

/// Default maximum segment length (m).
pub const DEFAULT_SEGMENT_LENGTH: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// ε in `Φ·sqrt(Φ² + ε²)`.
    pub smoothing: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            tolerance: 1e-10,
            max_iterations: 50,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

/// A network together with its scaling and refinement.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: GasNetwork,
    pub scales: Scales,
    pub nondim: NondimNetwork,
    pub refined: RefinedNetwork,
}

impl Model {
    /// `segment_length` and `length_scale` in metres.
    pub fn new(network: GasNetwork, segment_length: f64, length_scale: f64) -> Result<Self> {
        let scales = Scales::with_length(&network, length_scale);
        let nondim = nondimensionalize_network(&network, &scales)?;
        let refined = refine_graph(&nondim, segment_length / scales.length)?;
        Ok(Model {
            network,
            scales,
            nondim,
            refined,
        })
    }

    pub fn with_defaults(network: GasNetwork) -> Result<Self> {
        Self::new(
            network,
            DEFAULT_SEGMENT_LENGTH,
            crate::nondim::DEFAULT_LENGTH_SCALE,
        )
    }

    /// Validates SI profiles, resamples them to `steps` points if given and
    /// scales them.
    pub fn prepare_profiles(
        &self,
        profiles: &BoundaryProfiles,
        steps: Option<usize>,
    ) -> Result<BoundaryProfiles> {
        profiles.validate(&self.network)?;
        let p = match steps {
            Some(s) if s != profiles.grid.steps => profiles.resample(s)?,
            _ => profiles.clone(),
        };
        Ok(nondimensionalize_profiles(&p, &self.scales))
    }

    pub fn simulate(
        &self,
        profiles: &BoundaryProfiles,
        steps: Option<usize>,
        options: &SimulationOptions,
    ) -> Result<Simulation> {
        let nd = self.prepare_profiles(profiles, steps)?;
        transient_simulate(&self.refined, &nd, options)
    }

    /// Non-dimensional state as an SI table: `rho:<node>` for every node of
    /// the refined graph, then `phi:<segment>`.
    pub fn state_table(&self, state: &SpaceTimeState) -> SeriesTable {
        let r = &self.refined;
        let grid = self.scales.grid_to_dim(state.grid);
        let mut columns = Vec::new();
        let mut values = Vec::new();
        for (i, node) in r.nodes.iter().enumerate() {
            columns.push(format!("rho:{}", node.label));
            values.push(
                (0..grid.steps)
                    .map(|n| state.nodal(n)[i] * self.scales.density)
                    .collect(),
            );
        }
        for (k, seg) in r.segments.iter().enumerate() {
            columns.push(format!("phi:{}", seg.label));
            values.push(
                (0..grid.steps)
                    .map(|n| state.phi_at(n)[k] * self.scales.flux())
                    .collect(),
            );
        }
        SeriesTable::new(grid, columns, values)
    }

    /// SI densities of the physical non-slack junctions, keyed by id.
    pub fn junction_densities(&self, state: &SpaceTimeState) -> BTreeMap<String, Vec<f64>> {
        let b = self.refined.num_slack;
        (0..self.refined.num_physical_free())
            .map(|j| {
                let series = (0..state.grid.steps)
                    .map(|n| state.rho_at(n)[j] * self.scales.density)
                    .collect();
                (self.refined.nodes[b + j].label.clone(), series)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    /// Non-slack densities, refined node order.
    pub rho: Vec<f64>,
    pub phi: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Largest violation of the density box (0 when inside).
    pub bound_violation: f64,
}

/// Period averages of scaled profiles.
struct Averages {
    withdrawal: Vec<f64>,
    supply: Vec<f64>,
    ratio: Vec<f64>,
}

fn averages(profiles: &BoundaryProfiles) -> Averages {
    let mean = |v: &Vec<Vec<f64>>| -> Vec<f64> {
        v.iter()
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
            .collect()
    };
    Averages {
        withdrawal: mean(&profiles.withdrawal),
        supply: mean(&profiles.supply_density),
        ratio: mean(&profiles.ratio),
    }
}

/// Steady flow and densities for the period-averaged (scaled) profiles.
pub fn steady_state_solve(
    refined: &RefinedNetwork,
    profiles: &BoundaryProfiles,
    options: &SimulationOptions,
) -> Result<SteadyState> {
    let avg = averages(profiles);
    steady_solve(
        refined,
        &avg.withdrawal,
        &avg.supply,
        &avg.ratio,
        &refined.parent_friction,
        options,
    )
}

/// Steady solve with explicit data: withdrawals per physical non-slack
/// junction, densities per slack node, one ratio per compressor.
pub fn steady_solve(
    refined: &RefinedNetwork,
    withdrawal: &[f64],
    supply: &[f64],
    ratios: &[f64],
    friction: &[f64],
    options: &SimulationOptions,
) -> Result<SteadyState> {
    let (b, m, e) = (
        refined.num_slack,
        refined.num_free(),
        refined.num_segments(),
    );
    if withdrawal.len() != refined.num_physical_free() {
        return Err(Error::dims(
            "steady withdrawals",
            refined.num_physical_free(),
            withdrawal.len(),
        ));
    }
    if supply.len() != b {
        return Err(Error::dims("steady supply", b, supply.len()));
    }
    let mut d = withdrawal.to_vec();
    d.resize(m, 0.0);
    let ratio = |c: Option<usize>| c.map_or(1.0, |c| ratios[c]);
    let segs = &refined.segments;
    let coef: Vec<f64> = (0..e)
        .map(|k| refined.momentum_coefficient(k, friction))
        .collect();
    let eps = options.smoothing;

    let phi0 = min_norm_flow(refined, &d)?;
    let rho0 = propagate_densities(refined, &phi0, supply, ratios, friction);

    let density = |x: &[f64], i: usize| if i < b { supply[i] } else { x[i - b] };
    let residual = |x: &[f64]| -> Result<Vec<f64>> {
        let mut r = vec![0.0; m + e];
        for (j, rj) in r.iter_mut().enumerate().take(m) {
            *rj = -d[j];
        }
        for (k, s) in segs.iter().enumerate() {
            let f = s.area * x[m + k];
            if s.to >= b {
                r[s.to - b] += f;
            }
            if s.from >= b {
                r[s.from - b] -= f;
            }
            let lo = ratio(s.tail_compressor) * density(x, s.from);
            let hi = ratio(s.head_compressor) * density(x, s.to);
            r[m + k] = coef[k] * signed_square(x[m + k], eps) + (hi - lo) * (hi + lo);
        }
        Ok(r)
    };
    let jacobian = |x: &[f64]| -> CsrMatrix {
        let mut t = Vec::with_capacity(5 * e);
        for (k, s) in segs.iter().enumerate() {
            if s.to >= b {
                t.push((s.to - b, m + k, s.area));
            }
            if s.from >= b {
                t.push((s.from - b, m + k, -s.area));
            }
            let (ta, ha) = (ratio(s.tail_compressor), ratio(s.head_compressor));
            t.push((m + k, m + k, coef[k] * signed_square_d1(x[m + k], eps)));
            if s.to >= b {
                t.push((m + k, s.to - b, 2.0 * ha * ha * density(x, s.to)));
            }
            if s.from >= b {
                t.push((m + k, s.from - b, -2.0 * ta * ta * density(x, s.from)));
            }
        }
        CsrMatrix::from_triplets(m + e, m + e, &t)
    };

    let mut x = rho0;
    x.extend_from_slice(&phi0);
    let report = newton(&mut x, residual, jacobian, options)?;
    let bound_violation = refined.nodes[b..]
        .iter()
        .zip(&x[..m])
        .map(|(node, &r)| (node.density_min - r).max(r - node.density_max).max(0.0))
        .fold(0.0, f64::max);
    if bound_violation > 0.0 {
        warn!("steady state leaves the density box by {bound_violation:.3e}");
    }
    Ok(SteadyState {
        rho: x[..m].to_vec(),
        phi: x[m..].to_vec(),
        iterations: report.iterations,
        residual: report.residual,
        bound_violation,
    })
}

/// Minimum-norm `Φ` with `A_d X Φ = d`.
fn min_norm_flow(refined: &RefinedNetwork, d: &[f64]) -> Result<Vec<f64>> {
    let (b, m) = (refined.num_slack, refined.num_free());
    // G = A_d X; solve G Gᵀ y = d, Φ = Gᵀ y.
    let mut lap: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for s in &refined.segments {
        let x2 = s.area * s.area;
        let ends = [(s.to, 1.0), (s.from, -1.0)];
        for &(u, su) in &ends {
            for &(v, sv) in &ends {
                if u >= b && v >= b && u >= v {
                    *lap.entry((u - b, v - b)).or_insert(0.0) += su * sv * x2;
                }
            }
        }
    }
    for j in 0..m {
        lap.entry((j, j)).or_insert(0.0);
    }
    let entries: Vec<(usize, usize)> = lap.keys().copied().collect();
    let values: Vec<f64> = lap.values().copied().collect();
    let factor =
        LdlSymbolic::new(m, &entries)
            .factor(&values)
            .map_err(|_| Error::SingularJacobian {
                cause: "a non-slack component is not connected to any slack node".into(),
            })?;
    let y = factor.solve(d);
    Ok(refined
        .segments
        .iter()
        .map(|s| {
            let yv = |i: usize| if i >= b { y[i - b] } else { 0.0 };
            s.area * (yv(s.to) - yv(s.from))
        })
        .collect())
}

/// Densities obtained by walking a spanning tree out of the slack nodes and
/// solving each segment's momentum relation for the far end.
fn propagate_densities(
    refined: &RefinedNetwork,
    phi: &[f64],
    supply: &[f64],
    ratios: &[f64],
    friction: &[f64],
) -> Vec<f64> {
    let b = refined.num_slack;
    let nv = refined.num_nodes();
    let ratio = |c: Option<usize>| c.map_or(1.0, |c| ratios[c]);
    let floor = 0.05 * supply.iter().copied().fold(f64::INFINITY, f64::min);
    let mut rho: Vec<Option<f64>> = (0..nv).map(|i| (i < b).then(|| supply[i])).collect();
    let mut adj = vec![Vec::new(); nv];
    for (k, s) in refined.segments.iter().enumerate() {
        adj[s.from].push(k);
        adj[s.to].push(k);
    }
    let mut queue: std::collections::VecDeque<usize> = (0..b).collect();
    while let Some(u) = queue.pop_front() {
        let ru = rho[u].expect("queued nodes are set");
        for &k in &adj[u] {
            let s = &refined.segments[k];
            let c = refined.momentum_coefficient(k, friction) * signed_square(phi[k], 0.0);
            let (ta, ha) = (ratio(s.tail_compressor), ratio(s.head_compressor));
            let (v, value) = if s.from == u {
                let lo = ta * ru;
                (s.to, (lo * lo - c).max(floor * floor).sqrt() / ha)
            } else {
                let hi = ha * ru;
                (s.from, (hi * hi + c).max(floor * floor).sqrt() / ta)
            };
            if rho[v].is_none() {
                rho[v] = Some(value);
                queue.push_back(v);
            }
        }
    }
    let mean = supply.iter().sum::<f64>() / b as f64;
    rho[b..].iter().map(|r| r.unwrap_or(mean)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton iteration on `residual(x) = 0` with backtracking on the
/// residual 2-norm, stopping on the ∞-norm.
pub(crate) fn newton<R, J>(
    x: &mut Vec<f64>,
    residual: R,
    jacobian: J,
    options: &SimulationOptions,
) -> Result<NewtonReport>
where
    R: Fn(&[f64]) -> Result<Vec<f64>>,
    J: Fn(&[f64]) -> CsrMatrix,
{
    let n = x.len();
    let jac0 = jacobian(x);
    let pattern: Vec<(usize, usize)> = jac0.triplets().map(|(r, c, _)| (r, c)).collect();
    let solver = SquareSolver::new(n, &pattern);
    let mut r = residual(x)?;
    let mut trace = Vec::new();
    for it in 0..=options.max_iterations {
        let rn = norm_inf(&r);
        trace.push(rn);
        debug!("newton iteration {it}: residual {rn:.3e}");
        if rn <= options.tolerance {
            return Ok(NewtonReport {
                iterations: it,
                residual: rn,
                trace,
            });
        }
        if it == options.max_iterations {
            break;
        }
        let jac = if it == 0 { jac0.clone() } else { jacobian(x) };
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let (dx, rel) = solver.solve(&jac, &rhs).map_err(|_| singular())?;
        debug!("linear solve relative residual {rel:.3e}");
        if !(rel < 1e-6) || dx.iter().any(|v| !v.is_finite()) {
            return Err(singular());
        }
        let base = norm2(&r);
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + step * d).collect();
            let rt = residual(&trial)?;
            let tn = norm2(&rt);
            if tn <= (1.0 - 1e-4 * step) * base || step < 1e-8 {
                *x = trial;
                r = rt;
                break;
            }
            step *= 0.5;
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iterations,
        residual: norm_inf(&r),
        trace,
    })
}

fn singular() -> Error {
    Error::SingularJacobian {
        cause: "zero-flow kink in Φ|Φ| (increase the flux smoothing) or a component without a slack node"
            .into(),
    }
}

/// A converged periodic transient, in scaled units.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub system: DaeSystem,
    pub state: SpaceTimeState,
    /// `withdrawal[n·M + j]` over all non-slack nodes, auxiliary nodes zero.
    pub withdrawal: Vec<f64>,
    pub friction: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub trace: Vec<f64>,
}

/// Withdrawal trajectory over all refined non-slack nodes.
pub fn withdrawal_trajectory(refined: &RefinedNetwork, profiles: &BoundaryProfiles) -> Vec<f64> {
    let (m, nt) = (refined.num_free(), profiles.grid.steps);
    let mut d = vec![0.0; m * nt];
    for (j, s) in profiles.withdrawal.iter().enumerate() {
        for n in 0..nt {
            d[n * m + j] = s[n];
        }
    }
    d
}

/// Solves the space-time system for scaled periodic profiles, starting from
/// the steady state of their period averages.
pub fn transient_simulate(
    refined: &RefinedNetwork,
    profiles: &BoundaryProfiles,
    options: &SimulationOptions,
) -> Result<Simulation> {
    let grid = profiles.grid;
    let system = DaeSystem::new(refined, grid, &profiles.ratio, options.smoothing)?;
    let steady = steady_state_solve(refined, profiles, options)?;
    let (m, e, b) = (
        refined.num_free(),
        refined.num_segments(),
        refined.num_slack,
    );
    let mut state = SpaceTimeState::zeros(grid, m, e, b);
    for n in 0..grid.steps {
        state.rho[n * m..(n + 1) * m].copy_from_slice(&steady.rho);
        state.phi[n * e..(n + 1) * e].copy_from_slice(&steady.phi);
        for i in 0..b {
            state.supply[n * b + i] = profiles.supply_density[i][n];
        }
    }
    let withdrawal = withdrawal_trajectory(refined, profiles);
    let friction = refined.parent_friction.clone();
    let mut x = state.pack();
    let report = {
        let template = state.clone();
        let residual = |x: &[f64]| {
            let mut s = template.clone();
            s.unpack(x);
            system.residual(&s, &withdrawal, &friction)
        };
        let jacobian = |x: &[f64]| {
            let mut s = template.clone();
            s.unpack(x);
            system.state_jacobian(&s, &friction)
        };
        newton(&mut x, residual, jacobian, options)?
    };
    state.unpack(&x);
    let sim = Simulation {
        system,
        state,
        withdrawal,
        friction,
        iterations: report.iterations,
        residual_norm: report.residual,
        trace: report.trace,
    };
    let lumping = sim.lumping_diagnostic();
    if lumping > LUMPING_WARN {
        warn!("lumping diagnostic {lumping:.3} exceeds {LUMPING_WARN}; consider a shorter segment length");
    }
    Ok(sim)
}

impl Simulation {
    /// Scaled mass delivered by all slack nodes at each time index.
    pub fn total_supply(&self) -> Vec<f64> {
        (0..self.state.grid.steps)
            .map(|n| self.system.slack_supply(&self.state, n).iter().sum())
            .collect()
    }

    pub fn total_withdrawal(&self) -> Vec<f64> {
        let m = self.state.num_free;
        self.withdrawal
            .chunks(m.max(1))
            .map(|c| c.iter().sum())
            .collect()
    }

    /// Relative mismatch between period-total supply and withdrawal.
    pub fn conservation_error(&self) -> f64 {
        let supplied: f64 = self.total_supply().iter().sum();
        let withdrawn: f64 = self.total_withdrawal().iter().sum();
        let scale = self
            .withdrawal
            .iter()
            .map(|v| v.abs())
            .sum::<f64>()
            .max(supplied.abs())
            .max(f64::MIN_POSITIVE);
        (supplied - withdrawn).abs() / scale
    }

    /// Scaled linepack `Σ X·L·(ρ̱ + ρ̄)/2` at each time index.
    pub fn linepack(&self) -> Vec<f64> {
        let inc = &self.system.incidence;
        (0..self.state.grid.steps)
            .map(|n| {
                self.system
                    .end_sums(n, &self.state.nodal(n))
                    .iter()
                    .enumerate()
                    .map(|(k, s)| 0.5 * inc.areas[k] * inc.lengths[k] * s)
                    .sum()
            })
            .collect()
    }

    pub fn lumping_diagnostic(&self) -> f64 {
        self.system.lumping_diagnostic(&self.state)
    }

    /// ∞-norm of the DAE residual at the returned state.
    pub fn residual_inf(&self) -> Result<f64> {
        Ok(norm_inf(&self.system.residual(
            &self.state,
            &self.withdrawal,
            &self.friction,
        )?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Relative standard deviation of density readings.
    pub density: f64,
    /// Standard deviation of withdrawal readings relative to each
    /// junction's largest absolute withdrawal.
    pub withdrawal: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            density: 0.0,
            withdrawal: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density >= 0.0 && self.withdrawal >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise levels must be nonnegative, got {} and {}",
                self.density, self.withdrawal
            )));
        }
        Ok(())
    }
}

/// Noisy readings at every physical non-slack junction, in SI units on the
/// simulation's grid. `profiles` must be the SI profiles on that grid.
pub fn inject_noise(
    model: &Model,
    sim: &Simulation,
    profiles: &BoundaryProfiles,
    spec: &NoiseSpec,
) -> Result<MeasurementSet> {
    spec.validate()?;
    let grid: TimeGrid = model.scales.grid_to_dim(sim.state.grid);
    if profiles.grid.steps != grid.steps {
        return Err(Error::dims(
            "withdrawal profile steps",
            grid.steps,
            profiles.grid.steps,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut density = BTreeMap::new();
    for (id, series) in model.junction_densities(&sim.state) {
        let noisy = series
            .iter()
            .map(|r| r * (1.0 + spec.density * draw()))
            .collect();
        density.insert(id, noisy);
    }
    let mut withdrawal = BTreeMap::new();
    for (j, series) in model.network.nonslack_junctions().zip(&profiles.withdrawal) {
        let scale = norm_inf(series);
        let noisy = series
            .iter()
            .map(|d| d + spec.withdrawal * scale * draw())
            .collect();
        withdrawal.insert(j.id.clone(), noisy);
    }
    Ok(MeasurementSet {
        grid,
        density,
        withdrawal,
    })
}
