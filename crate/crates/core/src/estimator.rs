//! Joint estimation of the periodic state, junction withdrawals and pipe
//! friction factors from noisy junction readings.
//!
//! The unknowns are the space-time state `(ρ, Φ)`, a withdrawal trajectory
//! for every non-slack junction of the original network and one friction
//! multiplier `θ_p = λ_p / λ_p^prior` per pipe. The objective is the running
//! least-squares misfit
//!
//! ```text
//! Δt Σ_n Σ_j [ W1_j (d_j(t_n) - d̃_j(t_n))² + W2_j (ρ_j(t_n) - ρ̃_j(t_n))² ]
//! ```
//!
//! subject to the discretized DAE, density boxes and friction bounds. All
//! quantities here are scaled; [`Estimate`] carries the SI views.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dae::{
    signed_square_d1, signed_square_d2, DaeSystem, SpaceTimeState, TimeGrid, VarLayout,
    DEFAULT_SMOOTHING,
};
use crate::error::{Error, Result};
use crate::ipm::{self, IpmOptions, IpmStatus, IterationLog, Nlp};
use crate::network::{GasNetwork, MeasurementSet};
use crate::profiles::BoundaryProfiles;
use crate::refinement::RefinedNetwork;
use crate::simulator::{
    steady_solve, transient_simulate, withdrawal_trajectory, Model, SimulationOptions,
};
use crate::sparse::norm_inf;
use crate::timeseries::{resample_periodic, SeriesTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationOptions {
    /// Scaled KKT tolerance of the interior-point solve.
    pub tol: f64,
    /// Largest accepted DAE residual (∞-norm, scaled) at termination.
    pub constraint_tol: f64,
    pub max_iterations: usize,
    /// Friction bounds as multiples of the prior, `[lo·λ, hi·λ]`.
    pub friction_bounds: (f64, f64),
    /// Initial friction as a multiple of the prior.
    pub friction_init_factor: f64,
    /// Unmetered withdrawals are bounded by this multiple of the largest
    /// observed withdrawal magnitude.
    pub withdrawal_bound_factor: f64,
    pub smoothing: f64,
    /// Initial barrier parameter. Small values keep a good starting point.
    pub barrier_init: f64,
    /// Barrier parameter reached before stopping.
    pub barrier_final: f64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            tol: 1e-4,
            constraint_tol: 1e-8,
            max_iterations: 3000,
            friction_bounds: (0.2, 5.0),
            friction_init_factor: 1.0,
            withdrawal_bound_factor: 10.0,
            smoothing: DEFAULT_SMOOTHING,
            barrier_init: 1e-3,
            barrier_final: 1e-9,
        }
    }
}

impl EstimationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.constraint_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        let (lo, hi) = self.friction_bounds;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InfeasibleBoxes(format!(
                "friction bound factors [{lo}, {hi}] must satisfy 0 < lo < hi"
            )));
        }
        if !(self.friction_init_factor > 0.0) {
            return Err(Error::NonpositiveFactor(self.friction_init_factor));
        }
        if !(self.withdrawal_bound_factor > 0.0) {
            return Err(Error::InvalidConfig(
                "withdrawal bound factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-junction objective weights, keyed by junction id. Missing junctions
/// get weight 1; unmetered quantities always get weight 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub withdrawal: BTreeMap<String, f64>,
    pub density: BTreeMap<String, f64>,
}

impl Weights {
    /// Inverse-variance weights in scaled units for readings generated with
    /// relative noise levels `density_noise` and `withdrawal_noise`.
    pub fn inverse_variance(
        model: &Model,
        measurements: &MeasurementSet,
        density_noise: f64,
        withdrawal_noise: f64,
    ) -> Weights {
        let inv = |sd: f64| if sd > 0.0 { 1.0 / (sd * sd) } else { 1.0 };
        let density = measurements
            .density
            .iter()
            .map(|(id, s)| {
                let mean = s.iter().sum::<f64>() / s.len() as f64 / model.scales.density;
                (id.clone(), inv(density_noise * mean))
            })
            .collect();
        let withdrawal = measurements
            .withdrawal
            .iter()
            .map(|(id, s)| {
                let peak = norm_inf(s) / model.scales.withdrawal();
                (id.clone(), inv(withdrawal_noise * peak))
            })
            .collect();
        Weights {
            withdrawal,
            density,
        }
    }

    /// Reads `junction,withdrawal_weight,density_weight` rows.
    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Weights> {
        let path = path.as_ref();
        let malformed = |message: String| Error::MalformedFile {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| malformed(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["junction", "withdrawal_weight", "density_weight"]
        {
            return Err(Error::SchemaViolation {
                path: path.to_path_buf(),
                message: "expected header `junction,withdrawal_weight,density_weight`".into(),
            });
        }
        let mut weights = Weights::default();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| malformed(e.to_string()))?;
            let value = |i: usize| -> Result<f64> {
                let field = record.get(i).unwrap_or("");
                let v: f64 = field
                    .parse()
                    .map_err(|_| malformed(format!("row {}: cannot parse `{field}`", line + 2)))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(malformed(format!(
                        "row {}: weights must be nonnegative",
                        line + 2
                    )));
                }
                Ok(v)
            };
            let id = record.get(0).unwrap_or("").to_string();
            weights.withdrawal.insert(id.clone(), value(1)?);
            weights.density.insert(id, value(2)?);
        }
        Ok(weights)
    }
}

/// SI inputs of an estimate: junction readings plus the known supply
/// densities and compressor ratios on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationData {
    pub measurements: MeasurementSet,
    /// Per slack junction, network order.
    pub supply_density: Vec<Vec<f64>>,
    /// Per compressor, network order.
    pub ratio: Vec<Vec<f64>>,
}

/// Column prefixes of a measurement table.
pub const DENSITY_PREFIX: &str = "rho:";
pub const WITHDRAWAL_PREFIX: &str = "d:";

impl EstimationData {
    /// Readings from SI profiles and a measurement set on the same grid.
    pub fn new(profiles: &BoundaryProfiles, measurements: MeasurementSet) -> Self {
        EstimationData {
            measurements,
            supply_density: profiles.supply_density.clone(),
            ratio: profiles.ratio.clone(),
        }
    }

    pub fn validate(&self, network: &GasNetwork) -> Result<()> {
        self.measurements.validate(network)?;
        let steps = self.measurements.grid.steps;
        let profiles = BoundaryProfiles {
            grid: self.measurements.grid,
            withdrawal: vec![vec![0.0; steps]; network.nonslack_junctions().count()],
            supply_density: self.supply_density.clone(),
            ratio: self.ratio.clone(),
        };
        profiles.validate(network)
    }

    /// Slack columns hold supply densities, compressor columns ratios,
    /// `rho:<id>` and `d:<id>` columns junction readings.
    pub fn from_table(network: &GasNetwork, table: &SeriesTable) -> Result<Self> {
        let mut density = BTreeMap::new();
        let mut withdrawal = BTreeMap::new();
        let mut boundary_cols = Vec::new();
        let mut boundary_vals = Vec::new();
        for (c, v) in table.columns.iter().zip(&table.values) {
            if let Some(id) = c.strip_prefix(DENSITY_PREFIX) {
                density.insert(id.to_string(), v.clone());
            } else if let Some(id) = c.strip_prefix(WITHDRAWAL_PREFIX) {
                withdrawal.insert(id.to_string(), v.clone());
            } else {
                boundary_cols.push(c.clone());
                boundary_vals.push(v.clone());
            }
        }
        // Boundary columns share the profile format; unmetered withdrawals are
        // filled in only to satisfy it.
        for j in network.nonslack_junctions() {
            boundary_cols.push(j.id.clone());
            boundary_vals.push(vec![0.0; table.grid.steps]);
        }
        let boundary = SeriesTable::new(table.grid, boundary_cols, boundary_vals);
        let profiles = BoundaryProfiles::from_table(network, &boundary)?;
        let data = EstimationData {
            measurements: MeasurementSet {
                grid: table.grid,
                density,
                withdrawal,
            },
            supply_density: profiles.supply_density,
            ratio: profiles.ratio,
        };
        data.validate(network)?;
        Ok(data)
    }

    pub fn to_table(&self, network: &GasNetwork) -> SeriesTable {
        let mut columns = Vec::new();
        let mut values = Vec::new();
        for (j, s) in network.slack_junctions().zip(&self.supply_density) {
            columns.push(j.id.clone());
            values.push(s.clone());
        }
        for (c, s) in network.compressors().iter().zip(&self.ratio) {
            columns.push(c.id.clone());
            values.push(s.clone());
        }
        for j in network.nonslack_junctions() {
            if let Some(s) = self.measurements.density.get(&j.id) {
                columns.push(format!("{DENSITY_PREFIX}{}", j.id));
                values.push(s.clone());
            }
            if let Some(s) = self.measurements.withdrawal.get(&j.id) {
                columns.push(format!("{WITHDRAWAL_PREFIX}{}", j.id));
                values.push(s.clone());
            }
        }
        SeriesTable::new(self.measurements.grid, columns, values)
    }

    /// Keeps readings only at `metered` junctions.
    pub fn restrict(&self, metered: &BTreeSet<String>) -> Self {
        EstimationData {
            measurements: self.measurements.restrict(metered),
            ..self.clone()
        }
    }
}

/// A fully specified estimation problem in scaled units.
#[derive(Debug, Clone)]
pub struct EstimationProblem {
    pub refined: RefinedNetwork,
    pub grid: TimeGrid,
    /// Per slack node.
    pub supply: Vec<Vec<f64>>,
    /// Per compressor.
    pub ratio: Vec<Vec<f64>>,
    /// Readings per non-slack junction (zeros where unmetered).
    pub density: Vec<Vec<f64>>,
    pub withdrawal: Vec<Vec<f64>>,
    pub density_metered: Vec<bool>,
    pub withdrawal_metered: Vec<bool>,
    /// W2 and W1 diagonals; zero exactly at unmetered junctions.
    pub density_weight: Vec<f64>,
    pub withdrawal_weight: Vec<f64>,
    pub friction_prior: Vec<f64>,
    /// Absolute λ bounds per pipe.
    pub friction_bounds: Vec<(f64, f64)>,
    /// Magnitude bound on unmetered withdrawals (infinite if none observed).
    pub withdrawal_bound: f64,
    pub options: EstimationOptions,
}

impl EstimationProblem {
    /// Scales SI data onto `steps` grid points (the data grid if `None`).
    pub fn new(
        model: &Model,
        data: &EstimationData,
        weights: &Weights,
        steps: Option<usize>,
        options: &EstimationOptions,
    ) -> Result<Self> {
        options.validate()?;
        data.validate(&model.network)?;
        let steps = steps.unwrap_or(data.measurements.grid.steps);
        let si_grid = TimeGrid::new(data.measurements.grid.horizon, steps)?;
        let grid = model.scales.grid_to_nondim(si_grid);
        let resample = |s: &[f64], scale: f64| -> Vec<f64> {
            resample_periodic(s, steps)
                .into_iter()
                .map(|v| v / scale)
                .collect()
        };
        let sc = &model.scales;
        let mut density = Vec::new();
        let mut withdrawal = Vec::new();
        let mut density_metered = Vec::new();
        let mut withdrawal_metered = Vec::new();
        let mut density_weight = Vec::new();
        let mut withdrawal_weight = Vec::new();
        for j in model.network.nonslack_junctions() {
            let weight = |map: &BTreeMap<String, f64>| map.get(&j.id).copied().unwrap_or(1.0);
            match data.measurements.density.get(&j.id) {
                Some(s) => {
                    density.push(resample(s, sc.density));
                    density_metered.push(true);
                    density_weight.push(weight(&weights.density));
                }
                None => {
                    density.push(vec![0.0; steps]);
                    density_metered.push(false);
                    density_weight.push(0.0);
                }
            }
            match data.measurements.withdrawal.get(&j.id) {
                Some(s) => {
                    withdrawal.push(resample(s, sc.withdrawal()));
                    withdrawal_metered.push(true);
                    withdrawal_weight.push(weight(&weights.withdrawal));
                }
                None => {
                    withdrawal.push(vec![0.0; steps]);
                    withdrawal_metered.push(false);
                    withdrawal_weight.push(0.0);
                }
            }
        }
        let observed = withdrawal
            .iter()
            .zip(&withdrawal_metered)
            .filter(|(_, m)| **m)
            .map(|(s, _)| norm_inf(s))
            .fold(0.0, f64::max);
        let withdrawal_bound = if observed > 0.0 {
            options.withdrawal_bound_factor * observed
        } else {
            f64::INFINITY
        };
        let prior = model.refined.parent_friction.clone();
        let (lo, hi) = options.friction_bounds;
        let problem = EstimationProblem {
            refined: model.refined.clone(),
            grid,
            supply: data
                .supply_density
                .iter()
                .map(|s| resample(s, sc.density))
                .collect(),
            ratio: data.ratio.iter().map(|s| resample(s, 1.0)).collect(),
            density,
            withdrawal,
            density_metered,
            withdrawal_metered,
            density_weight,
            withdrawal_weight,
            friction_bounds: prior.iter().map(|p| (lo * p, hi * p)).collect(),
            friction_prior: prior,
            withdrawal_bound,
            options: *options,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn num_junctions(&self) -> usize {
        self.refined.num_physical_free()
    }

    pub fn validate(&self) -> Result<()> {
        let nj = self.num_junctions();
        let steps = self.grid.steps;
        for (what, v) in [
            ("density readings", &self.density),
            ("withdrawal readings", &self.withdrawal),
        ] {
            if v.len() != nj {
                return Err(Error::dims(what, nj, v.len()));
            }
            if let Some(s) = v.iter().find(|s| s.len() != steps) {
                return Err(Error::dims(what, steps, s.len()));
            }
        }
        for (what, w, m) in [
            (
                "density weights",
                &self.density_weight,
                &self.density_metered,
            ),
            (
                "withdrawal weights",
                &self.withdrawal_weight,
                &self.withdrawal_metered,
            ),
        ] {
            if w.len() != nj || m.len() != nj {
                return Err(Error::dims(what, nj, w.len().min(m.len())));
            }
            if w.iter()
                .zip(m)
                .any(|(&w, &m)| !(w >= 0.0 && w.is_finite()) || (!m && w != 0.0))
            {
                return Err(Error::invariant(
                    what,
                    "weights must be nonnegative and zero at unmetered junctions",
                ));
            }
        }
        let np = self.refined.parent_ids.len();
        if self.friction_bounds.len() != np || self.friction_prior.len() != np {
            return Err(Error::dims(
                "friction bounds",
                np,
                self.friction_bounds.len(),
            ));
        }
        for (id, &(lo, hi)) in self.refined.parent_ids.iter().zip(&self.friction_bounds) {
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::InfeasibleBoxes(format!(
                    "pipe {id}: friction bounds [{lo}, {hi}]"
                )));
            }
        }
        for node in &self.refined.nodes {
            if !node.slack && !(node.density_min < node.density_max) {
                return Err(Error::InfeasibleBoxes(format!(
                    "node {}: density bounds [{}, {}]",
                    node.label, node.density_min, node.density_max
                )));
            }
        }
        Ok(())
    }

    /// Objective at the given withdrawals and free densities, both per
    /// junction (refined nodes beyond the junctions are ignored).
    pub fn objective(&self, withdrawal: &[Vec<f64>], density: &[Vec<f64>]) -> Result<f64> {
        let nj = self.num_junctions();
        evaluate_objective(
            withdrawal,
            &self.withdrawal,
            &density[..nj.min(density.len())],
            &self.density,
            &self.withdrawal_weight,
            &self.density_weight,
            self.grid,
        )
    }
}

/// Running least-squares misfit `Δt Σ_n Σ_j [W1_j (d - d̃)² + W2_j (ρ - ρ̃)²]`
/// with per-junction series. On the circular grid this is the trapezoid rule.
pub fn evaluate_objective(
    withdrawal: &[Vec<f64>],
    measured_withdrawal: &[Vec<f64>],
    density: &[Vec<f64>],
    measured_density: &[Vec<f64>],
    withdrawal_weight: &[f64],
    density_weight: &[f64],
    grid: TimeGrid,
) -> Result<f64> {
    let nj = withdrawal_weight.len();
    let mut total = 0.0;
    for (what, est, meas, w) in [
        (
            "withdrawal",
            withdrawal,
            measured_withdrawal,
            withdrawal_weight,
        ),
        ("density", density, measured_density, density_weight),
    ] {
        if est.len() != nj || meas.len() != nj || w.len() != nj {
            return Err(Error::dims(
                format!("{what} series"),
                nj,
                est.len().min(meas.len()).min(w.len()),
            ));
        }
        for j in 0..nj {
            if w[j] == 0.0 {
                continue;
            }
            if est[j].len() != grid.steps || meas[j].len() != grid.steps {
                return Err(Error::dims(
                    format!("{what} series {j}"),
                    grid.steps,
                    est[j].len(),
                ));
            }
            let sq: f64 = est[j]
                .iter()
                .zip(&meas[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += w[j] * sq;
        }
    }
    Ok(grid.dt() * total)
}

/// Counts of variables resting on a bound at the solution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundActivity {
    pub density_lower: usize,
    pub density_upper: usize,
    pub withdrawal_lower: usize,
    pub withdrawal_upper: usize,
    /// Pipe ids whose friction sits at its lower or upper bound.
    pub friction_lower: Vec<String>,
    pub friction_upper: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EstimationSolution {
    pub state: SpaceTimeState,
    /// Per non-slack junction.
    pub withdrawal: Vec<Vec<f64>>,
    /// λ per pipe.
    pub friction: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_error: f64,
    /// DAE residual ∞-norm at the returned point.
    pub constraint_violation: f64,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
    pub bound_activity: BoundActivity,
    pub trace: Vec<IterationLog>,
    /// Seconds spent in the solve. Not written to any artifact.
    pub wall_time: f64,
}

/// The estimation problem as an NLP over
/// `[ (ρ(n), Φ(n)) for n ] ++ [ d(n) for n ] ++ θ`.
pub struct EstimationNlp<'a> {
    problem: &'a EstimationProblem,
    system: DaeSystem,
    layout: VarLayout,
    template: SpaceTimeState,
    initial: Vec<f64>,
    jac_pattern: Vec<(usize, usize)>,
    hess_pattern: Vec<(usize, usize)>,
}

impl<'a> EstimationNlp<'a> {
    pub fn new(problem: &'a EstimationProblem) -> Result<Self> {
        problem.validate()?;
        let r = &problem.refined;
        let grid = problem.grid;
        let system = DaeSystem::new(r, grid, &problem.ratio, problem.options.smoothing)?;
        let (m, e, b, nt) = (r.num_free(), r.num_segments(), r.num_slack, grid.steps);
        let nj = problem.num_junctions();
        let state_len = nt * (m + e);
        let layout = VarLayout {
            num_free: m,
            num_edges: e,
            steps: nt,
            withdrawal_offset: Some(state_len),
            num_withdrawal: nj,
            friction_offset: Some(state_len + nt * nj),
        };
        let mut template = SpaceTimeState::zeros(grid, m, e, b);
        for n in 0..nt {
            for i in 0..b {
                template.supply[n * b + i] = problem.supply[i][n];
            }
        }
        let mut nlp = EstimationNlp {
            problem,
            system,
            layout,
            template,
            initial: Vec::new(),
            jac_pattern: Vec::new(),
            hess_pattern: Vec::new(),
        };
        nlp.initial = nlp.initial_guess();
        nlp.jac_pattern = nlp
            .jacobian_triplets(&nlp.initial)
            .into_iter()
            .map(|(r, c, _)| (r, c))
            .collect();
        nlp.hess_pattern = nlp
            .hessian_entries(&nlp.initial, 1.0, &vec![0.0; nlp.num_cons()])
            .into_iter()
            .map(|(r, c, _)| (r, c))
            .collect();
        Ok(nlp)
    }

    fn num_parents(&self) -> usize {
        self.problem.friction_prior.len()
    }

    fn withdrawal_offset(&self) -> usize {
        self.layout
            .withdrawal_offset
            .expect("withdrawals are unknowns")
    }

    fn friction_offset(&self) -> usize {
        self.layout.friction_offset.expect("friction is unknown")
    }

    pub fn layout(&self) -> VarLayout {
        self.layout
    }

    pub fn system(&self) -> &DaeSystem {
        &self.system
    }

    /// Splits a variable vector into state, full withdrawal trajectory over
    /// all non-slack nodes and λ.
    pub fn unpack(&self, x: &[f64]) -> (SpaceTimeState, Vec<f64>, Vec<f64>) {
        let mut state = self.template.clone();
        state.unpack(&x[..self.layout.state_len()]);
        let (m, nj, nt) = (
            self.layout.num_free,
            self.layout.num_withdrawal,
            self.layout.steps,
        );
        let off = self.withdrawal_offset();
        let mut d = vec![0.0; m * nt];
        for n in 0..nt {
            d[n * m..n * m + nj].copy_from_slice(&x[off + n * nj..off + (n + 1) * nj]);
        }
        let f = self.friction_offset();
        let friction = x[f..f + self.num_parents()]
            .iter()
            .zip(&self.problem.friction_prior)
            .map(|(t, p)| t * p)
            .collect();
        (state, d, friction)
    }

    /// Packs a state, per-junction withdrawals and λ into a variable vector.
    pub fn pack(
        &self,
        state: &SpaceTimeState,
        withdrawal: &[Vec<f64>],
        friction: &[f64],
    ) -> Vec<f64> {
        let mut x = state.pack();
        let nt = self.layout.steps;
        for n in 0..nt {
            x.extend(withdrawal.iter().map(|s| s[n]));
        }
        x.extend(
            friction
                .iter()
                .zip(&self.problem.friction_prior)
                .map(|(l, p)| l / p),
        );
        x
    }

    /// Steady state at the time-averaged readings (unmetered withdrawals 0)
    /// and the initial friction, refined by a transient solve when it
    /// succeeds.
    fn initial_guess(&self) -> Vec<f64> {
        let p = self.problem;
        let r = &p.refined;
        let nt = p.grid.steps;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let friction: Vec<f64> = p
            .friction_prior
            .iter()
            .zip(&p.friction_bounds)
            .map(|(l, &(lo, hi))| (l * p.options.friction_init_factor).clamp(lo, hi))
            .collect();
        let options = SimulationOptions {
            smoothing: p.options.smoothing,
            ..SimulationOptions::default()
        };
        let mut r_init = r.clone();
        r_init.parent_friction = friction.clone();
        let profiles = BoundaryProfiles {
            grid: p.grid,
            withdrawal: p.withdrawal.clone(),
            supply_density: p.supply.clone(),
            ratio: p.ratio.clone(),
        };
        let mut state = self.template.clone();
        let transient = transient_simulate(&r_init, &profiles, &options);
        match transient {
            Ok(sim) => state = sim.state,
            Err(err) => {
                warn!("transient initialization failed ({err}); starting from a steady state");
                let avg_d: Vec<f64> = p.withdrawal.iter().map(|s| mean(s)).collect();
                let avg_s: Vec<f64> = p.supply.iter().map(|s| mean(s)).collect();
                let avg_a: Vec<f64> = p.ratio.iter().map(|s| mean(s)).collect();
                let (m, e) = (r.num_free(), r.num_segments());
                match steady_solve(r, &avg_d, &avg_s, &avg_a, &friction, &options) {
                    Ok(st) => {
                        for n in 0..nt {
                            state.rho[n * m..(n + 1) * m].copy_from_slice(&st.rho);
                            state.phi[n * e..(n + 1) * e].copy_from_slice(&st.phi);
                        }
                    }
                    Err(err) => {
                        warn!(
                            "steady initialization failed ({err}); starting from uniform density"
                        );
                        let s0 = avg_s.iter().sum::<f64>() / avg_s.len().max(1) as f64;
                        state.rho.iter_mut().for_each(|v| *v = s0);
                    }
                }
            }
        }
        self.pack(&state, &p.withdrawal, &friction)
    }

    fn jacobian_triplets(&self, x: &[f64]) -> Vec<(usize, usize, f64)> {
        let (state, _, friction) = self.unpack(x);
        let off = self.friction_offset();
        let prior = &self.problem.friction_prior;
        let mut t = self
            .system
            .jacobian_triplets(&state, &friction, &self.layout);
        for entry in &mut t {
            if entry.1 >= off {
                entry.2 *= prior[entry.1 - off];
            }
        }
        t
    }

    /// Lower-triangle Hessian entries of `σ·f + Σ y_i c_i`, in a fixed order.
    fn hessian_entries(&self, x: &[f64], obj_factor: f64, y: &[f64]) -> Vec<(usize, usize, f64)> {
        let p = self.problem;
        let lay = &self.layout;
        let (m, e, nt, nj) = (lay.num_free, lay.num_edges, lay.steps, lay.num_withdrawal);
        let b = self.system.num_slack();
        let dt = p.grid.dt();
        let eps = self.system.eps;
        let foff = self.friction_offset();
        let mut h = Vec::with_capacity(nt * (2 * nj + 4 * e));
        let lengths = &self.system.incidence.lengths;
        for n in 0..nt {
            for j in 0..nj {
                let i = lay.rho(n, j);
                h.push((i, i, obj_factor * 2.0 * dt * p.density_weight[j]));
            }
            let rho_phi = &x[n * (m + e)..(n + 1) * (m + e)];
            let phi = &rho_phi[m..];
            for k in 0..e {
                let row = n * (m + e) + m + k;
                let yk = y[row];
                let (from, to, parent) = self.segment_ends(k);
                let (tr, hr) = self.system.ratios(n, k);
                let theta = x[foff + parent];
                let c0 = lengths[k] * self.segment_group(k) * p.friction_prior[parent];
                let ip = lay.phi(n, k);
                h.push((ip, ip, yk * c0 * theta * signed_square_d2(phi[k], eps)));
                h.push((foff + parent, ip, yk * c0 * signed_square_d1(phi[k], eps)));
                if to >= b {
                    let i = lay.rho(n, to - b);
                    h.push((i, i, 2.0 * hr * hr * yk));
                }
                if from >= b {
                    let i = lay.rho(n, from - b);
                    h.push((i, i, -2.0 * tr * tr * yk));
                }
            }
        }
        let doff = self.withdrawal_offset();
        for n in 0..nt {
            for j in 0..nj {
                let i = doff + n * nj + j;
                h.push((i, i, obj_factor * 2.0 * dt * p.withdrawal_weight[j]));
            }
        }
        h
    }

    fn segment_ends(&self, k: usize) -> (usize, usize, usize) {
        let s = &self.problem.refined.segments[k];
        (s.from, s.to, s.parent)
    }

    fn segment_group(&self, k: usize) -> f64 {
        self.problem.refined.segments[k].friction_group
    }
}

impl Nlp for EstimationNlp<'_> {
    fn num_vars(&self) -> usize {
        self.friction_offset() + self.num_parents()
    }

    fn num_cons(&self) -> usize {
        self.system.residual_len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.problem;
        let lay = &self.layout;
        let n = self.num_vars();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        let b = p.refined.num_slack;
        for t in 0..lay.steps {
            for j in 0..lay.num_free {
                let node = &p.refined.nodes[b + j];
                lo[lay.rho(t, j)] = node.density_min;
                hi[lay.rho(t, j)] = node.density_max;
            }
            for j in 0..lay.num_withdrawal {
                if !p.withdrawal_metered[j] {
                    let i = lay.withdrawal(t, j).expect("junction withdrawal");
                    lo[i] = -p.withdrawal_bound;
                    hi[i] = p.withdrawal_bound;
                }
            }
        }
        let f = self.friction_offset();
        for (k, (&(l, u), prior)) in p.friction_bounds.iter().zip(&p.friction_prior).enumerate() {
            lo[f + k] = l / prior;
            hi[f + k] = u / prior;
        }
        (lo, hi)
    }

    fn initial_point(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let p = self.problem;
        let lay = &self.layout;
        let mut total = 0.0;
        for n in 0..lay.steps {
            for j in 0..lay.num_withdrawal {
                let r = x[lay.rho(n, j)] - p.density[j][n];
                let d = x[lay.withdrawal(n, j).expect("junction withdrawal")] - p.withdrawal[j][n];
                total += p.density_weight[j] * r * r + p.withdrawal_weight[j] * d * d;
            }
        }
        p.grid.dt() * total
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let p = self.problem;
        let lay = &self.layout;
        let dt = p.grid.dt();
        let mut g = vec![0.0; x.len()];
        for n in 0..lay.steps {
            for j in 0..lay.num_withdrawal {
                let i = lay.rho(n, j);
                g[i] = 2.0 * dt * p.density_weight[j] * (x[i] - p.density[j][n]);
                let i = lay.withdrawal(n, j).expect("junction withdrawal");
                g[i] = 2.0 * dt * p.withdrawal_weight[j] * (x[i] - p.withdrawal[j][n]);
            }
        }
        g
    }

    fn constraints(&self, x: &[f64]) -> Vec<f64> {
        let (state, d, friction) = self.unpack(x);
        self.system
            .residual(&state, &d, &friction)
            .expect("dimensions fixed at construction")
    }

    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        self.jac_pattern.clone()
    }

    fn jacobian_values(&self, x: &[f64]) -> Vec<f64> {
        self.jacobian_triplets(x).into_iter().map(|t| t.2).collect()
    }

    fn hessian_structure(&self) -> Vec<(usize, usize)> {
        self.hess_pattern.clone()
    }

    fn hessian_values(&self, x: &[f64], obj_factor: f64, y: &[f64]) -> Vec<f64> {
        self.hessian_entries(x, obj_factor, y)
            .into_iter()
            .map(|t| t.2)
            .collect()
    }
}

/// Solves an estimation problem. A run that hits the iteration limit
/// returns its best iterate with `converged == false`.
pub fn solve(problem: &EstimationProblem) -> Result<EstimationSolution> {
    let start = Instant::now();
    let nlp = EstimationNlp::new(problem)?;
    let opts = IpmOptions {
        tol: problem.options.tol,
        constraint_tol: problem.options.constraint_tol,
        max_iterations: problem.options.max_iterations,
        mu_init: problem.options.barrier_init,
        final_barrier: Some(problem.options.barrier_final),
        ..IpmOptions::default()
    };
    info!(
        "estimating with {} variables and {} constraints",
        nlp.num_vars(),
        nlp.num_cons()
    );
    let result = ipm::solve(&nlp, &opts)?;
    let (state, d, friction) = nlp.unpack(&result.x);
    let lay = nlp.layout();
    let nj = lay.num_withdrawal;
    let withdrawal: Vec<Vec<f64>> = (0..nj)
        .map(|j| (0..lay.steps).map(|n| d[n * lay.num_free + j]).collect())
        .collect();
    let (lo, hi) = nlp.bounds();
    let near =
        |v: f64, bound: f64| bound.is_finite() && (v - bound).abs() <= 1e-6 * bound.abs().max(1.0);
    let mut activity = BoundActivity::default();
    for n in 0..lay.steps {
        for j in 0..lay.num_free {
            let i = lay.rho(n, j);
            activity.density_lower += near(result.x[i], lo[i]) as usize;
            activity.density_upper += near(result.x[i], hi[i]) as usize;
        }
        for j in 0..nj {
            let i = lay.withdrawal(n, j).expect("junction withdrawal");
            activity.withdrawal_lower += near(result.x[i], lo[i]) as usize;
            activity.withdrawal_upper += near(result.x[i], hi[i]) as usize;
        }
    }
    let f = lay.friction_offset.expect("friction is unknown");
    for (k, id) in problem.refined.parent_ids.iter().enumerate() {
        if near(result.x[f + k], lo[f + k]) {
            activity.friction_lower.push(id.clone());
        }
        if near(result.x[f + k], hi[f + k]) {
            activity.friction_upper.push(id.clone());
        }
    }
    let converged = result.status == IpmStatus::Converged;
    if !converged {
        warn!("estimation stopped at the iteration limit; returning the best iterate");
    }
    Ok(EstimationSolution {
        state,
        withdrawal,
        friction,
        objective: result.objective,
        converged,
        iterations: result.iterations,
        kkt_error: result.kkt_error,
        constraint_violation: result.constraint_violation,
        dual_infeasibility: result.dual_infeasibility,
        complementarity: result.complementarity,
        bound_activity: activity,
        trace: result.trace,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// An SI view of a solution for reporting.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub solution: EstimationSolution,
    /// Refined-graph state in SI units.
    pub state_table: SeriesTable,
    /// Estimated withdrawals (SI) per non-slack junction.
    pub withdrawal_table: SeriesTable,
}

/// Scales SI data, solves and converts the results back to SI.
pub fn estimate(
    model: &Model,
    data: &EstimationData,
    weights: &Weights,
    steps: Option<usize>,
    options: &EstimationOptions,
) -> Result<Estimate> {
    let problem = EstimationProblem::new(model, data, weights, steps, options)?;
    let solution = solve(&problem)?;
    let state_table = model.state_table(&solution.state);
    let ids: Vec<String> = model
        .network
        .nonslack_junctions()
        .map(|j| j.id.clone())
        .collect();
    let withdrawal_table = SeriesTable::new(
        state_table.grid,
        ids,
        solution
            .withdrawal
            .iter()
            .map(|s| s.iter().map(|v| v * model.scales.withdrawal()).collect())
            .collect(),
    );
    Ok(Estimate {
        solution,
        state_table,
        withdrawal_table,
    })
}

/// Root mean square difference of the free-node densities of two states.
pub fn state_rmse(a: &SpaceTimeState, b: &SpaceTimeState) -> f64 {
    let n = a.rho.len().max(1);
    (a.rho
        .iter()
        .zip(&b.rho)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64)
        .sqrt()
}

/// Per-junction withdrawal series of profiles, non-slack junction order.
pub fn withdrawal_series(refined: &RefinedNetwork, profiles: &BoundaryProfiles) -> Vec<Vec<f64>> {
    let m = refined.num_free();
    let traj = withdrawal_trajectory(refined, profiles);
    (0..refined.num_physical_free())
        .map(|j| (0..profiles.grid.steps).map(|n| traj[n * m + j]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{GasProperties, JunctionKind, JunctionSpec, PipeSpec};
    use crate::simulator::{inject_noise, NoiseSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn junction(id: &str, slack: bool) -> JunctionSpec {
        JunctionSpec {
            id: id.into(),
            kind: if slack {
                JunctionKind::Slack
            } else {
                JunctionKind::NonSlack
            },
            density_min: None,
            density_max: None,
        }
    }

    fn pipe(id: &str, from: &str, to: &str, length: f64, diameter: f64, friction: f64) -> PipeSpec {
        PipeSpec {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            length,
            diameter,
            friction,
            area: None,
        }
    }

    /// Slack `s` feeding `a` and `b` in a path; no refinement below 60 km.
    fn path3(order: &[&str]) -> GasNetwork {
        let junctions = order.iter().map(|id| junction(id, *id == "s")).collect();
        GasNetwork::new(
            GasProperties::from_sound_speed(377.0),
            junctions,
            vec![
                pipe("p", "s", "a", 30_000.0, 0.5, 0.011),
                pipe("q", "a", "b", 20_000.0, 0.4, 0.009),
            ],
            vec![],
        )
        .unwrap()
    }

    fn path3_profiles(net: &GasNetwork, steps: usize) -> BoundaryProfiles {
        let grid = TimeGrid::new(86_400.0, steps).unwrap();
        let phase = |n: usize| 2.0 * std::f64::consts::PI * n as f64 / steps as f64;
        let series = |id: &str| -> Vec<f64> {
            match id {
                "a" => (0..steps).map(|n| 25.0 + 8.0 * phase(n).sin()).collect(),
                _ => (0..steps).map(|n| 30.0 + 10.0 * phase(n).cos()).collect(),
            }
        };
        BoundaryProfiles {
            grid,
            withdrawal: net.nonslack_junctions().map(|j| series(&j.id)).collect(),
            supply_density: vec![vec![5.2e6 / (377.0 * 377.0); steps]],
            ratio: vec![],
        }
    }

    fn twin(
        net: GasNetwork,
        steps: usize,
        segment: f64,
    ) -> (Model, EstimationData, crate::simulator::Simulation) {
        let _ = env_logger::builder().is_test(true).try_init();
        let model = Model::new(net, segment, 50_000.0).unwrap();
        let prof = path3_profiles(&model.network, steps);
        let sim = model
            .simulate(&prof, None, &SimulationOptions::default())
            .unwrap();
        let meas = inject_noise(&model, &sim, &prof, &NoiseSpec::none()).unwrap();
        (model, EstimationData::new(&prof, meas), sim)
    }

    #[test]
    fn objective_quadrature() {
        let grid = TimeGrid::new(24.0, 12).unwrap();
        let one = vec![vec![1.0; 12]];
        let zero = vec![vec![0.0; 12]];
        let cost = evaluate_objective(&one, &zero, &zero, &zero, &[1.0], &[1.0], grid).unwrap();
        assert!((cost - 24.0).abs() < 1e-12);
        assert_eq!(
            evaluate_objective(&one, &one, &zero, &zero, &[1.0], &[1.0], grid).unwrap(),
            0.0
        );
        let rho = vec![(0..12).map(|n| 0.1 * n as f64).collect::<Vec<_>>()];
        let single = evaluate_objective(&zero, &zero, &rho, &zero, &[1.0], &[1.0], grid).unwrap();
        let double = evaluate_objective(&zero, &zero, &rho, &zero, &[1.0], &[2.0], grid).unwrap();
        assert_eq!(double, 2.0 * single);
        assert!(matches!(
            evaluate_objective(&one, &zero, &zero, &zero, &[1.0, 1.0], &[1.0], grid),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn problem_dimensions() {
        let (model, data, _) = twin(path3(&["s", "a", "b"]), 8, 60_000.0);
        let problem = EstimationProblem::new(
            &model,
            &data,
            &Weights::default(),
            None,
            &EstimationOptions::default(),
        )
        .unwrap();
        let nlp = EstimationNlp::new(&problem).unwrap();
        assert_eq!(nlp.num_vars(), 2 * 8 + 2 * 8 + 2 * 8 + 2);
        assert_eq!(nlp.num_cons(), 4 * 8);

        let metered: BTreeSet<String> = ["b".to_string()].into();
        let masked = EstimationProblem::new(
            &model,
            &data.restrict(&metered),
            &Weights::default(),
            None,
            &EstimationOptions::default(),
        )
        .unwrap();
        assert_eq!(masked.density_weight, vec![0.0, 1.0]);
        assert_eq!(masked.withdrawal_weight, vec![0.0, 1.0]);
        assert_eq!(EstimationNlp::new(&masked).unwrap().num_vars(), 50);
        let (lo, hi) = EstimationNlp::new(&masked).unwrap().bounds();
        let i = nlp.layout().withdrawal(0, 0).unwrap();
        assert!(lo[i].is_finite() && hi[i] == -lo[i]);
        let i = nlp.layout().withdrawal(0, 1).unwrap();
        assert!(lo[i].is_infinite() && hi[i].is_infinite());
    }

    #[test]
    fn inverted_boxes_are_rejected() {
        let (model, data, _) = twin(path3(&["s", "a", "b"]), 8, 60_000.0);
        let opts = EstimationOptions {
            friction_bounds: (2.0, 0.5),
            ..EstimationOptions::default()
        };
        assert!(matches!(
            EstimationProblem::new(&model, &data, &Weights::default(), None, &opts),
            Err(Error::InfeasibleBoxes(_))
        ));
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (model, data, _) = twin(path3(&["s", "a", "b"]), 6, 12_000.0);
        let opts = EstimationOptions {
            smoothing: 1e-3,
            ..EstimationOptions::default()
        };
        let problem =
            EstimationProblem::new(&model, &data, &Weights::default(), None, &opts).unwrap();
        let nlp = EstimationNlp::new(&problem).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = nlp.initial_point();
        let x: Vec<f64> = x0
            .iter()
            .map(|v| v * (1.0 + 0.05 * rng.random_range(-1.0..1.0)))
            .collect();
        let y: Vec<f64> = (0..nlp.num_cons())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let h = 1e-6;
        let n = x.len();
        let g = nlp.gradient(&x);
        let jac = crate::sparse::CsrMatrix::from_triplets(
            nlp.num_cons(),
            n,
            &nlp.jacobian_structure()
                .into_iter()
                .zip(nlp.jacobian_values(&x))
                .map(|((r, c), v)| (r, c, v))
                .collect::<Vec<_>>(),
        );
        let hess = crate::sparse::CsrMatrix::from_triplets(
            n,
            n,
            &nlp.hessian_structure()
                .into_iter()
                .zip(nlp.hessian_values(&x, 0.7, &y))
                .map(|((r, c), v)| (r, c, v))
                .collect::<Vec<_>>(),
        );
        let lagrangian_grad = |x: &[f64]| -> Vec<f64> {
            let j = crate::sparse::CsrMatrix::from_triplets(
                nlp.num_cons(),
                n,
                &nlp.jacobian_structure()
                    .into_iter()
                    .zip(nlp.jacobian_values(x))
                    .map(|((r, c), v)| (r, c, v))
                    .collect::<Vec<_>>(),
            );
            let jty = j.matvec_t(&y);
            nlp.gradient(x)
                .iter()
                .zip(jty)
                .map(|(a, b)| 0.7 * a + b)
                .collect()
        };
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (nlp.objective(&xp) - nlp.objective(&xm)) / (2.0 * h);
            assert!(rel_close(g[i], fd, 1e-6), "gradient {i}: {} vs {fd}", g[i]);
            let (cp, cm) = (nlp.constraints(&xp), nlp.constraints(&xm));
            for r in 0..nlp.num_cons() {
                let fd = (cp[r] - cm[r]) / (2.0 * h);
                assert!(
                    rel_close(jac.get(r, i), fd, 1e-6),
                    "jacobian ({r}, {i}): {} vs {fd}",
                    jac.get(r, i)
                );
            }
            let (lp, lm) = (lagrangian_grad(&xp), lagrangian_grad(&xm));
            for r in i..n {
                let fd = (lp[r] - lm[r]) / (2.0 * h);
                let exact = hess.get(r, i) + if r == i { 0.0 } else { hess.get(i, r) };
                assert!(
                    rel_close(exact, fd, 1e-5),
                    "hessian ({r}, {i}): {exact} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn noiseless_twin_recovers_friction() {
        let (model, data, sim) = twin(path3(&["s", "a", "b"]), 12, 10_000.0);
        let opts = EstimationOptions {
            friction_init_factor: 2.0,
            ..EstimationOptions::default()
        };
        let problem =
            EstimationProblem::new(&model, &data, &Weights::default(), None, &opts).unwrap();
        let sol = solve(&problem).unwrap();
        assert!(sol.converged);
        assert!(sol.kkt_error <= 1e-4);
        for (est, truth) in sol.friction.iter().zip(&model.refined.parent_friction) {
            assert!(((est - truth) / truth).abs() < 1e-3, "{est} vs {truth}");
        }
        let rmse = state_rmse(&sol.state, &sim.state);
        assert!(rmse < 1e-6, "state rmse {rmse}");
        assert!(sol.constraint_violation <= 1e-8);
    }

    #[test]
    fn truth_as_start_converges_quickly() {
        let (model, data, _) = twin(path3(&["s", "a", "b"]), 12, 10_000.0);
        let problem = EstimationProblem::new(
            &model,
            &data,
            &Weights::default(),
            None,
            &EstimationOptions::default(),
        )
        .unwrap();
        let sol = solve(&problem).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 3, "{} iterations", sol.iterations);
        assert!(sol.objective < 1e-10);
    }

    #[test]
    fn objective_is_invariant_under_relabeling() {
        let mut objectives = Vec::new();
        for order in [["s", "a", "b"], ["b", "s", "a"]] {
            let net = path3(&order);
            let model = Model::new(net, 10_000.0, 50_000.0).unwrap();
            let prof = path3_profiles(&model.network, 8);
            let sim = model
                .simulate(&prof, None, &SimulationOptions::default())
                .unwrap();
            let noise = NoiseSpec {
                density: 0.01,
                withdrawal: 0.01,
                seed: 3,
            };
            let mut meas = inject_noise(&model, &sim, &prof, &noise).unwrap();
            // Same readings regardless of junction order.
            for (id, s) in meas.density.iter_mut() {
                let k = if id == "a" { 1.0 } else { -1.0 };
                s.iter_mut()
                    .enumerate()
                    .for_each(|(n, v)| *v *= 1.0 + 0.003 * k * (n as f64).sin());
            }
            for (id, s) in meas.withdrawal.iter_mut() {
                let truth = prof
                    .withdrawal
                    .iter()
                    .zip(model.network.nonslack_junctions())
                    .find(|(_, j)| &j.id == id)
                    .unwrap()
                    .0;
                s.copy_from_slice(truth);
                s[0] += 0.1;
            }
            let problem = EstimationProblem::new(
                &model,
                &EstimationData::new(&prof, meas),
                &Weights::default(),
                None,
                &EstimationOptions::default(),
            )
            .unwrap();
            objectives.push(solve(&problem).unwrap().objective);
        }
        assert!(
            rel_close(objectives[0], objectives[1], 1e-6),
            "{objectives:?}"
        );
    }

    #[test]
    fn measurement_table_round_trip() {
        let (model, data, _) = twin(path3(&["s", "a", "b"]), 8, 60_000.0);
        let metered: BTreeSet<String> = ["a".to_string()].into();
        let data = data.restrict(&metered);
        let table = data.to_table(&model.network);
        assert_eq!(table.columns, vec!["s", "rho:a", "d:a"]);
        let back = EstimationData::from_table(&model.network, &table).unwrap();
        assert_eq!(back, data);
    }
}
