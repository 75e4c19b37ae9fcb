//! Scaling between SI quantities and the non-dimensional variables used by
//! every solver: `t̂ = t·a/ℓ0`, `x̂ = x/ℓ0`, `ρ̂ = ρ/ρ0`, `φ̂ = φ/(a·ρ0)`.
//!
//! Withdrawals are mass flows through a reference area `X0`, so
//! `d̂ = d/(X0·a·ρ0)` and cross-sections scale as `X̂ = X/X0`.

use serde::{Deserialize, Serialize};

use crate::dae::{SpaceTimeState, TimeGrid};
use crate::error::{Error, Result};
use crate::network::{GasNetwork, Orientation};
use crate::profiles::BoundaryProfiles;

pub const DEFAULT_LENGTH_SCALE: f64 = 50_000.0;
pub const DEFAULT_PRESSURE_SCALE: f64 = 5.0e6;

const SCALE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    /// ℓ0 (m)
    pub length: f64,
    /// ρ0 (kg/m³)
    pub density: f64,
    /// a (m/s)
    pub sound_speed: f64,
    /// X0 (m²)
    pub area: f64,
}

impl Scales {
    pub fn new(length: f64, density: f64, sound_speed: f64, area: f64) -> Result<Self> {
        for (name, v) in [
            ("length", length),
            ("density", density),
            ("sound speed", sound_speed),
            ("area", area),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} scale must be positive, got {v}"
                )));
            }
        }
        Ok(Scales {
            length,
            density,
            sound_speed,
            area,
        })
    }

    /// ℓ0 = 50 km, ρ0 = density at 5 MPa, X0 = 1 m².
    pub fn for_network(network: &GasNetwork) -> Self {
        Self::with_length(network, DEFAULT_LENGTH_SCALE)
    }

    pub fn with_length(network: &GasNetwork, length: f64) -> Self {
        let a = network.sound_speed();
        Scales {
            length,
            density: DEFAULT_PRESSURE_SCALE / (a * a),
            sound_speed: a,
            area: 1.0,
        }
    }

    /// ℓ0/a (s)
    pub fn time(&self) -> f64 {
        self.length / self.sound_speed
    }

    /// a·ρ0 (kg/(m²·s))
    pub fn flux(&self) -> f64 {
        self.sound_speed * self.density
    }

    /// X0·a·ρ0 (kg/s)
    pub fn withdrawal(&self) -> f64 {
        self.area * self.flux()
    }

    pub fn check(&self, network: &GasNetwork) -> Result<()> {
        let a = network.sound_speed();
        if ((self.sound_speed - a) / a).abs() > SCALE_RTOL {
            return Err(Error::ScaleMismatch {
                scales: self.sound_speed,
                gas: a,
            });
        }
        Ok(())
    }

    pub fn grid_to_nondim(&self, grid: TimeGrid) -> TimeGrid {
        TimeGrid {
            horizon: grid.horizon / self.time(),
            steps: grid.steps,
        }
    }

    pub fn grid_to_dim(&self, grid: TimeGrid) -> TimeGrid {
        TimeGrid {
            horizon: grid.horizon * self.time(),
            steps: grid.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdJunction {
    pub id: String,
    pub slack: bool,
    pub density_min: f64,
    pub density_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdPipe {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub length: f64,
    /// λ
    pub friction: f64,
    /// ℓ0/D, so that the momentum coefficient is `λ·ℓ0/D`.
    pub friction_group: f64,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdCompressor {
    pub id: String,
    pub pipe: usize,
    pub orientation: Orientation,
    pub min_ratio: f64,
}

/// Non-dimensional copy of a [`GasNetwork`], same orderings.
#[derive(Debug, Clone, PartialEq)]
pub struct NondimNetwork {
    pub junctions: Vec<NdJunction>,
    pub pipes: Vec<NdPipe>,
    pub compressors: Vec<NdCompressor>,
    pub num_slack: usize,
}

pub fn nondimensionalize_network(network: &GasNetwork, scales: &Scales) -> Result<NondimNetwork> {
    scales.check(network)?;
    let junctions = network
        .junctions()
        .iter()
        .map(|j| NdJunction {
            id: j.id.clone(),
            slack: j.is_slack(),
            density_min: j.density_min / scales.density,
            density_max: j.density_max / scales.density,
        })
        .collect();
    let pipes = network
        .pipes()
        .iter()
        .map(|p| NdPipe {
            id: p.id.clone(),
            from: p.from,
            to: p.to,
            length: p.length / scales.length,
            friction: p.friction,
            friction_group: scales.length / p.diameter,
            area: p.area / scales.area,
        })
        .collect();
    let compressors = network
        .compressors()
        .iter()
        .map(|c| NdCompressor {
            id: c.id.clone(),
            pipe: c.pipe,
            orientation: c.orientation,
            min_ratio: c.min_ratio,
        })
        .collect();
    Ok(NondimNetwork {
        junctions,
        pipes,
        compressors,
        num_slack: network.num_slack(),
    })
}

fn scale_series(series: &[Vec<f64>], factor: f64) -> Vec<Vec<f64>> {
    series
        .iter()
        .map(|s| s.iter().map(|v| v * factor).collect())
        .collect()
}

pub fn nondimensionalize_profiles(
    profiles: &BoundaryProfiles,
    scales: &Scales,
) -> BoundaryProfiles {
    BoundaryProfiles {
        grid: scales.grid_to_nondim(profiles.grid),
        withdrawal: scale_series(&profiles.withdrawal, 1.0 / scales.withdrawal()),
        supply_density: scale_series(&profiles.supply_density, 1.0 / scales.density),
        ratio: profiles.ratio.clone(),
    }
}

pub fn redimensionalize_profiles(profiles: &BoundaryProfiles, scales: &Scales) -> BoundaryProfiles {
    BoundaryProfiles {
        grid: scales.grid_to_dim(profiles.grid),
        withdrawal: scale_series(&profiles.withdrawal, scales.withdrawal()),
        supply_density: scale_series(&profiles.supply_density, scales.density),
        ratio: profiles.ratio.clone(),
    }
}

/// Scales a network and its boundary data for the solvers.
pub fn nondimensionalize(
    network: &GasNetwork,
    profiles: &BoundaryProfiles,
    scales: &Scales,
) -> Result<(NondimNetwork, BoundaryProfiles)> {
    profiles.validate(network)?;
    Ok((
        nondimensionalize_network(network, scales)?,
        nondimensionalize_profiles(profiles, scales),
    ))
}

/// Converts a non-dimensional state to SI units (s, kg/m³, kg/(m²·s)).
pub fn redimensionalize(state: &SpaceTimeState, scales: &Scales) -> SpaceTimeState {
    SpaceTimeState {
        grid: scales.grid_to_dim(state.grid),
        num_free: state.num_free,
        num_edges: state.num_edges,
        num_slack: state.num_slack,
        rho: state.rho.iter().map(|v| v * scales.density).collect(),
        phi: state.phi.iter().map(|v| v * scales.flux()).collect(),
        supply: state.supply.iter().map(|v| v * scales.density).collect(),
    }
}

/// Inverse of [`redimensionalize`].
pub fn nondimensionalize_state(state: &SpaceTimeState, scales: &Scales) -> SpaceTimeState {
    SpaceTimeState {
        grid: scales.grid_to_nondim(state.grid),
        num_free: state.num_free,
        num_edges: state.num_edges,
        num_slack: state.num_slack,
        rho: state.rho.iter().map(|v| v / scales.density).collect(),
        phi: state.phi.iter().map(|v| v / scales.flux()).collect(),
        supply: state.supply.iter().map(|v| v / scales.density).collect(),
    }
}
