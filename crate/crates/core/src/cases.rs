//! Bundled synthetic networks: a 6-junction tree with one compressor and a
//! seeded 78-junction looped network of realistic transmission scale.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dae::TimeGrid;
use crate::error::Result;
use crate::network::{
    pressure_to_density, CompressorSpec, GasNetwork, GasProperties, JunctionKind, JunctionSpec,
    Orientation, PipeSpec,
};
use crate::profiles::BoundaryProfiles;

pub const SOUND_SPEED: f64 = 377.0;
pub const DAY: f64 = 86_400.0;

fn junction(id: &str, kind: JunctionKind, p_min: f64, p_max: f64) -> JunctionSpec {
    JunctionSpec {
        id: id.into(),
        kind,
        density_min: Some(pressure_to_density(p_min, SOUND_SPEED).expect("positive")),
        density_max: Some(pressure_to_density(p_max, SOUND_SPEED).expect("positive")),
    }
}

fn pipe(id: &str, from: &str, to: &str, km: f64, diameter: f64, friction: f64) -> PipeSpec {
    PipeSpec {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length: km * 1000.0,
        diameter,
        friction,
        area: None,
    }
}

fn phase(n: usize, steps: usize) -> f64 {
    2.0 * PI * n as f64 / steps as f64
}

/// Slack `S` feeding junctions `J1`..`J5`; compressor `C1` boosts into `P2`.
pub fn six_node() -> GasNetwork {
    let (lo, hi) = (3.5e6, 7.0e6);
    let junctions = ["S", "J1", "J2", "J3", "J4", "J5"]
        .iter()
        .map(|id| {
            let kind = if *id == "S" {
                JunctionKind::Slack
            } else {
                JunctionKind::NonSlack
            };
            junction(id, kind, lo, hi)
        })
        .collect();
    let pipes = vec![
        pipe("P1", "S", "J1", 40.0, 0.6, 0.01),
        pipe("P2", "J1", "J2", 50.0, 0.5, 0.01),
        pipe("P3", "J2", "J3", 30.0, 0.4, 0.01),
        pipe("P4", "J2", "J4", 40.0, 0.4, 0.01),
        pipe("P5", "J1", "J5", 25.0, 0.3, 0.01),
    ];
    let compressors = vec![CompressorSpec {
        id: "C1".into(),
        pipe: "P2".into(),
        orientation: Orientation::Plus,
        min_ratio: None,
    }];
    GasNetwork::new(
        GasProperties::from_sound_speed(SOUND_SPEED),
        junctions,
        pipes,
        compressors,
    )
    .expect("six-node network is valid")
}

/// One day of profiles for [`six_node`]: daily withdrawal cycles, a slowly
/// varying supply pressure and a modulated compressor.
pub fn six_node_profiles(steps: usize) -> Result<BoundaryProfiles> {
    let grid = TimeGrid::new(DAY, steps)?;
    // J1..J5 base withdrawals (kg/s) and phase offsets.
    let base = [5.0, 0.0, 20.0, 15.0, 10.0];
    let offset = [0.0, 0.0, 0.6, 1.3, 2.1];
    let withdrawal = base
        .iter()
        .zip(offset)
        .map(|(&w, o)| {
            (0..steps)
                .map(|n| w * (1.0 + 0.3 * (phase(n, steps) + o).sin()))
                .collect()
        })
        .collect();
    let s0 = pressure_to_density(5.5e6, SOUND_SPEED)?;
    let supply = vec![(0..steps)
        .map(|n| s0 * (1.0 + 0.01 * phase(n, steps).cos()))
        .collect()];
    let ratio = vec![(0..steps)
        .map(|n| 1.15 + 0.03 * phase(n, steps).sin())
        .collect()];
    Ok(BoundaryProfiles {
        grid,
        withdrawal,
        supply_density: supply,
        ratio,
    })
}

pub const LARGE_JUNCTIONS: usize = 78;
pub const LARGE_PIPES: usize = 95;
pub const LARGE_COMPRESSORS: usize = 4;
pub const LARGE_METERED: usize = 31;
/// Total pipe length of the large case (km).
pub const LARGE_TOTAL_KM: f64 = 714.95;
pub const LARGE_SEED: u64 = 20_190_731;

/// A looped network with 2 supply junctions, 78 junctions in all, 95 pipes
/// (18 independent loops) and 4 compressors, generated from a fixed seed.
pub fn large_network() -> GasNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(LARGE_SEED);
    // The second supply sits mid-network so that no pipe joins two supplies.
    let second = LARGE_JUNCTIONS / 2;
    let slack = |i: usize| i == 0 || i == second;
    let ids: Vec<String> = (0..LARGE_JUNCTIONS)
        .map(|i| match i {
            0 => "S1".to_string(),
            i if i == second => "S2".to_string(),
            i if i < second => format!("N{i:02}"),
            i => format!("N{:02}", i - 1),
        })
        .collect();
    let (lo, hi) = (2.5e6, 8.0e6);
    let junctions = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let kind = if slack(i) {
                JunctionKind::Slack
            } else {
                JunctionKind::NonSlack
            };
            junction(id, kind, lo, hi)
        })
        .collect();

    // Random recursive tree, then chords between distinct non-adjacent pairs.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut present = BTreeSet::new();
    for v in 1..LARGE_JUNCTIONS {
        let u = rng.random_range(v.saturating_sub(6)..v);
        edges.push((u, v));
        present.insert((u.min(v), u.max(v)));
    }
    while edges.len() < LARGE_PIPES {
        let u = rng.random_range(0..LARGE_JUNCTIONS);
        let v = rng.random_range(0..LARGE_JUNCTIONS);
        let key = (u.min(v), u.max(v));
        if u == v || u.abs_diff(v) > 12 || (slack(u) && slack(v)) || !present.insert(key) {
            continue;
        }
        edges.push(key);
    }
    let raw: Vec<f64> = (0..LARGE_PIPES)
        .map(|_| rng.random_range(2.0..14.0))
        .collect();
    let total: f64 = raw.iter().sum();
    let diameters = [0.6, 0.75, 0.9];
    let pipes: Vec<PipeSpec> = edges
        .iter()
        .zip(&raw)
        .enumerate()
        .map(|(k, (&(u, v), &len))| {
            // Round to metres while keeping the total exact.
            let km = (len * LARGE_TOTAL_KM / total * 1000.0).round() / 1000.0;
            pipe(
                &format!("P{:03}", k + 1),
                &ids[u],
                &ids[v],
                km,
                diameters[rng.random_range(0..diameters.len())],
                rng.random_range(0.008..0.014),
            )
        })
        .collect();
    let mut pipes = pipes;
    let sum: f64 = pipes.iter().map(|p| p.length).sum();
    pipes[0].length += LARGE_TOTAL_KM * 1000.0 - sum;
    pipes[0].length = (pipes[0].length * 1000.0).round() / 1000.0;

    let mut tree: Vec<usize> = (0..LARGE_JUNCTIONS - 1).collect();
    tree.shuffle(&mut rng);
    let compressors = tree[..LARGE_COMPRESSORS]
        .iter()
        .enumerate()
        .map(|(i, &k)| CompressorSpec {
            id: format!("C{}", i + 1),
            pipe: pipes[k].id.clone(),
            orientation: Orientation::Plus,
            min_ratio: None,
        })
        .collect();
    GasNetwork::new(
        GasProperties::from_sound_speed(SOUND_SPEED),
        junctions,
        pipes,
        compressors,
    )
    .expect("large network is valid")
}

/// Daily profiles for [`large_network`]: every non-slack junction withdraws
/// on its own daily cycle, which keeps all loops carrying flow.
pub fn large_profiles(network: &GasNetwork, steps: usize) -> Result<BoundaryProfiles> {
    let mut rng = ChaCha8Rng::seed_from_u64(LARGE_SEED + 1);
    let grid = TimeGrid::new(DAY, steps)?;
    let withdrawal = network
        .nonslack_junctions()
        .map(|_| {
            let base = rng.random_range(0.3..2.5);
            let (amp, off) = (rng.random_range(0.1..0.4), rng.random_range(0.0..2.0 * PI));
            (0..steps)
                .map(|n| base * (1.0 + amp * (phase(n, steps) + off).sin()))
                .collect()
        })
        .collect();
    let s0 = pressure_to_density(5.0e6, SOUND_SPEED)?;
    let supply = (0..network.num_slack())
        .map(|i| {
            (0..steps)
                .map(|n| s0 * (1.0 + 0.01 * (phase(n, steps) + i as f64).cos()))
                .collect()
        })
        .collect();
    let ratio = network
        .compressors()
        .iter()
        .map(|_| {
            let base = rng.random_range(1.05..1.15);
            (0..steps)
                .map(|n| base + 0.02 * phase(n, steps).sin())
                .collect()
        })
        .collect();
    Ok(BoundaryProfiles {
        grid,
        withdrawal,
        supply_density: supply,
        ratio,
    })
}

/// The 31 metered junctions of the large case, chosen by a seeded shuffle
/// that prefers junctions with nonzero withdrawal.
pub fn large_mask(network: &GasNetwork, profiles: &BoundaryProfiles) -> BTreeSet<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(LARGE_SEED + 2);
    let mut active: Vec<String> = Vec::new();
    let mut idle: Vec<String> = Vec::new();
    for (j, s) in network.nonslack_junctions().zip(&profiles.withdrawal) {
        if s.iter().any(|v| *v != 0.0) {
            active.push(j.id.clone());
        } else {
            idle.push(j.id.clone());
        }
    }
    active.shuffle(&mut rng);
    idle.shuffle(&mut rng);
    active.into_iter().chain(idle).take(LARGE_METERED).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_node_shape() {
        let net = six_node();
        assert_eq!(net.junctions().len(), 6);
        assert_eq!(net.pipes().len(), 5);
        assert_eq!(net.compressors().len(), 1);
        six_node_profiles(24).unwrap().validate(&net).unwrap();
    }

    #[test]
    fn large_shape() {
        let net = large_network();
        assert_eq!(net.junctions().len(), LARGE_JUNCTIONS);
        assert_eq!(net.pipes().len(), LARGE_PIPES);
        assert_eq!(net.compressors().len(), LARGE_COMPRESSORS);
        assert!((net.total_length() - LARGE_TOTAL_KM * 1000.0).abs() < 1e-6);
        assert_eq!(net, large_network());
        let p = large_profiles(&net, 24).unwrap();
        p.validate(&net).unwrap();
        assert_eq!(large_mask(&net, &p).len(), LARGE_METERED);
    }

    #[test]
    fn cases_simulate_inside_bounds() {
        use crate::simulator::{Model, SimulationOptions};
        for (net, prof) in [
            (six_node(), six_node_profiles(24).unwrap()),
            (
                large_network(),
                large_profiles(&large_network(), 24).unwrap(),
            ),
        ] {
            let model = Model::with_defaults(net).unwrap();
            let sim = model
                .simulate(&prof, None, &SimulationOptions::default())
                .unwrap();
            let r = &model.refined;
            let b = r.num_slack;
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for n in 0..sim.state.grid.steps {
                for (j, rho) in sim.state.rho_at(n).iter().enumerate() {
                    let node = &r.nodes[b + j];
                    assert!(
                        *rho > node.density_min && *rho < node.density_max,
                        "{} {rho}",
                        node.label
                    );
                    lo = lo.min(*rho);
                    hi = hi.max(*rho);
                }
            }
            eprintln!(
                "nodes {} segments {} iterations {} density range [{lo:.3}, {hi:.3}] lumping {:.3}",
                r.num_nodes(),
                r.num_segments(),
                sim.iterations,
                sim.lumping_diagnostic()
            );
        }
    }
}
