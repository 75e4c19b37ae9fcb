//! Gas network data model: junctions, pipes and compressors on a directed
//! graph, plus the measurement sets attached to it.
//!
//! Everything here is dimensional (SI). A [`GasNetwork`] is immutable once
//! built and always satisfies the structural invariants checked by
//! [`GasNetwork::new`]: at least one slack junction, a connected graph, and
//! a slack-first junction ordering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dae::TimeGrid;
use crate::error::{Error, Result};

/// Pressure used for the default lower density bound (Pa).
pub const DEFAULT_PRESSURE_MIN: f64 = 3.0e6;
/// Pressure used for the default upper density bound (Pa).
pub const DEFAULT_PRESSURE_MAX: f64 = 6.0e6;

const EOS_RTOL: f64 = 1e-9;

/// Gas state constants for the isothermal ideal equation of state `p = a²ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasProperties {
    /// Speed of sound (m/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sound_speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressibility: Option<f64>,
    /// Specific gas constant (J/(kg·K)).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gas_constant: Option<f64>,
    /// Gas temperature (K).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl GasProperties {
    pub fn from_sound_speed(a: f64) -> Self {
        GasProperties {
            sound_speed: Some(a),
            compressibility: None,
            gas_constant: None,
            temperature: None,
        }
    }

    /// Resolves the speed of sound, deriving it from `Z·R·T` when not given
    /// and checking consistency when all four constants are present.
    pub fn resolve(&self) -> Result<f64> {
        let zrt = match (self.compressibility, self.gas_constant, self.temperature) {
            (Some(z), Some(r), Some(t)) => {
                if !(z > 0.0 && r > 0.0 && t > 0.0) {
                    return Err(Error::invariant("gas", "Z, R and T must be positive"));
                }
                Some(z * r * t)
            }
            (None, None, None) => None,
            _ => {
                return Err(Error::invariant(
                    "gas",
                    "compressibility, gas_constant and temperature must be given together",
                ))
            }
        };
        match (self.sound_speed, zrt) {
            (Some(a), _) if !(a > 0.0 && a.is_finite()) => Err(Error::invariant(
                "gas",
                format!("sound speed must be positive, got {a}"),
            )),
            (Some(a), Some(zrt)) => {
                if ((a * a - zrt) / zrt).abs() > EOS_RTOL {
                    Err(Error::invariant(
                        "gas",
                        format!("a² = {} disagrees with Z·R·T = {zrt}", a * a),
                    ))
                } else {
                    Ok(a)
                }
            }
            (Some(a), None) => Ok(a),
            (None, Some(zrt)) => Ok(zrt.sqrt()),
            (None, None) => Err(Error::invariant(
                "gas",
                "either sound_speed or (compressibility, gas_constant, temperature) is required",
            )),
        }
    }
}

/// Ideal equation of state: density from pressure.
pub fn pressure_to_density(pressure: f64, sound_speed: f64) -> Result<f64> {
    if pressure < 0.0 {
        return Err(Error::NegativePressure(pressure));
    }
    Ok(pressure / (sound_speed * sound_speed))
}

pub fn density_to_pressure(density: f64, sound_speed: f64) -> f64 {
    density * sound_speed * sound_speed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JunctionKind {
    /// Supply junction with a prescribed density.
    Slack,
    /// Junction with a (measured or estimated) withdrawal.
    NonSlack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub id: String,
    pub kind: JunctionKind,
    /// Lower density bound (kg/m³).
    pub density_min: f64,
    /// Upper density bound (kg/m³).
    pub density_max: f64,
}

impl Junction {
    pub fn is_slack(&self) -> bool {
        self.kind == JunctionKind::Slack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipe {
    pub id: String,
    pub from: usize,
    pub to: usize,
    /// Length (m).
    pub length: f64,
    /// Diameter (m).
    pub diameter: f64,
    /// Darcy-Weisbach friction factor.
    pub friction: f64,
    /// Cross-sectional area (m²).
    pub area: f64,
}

/// Which end of a pipe a compressor boosts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    /// Located at the `from` junction, boosting gas entering the pipe there.
    #[serde(rename = "+")]
    Plus,
    /// Located at the `to` junction, boosting gas entering the pipe there.
    #[serde(rename = "-")]
    Minus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    pub id: String,
    pub pipe: usize,
    pub orientation: Orientation,
    /// Smallest admissible ratio; 1 for boosting stations.
    pub min_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GasNetwork {
    pub gas: GasProperties,
    sound_speed: f64,
    junctions: Vec<Junction>,
    pipes: Vec<Pipe>,
    compressors: Vec<Compressor>,
    junction_index: HashMap<String, usize>,
    pipe_index: HashMap<String, usize>,
}

// --- file schema -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    gas: GasProperties,
    junctions: Vec<JunctionFile>,
    pipes: Vec<PipeFile>,
    #[serde(default)]
    compressors: Vec<CompressorFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JunctionFile {
    id: String,
    kind: JunctionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    density_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    density_max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipeFile {
    id: String,
    from: String,
    to: String,
    length: f64,
    diameter: f64,
    friction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompressorFile {
    id: String,
    pipe: String,
    orientation: Orientation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_ratio: Option<f64>,
}

/// Builder-side description of a junction, used by [`GasNetwork::new`].
#[derive(Debug, Clone)]
pub struct JunctionSpec {
    pub id: String,
    pub kind: JunctionKind,
    pub density_min: Option<f64>,
    pub density_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipeSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length: f64,
    pub diameter: f64,
    pub friction: f64,
    pub area: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CompressorSpec {
    pub id: String,
    pub pipe: String,
    pub orientation: Orientation,
    pub min_ratio: Option<f64>,
}

impl From<JunctionFile> for JunctionSpec {
    fn from(j: JunctionFile) -> Self {
        JunctionSpec {
            id: j.id,
            kind: j.kind,
            density_min: j.density_min,
            density_max: j.density_max,
        }
    }
}

impl From<PipeFile> for PipeSpec {
    fn from(p: PipeFile) -> Self {
        PipeSpec {
            id: p.id,
            from: p.from,
            to: p.to,
            length: p.length,
            diameter: p.diameter,
            friction: p.friction,
            area: p.area,
        }
    }
}

impl From<CompressorFile> for CompressorSpec {
    fn from(c: CompressorFile) -> Self {
        CompressorSpec {
            id: c.id,
            pipe: c.pipe,
            orientation: c.orientation,
            min_ratio: c.min_ratio,
        }
    }
}

fn positive(value: f64) -> bool {
    value > 0.0 && value.is_finite()
}

impl GasNetwork {
    /// Validates the parts and assembles a network. Junctions are ordered
    /// slack-first and then by id; pipes and compressors by id.
    pub fn new(
        gas: GasProperties,
        junctions: Vec<JunctionSpec>,
        pipes: Vec<PipeSpec>,
        compressors: Vec<CompressorSpec>,
    ) -> Result<Self> {
        let a = gas.resolve()?;
        let default_min = pressure_to_density(DEFAULT_PRESSURE_MIN, a)?;
        let default_max = pressure_to_density(DEFAULT_PRESSURE_MAX, a)?;

        let mut seen = BTreeSet::new();
        let mut js = Vec::with_capacity(junctions.len());
        for j in junctions {
            if j.id.is_empty() {
                return Err(Error::invariant("junction", "empty id"));
            }
            if !seen.insert(j.id.clone()) {
                return Err(Error::invariant(
                    format!("junction {}", j.id),
                    "duplicate id",
                ));
            }
            let lo = j.density_min.unwrap_or(default_min);
            let hi = j.density_max.unwrap_or(default_max);
            if !(positive(lo) && positive(hi) && lo < hi) {
                return Err(Error::invariant(
                    format!("junction {}", j.id),
                    format!("density bounds must satisfy 0 < min < max, got [{lo}, {hi}]"),
                ));
            }
            js.push(Junction {
                id: j.id,
                kind: j.kind,
                density_min: lo,
                density_max: hi,
            });
        }
        js.sort_by(|x, y| x.kind.cmp(&y.kind).then_with(|| x.id.cmp(&y.id)));
        if !js.iter().any(Junction::is_slack) {
            return Err(Error::invariant("network", "no slack junction"));
        }
        let junction_index: HashMap<String, usize> = js
            .iter()
            .enumerate()
            .map(|(i, j)| (j.id.clone(), i))
            .collect();

        let mut pipes = pipes;
        pipes.sort_by(|x, y| x.id.cmp(&y.id));
        let mut ps = Vec::with_capacity(pipes.len());
        let mut pipe_index = HashMap::new();
        for p in pipes {
            let entity = format!("pipe {}", p.id);
            if p.id.is_empty() {
                return Err(Error::invariant("pipe", "empty id"));
            }
            if pipe_index.contains_key(&p.id) {
                return Err(Error::invariant(entity, "duplicate id"));
            }
            let from = *junction_index
                .get(&p.from)
                .ok_or_else(|| Error::invariant(&entity, format!("unknown junction {}", p.from)))?;
            let to = *junction_index
                .get(&p.to)
                .ok_or_else(|| Error::invariant(&entity, format!("unknown junction {}", p.to)))?;
            if from == to {
                return Err(Error::invariant(
                    entity,
                    "pipe connects a junction to itself",
                ));
            }
            for (name, v) in [
                ("length", p.length),
                ("diameter", p.diameter),
                ("friction", p.friction),
            ] {
                if !positive(v) {
                    return Err(Error::invariant(
                        &entity,
                        format!("{name} must be positive, got {v}"),
                    ));
                }
            }
            let area = match p.area {
                Some(x) if !positive(x) => {
                    return Err(Error::invariant(
                        &entity,
                        format!("area must be positive, got {x}"),
                    ))
                }
                Some(x) => x,
                None => PI * p.diameter * p.diameter / 4.0,
            };
            pipe_index.insert(p.id.clone(), ps.len());
            ps.push(Pipe {
                id: p.id,
                from,
                to,
                length: p.length,
                diameter: p.diameter,
                friction: p.friction,
                area,
            });
        }
        if ps.is_empty() {
            return Err(Error::invariant("network", "no pipes"));
        }

        let mut compressors = compressors;
        compressors.sort_by(|x, y| x.id.cmp(&y.id));
        let mut cs: Vec<Compressor> = Vec::with_capacity(compressors.len());
        let mut ids = BTreeSet::new();
        for c in compressors {
            let entity = format!("compressor {}", c.id);
            if !ids.insert(c.id.clone()) {
                return Err(Error::invariant(entity, "duplicate id"));
            }
            let pipe = *pipe_index
                .get(&c.pipe)
                .ok_or_else(|| Error::invariant(&entity, format!("unknown pipe {}", c.pipe)))?;
            if cs
                .iter()
                .any(|o| o.pipe == pipe && o.orientation == c.orientation)
            {
                return Err(Error::invariant(
                    entity,
                    format!("pipe {} already has a compressor at that end", c.pipe),
                ));
            }
            let min_ratio = c.min_ratio.unwrap_or(1.0);
            if !positive(min_ratio) {
                return Err(Error::invariant(entity, "min_ratio must be positive"));
            }
            cs.push(Compressor {
                id: c.id,
                pipe,
                orientation: c.orientation,
                min_ratio,
            });
        }

        let net = GasNetwork {
            gas,
            sound_speed: a,
            junctions: js,
            pipes: ps,
            compressors: cs,
            junction_index,
            pipe_index,
        };
        net.check_connected()?;
        Ok(net)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.junctions.len();
        let mut adj = vec![Vec::new(); n];
        for p in &self.pipes {
            adj[p.from].push(p.to);
            adj[p.to].push(p.from);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::invariant(
                format!("junction {}", self.junctions[i].id),
                "not connected to the rest of the network",
            )),
            None => Ok(()),
        }
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text).map_err(|e| {
            use serde_json::error::Category;
            match e.classify() {
                Category::Data => Error::SchemaViolation {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                },
                _ => Error::MalformedFile {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                },
            }
        })?;
        GasNetwork::new(
            file.gas,
            file.junctions.into_iter().map(Into::into).collect(),
            file.pipes.into_iter().map(Into::into).collect(),
            file.compressors.into_iter().map(Into::into).collect(),
        )
    }

    /// Serializes with every derived field spelled out so that parsing the
    /// output reproduces this network exactly.
    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            gas: self.gas,
            junctions: self
                .junctions
                .iter()
                .map(|j| JunctionFile {
                    id: j.id.clone(),
                    kind: j.kind,
                    density_min: Some(j.density_min),
                    density_max: Some(j.density_max),
                })
                .collect(),
            pipes: self
                .pipes
                .iter()
                .map(|p| PipeFile {
                    id: p.id.clone(),
                    from: self.junctions[p.from].id.clone(),
                    to: self.junctions[p.to].id.clone(),
                    length: p.length,
                    diameter: p.diameter,
                    friction: p.friction,
                    area: Some(p.area),
                })
                .collect(),
            compressors: self
                .compressors
                .iter()
                .map(|c| CompressorFile {
                    id: c.id.clone(),
                    pipe: self.pipes[c.pipe].id.clone(),
                    orientation: c.orientation,
                    min_ratio: Some(c.min_ratio),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn pipes(&self) -> &[Pipe] {
        &self.pipes
    }

    pub fn compressors(&self) -> &[Compressor] {
        &self.compressors
    }

    pub fn junction_index(&self, id: &str) -> Option<usize> {
        self.junction_index.get(id).copied()
    }

    pub fn pipe_index(&self, id: &str) -> Option<usize> {
        self.pipe_index.get(id).copied()
    }

    pub fn num_slack(&self) -> usize {
        self.junctions.iter().filter(|j| j.is_slack()).count()
    }

    pub fn slack_junctions(&self) -> impl Iterator<Item = &Junction> {
        self.junctions.iter().filter(|j| j.is_slack())
    }

    pub fn nonslack_junctions(&self) -> impl Iterator<Item = &Junction> {
        self.junctions.iter().filter(|j| !j.is_slack())
    }

    /// Total pipe length (m).
    pub fn total_length(&self) -> f64 {
        self.pipes.iter().map(|p| p.length).sum()
    }

    /// Scales every friction factor by `factor`.
    pub fn apply_efficiency_factor(&self, factor: f64) -> Result<GasNetwork> {
        if !positive(factor) {
            return Err(Error::NonpositiveFactor(factor));
        }
        let mut out = self.clone();
        for p in &mut out.pipes {
            p.friction *= factor;
        }
        Ok(out)
    }

    /// Replaces friction factors, e.g. with estimates. `friction` is in pipe order.
    pub fn with_friction(&self, friction: &[f64]) -> Result<GasNetwork> {
        if friction.len() != self.pipes.len() {
            return Err(Error::dims(
                "friction factors",
                self.pipes.len(),
                friction.len(),
            ));
        }
        let mut out = self.clone();
        for (p, &f) in out.pipes.iter_mut().zip(friction) {
            if !positive(f) {
                return Err(Error::invariant(
                    format!("pipe {}", p.id),
                    "friction must be positive",
                ));
            }
            p.friction = f;
        }
        Ok(out)
    }
}

pub fn parse_network(path: impl AsRef<Path>) -> Result<GasNetwork> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GasNetwork::from_json_str(&text, path)
}

/// Noisy observations at non-slack junctions, one value per grid point.
/// A junction absent from a map is unmetered for that quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub grid: TimeGrid,
    /// Densities (kg/m³) keyed by junction id.
    pub density: BTreeMap<String, Vec<f64>>,
    /// Withdrawals (kg/s) keyed by junction id.
    pub withdrawal: BTreeMap<String, Vec<f64>>,
}

impl MeasurementSet {
    pub fn validate(&self, network: &GasNetwork) -> Result<()> {
        for (kind, map) in [("density", &self.density), ("withdrawal", &self.withdrawal)] {
            for (id, series) in map {
                let idx = network.junction_index(id).ok_or_else(|| {
                    Error::invariant(format!("{kind} series {id}"), "unknown junction")
                })?;
                if network.junctions()[idx].is_slack() {
                    return Err(Error::invariant(
                        format!("{kind} series {id}"),
                        "measurements are only taken at non-slack junctions",
                    ));
                }
                if series.len() != self.grid.steps {
                    return Err(Error::dims(
                        format!("{kind} series {id}"),
                        self.grid.steps,
                        series.len(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn density_mask(&self, network: &GasNetwork) -> Vec<bool> {
        network
            .nonslack_junctions()
            .map(|j| self.density.contains_key(&j.id))
            .collect()
    }

    pub fn withdrawal_mask(&self, network: &GasNetwork) -> Vec<bool> {
        network
            .nonslack_junctions()
            .map(|j| self.withdrawal.contains_key(&j.id))
            .collect()
    }

    /// Keeps only the junctions listed in `metered`.
    pub fn restrict(&self, metered: &BTreeSet<String>) -> MeasurementSet {
        let keep = |m: &BTreeMap<String, Vec<f64>>| {
            m.iter()
                .filter(|(k, _)| metered.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        MeasurementSet {
            grid: self.grid,
            density: keep(&self.density),
            withdrawal: keep(&self.withdrawal),
        }
    }
}
