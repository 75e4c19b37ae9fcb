//! Spatial graph refinement: every pipe is split into equal segments whose
//! length `L̂` lies in the window `Δ·L/(Δ + L) < L̂ < Δ`.
//!
//! Node order of the refined graph: the original junctions in their network
//! order (slack first), followed by the auxiliary nodes. Auxiliary nodes are
//! non-slack, carry no withdrawal and are never measured.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::network::Orientation;
use crate::nondim::NondimNetwork;

/// Absolute slack on the lower window bound, which exact multiples
/// `L = k·Δ` meet with equality.
pub const WINDOW_SLACK: f64 = 1e-12;
const CEIL_TIE: f64 = 1e-12;

/// Lumping diagnostic threshold above which a warning is issued.
pub const LUMPING_WARN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOrigin {
    Junction(usize),
    /// `position`-th interior node (1-based) of parent pipe `pipe`.
    Auxiliary {
        pipe: usize,
        position: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedNode {
    pub label: String,
    pub slack: bool,
    pub origin: NodeOrigin,
    pub density_min: f64,
    pub density_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub label: String,
    pub from: usize,
    pub to: usize,
    pub length: f64,
    /// Parent pipe index (the surjection onto the original edges).
    pub parent: usize,
    pub friction_group: f64,
    pub area: f64,
    /// Compressor boosting the `from` end, if any.
    pub tail_compressor: Option<usize>,
    /// Compressor boosting the `to` end, if any.
    pub head_compressor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedNetwork {
    pub nodes: Vec<RefinedNode>,
    pub segments: Vec<Segment>,
    /// λ per parent pipe.
    pub parent_friction: Vec<f64>,
    pub parent_ids: Vec<String>,
    pub parent_lengths: Vec<f64>,
    /// Segment index range for each parent pipe.
    pub segments_of: Vec<Range<usize>>,
    pub num_slack: usize,
    /// Number of original junctions; they occupy node indices `0..num_physical`.
    pub num_physical: usize,
    pub compressor_ids: Vec<String>,
    /// Maximum segment length Δ used.
    pub max_segment_length: f64,
}

impl RefinedNetwork {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Number of non-slack nodes (M).
    pub fn num_free(&self) -> usize {
        self.nodes.len() - self.num_slack
    }

    /// Non-slack junctions of the original network; they are the first
    /// `num_physical_free` free nodes.
    pub fn num_physical_free(&self) -> usize {
        self.num_physical - self.num_slack
    }

    /// Momentum coefficient `L̂·ℓ0·λ/D` of a segment for a given parent friction.
    pub fn momentum_coefficient(&self, k: usize, friction: &[f64]) -> f64 {
        let s = &self.segments[k];
        s.length * s.friction_group * friction[s.parent]
    }
}

/// Number of equal segments for a pipe of length `length`.
pub fn segment_count(length: f64, max_len: f64) -> usize {
    ((length / max_len + CEIL_TIE).ceil() as usize).max(1)
}

/// Whether `seg` lies in the refinement window for parent length `parent`.
pub fn in_window(seg: f64, parent: f64, max_len: f64) -> bool {
    let lower = max_len * parent / (max_len + parent);
    seg > lower - WINDOW_SLACK && seg < max_len
}

pub fn refine_graph(network: &NondimNetwork, max_len: f64) -> Result<RefinedNetwork> {
    if !(max_len > 0.0 && max_len.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "segment length must be positive, got {max_len}"
        )));
    }
    let mut nodes: Vec<RefinedNode> = network
        .junctions
        .iter()
        .enumerate()
        .map(|(i, j)| RefinedNode {
            label: j.id.clone(),
            slack: j.slack,
            origin: NodeOrigin::Junction(i),
            density_min: j.density_min,
            density_max: j.density_max,
        })
        .collect();
    let mut segments = Vec::new();
    let mut segments_of = Vec::with_capacity(network.pipes.len());

    for (pi, pipe) in network.pipes.iter().enumerate() {
        if !(pipe.length > 0.0) {
            return Err(Error::invariant(
                format!("pipe {}", pipe.id),
                "length must be positive",
            ));
        }
        let n = segment_count(pipe.length, max_len);
        let seg_len = pipe.length / n as f64;
        if !in_window(seg_len, pipe.length, max_len) {
            return Err(Error::InfeasibleRefinement {
                pipe: pipe.id.clone(),
                segment_length: max_len,
            });
        }
        let (a, b) = (&network.junctions[pipe.from], &network.junctions[pipe.to]);
        let lo = a.density_min.max(b.density_min);
        let hi = a.density_max.min(b.density_max);
        if n > 1 && lo >= hi {
            return Err(Error::invariant(
                format!("pipe {}", pipe.id),
                "end junction density bounds do not overlap",
            ));
        }
        let tail = network
            .compressors
            .iter()
            .position(|c| c.pipe == pi && c.orientation == Orientation::Plus);
        let head = network
            .compressors
            .iter()
            .position(|c| c.pipe == pi && c.orientation == Orientation::Minus);

        let first_aux = nodes.len();
        for position in 1..n {
            nodes.push(RefinedNode {
                label: format!("{}@{}", pipe.id, position),
                slack: false,
                origin: NodeOrigin::Auxiliary { pipe: pi, position },
                density_min: lo,
                density_max: hi,
            });
        }
        let start = segments.len();
        for s in 0..n {
            let from = if s == 0 { pipe.from } else { first_aux + s - 1 };
            let to = if s + 1 == n { pipe.to } else { first_aux + s };
            segments.push(Segment {
                label: format!("{}#{}", pipe.id, s),
                from,
                to,
                length: seg_len,
                parent: pi,
                friction_group: pipe.friction_group,
                area: pipe.area,
                tail_compressor: if s == 0 { tail } else { None },
                head_compressor: if s + 1 == n { head } else { None },
            });
        }
        segments_of.push(start..segments.len());
    }

    Ok(RefinedNetwork {
        nodes,
        segments,
        parent_friction: network.pipes.iter().map(|p| p.friction).collect(),
        parent_ids: network.pipes.iter().map(|p| p.id.clone()).collect(),
        parent_lengths: network.pipes.iter().map(|p| p.length).collect(),
        segments_of,
        num_slack: network.num_slack,
        num_physical: network.junctions.len(),
        compressor_ids: network.compressors.iter().map(|c| c.id.clone()).collect(),
        max_segment_length: max_len,
    })
}
