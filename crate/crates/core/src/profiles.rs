use serde::{Deserialize, Serialize};

use crate::dae::TimeGrid;
use crate::error::{Error, Result};
use crate::network::GasNetwork;
use crate::timeseries::SeriesTable;

/// Periodic boundary data on one circular time grid.
///
/// Series are stored per entity, `series[n]` for `n in 0..grid.steps`; the
/// value at `t = T` is the value at index 0. Units are whatever the owner
/// uses: SI for profiles read from files, scaled after nondimensionalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProfiles {
    pub grid: TimeGrid,
    /// Withdrawal per non-slack junction, in network order. Negative values
    /// are injections.
    pub withdrawal: Vec<Vec<f64>>,
    /// Supply density per slack junction, in network order.
    pub supply_density: Vec<Vec<f64>>,
    /// Compression ratio per compressor, in network order.
    pub ratio: Vec<Vec<f64>>,
}

impl BoundaryProfiles {
    pub fn validate(&self, network: &GasNetwork) -> Result<()> {
        let steps = self.grid.steps;
        let nonslack: Vec<_> = network.nonslack_junctions().collect();
        let slack: Vec<_> = network.slack_junctions().collect();
        if self.withdrawal.len() != nonslack.len() {
            return Err(Error::dims(
                "withdrawal profiles",
                nonslack.len(),
                self.withdrawal.len(),
            ));
        }
        if self.supply_density.len() != slack.len() {
            return Err(Error::dims(
                "supply profiles",
                slack.len(),
                self.supply_density.len(),
            ));
        }
        if self.ratio.len() != network.compressors().len() {
            return Err(Error::dims(
                "compressor profiles",
                network.compressors().len(),
                self.ratio.len(),
            ));
        }
        for (j, s) in nonslack.iter().zip(&self.withdrawal) {
            if s.len() != steps {
                return Err(Error::dims(format!("withdrawal {}", j.id), steps, s.len()));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invariant(
                    format!("withdrawal {}", j.id),
                    "non-finite value",
                ));
            }
        }
        for (j, s) in slack.iter().zip(&self.supply_density) {
            if s.len() != steps {
                return Err(Error::dims(format!("supply {}", j.id), steps, s.len()));
            }
            if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::invariant(
                    format!("supply {}", j.id),
                    "supply density must be positive",
                ));
            }
        }
        for (c, s) in network.compressors().iter().zip(&self.ratio) {
            if s.len() != steps {
                return Err(Error::dims(format!("compressor {}", c.id), steps, s.len()));
            }
            if let Some(n) = s.iter().position(|&a| !(a >= c.min_ratio && a.is_finite())) {
                return Err(Error::invariant(
                    format!("compressor {}", c.id),
                    format!(
                        "ratio {} at time index {n} is below the minimum {}",
                        s[n], c.min_ratio
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Picks columns by junction and compressor id. Slack columns hold
    /// densities, non-slack columns withdrawals, compressor columns ratios.
    pub fn from_table(network: &GasNetwork, table: &SeriesTable) -> Result<Self> {
        for c in &table.columns {
            if network.junction_index(c).is_none()
                && !network.compressors().iter().any(|k| &k.id == c)
            {
                return Err(Error::invariant(
                    format!("column {c}"),
                    "unknown junction or compressor",
                ));
            }
        }
        let take = |id: &str, what: &str| -> Result<Vec<f64>> {
            table
                .column(id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::invariant(format!("{what} {id}"), "no profile column"))
        };
        let withdrawal = network
            .nonslack_junctions()
            .map(|j| take(&j.id, "junction"))
            .collect::<Result<_>>()?;
        let supply_density = network
            .slack_junctions()
            .map(|j| take(&j.id, "junction"))
            .collect::<Result<_>>()?;
        let ratio = network
            .compressors()
            .iter()
            .map(|c| {
                table
                    .column(&c.id)
                    .map(<[f64]>::to_vec)
                    .ok_or(Error::MissingRatio {
                        compressor: c.id.clone(),
                        index: 0,
                    })
            })
            .collect::<Result<_>>()?;
        let profiles = BoundaryProfiles {
            grid: table.grid,
            withdrawal,
            supply_density,
            ratio,
        };
        profiles.validate(network)?;
        Ok(profiles)
    }

    pub fn to_table(&self, network: &GasNetwork) -> SeriesTable {
        let mut columns = Vec::new();
        let mut values = Vec::new();
        for (j, s) in network.slack_junctions().zip(&self.supply_density) {
            columns.push(j.id.clone());
            values.push(s.clone());
        }
        for (j, s) in network.nonslack_junctions().zip(&self.withdrawal) {
            columns.push(j.id.clone());
            values.push(s.clone());
        }
        for (c, s) in network.compressors().iter().zip(&self.ratio) {
            columns.push(c.id.clone());
            values.push(s.clone());
        }
        SeriesTable::new(self.grid, columns, values)
    }

    /// Constant profiles equal to the period average of each series.
    pub fn time_averaged(&self) -> BoundaryProfiles {
        let avg = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.iter()
                .map(|s| {
                    let m = s.iter().sum::<f64>() / s.len() as f64;
                    vec![m; s.len()]
                })
                .collect()
        };
        BoundaryProfiles {
            grid: self.grid,
            withdrawal: avg(&self.withdrawal),
            supply_density: avg(&self.supply_density),
            ratio: avg(&self.ratio),
        }
    }

    /// Resamples all series onto `steps` points of the same horizon.
    pub fn resample(&self, steps: usize) -> Result<BoundaryProfiles> {
        let grid = TimeGrid::new(self.grid.horizon, steps)?;
        let rs = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.iter()
                .map(|s| crate::timeseries::resample_periodic(s, steps))
                .collect()
        };
        Ok(BoundaryProfiles {
            grid,
            withdrawal: rs(&self.withdrawal),
            supply_density: rs(&self.supply_density),
            ratio: rs(&self.ratio),
        })
    }
}
