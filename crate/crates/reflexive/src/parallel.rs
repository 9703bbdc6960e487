//! Multi-threaded counterpart of the sequential simulation grid.
//!
//! Every (rho, replication) cell is independent and seeded on its own, and
//! aggregation happens after collection in a fixed order, so the output is
//! identical to the sequential runner bit for bit.

use rayon::prelude::*;
use reflexive_core::sim::{aggregate, grid_notes, replicate};
use reflexive_core::{Result, SimConfig, SimResult};

pub fn run_grid_parallel(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let cells: Vec<(usize, usize)> = (0..config.rho_grid.len())
        .flat_map(|i| (0..config.reps).map(move |rep| (i, rep)))
        .collect();
    let estimates = cells
        .par_iter()
        .map(|&(i, rep)| replicate(config, config.rho_grid[i], rep))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, chunk) in estimates.chunks(config.reps).enumerate() {
        rows.extend(aggregate(config, config.rho_grid[i], chunk)?);
    }
    Ok(SimResult {
        rows,
        notes: grid_notes(config),
    })
}

/// Parallel version of [`reflexive_core::reproduce_figure`].
pub fn reproduce_figure_parallel(id: u32, seed: u64, reps: usize) -> Result<Vec<(usize, SimResult)>> {
    reflexive_core::sim::figure_configs(id, seed, reps)?
        .into_iter()
        .map(|c| Ok((c.n, run_grid_parallel(&c)?)))
        .collect()
}
