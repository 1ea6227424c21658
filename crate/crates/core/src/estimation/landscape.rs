//! Residual over the full polar search grid, for heatmaps and for counting
//! local minima.

use std::io::{self, Write};

use super::{residual, EstimationError, RangingWindow, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub i_phi: i64,
    pub i_theta: i64,
    pub phi: f64,
    pub theta: f64,
    /// Residual divided by the window length (m²).
    pub mean_residual: f64,
}

/// A (2w+1)×(2w+1) grid stored row-major with φ as the row index.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGrid {
    pub steps: i64,
    pub cells: Vec<GridCell>,
}

impl ResidualGrid {
    pub fn side(&self) -> usize {
        2 * self.steps as usize + 1
    }

    pub fn at(&self, i_phi: i64, i_theta: i64) -> &GridCell {
        let side = self.side() as i64;
        &self.cells[((i_phi + self.steps) * side + (i_theta + self.steps)) as usize]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "i_phi,i_theta,phi,theta,mean_residual")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.9e}",
                c.i_phi, c.i_theta, c.phi, c.theta, c.mean_residual
            )?;
        }
        Ok(())
    }
}

pub fn residual_grid(window: &RangingWindow, cfg: &SearchConfig) -> Result<ResidualGrid, EstimationError> {
    cfg.validate()?;
    let w = cfg.steps();
    let radius = cfg.radius(window);
    let n = window.len() as f64;
    let mut cells = Vec::with_capacity(cfg.candidate_count());
    for i_phi in -w..=w {
        for i_theta in -w..=w {
            let cand = cfg.candidate(radius, i_phi, i_theta);
            cells.push(GridCell {
                i_phi,
                i_theta,
                phi: cfg.delta * i_phi as f64,
                theta: cfg.delta * i_theta as f64,
                mean_residual: residual(&cand, window)? / n,
            });
        }
    }
    Ok(ResidualGrid { steps: w, cells })
}

/// Cells strictly below all of their (up to eight) in-grid neighbours.
pub fn local_minima(grid: &ResidualGrid) -> Vec<GridCell> {
    let w = grid.steps;
    let mut out = Vec::new();
    for i_phi in -w..=w {
        for i_theta in -w..=w {
            let v = grid.at(i_phi, i_theta).mean_residual;
            let mut is_min = true;
            'scan: for dp in -1..=1 {
                for dt in -1..=1 {
                    if dp == 0 && dt == 0 {
                        continue;
                    }
                    let (p, t) = (i_phi + dp, i_theta + dt);
                    if p < -w || p > w || t < -w || t > w {
                        continue;
                    }
                    if grid.at(p, t).mean_residual <= v {
                        is_min = false;
                        break 'scan;
                    }
                }
            }
            if is_min {
                out.push(*grid.at(i_phi, i_theta));
            }
        }
    }
    out
}
