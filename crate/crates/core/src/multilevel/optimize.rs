//! Grid-then-Brent maximization of a scalar objective over `delta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CmaError, Result};
use crate::numeric::brent_maximize;

pub const DELTA_GRID_POINTS: usize = 21;
pub const DELTA_GRID_EDGE: f64 = 0.95;
/// Outer limit used when the best grid point is an endpoint.
pub const DELTA_SEARCH_EDGE: f64 = 0.99;
pub const DELTA_XTOL: f64 = 1e-4;

/// Relative spread below which the grid values count as constant.
const FLAT_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaOptimum {
    pub delta: f64,
    pub value: f64,
    /// The objective did not vary over the grid; `delta` is the grid midpoint.
    pub flat: bool,
    /// `(delta, objective)` at every coarse grid point.
    pub grid: Vec<(f64, f64)>,
}

/// The 21 equally spaced coarse grid points on `[-0.95, 0.95]`.
pub fn delta_grid() -> Vec<f64> {
    let step = 2.0 * DELTA_GRID_EDGE / (DELTA_GRID_POINTS - 1) as f64;
    (0..DELTA_GRID_POINTS)
        .map(|i| {
            let d = -DELTA_GRID_EDGE + step * i as f64;
            if i == DELTA_GRID_POINTS / 2 {
                0.0
            } else {
                d
            }
        })
        .collect()
}

/// Maximizes `objective` over `delta`. Non-finite values are treated as
/// infeasible. Grid evaluations run in parallel.
pub fn optimize_delta<F>(objective: F) -> Result<DeltaOptimum>
where
    F: Fn(f64) -> f64 + Sync,
{
    let points = delta_grid();
    let grid: Vec<(f64, f64)> = points.par_iter().map(|&d| (d, objective(d))).collect();

    let finite: Vec<&(f64, f64)> = grid.iter().filter(|(_, v)| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(CmaError::OptimFailed(
            "objective is non-finite at every grid point".into(),
        ));
    }

    let (best_idx, best_val) = grid
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| v.is_finite())
        .fold((0usize, f64::NEG_INFINITY), |acc, (i, &(_, v))| {
            if v > acc.1 {
                (i, v)
            } else {
                acc
            }
        });

    if finite.len() == grid.len() {
        let lo = finite.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        if best_val - lo <= FLAT_RTOL * best_val.abs().max(1.0) {
            let mid = DELTA_GRID_POINTS / 2;
            return Ok(DeltaOptimum {
                delta: grid[mid].0,
                value: grid[mid].1,
                flat: true,
                grid,
            });
        }
    }

    let lo = if best_idx == 0 {
        -DELTA_SEARCH_EDGE
    } else {
        points[best_idx - 1]
    };
    let hi = if best_idx + 1 == points.len() {
        DELTA_SEARCH_EDGE
    } else {
        points[best_idx + 1]
    };
    let (x, fx) = brent_maximize(&objective, lo, hi, 0.2 * DELTA_XTOL, 200);
    let (delta, value) = if fx.is_finite() && fx >= best_val {
        (x, fx)
    } else {
        (points[best_idx], best_val)
    };
    Ok(DeltaOptimum {
        delta,
        value,
        flat: false,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_21_symmetric_points() {
        let g = delta_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[10], 0.0);
        assert!((g[0] + 0.95).abs() < 1e-15 && (g[20] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn quadratic_peak() {
        let opt = optimize_delta(|d| -(d - 0.3) * (d - 0.3)).unwrap();
        assert!((opt.delta - 0.3).abs() < 1e-4);
        assert!(!opt.flat);
    }

    #[test]
    fn constant_objective_is_flat() {
        let opt = optimize_delta(|_| -12.5).unwrap();
        assert!(opt.flat);
        assert_eq!(opt.delta, 0.0);
        assert_eq!(opt.value, -12.5);
    }

    #[test]
    fn grid_escapes_local_mode() {
        let f = |d: f64| {
            let g1 = (-(d + 0.6).powi(2) / 0.02).exp();
            let g2 = 0.7 * (-(d - 0.5).powi(2) / 0.02).exp();
            g1 + g2
        };
        let opt = optimize_delta(f).unwrap();
        assert!((opt.delta + 0.6).abs() < 1e-3, "{}", opt.delta);
    }

    #[test]
    fn boundary_maximum_extends_bracket() {
        let opt = optimize_delta(|d| d).unwrap();
        assert!(opt.delta > 0.98 && opt.delta <= DELTA_SEARCH_EDGE);
    }

    #[test]
    fn all_non_finite_fails() {
        assert!(matches!(
            optimize_delta(|_| f64::NAN),
            Err(CmaError::OptimFailed(_))
        ));
    }

    #[test]
    fn partially_infeasible_objective() {
        let opt = optimize_delta(|d| if d < 0.0 { f64::NAN } else { -(d - 0.2).powi(2) }).unwrap();
        assert!((opt.delta - 0.2).abs() < 1e-4);
    }
}
