//! 2-D Gaussian kernel density estimation over (S, Q) point clouds.
//!
//! The kernel is isotropic: K_h(d) = exp(-d² / 2h²) / (2πh²). The raw
//! estimate is the mean of kernels over the data points; a grid-normalized
//! copy (unit mass under the trapezoid-free cell-sum rule) is kept alongside
//! it for plotting and comparing shapes across styles with different n.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Evaluation grid: `nx` × `ny` points spanning the inclusive ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Grid that covers the points with 15% padding on each side.
    pub fn covering(points: &[(f64, f64)], nx: usize, ny: usize) -> Self {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let px = (0.15 * (x1 - x0)).max(1.0);
        let py = (0.15 * (y1 - y0)).max(1.0);
        GridSpec {
            x_min: x0 - px,
            x_max: x1 + px,
            y_min: y0 - py,
            y_max: y1 + py,
            nx,
            ny,
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        linspace(self.y_min, self.y_max, self.ny)
    }

    fn cell_area(&self) -> f64 {
        let dx = (self.x_max - self.x_min) / (self.nx - 1).max(1) as f64;
        let dy = (self.y_max - self.y_min) / (self.ny - 1).max(1) as f64;
        dx * dy
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + step * i as f64).collect()
}

/// Density evaluated on a grid. `raw[[iy, ix]]` is the raw KDE value at
/// (xs[ix], ys[iy]); `normalized` is `raw` rescaled so its cell-sum mass
/// over the grid is 1.
#[derive(Debug, Clone)]
pub struct KdeGrid {
    pub spec: GridSpec,
    pub bandwidth: f64,
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
}

/// Scott's rule for an isotropic 2-D kernel: n^(-1/6) times the pooled
/// standard deviation, floored to keep degenerate clouds usable.
pub fn scott_bandwidth(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let vx = points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n;
    let vy = points.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / n;
    let pooled = ((vx + vy) / 2.0).sqrt();
    (n.powf(-1.0 / 6.0) * pooled).max(1e-3)
}

/// Evaluate the Gaussian KDE of `points` on `grid`. `bandwidth` of `None`
/// selects Scott's rule.
pub fn kde_density(
    points: &[(f64, f64)],
    bandwidth: Option<f64>,
    grid: &GridSpec,
) -> Result<KdeGrid, CorpusError> {
    if points.is_empty() {
        return Err(CorpusError::NoPoints);
    }
    let h = match bandwidth {
        Some(h) if h <= 0.0 || !h.is_finite() => return Err(CorpusError::BadBandwidth(h)),
        Some(h) => h,
        None => scott_bandwidth(points),
    };
    let xs = grid.xs();
    let ys = grid.ys();
    let norm = 1.0 / (std::f64::consts::TAU * h * h);
    let inv2h2 = 1.0 / (2.0 * h * h);
    let mut raw = Array2::<f64>::zeros((ys.len(), xs.len()));
    for (iy, &gy) in ys.iter().enumerate() {
        for (ix, &gx) in xs.iter().enumerate() {
            let mut acc = 0.0;
            for &(px, py) in points {
                let d2 = (gx - px).powi(2) + (gy - py).powi(2);
                acc += (-d2 * inv2h2).exp();
            }
            raw[[iy, ix]] = acc * norm / points.len() as f64;
        }
    }
    let mass: f64 = raw.sum() * grid.cell_area();
    if mass <= 0.0 || !mass.is_finite() {
        return Err(CorpusError::NoMass);
    }
    let normalized = raw.mapv(|v| v / mass);
    Ok(KdeGrid {
        spec: grid.clone(),
        bandwidth: h,
        raw,
        normalized,
    })
}
