//! Point-trajectory <-> heatmap-stack conversion and softargmax decoding.

use crate::core::GridShape;

/// Per-timestep spatial grids, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub steps: usize,
    pub shape: GridShape,
    /// steps * h * w, row-major within each step.
    pub grid: Vec<f64>,
}

impl HeatmapStack {
    pub fn step(&self, k: usize) -> &[f64] {
        let n = self.shape.len();
        &self.grid[k * n..(k + 1) * n]
    }
}

/// The predictor's input: H trajectory heatmaps concatenated with C
/// segmentation channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStack {
    pub heatmaps: HeatmapStack,
    /// C * h * w.
    pub seg: Vec<f64>,
    pub classes: usize,
}

impl ObservationStack {
    pub fn channel_count(&self) -> usize {
        self.heatmaps.steps + self.classes
    }

    /// Concatenated (H + C) * h * w buffer, heatmaps first.
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity((self.channel_count()) * self.heatmaps.shape.len());
        out.extend_from_slice(&self.heatmaps.grid);
        out.extend_from_slice(&self.seg);
        out
    }
}

/// Peak-normalized Gaussian kernel around `point` (x, y). The mean may lie
/// outside the grid; values are computed from true distance either way.
pub fn rasterize_gaussian(point: (f64, f64), shape: GridShape, sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let (x, y) = point;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut grid = vec![0.0; shape.len()];
    for r in 0..shape.h {
        let dy = r as f64 - y;
        for c in 0..shape.w {
            let dx = c as f64 - x;
            grid[r * shape.w + c] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    grid
}

pub fn trajectory_to_heatmaps(points: &[(f64, f64)], shape: GridShape, sigma: f64) -> HeatmapStack {
    let mut grid = Vec::with_capacity(points.len() * shape.len());
    for &p in points {
        grid.extend(rasterize_gaussian(p, shape, sigma));
    }
    HeatmapStack { steps: points.len(), shape, grid }
}

/// Softmax-weighted expectation of pixel coordinates: returns (x, y).
pub fn soft_argmax(grid: &[f64], shape: GridShape, beta: f64) -> (f64, f64) {
    assert!(beta > 0.0, "beta must be positive");
    assert_eq!(grid.len(), shape.len());
    let max = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    let mut ex = 0.0;
    let mut ey = 0.0;
    for r in 0..shape.h {
        for c in 0..shape.w {
            let q = ((grid[r * shape.w + c] - max) * beta).exp();
            denom += q;
            ex += q * c as f64;
            ey += q * r as f64;
        }
    }
    (ex / denom, ey / denom)
}

/// Per-step softargmax over a predicted stack.
pub fn decode_prediction(pred: &HeatmapStack, beta: f64) -> Vec<(f64, f64)> {
    (0..pred.steps).map(|k| soft_argmax(pred.step(k), pred.shape, beta)).collect()
}
