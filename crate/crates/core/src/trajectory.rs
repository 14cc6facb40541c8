//! Per-step trajectory log shared by the simulators and the harness.

use serde::Serialize;

use crate::landscapes::Region;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub theta: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub grad_dual_norm: f64,
    pub perturbation_norm: f64,
    /// Cumulative `Σ ‖θ_{s+1} − θ_s‖₂` up to this row's `θ`.
    pub path_length: f64,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub variant: String,
    pub seed: u64,
    pub variance: f64,
    pub stride: u64,
    pub horizon: u64,
    pub rows: Vec<TrajectoryRow>,
    /// First step whose iterate lies outside the starting region.
    pub exit_step: Option<u64>,
    pub final_region: Region,
    pub final_theta: Vec<f64>,
    pub path_length: f64,
    /// Running average of `gᵀUg` at the base points over the whole horizon.
    pub mean_dual_norm_sq: f64,
    /// SHA-256 over every injected noise vector, in step order.
    pub noise_digest: String,
}

impl TrajectoryRecord {
    pub fn is_consistent(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].step < w[1].step && w[0].path_length <= w[1].path_length)
    }
}
