//! Per-resource slowdown functions and calibration of saturation curves.
//!
//! Each function maps aggregated demand on one contended resource to a
//! slowdown factor (>= 1) per kernel:
//!
//! * issue slots — proportional share of the per-SM issue ceiling, with a
//!   hard serialization rule when the partner alone saturates it;
//! * pipelines — proportional share of each pipeline's peak;
//! * memory bandwidth — piecewise-linear curve with a calibrated knee, since
//!   measurable slowdown appears below 100% aggregate utilization;
//! * L1/L2 caches — reciprocal capacity hit-rate model. These are
//!   trend-accurate: the knee and peak are calibrated, intermediate points
//!   are not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpu::{GpuSpec, ResourceDemand};

/// Contended GPU resource dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    BlockScheduler,
    IssueSlots,
    Pipelines,
    L1,
    L2,
    MemBw,
}

impl Resource {
    pub const ALL: [Resource; 6] = [
        Resource::BlockScheduler,
        Resource::IssueSlots,
        Resource::Pipelines,
        Resource::L1,
        Resource::L2,
        Resource::MemBw,
    ];
}

impl std::fmt::Display for Resource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Resource::BlockScheduler => "block_scheduler",
            Resource::IssueSlots => "issue_slots",
            Resource::Pipelines => "pipelines",
            Resource::L1 => "l1",
            Resource::L2 => "l2",
            Resource::MemBw => "membw",
        };
        f.write_str(s)
    }
}

/// Slowdown of one kernel on one resource. `serialized` means the kernel
/// makes no progress while its partner holds the resource; the factor is
/// reported as the infinity sentinel for that overlap phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceSlowdown {
    pub resource: Resource,
    pub factor: f64,
    pub serialized: bool,
}

impl ResourceSlowdown {
    fn factor(resource: Resource, factor: f64) -> Self {
        ResourceSlowdown {
            resource,
            factor,
            serialized: false,
        }
    }

    fn serialized(resource: Resource) -> Self {
        ResourceSlowdown {
            resource,
            factor: f64::INFINITY,
            serialized: true,
        }
    }
}

/// Warp-issue slowdown for a kernel demanding `d_self` warp-instructions per
/// cycle per SM next to a partner demanding `d_other`, against a ceiling of
/// `max_ipc`. A partner that saturates the scheduler alone starves this
/// kernel's warps entirely.
pub fn issue_slot_slowdown(d_self: f64, d_other: f64, max_ipc: f64) -> ResourceSlowdown {
    if d_other >= max_ipc {
        return ResourceSlowdown::serialized(Resource::IssueSlots);
    }
    let total = d_self + d_other;
    if total <= max_ipc {
        ResourceSlowdown::factor(Resource::IssueSlots, 1.0)
    } else {
        ResourceSlowdown::factor(Resource::IssueSlots, total / max_ipc)
    }
}

/// Slowdown on a single pipeline at `u_self` / `u_other` percent of its peak.
pub fn pipe_pair_slowdown(u_self: f64, u_other: f64) -> ResourceSlowdown {
    if u_self <= 0.0 {
        return ResourceSlowdown::factor(Resource::Pipelines, 1.0);
    }
    if u_other >= 100.0 {
        return ResourceSlowdown::serialized(Resource::Pipelines);
    }
    let total = u_self + u_other;
    ResourceSlowdown::factor(Resource::Pipelines, (total / 100.0).max(1.0))
}

/// Pipeline slowdown across the union of both kernels' pipelines: the worst
/// single pipeline decides.
pub fn pipeline_slowdown(
    self_util: &std::collections::BTreeMap<String, f64>,
    other_util: &std::collections::BTreeMap<String, f64>,
    spec: &GpuSpec,
) -> Result<ResourceSlowdown> {
    let mut worst = ResourceSlowdown::factor(Resource::Pipelines, 1.0);
    for (pipe, &u_self) in self_util {
        if !spec.has_pipeline(pipe) {
            return Err(Error::UnknownPipeline(pipe.clone()));
        }
        let u_other = other_util.get(pipe).copied().unwrap_or(0.0);
        let s = pipe_pair_slowdown(u_self, u_other);
        if s.serialized {
            return Ok(s);
        }
        if s.factor > worst.factor {
            worst = s;
        }
    }
    for pipe in other_util.keys() {
        if !spec.has_pipeline(pipe) {
            return Err(Error::UnknownPipeline(pipe.clone()));
        }
    }
    Ok(worst)
}

/// Fitted knee/slope of one piecewise-linear saturation curve:
/// slowdown(U) = 1 for U <= knee, else 1 + slope * (U - knee).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseFit {
    /// Aggregated utilization (%) where slowdown departs from 1.
    pub knee: f64,
    /// Slowdown per utilization point above the knee.
    pub slope: f64,
    /// Absolute error of the fit for every calibration point, in input order.
    pub fit_residuals: Vec<f64>,
}

impl PiecewiseFit {
    pub fn eval(&self, aggregated_util: f64) -> f64 {
        if aggregated_util <= self.knee {
            1.0
        } else {
            1.0 + self.slope * (aggregated_util - self.knee)
        }
    }
}

/// Fallback bandwidth curve when no calibration is available: no slowdown
/// until full aggregate utilization, then a shallow slope.
pub fn uncalibrated_membw_fit() -> PiecewiseFit {
    PiecewiseFit {
        knee: 100.0,
        slope: 0.01,
        fit_residuals: Vec::new(),
    }
}

const KNEE_GRID_MAX: f64 = 200.0;
const KNEE_GRID_STEP: f64 = 0.1;

/// Least-squares fit of the piecewise-linear curve to observed
/// (aggregated utilization, slowdown) points. The knee is searched on a
/// 0.1-point grid over [0, 200] with the slope solved in closed form per
/// candidate; ties resolve to the smallest knee, so the fit is deterministic.
pub fn calibrate_piecewise(points: &[(f64, f64)]) -> Result<PiecewiseFit> {
    if points.len() < 3 {
        return Err(Error::Calibration(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let first_u = points[0].0;
    if points.iter().all(|(u, _)| (*u - first_u).abs() < 1e-12) {
        return Err(Error::Calibration(
            "degenerate input: all points share one utilization value".into(),
        ));
    }
    for (u, s) in points {
        if !u.is_finite() || !s.is_finite() {
            return Err(Error::Calibration("non-finite calibration point".into()));
        }
    }

    let steps = (KNEE_GRID_MAX / KNEE_GRID_STEP).round() as usize;
    let mut best: Option<(f64, f64, f64)> = None; // (sse, knee, slope)
    for i in 0..=steps {
        let knee = i as f64 * KNEE_GRID_STEP;
        let mut num = 0.0;
        let mut den = 0.0;
        for &(u, s) in points {
            if u > knee {
                num += (u - knee) * (s - 1.0);
                den += (u - knee) * (u - knee);
            }
        }
        let slope = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
        let sse: f64 = points
            .iter()
            .map(|&(u, s)| {
                let pred = if u <= knee { 1.0 } else { 1.0 + slope * (u - knee) };
                (pred - s) * (pred - s)
            })
            .sum();
        // Strict < keeps the smallest knee on ties.
        if best.map_or(true, |(b, _, _)| sse < b) {
            best = Some((sse, knee, slope));
        }
    }
    let (_, knee, slope) = best.unwrap();
    let fit_residuals = points
        .iter()
        .map(|&(u, s)| {
            let pred = if u <= knee { 1.0 } else { 1.0 + slope * (u - knee) };
            (pred - s).abs()
        })
        .collect();
    Ok(PiecewiseFit {
        knee,
        slope,
        fit_residuals,
    })
}

/// Memory bandwidth slowdown at `u_self + u_other` percent of achieved peak.
/// Bandwidth sharing is symmetric: both kernels see the same factor.
/// Returns a warning when falling back to the uncalibrated curve.
pub fn membw_slowdown(
    u_self: f64,
    u_other: f64,
    params: &CalibrationParams,
) -> (ResourceSlowdown, Option<String>) {
    let (fit, warning) = match &params.membw {
        Some(fit) => (fit.clone(), None),
        None => (
            uncalibrated_membw_fit(),
            Some(format!(
                "gpu `{}` has no bandwidth calibration; using knee=100, slope=0.01",
                params.gpu
            )),
        ),
    };
    let factor = fit.eval(u_self + u_other);
    (ResourceSlowdown::factor(Resource::MemBw, factor), warning)
}

/// Average access cost for hit rate `h` when a miss costs `ratio` times a hit.
fn access_cost(hit_rate: f64, ratio: f64) -> f64 {
    hit_rate + (1.0 - hit_rate) * ratio
}

/// Capacity hit-rate approximation: everything fits until the working set
/// exceeds the cache, then hits fall off reciprocally.
fn capacity_hit_rate(working_set: f64, capacity: f64) -> f64 {
    if working_set <= 0.0 {
        1.0
    } else {
        (capacity / working_set).min(1.0)
    }
}

/// Shared cache-pair slowdown: the ratio of colocated to isolated average
/// access cost under the capacity hit model, clamped to >= 1. A kernel that
/// already thrashes the cache alone sees little additional interference.
pub fn cache_pair_slowdown(w_self: f64, w_other: f64, capacity: f64, ratio: f64) -> f64 {
    if w_self <= 0.0 {
        return 1.0;
    }
    let h_alone = capacity_hit_rate(w_self, capacity);
    let h_col = capacity_hit_rate(w_self + w_other, capacity);
    (access_cost(h_col, ratio) / access_cost(h_alone, ratio)).max(1.0)
}

/// L2 slowdown for a kernel with working set `w_self` bytes colocated with a
/// partner touching `w_other` bytes.
pub fn l2_slowdown(w_self: f64, w_other: f64, params: &CalibrationParams) -> ResourceSlowdown {
    let factor = cache_pair_slowdown(
        w_self,
        w_other,
        params.l2_effective_bytes as f64,
        params.l2_latency_ratio,
    );
    ResourceSlowdown::factor(Resource::L2, factor)
}

/// L1 slowdown from per-SM resident footprints (bytes per SM). Only
/// meaningful on shared SMs.
pub fn l1_slowdown(
    footprint_self: f64,
    footprint_other: f64,
    spec: &GpuSpec,
    params: &CalibrationParams,
) -> ResourceSlowdown {
    let factor = cache_pair_slowdown(
        footprint_self,
        footprint_other,
        spec.l1_size as f64,
        params.l1_latency_ratio,
    );
    ResourceSlowdown::factor(Resource::L1, factor)
}

/// Rescales rate demands (issue, pipelines, bandwidth) linearly with
/// co-resident warps per subpartition. Demand is not capped here; saturation
/// is applied where the demand is consumed. Footprints and launch shape are
/// left unchanged.
pub fn scale_demand_with_residency(
    base: &ResourceDemand,
    measured_warps_per_smsp: f64,
    target_warps_per_smsp: f64,
) -> Result<ResourceDemand> {
    if measured_warps_per_smsp <= 0.0 {
        return Err(Error::Calibration(
            "measured warps per subpartition is zero".into(),
        ));
    }
    if target_warps_per_smsp <= 0.0 {
        return Err(Error::Calibration(
            "target warps per subpartition is zero".into(),
        ));
    }
    let k = target_warps_per_smsp / measured_warps_per_smsp;
    let mut scaled = base.clone();
    scaled.issue_slots *= k;
    scaled.membw *= k;
    for util in scaled.pipelines.values_mut() {
        *util *= k;
    }
    Ok(scaled)
}

/// Default L1 hit-to-miss latency ratio (roughly the L2/L1 access latency
/// ratio on current NVIDIA parts). Stored per GPU so it can be overridden.
pub const L1_LATENCY_RATIO_DEFAULT: f64 = 8.0;

/// Fitted saturation parameters for one GPU. Produced by `calibrate`,
/// consumed by every estimator path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationParams {
    pub gpu: String,
    /// Piecewise-linear bandwidth curve over aggregated utilization (%).
    pub membw: Option<PiecewiseFit>,
    /// Main-memory access cost relative to an L2 hit.
    pub l2_latency_ratio: f64,
    /// Effective L2 capacity for the hit model; calibrated from the measured
    /// interference peak, defaulting to the hardware size.
    pub l2_effective_bytes: u64,
    /// L1 miss cost relative to an L1 hit.
    pub l1_latency_ratio: f64,
}

impl CalibrationParams {
    /// Uncalibrated defaults for a GPU: hardware capacities and the spec's
    /// latency ratio, no bandwidth curve.
    pub fn defaults_for(spec: &GpuSpec) -> Self {
        CalibrationParams {
            gpu: spec.name.clone(),
            membw: None,
            l2_latency_ratio: spec.mem_to_l2_latency_ratio,
            l2_effective_bytes: spec.l2_size,
            l1_latency_ratio: L1_LATENCY_RATIO_DEFAULT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(fit) = &self.membw {
            if !(0.0..=KNEE_GRID_MAX).contains(&fit.knee) {
                return Err(Error::Calibration(format!(
                    "knee {} outside [0, {KNEE_GRID_MAX}]",
                    fit.knee
                )));
            }
            if fit.slope < 0.0 {
                return Err(Error::Calibration(format!("negative slope {}", fit.slope)));
            }
        }
        if self.l2_latency_ratio < 1.0 || self.l1_latency_ratio < 1.0 {
            return Err(Error::Calibration("latency ratio below 1".into()));
        }
        if self.l2_effective_bytes == 0 {
            return Err(Error::Calibration("zero effective L2 capacity".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn issue_partner_at_ceiling_serializes() {
        let s = issue_slot_slowdown(0.61, 4.0, 4.0);
        assert!(s.serialized);
        assert!(s.factor.is_infinite());
    }

    #[test]
    fn issue_below_ceiling_is_free() {
        let s = issue_slot_slowdown(0.61, 1.08, 4.0);
        assert_eq!(s.factor, 1.0);
        assert!(!s.serialized);
        assert_eq!(issue_slot_slowdown(0.0, 0.0, 4.0).factor, 1.0);
    }

    #[test]
    fn issue_above_ceiling_shares_proportionally() {
        let s = issue_slot_slowdown(3.45, 3.45, 4.0);
        assert!((s.factor - 6.9 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn pipe_pair_values() {
        let s = pipe_pair_slowdown(72.99, 72.99);
        assert!((s.factor - 1.4598).abs() < 1e-12);
        assert_eq!(pipe_pair_slowdown(24.96, 24.96).factor, 1.0);
        assert_eq!(pipe_pair_slowdown(0.0, 100.0).factor, 1.0);
        assert!(pipe_pair_slowdown(5.0, 100.0).serialized);
    }

    #[test]
    fn pipeline_map_takes_worst_pipe() {
        let spec = crate::gpu::GpuSpec::h100_nvl();
        let mut a = BTreeMap::new();
        a.insert("fma".to_string(), 60.0);
        a.insert("fp64".to_string(), 10.0);
        let mut b = BTreeMap::new();
        b.insert("fma".to_string(), 60.0);
        let s = pipeline_slowdown(&a, &b, &spec).unwrap();
        assert!((s.factor - 1.2).abs() < 1e-12);

        let mut bad = BTreeMap::new();
        bad.insert("quantum".to_string(), 1.0);
        assert!(pipeline_slowdown(&bad, &b, &spec).is_err());
    }

    #[test]
    fn calibration_needs_three_points() {
        assert!(calibrate_piecewise(&[(10.0, 1.0), (20.0, 1.1)]).is_err());
    }

    #[test]
    fn calibration_rejects_degenerate_points() {
        assert!(calibrate_piecewise(&[(10.0, 1.0), (10.0, 1.1), (10.0, 1.2)]).is_err());
    }

    #[test]
    fn flat_points_fit_zero_slope() {
        let fit = calibrate_piecewise(&[(10.0, 1.0), (50.0, 1.0), (90.0, 1.0)]).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.knee, 0.0); // smallest knee wins the tie
        assert!(fit.fit_residuals.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn membw_uncalibrated_fallback_warns() {
        let params = CalibrationParams::defaults_for(&crate::gpu::GpuSpec::h100_nvl());
        let (s, warning) = membw_slowdown(50.0, 40.0, &params);
        assert_eq!(s.factor, 1.0);
        assert!(warning.is_some());
        let (s, _) = membw_slowdown(80.0, 70.0, &params);
        assert!((s.factor - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cache_pair_fully_cached_is_free() {
        assert_eq!(cache_pair_slowdown(1.0e6, 2.0e6, 4.0e6, 2.6), 1.0);
        assert_eq!(cache_pair_slowdown(0.0, 1.0e9, 4.0e6, 2.6), 1.0);
    }

    #[test]
    fn cache_pair_no_partner_no_interference() {
        for w in [1.0e3, 1.0e6, 1.0e9, 1.0e12] {
            assert_eq!(cache_pair_slowdown(w, 0.0, 50.0e6, 2.6), 1.0);
        }
    }

    #[test]
    fn cache_pair_thrashing_alone_dampens_interference() {
        let cap = 50.0e6;
        let at_capacity = cache_pair_slowdown(cap, cap, cap, 2.6);
        let thrashing = cache_pair_slowdown(100.0 * cap, 100.0 * cap, cap, 2.6);
        assert!(at_capacity > 1.5);
        assert!(thrashing < 1.05);
    }

    #[test]
    fn residency_scaling_is_linear() {
        let spec = crate::gpu::GpuSpec::h100_nvl();
        let mut profile = crate::gpu::KernelProfile::synthetic("copy", 132, 1024);
        profile.ipc = 0.61;
        let base = crate::gpu::demand_of(&profile, &spec, crate::gpu::Placement::SharedSms).unwrap();
        let scaled = scale_demand_with_residency(&base, 8.0, 16.0).unwrap();
        assert!((scaled.issue_slots * spec.max_ipc_per_sm - 1.22).abs() < 1e-12);

        let unchanged = scale_demand_with_residency(&base, 8.0, 8.0).unwrap();
        assert_eq!(&unchanged, &base);

        assert!(scale_demand_with_residency(&base, 0.0, 8.0).is_err());
    }
}
