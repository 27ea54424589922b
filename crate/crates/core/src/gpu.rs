//! GPU capacity model and kernel descriptors.
//!
//! [`GpuSpec`] captures the per-SM limits and memory-system capacities of one
//! GPU model. [`KernelProfile`] captures one kernel's launch shape plus the
//! profiler counters the estimator consumes. Both serialize to JSON with
//! snake_case field names; unknown fields are rejected.
//!
//! Durations are unitless relative times: every result the estimator emits is
//! a ratio (slowdown or speedup), so absolute seconds are never needed.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy;

pub const WARP_SIZE: u32 = 32;

/// Hardware maximum threads per block on NVIDIA GPUs.
pub const MAX_THREADS_PER_BLOCK: u32 = 1024;

/// Capacities of one GPU model.
///
/// Pipelines are an open set keyed by name; each pipeline's capacity is 100%
/// of its own peak. `mem_to_l2_latency_ratio` is the average main-memory
/// access cost relative to an L2 hit (>= 1), used by the cache contention
/// models as a default when no calibration file is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub name: String,
    pub num_sms: u32,
    pub subpartitions_per_sm: u32,
    pub max_threads_per_sm: u32,
    pub max_blocks_per_sm: u32,
    pub registers_per_sm: u64,
    pub shared_mem_per_sm: u64,
    /// Warp instructions issued per cycle per SM; equals
    /// `subpartitions_per_sm` (one issue per subpartition scheduler per cycle).
    pub max_ipc_per_sm: f64,
    pub pipelines: Vec<String>,
    pub l1_size: u64,
    pub l2_size: u64,
    pub peak_mem_bandwidth_util: f64,
    pub mem_to_l2_latency_ratio: f64,
}

impl GpuSpec {
    /// H100 NVL. SM count from the vendor datasheet; per-SM limits not stated
    /// there are taken from the CUDA occupancy tables for compute capability
    /// 9.0 and can be overridden via a JSON spec file.
    pub fn h100_nvl() -> Self {
        GpuSpec {
            name: "h100-nvl".to_string(),
            num_sms: 132,
            subpartitions_per_sm: 4,
            max_threads_per_sm: 2048,
            max_blocks_per_sm: 32,
            registers_per_sm: 65536,
            shared_mem_per_sm: 228 * 1024,
            max_ipc_per_sm: 4.0,
            pipelines: default_pipelines(),
            l1_size: 256 * 1024,
            l2_size: 50 * 1024 * 1024,
            peak_mem_bandwidth_util: 100.0,
            mem_to_l2_latency_ratio: 2.6,
        }
    }

    /// GeForce RTX 3090.
    pub fn rtx3090() -> Self {
        GpuSpec {
            name: "rtx3090".to_string(),
            num_sms: 82,
            subpartitions_per_sm: 4,
            max_threads_per_sm: 2048,
            max_blocks_per_sm: 16,
            registers_per_sm: 65536,
            shared_mem_per_sm: 100 * 1024,
            max_ipc_per_sm: 4.0,
            pipelines: default_pipelines(),
            l1_size: 128 * 1024,
            l2_size: 6 * 1024 * 1024,
            peak_mem_bandwidth_util: 100.0,
            mem_to_l2_latency_ratio: 2.6,
        }
    }

    /// Look up a built-in spec by name. Accepts a few aliases.
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "h100" | "h100-nvl" | "h100_nvl" | "h100nvl" => Some(Self::h100_nvl()),
            "rtx3090" | "rtx-3090" | "3090" => Some(Self::rtx3090()),
            _ => None,
        }
    }

    pub fn all_builtins() -> Vec<Self> {
        vec![Self::h100_nvl(), Self::rtx3090()]
    }

    pub fn has_pipeline(&self, name: &str) -> bool {
        self.pipelines.iter().any(|p| p == name)
    }
}

fn default_pipelines() -> Vec<String> {
    ["alu", "fma", "fp16", "fp64", "lsu", "tensor", "xu"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Validates every `GpuSpec` invariant, returning the spec on success.
/// The error message names the first violated invariant.
pub fn validate_spec(spec: GpuSpec) -> Result<GpuSpec> {
    let fail = |reason: String| Error::InvalidSpec {
        name: spec.name.clone(),
        reason,
    };
    let counts: [(&str, u64); 8] = [
        ("num_sms", spec.num_sms as u64),
        ("subpartitions_per_sm", spec.subpartitions_per_sm as u64),
        ("max_threads_per_sm", spec.max_threads_per_sm as u64),
        ("max_blocks_per_sm", spec.max_blocks_per_sm as u64),
        ("registers_per_sm", spec.registers_per_sm),
        ("shared_mem_per_sm", spec.shared_mem_per_sm),
        ("l1_size", spec.l1_size),
        ("l2_size", spec.l2_size),
    ];
    for (field, value) in counts {
        if value == 0 {
            return Err(fail(format!("nonpositive capacity: {field}")));
        }
    }
    if !(spec.max_ipc_per_sm > 0.0) || !(spec.peak_mem_bandwidth_util > 0.0) {
        return Err(fail("nonpositive capacity: issue/bandwidth ceiling".into()));
    }
    if spec.max_ipc_per_sm != spec.subpartitions_per_sm as f64 {
        return Err(fail(format!(
            "ipc/subpartition mismatch: max_ipc_per_sm={} vs subpartitions_per_sm={}",
            spec.max_ipc_per_sm, spec.subpartitions_per_sm
        )));
    }
    if !(spec.mem_to_l2_latency_ratio >= 1.0) {
        return Err(fail(format!(
            "mem_to_l2_latency_ratio below 1: {}",
            spec.mem_to_l2_latency_ratio
        )));
    }
    for p in &spec.pipelines {
        if p.is_empty() {
            return Err(fail("empty pipeline name".into()));
        }
    }
    Ok(spec)
}

/// Roofline-style boundness tag, used only by the baseline colocation
/// policies. Optional; profiles without it simply skip those baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundness {
    Compute,
    Memory,
}

/// One kernel's launch shape plus measured profiler metrics.
///
/// Percent fields are in `[0, 100]`. `membw_util` is relative to the highest
/// *achieved* memory bandwidth, not the theoretical peak; importers should
/// document which basis their source used. `working_set` is the kernel's
/// total unique memory footprint in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelProfile {
    pub name: String,
    pub grid_blocks: u32,
    pub threads_per_block: u32,
    pub registers_per_thread: u32,
    pub shared_mem_per_block: u64,
    pub duration_alone: f64,
    pub ipc: f64,
    pub pipe_util: BTreeMap<String, f64>,
    pub l1_hit_rate: f64,
    pub l2_hit_rate: f64,
    pub membw_util: f64,
    pub working_set: u64,
    pub cycles_active_avg: f64,
    pub cycles_active_min: f64,
    pub cycles_active_max: f64,
    pub achieved_occupancy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundness: Option<Boundness>,
}

impl KernelProfile {
    /// A profile with the given launch shape and all metrics zeroed.
    /// Handy starting point for synthetic kernels.
    pub fn synthetic(name: &str, grid_blocks: u32, threads_per_block: u32) -> Self {
        KernelProfile {
            name: name.to_string(),
            grid_blocks,
            threads_per_block,
            registers_per_thread: 0,
            shared_mem_per_block: 0,
            duration_alone: 1.0,
            ipc: 0.0,
            pipe_util: BTreeMap::new(),
            l1_hit_rate: 0.0,
            l2_hit_rate: 0.0,
            membw_util: 0.0,
            working_set: 0,
            cycles_active_avg: 0.0,
            cycles_active_min: 0.0,
            cycles_active_max: 0.0,
            achieved_occupancy: 0.0,
            boundness: None,
        }
    }

    /// Warps per block, rounded up to whole warps.
    pub fn warps_per_block(&self) -> u32 {
        self.threads_per_block.div_ceil(WARP_SIZE)
    }
}

/// Validates a profile against a GPU spec. The error names the first
/// violated invariant.
pub fn validate_profile(profile: &KernelProfile, spec: &GpuSpec) -> Result<()> {
    let fail = |reason: String| Error::InvalidProfile {
        name: profile.name.clone(),
        reason,
    };
    if profile.grid_blocks < 1 {
        return Err(fail("grid_blocks must be >= 1".into()));
    }
    if profile.threads_per_block < WARP_SIZE || profile.threads_per_block > MAX_THREADS_PER_BLOCK {
        return Err(fail(format!(
            "threads_per_block {} outside [{}, {}]",
            profile.threads_per_block, WARP_SIZE, MAX_THREADS_PER_BLOCK
        )));
    }
    if profile.threads_per_block > spec.max_threads_per_sm {
        return Err(fail(format!(
            "threads_per_block {} exceeds max_threads_per_sm {}",
            profile.threads_per_block, spec.max_threads_per_sm
        )));
    }
    if !(profile.duration_alone > 0.0) {
        return Err(fail("duration_alone must be positive".into()));
    }
    if !(profile.ipc >= 0.0 && profile.ipc <= spec.max_ipc_per_sm) {
        return Err(fail(format!(
            "ipc {} outside [0, {}]",
            profile.ipc, spec.max_ipc_per_sm
        )));
    }
    let percents = [
        ("l1_hit_rate", profile.l1_hit_rate),
        ("l2_hit_rate", profile.l2_hit_rate),
        ("membw_util", profile.membw_util),
        ("achieved_occupancy", profile.achieved_occupancy),
    ];
    for (field, value) in percents {
        if !(0.0..=100.0).contains(&value) {
            return Err(fail(format!("{field} {value} outside [0, 100]")));
        }
    }
    for (pipe, value) in &profile.pipe_util {
        if !spec.has_pipeline(pipe) {
            return Err(Error::UnknownPipeline(pipe.clone()));
        }
        if !(0.0..=100.0).contains(value) {
            return Err(fail(format!("pipe_util[{pipe}] {value} outside [0, 100]")));
        }
    }
    if !(profile.cycles_active_min <= profile.cycles_active_avg
        && profile.cycles_active_avg <= profile.cycles_active_max)
    {
        return Err(fail("cycles_active min/avg/max out of order".into()));
    }
    Ok(())
}

/// How two kernels share the GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Placement {
    /// Both kernels launched in separate streams with all SMs visible to both.
    SharedSms,
    /// Each kernel restricted to a disjoint set of SMs (MPS-style); only the
    /// memory system is shared.
    PartitionedSms { sm_share_per_kernel: f64 },
}

impl Placement {
    /// Validates the share range; for partitions, the pair's shares must sum
    /// to at most 100%.
    pub fn validate_for_pair(&self) -> Result<()> {
        if let Placement::PartitionedSms { sm_share_per_kernel } = self {
            if !(*sm_share_per_kernel > 0.0 && *sm_share_per_kernel <= 100.0) {
                return Err(Error::InvalidPlacement(format!(
                    "sm_share_per_kernel {sm_share_per_kernel} outside (0, 100]"
                )));
            }
            if *sm_share_per_kernel > 50.0 {
                return Err(Error::InvalidPlacement(format!(
                    "pair shares sum above 100%: 2 x {sm_share_per_kernel}"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for Placement {
    type Err = Error;

    /// Parses the CLI syntax `shared` or `partitioned:<pct>`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("shared") {
            return Ok(Placement::SharedSms);
        }
        if let Some(pct) = s.strip_prefix("partitioned:") {
            let share: f64 = pct
                .parse()
                .map_err(|_| Error::InvalidPlacement(format!("bad share `{pct}`")))?;
            return Ok(Placement::PartitionedSms {
                sm_share_per_kernel: share,
            });
        }
        Err(Error::InvalidPlacement(format!(
            "`{s}` (expected `shared` or `partitioned:<pct>`)"
        )))
    }
}

/// Launch-shape footprint used by the block scheduler model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyFootprint {
    pub grid_blocks: u32,
    pub threads_per_block: u32,
    pub registers_per_thread: u32,
    pub shared_mem_per_block: u64,
}

/// Normalized per-resource demand derived from a profile under a placement.
///
/// Rate demands (`issue_slots`, `pipelines`, `membw`) are fractions of the
/// respective capacity. Footprints are bytes. Demand is rate-based, so it is
/// independent of `duration_alone`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDemand {
    /// Fraction of `max_ipc_per_sm`.
    pub issue_slots: f64,
    /// Fraction of each pipeline's peak, keyed by pipeline name.
    pub pipelines: BTreeMap<String, f64>,
    /// Fraction of achieved peak memory bandwidth.
    pub membw: f64,
    /// Bytes of the working set resident per SM in steady state.
    pub l1_footprint_per_sm: f64,
    /// Bytes across the shared L2 (the whole working set).
    pub l2_footprint: f64,
    pub occupancy: OccupancyFootprint,
}

/// Derives the normalized demand vector for a profile under a placement.
/// Pure: identical inputs give bit-identical outputs.
pub fn demand_of(
    profile: &KernelProfile,
    spec: &GpuSpec,
    placement: Placement,
) -> Result<ResourceDemand> {
    validate_profile(profile, spec)?;
    let available_sms = match placement {
        Placement::SharedSms => spec.num_sms,
        Placement::PartitionedSms { sm_share_per_kernel } => {
            occupancy::partition_sm_count(spec, sm_share_per_kernel)?
        }
    };
    let resident = occupancy::steady_resident_blocks(profile, spec, available_sms)?;
    let per_block_bytes = profile.working_set as f64 / profile.grid_blocks as f64;

    let mut pipelines = BTreeMap::new();
    for (pipe, util) in &profile.pipe_util {
        pipelines.insert(pipe.clone(), util / 100.0);
    }

    Ok(ResourceDemand {
        issue_slots: profile.ipc / spec.max_ipc_per_sm,
        pipelines,
        membw: profile.membw_util / 100.0,
        l1_footprint_per_sm: per_block_bytes * resident as f64,
        l2_footprint: profile.working_set as f64,
        occupancy: OccupancyFootprint {
            grid_blocks: profile.grid_blocks,
            threads_per_block: profile.threads_per_block,
            registers_per_thread: profile.registers_per_thread,
            shared_mem_per_block: profile.shared_mem_per_block,
        },
    })
}
