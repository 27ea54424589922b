//! Block scheduler model: per-SM block limits, wave counts, co-residency of
//! two kernels, and MPS-style SM partition sizing.
//!
//! A block is scheduled on an SM only if that SM still has room for all of
//! the block's threads, registers, and shared memory, and the SM's block-slot
//! limit is not exhausted. Register allocation granularity is ignored: the
//! per-thread linear model keeps the arithmetic deterministic at the cost of
//! being slightly optimistic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpu::{GpuSpec, KernelProfile, MAX_THREADS_PER_BLOCK};

/// Sentinel for a limit the kernel does not exercise (e.g. zero registers).
pub const UNLIMITED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyLimit {
    Threads,
    Blocks,
    Registers,
    SharedMem,
}

impl std::fmt::Display for OccupancyLimit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OccupancyLimit::Threads => "threads",
            OccupancyLimit::Blocks => "blocks",
            OccupancyLimit::Registers => "registers",
            OccupancyLimit::SharedMem => "shared_mem",
        };
        f.write_str(s)
    }
}

/// Max co-resident blocks per SM under each constraint, plus the binding one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyLimits {
    pub limit_blocks: u32,
    pub limit_threads: u32,
    pub limit_registers: u32,
    pub limit_shared_mem: u32,
    /// Minimum of the four limits.
    pub effective: u32,
    pub binding_constraint: OccupancyLimit,
}

/// Computes per-SM block limits for a kernel on a GPU.
pub fn blocks_per_sm(profile: &KernelProfile, spec: &GpuSpec) -> Result<OccupancyLimits> {
    let threads = profile.threads_per_block;
    if threads > MAX_THREADS_PER_BLOCK || threads > spec.max_threads_per_sm {
        return Err(Error::Occupancy(format!(
            "threads_per_block {} exceeds the per-block maximum ({})",
            threads,
            MAX_THREADS_PER_BLOCK.min(spec.max_threads_per_sm)
        )));
    }
    if threads == 0 {
        return Err(Error::Occupancy("threads_per_block is zero".into()));
    }

    let limit_threads = spec.max_threads_per_sm / threads;
    let regs_per_block = profile.registers_per_thread as u64 * threads as u64;
    let limit_registers = if regs_per_block == 0 {
        UNLIMITED
    } else {
        (spec.registers_per_sm / regs_per_block).min(UNLIMITED as u64) as u32
    };
    let limit_shared_mem = if profile.shared_mem_per_block == 0 {
        UNLIMITED
    } else {
        (spec.shared_mem_per_sm / profile.shared_mem_per_block).min(UNLIMITED as u64) as u32
    };
    let limit_blocks = spec.max_blocks_per_sm;

    let effective = limit_threads
        .min(limit_blocks)
        .min(limit_registers)
        .min(limit_shared_mem);
    // Ties resolve in a fixed order so reports are deterministic.
    let binding_constraint = if effective == limit_threads {
        OccupancyLimit::Threads
    } else if effective == limit_blocks {
        OccupancyLimit::Blocks
    } else if effective == limit_registers {
        OccupancyLimit::Registers
    } else {
        OccupancyLimit::SharedMem
    };

    Ok(OccupancyLimits {
        limit_blocks,
        limit_threads,
        limit_registers,
        limit_shared_mem,
        effective,
        binding_constraint,
    })
}

/// Blocks of this kernel resident per SM in steady state: the per-SM limit,
/// or fewer when the grid cannot fill every SM.
pub fn steady_resident_blocks(
    profile: &KernelProfile,
    spec: &GpuSpec,
    available_sms: u32,
) -> Result<u32> {
    if available_sms == 0 {
        return Err(Error::Occupancy("available_sms is zero".into()));
    }
    let limits = blocks_per_sm(profile, spec)?;
    Ok(limits.effective.min(profile.grid_blocks.div_ceil(available_sms)))
}

/// Number of waves the grid needs on `available_sms` SMs. Not rounded: the
/// final partial wave contributes fractionally.
pub fn waves(profile: &KernelProfile, spec: &GpuSpec, available_sms: u32) -> Result<f64> {
    if available_sms == 0 {
        return Err(Error::Occupancy("available_sms is zero".into()));
    }
    let limits = blocks_per_sm(profile, spec)?;
    if limits.effective == 0 {
        return Err(Error::Occupancy(format!(
            "a single block exhausts the SM ({} limit is 0)",
            limits.binding_constraint
        )));
    }
    Ok(profile.grid_blocks as f64 / (limits.effective as f64 * available_sms as f64))
}

/// Whether two kernels' blocks can execute concurrently on shared SMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoResidency {
    /// At least one block of each kernel fits on every SM alongside the
    /// other's steady-state residency.
    Concurrent,
    /// One kernel alone saturates an SM limit while the other has a full
    /// GPU's worth of blocks queued; the pair runs back to back.
    Serialized,
    /// Neither fully concurrent nor fully serialized.
    Partial,
}

struct BlockNeeds {
    threads: u64,
    registers: u64,
    shared_mem: u64,
}

fn needs(profile: &KernelProfile) -> BlockNeeds {
    BlockNeeds {
        threads: profile.threads_per_block as u64,
        registers: profile.registers_per_thread as u64 * profile.threads_per_block as u64,
        shared_mem: profile.shared_mem_per_block,
    }
}

/// Can one block of `incoming` fit on an SM already holding `resident` blocks
/// of `holder`?
fn one_block_fits(
    holder: &KernelProfile,
    resident: u64,
    incoming: &KernelProfile,
    spec: &GpuSpec,
) -> bool {
    let held = needs(holder);
    let want = needs(incoming);
    let thread_room = spec.max_threads_per_sm as u64 >= held.threads * resident + want.threads;
    let block_room = (spec.max_blocks_per_sm as u64) >= resident + 1;
    let reg_room = spec.registers_per_sm >= held.registers * resident + want.registers;
    let smem_room = spec.shared_mem_per_sm >= held.shared_mem * resident + want.shared_mem;
    thread_room && block_room && reg_room && smem_room
}

/// Classifies block-scheduler interaction for two kernels sharing all SMs.
/// Symmetric in its kernel arguments.
pub fn co_residency(a: &KernelProfile, b: &KernelProfile, spec: &GpuSpec) -> Result<CoResidency> {
    let resident_a = steady_resident_blocks(a, spec, spec.num_sms)? as u64;
    let resident_b = steady_resident_blocks(b, spec, spec.num_sms)? as u64;

    let b_fits = one_block_fits(a, resident_a, b, spec);
    let a_fits = one_block_fits(b, resident_b, a, spec);

    if a_fits && b_fits {
        return Ok(CoResidency::Concurrent);
    }
    let a_queue_full = a.grid_blocks as u64 >= spec.num_sms as u64;
    let b_queue_full = b.grid_blocks as u64 >= spec.num_sms as u64;
    if (!b_fits && b_queue_full) || (!a_fits && a_queue_full) {
        return Ok(CoResidency::Serialized);
    }
    Ok(CoResidency::Partial)
}

/// Number of SMs granted by an MPS-style percentage share: floor of the
/// share, rounded down to an even count, never below 2.
pub fn partition_sm_count(spec: &GpuSpec, share: f64) -> Result<u32> {
    if !(share > 0.0 && share <= 100.0) {
        return Err(Error::Occupancy(format!("share {share} outside (0, 100]")));
    }
    // Small epsilon absorbs binary representation error in share/100 * n.
    let raw = (share / 100.0 * spec.num_sms as f64 + 1e-9).floor() as u32;
    let even = raw - raw % 2;
    Ok(even.max(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpu::GpuSpec;

    fn h100() -> GpuSpec {
        GpuSpec::h100_nvl()
    }

    #[test]
    fn thread_bound_at_1024_threads() {
        let profile = KernelProfile::synthetic("nanosleep", 132, 1024);
        let limits = blocks_per_sm(&profile, &h100()).unwrap();
        assert_eq!(limits.effective, 2);
        assert_eq!(limits.binding_constraint, OccupancyLimit::Threads);
    }

    #[test]
    fn thread_bound_at_128_threads() {
        let profile = KernelProfile::synthetic("compute", 132, 128);
        let limits = blocks_per_sm(&profile, &h100()).unwrap();
        assert_eq!(limits.effective, 16);
        assert_eq!(limits.binding_constraint, OccupancyLimit::Threads);
    }

    #[test]
    fn oversized_block_is_an_error() {
        let mut profile = KernelProfile::synthetic("huge", 1, 1024);
        profile.threads_per_block = 2048;
        assert!(blocks_per_sm(&profile, &h100()).is_err());
    }

    #[test]
    fn register_and_smem_limits() {
        let mut profile = KernelProfile::synthetic("fat", 10, 256);
        profile.registers_per_thread = 128; // 32768 regs/block -> 2 blocks
        let limits = blocks_per_sm(&profile, &h100()).unwrap();
        assert_eq!(limits.limit_registers, 2);
        assert_eq!(limits.effective, 2);
        assert_eq!(limits.binding_constraint, OccupancyLimit::Registers);

        profile.registers_per_thread = 0;
        profile.shared_mem_per_block = 100 * 1024; // 228KB/SM -> 2 blocks
        let limits = blocks_per_sm(&profile, &h100()).unwrap();
        assert_eq!(limits.limit_shared_mem, 2);
        assert_eq!(limits.binding_constraint, OccupancyLimit::SharedMem);
    }

    #[test]
    fn wave_arithmetic() {
        let profile = KernelProfile::synthetic("compute", 132, 128);
        let spec = h100();
        assert!((waves(&profile, &spec, 132).unwrap() - 0.0625).abs() < 1e-12);
        assert!((waves(&profile, &spec, 8).unwrap() - 1.03125).abs() < 1e-12);
        assert!(waves(&profile, &spec, 0).is_err());
    }

    #[test]
    fn waves_error_when_block_never_fits() {
        let mut profile = KernelProfile::synthetic("toofat", 1, 32);
        profile.shared_mem_per_block = 512 * 1024; // beyond 228KB/SM
        assert_eq!(blocks_per_sm(&profile, &h100()).unwrap().effective, 0);
        assert!(waves(&profile, &h100(), 132).is_err());
    }

    #[test]
    fn single_wave_pair_overlaps() {
        let a = KernelProfile::synthetic("sleep-a", 132, 1024);
        let b = KernelProfile::synthetic("sleep-b", 132, 1024);
        assert_eq!(co_residency(&a, &b, &h100()).unwrap(), CoResidency::Concurrent);
    }

    #[test]
    fn saturating_pair_serializes() {
        let a = KernelProfile::synthetic("sleep-a", 264, 1024);
        let b = KernelProfile::synthetic("sleep-b", 264, 1024);
        assert_eq!(co_residency(&a, &b, &h100()).unwrap(), CoResidency::Serialized);
    }

    #[test]
    fn small_partner_of_saturating_kernel_is_partial() {
        let a = KernelProfile::synthetic("sat", 264, 1024);
        let b = KernelProfile::synthetic("short", 8, 1024);
        // b cannot start, but with only 8 blocks it drains quickly once a's
        // waves retire.
        assert_eq!(co_residency(&a, &b, &h100()).unwrap(), CoResidency::Partial);
        assert_eq!(co_residency(&b, &a, &h100()).unwrap(), CoResidency::Partial);
    }

    #[test]
    fn partition_counts() {
        assert_eq!(partition_sm_count(&GpuSpec::rtx3090(), 50.0).unwrap(), 40);
        assert_eq!(partition_sm_count(&h100(), 50.0).unwrap(), 66);
        assert_eq!(partition_sm_count(&h100(), 6.25).unwrap(), 8);
        assert_eq!(partition_sm_count(&h100(), 0.5).unwrap(), 2); // clamped
        assert!(partition_sm_count(&h100(), 0.0).is_err());
        assert!(partition_sm_count(&h100(), 120.0).is_err());
    }
}
