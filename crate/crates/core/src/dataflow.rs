//! Analytic cycle models for the three GEMM engines: weight-stationary
//! systolic, output-stationary systolic, and the outer-product array.
//!
//! Each engine is a closed-form per-tile model with explicit fill, skew,
//! and drain terms; task cycles are the sum over tiles times the instance
//! count. The per-tile formulas are individually unit-tested below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::GemmTask;

/// Dataflow selecting which engine executes a GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataflow {
    Ws,
    Os,
    Outer,
}

impl Dataflow {
    pub fn name(self) -> &'static str {
        match self {
            Dataflow::Ws => "ws",
            Dataflow::Os => "os",
            Dataflow::Outer => "outer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ws" => Ok(Dataflow::Ws),
            "os" => Ok(Dataflow::Os),
            "outer" => Ok(Dataflow::Outer),
            other => Err(Error::Config(format!(
                "unknown dataflow '{other}' (expected ws, os, or outer)"
            ))),
        }
    }
}

/// Physical PE-array configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ArrayConfig {
    pub pe_h: u64,
    pub pe_w: u64,
    pub freq_hz: f64,
    /// Weight-latch fill rate of the WS engine, in PE rows per cycle.
    pub ws_fill_rows_per_cycle: u64,
    /// Output rows read out of the array per cycle (`R`).
    pub drain_rows: u64,
    pub sram_bytes: u64,
    /// Overlap the next tile's weight latch with the current tile's
    /// streaming when set. Off by default so task cycles are exactly the
    /// per-tile sum.
    pub ws_weight_double_buffer: bool,
    /// Cycle cost per lowered im2col element charged when a convolution
    /// operand is transformed on chip. The transform unit is not modeled
    /// beyond this constant.
    pub im2col_cycles_per_element: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            pe_h: 128,
            pe_w: 128,
            freq_hz: 9.4e8,
            ws_fill_rows_per_cycle: 8,
            drain_rows: 8,
            sram_bytes: 16 * 1024 * 1024,
            ws_weight_double_buffer: false,
            im2col_cycles_per_element: 0.0,
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pe_h == 0 || self.pe_w == 0 {
            return Err(Error::Config("PE array dimensions must be >= 1".into()));
        }
        if !(self.freq_hz > 0.0) {
            return Err(Error::Config("frequency must be > 0".into()));
        }
        if self.drain_rows == 0 || self.pe_h % self.drain_rows != 0 {
            return Err(Error::Config(format!(
                "drain rows ({}) must divide pe_h ({})",
                self.drain_rows, self.pe_h
            )));
        }
        if self.ws_fill_rows_per_cycle == 0 || self.ws_fill_rows_per_cycle > self.pe_h {
            return Err(Error::Config(format!(
                "fill rate ({}) must be in 1..=pe_h ({})",
                self.ws_fill_rows_per_cycle, self.pe_h
            )));
        }
        if self.sram_bytes == 0 {
            return Err(Error::Config("SRAM size must be > 0".into()));
        }
        Ok(())
    }

    pub fn macs_per_cycle(&self) -> u64 {
        self.pe_h * self.pe_w
    }
}

/// Operand bytes per element (BF16 in, FP32 accumulate/out).
const IN_BYTES: u64 = 2;
const OUT_BYTES: u64 = 4;

/// One (m_t, k_t, n_t) tile anchored at (m0, k0, n0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tile {
    pub m0: u64,
    pub n0: u64,
    pub k0: u64,
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

/// Tiles covering a task's full (M, K, N) iteration space exactly once.
#[derive(Debug, Clone, Serialize)]
pub struct TileSchedule {
    pub tiles: Vec<Tile>,
    /// Loop nest order, outermost first. K is innermost so output tiles
    /// accumulate in place.
    pub loop_order: &'static str,
}

/// Splits a task over the physical array. M and N split at the PE extents;
/// K splits only when a full-K operand tile would overrun its SRAM
/// partition (the buffer is split three ways: LHS, RHS, output).
pub fn tile(task: &GemmTask, cfg: &ArrayConfig) -> Result<TileSchedule> {
    cfg.validate()?;
    if task.m == 0 || task.k == 0 || task.n == 0 || task.instances == 0 {
        return Err(Error::Config("GEMM task extents must be >= 1".into()));
    }
    let m_t = task.m.min(cfg.pe_h);
    let n_t = task.n.min(cfg.pe_w);
    let minimal = m_t * IN_BYTES + n_t * IN_BYTES + m_t * n_t * OUT_BYTES;
    if minimal > cfg.sram_bytes {
        return Err(Error::SramTooSmall {
            m_t,
            n_t,
            needed: minimal,
            available: cfg.sram_bytes,
        });
    }
    let budget = cfg.sram_bytes / 3;
    let k_cap = (budget / (IN_BYTES * cfg.pe_h.max(cfg.pe_w))).max(1);

    let mut tiles = Vec::new();
    let mut m0 = 0;
    while m0 < task.m {
        let m = (task.m - m0).min(cfg.pe_h);
        let mut n0 = 0;
        while n0 < task.n {
            let n = (task.n - n0).min(cfg.pe_w);
            let mut k0 = 0;
            while k0 < task.k {
                let k = (task.k - k0).min(k_cap);
                tiles.push(Tile { m0, n0, k0, m, n, k });
                k0 += k;
            }
            n0 += n;
        }
        m0 += m;
    }
    Ok(TileSchedule {
        tiles,
        loop_order: "mnk",
    })
}

/// Timing and on-chip traffic of one task on one engine.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GemmTiming {
    pub cycles: u64,
    pub macs: u64,
    /// MACs per cycle over the peak array throughput; in (0, 1].
    pub utilization: f64,
    pub sram_read_bytes: u64,
    pub sram_write_bytes: u64,
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// SRAM traffic shared by all engines: operands read once per tile visit,
/// outputs written once per tile visit, plus a re-read of the partial
/// output on every K revisit.
fn sram_traffic(sched: &TileSchedule) -> (u64, u64) {
    let mut read = 0;
    let mut write = 0;
    for t in &sched.tiles {
        read += (t.m * t.k + t.k * t.n) * IN_BYTES;
        write += t.m * t.n * OUT_BYTES;
        if t.k0 > 0 {
            read += t.m * t.n * OUT_BYTES; // accumulate into the partial tile
        }
    }
    (read, write)
}

fn finish(task: &GemmTask, cfg: &ArrayConfig, sched: &TileSchedule, cycles_one_instance: u64) -> GemmTiming {
    let cycles = cycles_one_instance * task.instances;
    let macs = task.macs();
    let (r, w) = sram_traffic(sched);
    GemmTiming {
        cycles,
        macs,
        utilization: macs as f64 / (cycles as f64 * cfg.macs_per_cycle() as f64),
        sram_read_bytes: r * task.instances,
        sram_write_bytes: w * task.instances,
    }
}

/// Weight-stationary systolic engine.
///
/// Per tile: `ceil(k_t / fill_rate)` cycles to latch the RHS rows, `m_t`
/// cycles to stream the LHS, and `k_t + n_t` cycles of wavefront skew.
/// Only `k_t` of the `pe_h` PE rows hold weights when `k_t < pe_h`, which
/// is what collapses utilization for small-K tasks.
pub fn simulate_ws(task: &GemmTask, cfg: &ArrayConfig) -> Result<GemmTiming> {
    let sched = tile(task, cfg)?;
    let mut cycles = 0u64;
    let mut prev_body: Option<u64> = None;
    for t in &sched.tiles {
        let fill = div_ceil(t.k, cfg.ws_fill_rows_per_cycle);
        let body = t.m + t.k + t.n;
        let exposed_fill = match (cfg.ws_weight_double_buffer, prev_body) {
            // Latch overlaps the previous tile's streaming when enabled.
            (true, Some(prev)) => fill.saturating_sub(prev),
            _ => fill,
        };
        cycles += exposed_fill + body;
        prev_body = Some(body);
    }
    Ok(finish(task, cfg, &sched, cycles))
}

/// Output-stationary systolic engine.
///
/// Per tile: `k_t` accumulation cycles, a `pe_h + pe_w` diagonal skew, and
/// `ceil(pe_h / drain_rows)` cycles to read the outputs out of the array.
pub fn simulate_os(task: &GemmTask, cfg: &ArrayConfig) -> Result<GemmTiming> {
    let sched = tile(task, cfg)?;
    let per_tile_overhead = cfg.pe_h + cfg.pe_w + div_ceil(cfg.pe_h, cfg.drain_rows);
    let cycles = sched.tiles.iter().map(|t| t.k + per_tile_overhead).sum();
    Ok(finish(task, cfg, &sched, cycles))
}

/// Outer-product engine.
///
/// One rank-1 update per cycle (`k_t` cycles per tile) followed by the
/// `ceil(pe_h / drain_rows)` drain. There is no in-PE output double
/// buffering, so the drain serializes with the next tile; when a PPU is
/// attached it consumes rows during those same drain cycles, so norm
/// derivation adds nothing on top.
pub fn simulate_outer(task: &GemmTask, cfg: &ArrayConfig) -> Result<GemmTiming> {
    let sched = tile(task, cfg)?;
    let drain = div_ceil(cfg.pe_h, cfg.drain_rows);
    let cycles = sched.tiles.iter().map(|t| t.k + drain).sum();
    Ok(finish(task, cfg, &sched, cycles))
}

pub fn simulate(dataflow: Dataflow, task: &GemmTask, cfg: &ArrayConfig) -> Result<GemmTiming> {
    match dataflow {
        Dataflow::Ws => simulate_ws(task, cfg),
        Dataflow::Os => simulate_os(task, cfg),
        Dataflow::Outer => simulate_outer(task, cfg),
    }
}

/// Provisioned SRAM bandwidth at steady state, bytes per clock: the sum of
/// the LHS, RHS, and output port widths for the dataflow.
pub fn provisioned_sram_bytes_per_cycle(dataflow: Dataflow, cfg: &ArrayConfig) -> u64 {
    match dataflow {
        // LHS pe_h x 2B, RHS filled 8 rows/cycle at pe_w x 2B, output pe_w x 4B.
        Dataflow::Ws => 2 * cfg.pe_h + (8 * 2 + 4) * cfg.pe_w,
        // LHS pe_h x 2B, RHS pe_w x 2B, output drained 8 rows/cycle at pe_w x 4B.
        Dataflow::Os | Dataflow::Outer => 2 * cfg.pe_h + (2 + 8 * 4) * cfg.pe_w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::GemmRole;

    fn task(m: u64, k: u64, n: u64, instances: u64) -> GemmTask {
        GemmTask {
            m,
            k,
            n,
            instances,
            role: GemmRole::Forward,
            layer_id: 0,
        }
    }

    fn cfg() -> ArrayConfig {
        ArrayConfig::default()
    }

    #[test]
    fn ws_square_tile() {
        let t = simulate_ws(&task(128, 128, 128, 1), &cfg()).unwrap();
        // 16 fill + 128 stream + 256 skew.
        assert_eq!(t.cycles, 400);
        assert!((t.utilization - 0.32).abs() < 1e-12);
    }

    #[test]
    fn ws_small_k_collapse() {
        // Per-example FC dW shape: four 128-row tiles, k = 1.
        let t = simulate_ws(&task(512, 1, 128, 1), &cfg()).unwrap();
        assert_eq!(t.cycles, 4 * (1 + 128 + 129));
        assert!((t.utilization - 65536.0 / (1032.0 * 16384.0)).abs() < 1e-12);
        assert!(t.utilization < 0.004);
    }

    #[test]
    fn ws_utilization_approaches_one_for_tall_m() {
        let t = simulate_ws(&task(1 << 20, 128, 128, 1), &cfg()).unwrap();
        assert!(t.utilization > 0.99, "utilization {}", t.utilization);
    }

    #[test]
    fn ws_double_buffer_hides_fill_after_first_tile() {
        let mut c = cfg();
        c.ws_weight_double_buffer = true;
        let t = simulate_ws(&task(512, 1, 128, 1), &c).unwrap();
        // First tile pays its 1-cycle fill; the later three hide theirs
        // under the previous tile's 257-cycle body.
        assert_eq!(t.cycles, 258 + 3 * 257);
    }

    #[test]
    fn os_square_tile_and_small_k() {
        let t = simulate_os(&task(128, 128, 128, 1), &cfg()).unwrap();
        assert_eq!(t.cycles, 128 + 256 + 16);
        let t = simulate_os(&task(128, 1, 128, 1), &cfg()).unwrap();
        assert_eq!(t.cycles, 1 + 256 + 16);
        assert!(t.utilization < 0.004);
    }

    #[test]
    fn os_utilization_approaches_one_for_large_k() {
        let t = simulate_os(&task(128, 1 << 22, 128, 1), &cfg()).unwrap();
        assert!(t.utilization > 0.99);
    }

    #[test]
    fn outer_tiles() {
        let t = simulate_outer(&task(128, 64, 128, 1), &cfg()).unwrap();
        assert_eq!(t.cycles, 64 + 16);
        assert!((t.utilization - 0.8).abs() < 1e-12);

        let t = simulate_outer(&task(512, 1, 128, 1), &cfg()).unwrap();
        assert_eq!(t.cycles, 4 * (1 + 16));
        let ws = simulate_ws(&task(512, 1, 128, 1), &cfg()).unwrap();
        assert!(t.utilization / ws.utilization > 14.0, "outer should be ~15x ws here");
    }

    #[test]
    fn outer_steady_state_is_k_insensitive() {
        // Full m/n tiles: MACs per accumulation cycle equal the whole array,
        // independent of K.
        for k in [8u64, 128, 4096] {
            let t = simulate_outer(&task(128, k, 128, 1), &cfg()).unwrap();
            let drain = 16;
            let accumulation_cycles = t.cycles - drain;
            assert_eq!(t.macs / accumulation_cycles, 16384, "k = {k}");
        }
    }

    #[test]
    fn instances_scale_cycles_and_macs() {
        let one = simulate_outer(&task(128, 32, 128, 1), &cfg()).unwrap();
        let many = simulate_outer(&task(128, 32, 128, 32), &cfg()).unwrap();
        assert_eq!(many.cycles, 32 * one.cycles);
        assert_eq!(many.macs, 32 * one.macs);
        assert!((many.utilization - one.utilization).abs() < 1e-15);
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile(&task(128, 128, 128, 1), &cfg()).unwrap().tiles.len(), 1);
        assert_eq!(tile(&task(300, 10, 200, 1), &cfg()).unwrap().tiles.len(), 6);
    }

    #[test]
    fn tile_k_split_respects_sram_budget_and_covers() {
        let c = cfg();
        let sched = tile(&task(128, 10_000_000, 128, 1), &c).unwrap();
        let budget = c.sram_bytes / 3;
        let mut covered = 0u64;
        for t in &sched.tiles {
            assert!(t.m * t.k * 2 <= budget, "LHS tile over budget");
            assert!(t.k * t.n * 2 <= budget, "RHS tile over budget");
            covered += t.k;
        }
        assert_eq!(covered, 10_000_000);
    }

    #[test]
    fn tile_rejects_impossible_sram() {
        let mut c = cfg();
        c.sram_bytes = 1024; // can't even hold a 128x128 FP32 output tile
        match tile(&task(128, 128, 128, 1), &c) {
            Err(Error::SramTooSmall { .. }) => {}
            other => panic!("expected SramTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn small_k_dominance_of_outer_product() {
        // k < pe_h/4 and m, n >= pe_h.
        for k in [1u64, 4, 16, 31] {
            let t = task(256, k, 256, 1);
            let outer = simulate_outer(&t, &cfg()).unwrap().utilization;
            let ws = simulate_ws(&t, &cfg()).unwrap().utilization;
            let os = simulate_os(&t, &cfg()).unwrap().utilization;
            assert!(outer > ws && outer > os, "k = {k}");
        }
    }

    #[test]
    fn provisioned_bandwidth_matches_port_widths() {
        let c = cfg();
        assert_eq!(
            provisioned_sram_bytes_per_cycle(Dataflow::Ws, &c),
            2 * c.pe_h + 20 * c.pe_w
        );
        assert_eq!(
            provisioned_sram_bytes_per_cycle(Dataflow::Os, &c),
            2 * c.pe_h + 34 * c.pe_w
        );
        assert_eq!(
            provisioned_sram_bytes_per_cycle(Dataflow::Outer, &c),
            2 * c.pe_h + 34 * c.pe_w
        );
    }

    #[test]
    fn utilization_stays_in_unit_interval() {
        for (m, k, n) in [(1, 1, 1), (7, 3, 5), (128, 128, 128), (1000, 1, 2000), (64, 100_000, 64)] {
            for df in [Dataflow::Ws, Dataflow::Os, Dataflow::Outer] {
                let t = simulate(df, &task(m, k, n, 3), &cfg()).unwrap();
                assert!(t.utilization > 0.0 && t.utilization <= 1.0, "{df:?} ({m},{k},{n})");
                assert_eq!(t.macs, 3 * m * k * n);
            }
        }
    }
}
