//! Memory benchmarks: peak metered bytes of one forward + gradient step as
//! a function of depth and of input size, for both gradient engines.

pub mod meter;

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use crate::conditioner::DEFAULT_HIDDEN;
use crate::error::{Error, Result};
use crate::flow::{Engine, FlowConfig, FlowModel};
use crate::tensor::{Element, Rng, Tensor};
use crate::train::{nll, Dataset};
use meter::MemoryMeter;

pub const CSV_HEADER: &str = "mode,depth,size,batch,peak_bytes,param_bytes,wall_ms,status";

/// Conditioner width used by the sweeps.
pub const BENCH_HIDDEN: usize = DEFAULT_HIDDEN;

pub const DEPTHS: [usize; 5] = [2, 4, 8, 16, 32];
pub const SIZES: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Oom,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::Oom => "oom",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: Engine,
    pub depth: usize,
    pub size: usize,
    pub batch: usize,
    /// Parameter bytes plus the activation peak of the step.
    pub peak_bytes: u64,
    /// Parameters and their gradient buffers.
    pub param_bytes: u64,
    pub wall_ms: f64,
    pub status: Status,
}

impl BenchRecord {
    pub fn activation_bytes(&self) -> u64 {
        self.peak_bytes - self.param_bytes
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{}",
            self.mode, self.depth, self.size, self.batch, self.peak_bytes, self.param_bytes, self.wall_ms, self.status
        )
    }
}

/// One forward + gradient evaluation of the NLL (no optimizer update) under
/// a private meter. `budget` caps total bytes, parameters included; crossing
/// it unwinds the step and yields an `oom` record. Parameter gradients are
/// cleared afterwards.
pub fn measure_step<T: Element>(
    model: &mut FlowModel<T>,
    x: &Tensor<T>,
    engine: Engine,
    budget: Option<u64>,
) -> Result<BenchRecord> {
    let cfg = model.config().clone();
    let param_bytes = model.param_bytes();
    let meter = Arc::new(MemoryMeter::new());
    meter.set_budget(budget.map(|b| b.saturating_sub(param_bytes)));
    let start = Instant::now();
    let outcome = {
        let _scope = MemoryMeter::enter(&meter);
        // the input is charged to the step
        let x = x.clone();
        meter::check_budget().and_then(|_| model.grad(engine, &x, |b| Ok(nll(b)?.objective)).map(drop))
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    model.zero_grad();
    let status = match outcome {
        Ok(()) => Status::Ok,
        Err(Error::OutOfBudget { .. }) => Status::Oom,
        Err(e) => return Err(e),
    };
    debug_assert_eq!(meter.live(), 0, "step leaked tensors");
    Ok(BenchRecord {
        mode: engine,
        depth: cfg.steps,
        size: cfg.height,
        batch: x.shape().n,
        peak_bytes: param_bytes + meter.peak(),
        param_bytes,
        wall_ms,
        status,
    })
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub channels: usize,
    pub batch: usize,
    pub scales: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { channels: 3, batch: 8, scales: 2, hidden: BENCH_HIDDEN, seed: 0 }
    }
}

fn run_one(opts: &SweepOptions, engine: Engine, depth: usize, size: usize, budget: Option<u64>) -> Result<BenchRecord> {
    let mut rng = Rng::new(opts.seed);
    let cfg = FlowConfig::new(opts.channels, size, size, opts.scales, depth).with_hidden(opts.hidden);
    let mut model = FlowModel::<f32>::new(cfg, &mut rng)?;
    let x = if opts.channels == 3 {
        Dataset::Blobs(size).generate::<f32>(opts.batch, &mut rng)?
    } else {
        Tensor::randn((opts.batch, opts.channels, size, size), &mut rng)?
    };
    measure_step(&mut model, &x, engine, budget)
}

/// Fixed size, varying depth; rows ordered by engine then depth.
pub fn sweep_depth(opts: &SweepOptions, size: usize, depths: &[usize]) -> Result<Vec<BenchRecord>> {
    let mut out = Vec::new();
    for engine in [Engine::Recompute, Engine::Store] {
        for &k in depths {
            out.push(run_one(opts, engine, k, size, None)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    None,
    Bytes(u64),
    /// A multiple of the recompute peak at the largest size.
    Auto(f64),
}

pub const AUTO_BUDGET_FACTOR: f64 = 1.2;

/// Fixed depth, varying size. Returns the records and the budget applied.
pub fn sweep_size(
    opts: &SweepOptions,
    depth: usize,
    sizes: &[usize],
    budget: Budget,
) -> Result<(Vec<BenchRecord>, Option<u64>)> {
    let budget = match budget {
        Budget::None => None,
        Budget::Bytes(b) => Some(b),
        Budget::Auto(factor) => {
            let largest = *sizes.iter().max().ok_or_else(|| Error::Config("no sizes to sweep".into()))?;
            let calib = run_one(opts, Engine::Recompute, depth, largest, None)?;
            Some((calib.peak_bytes as f64 * factor).round() as u64)
        }
    };
    let mut out = Vec::new();
    for engine in [Engine::Recompute, Engine::Store] {
        for &s in sizes {
            out.push(run_one(opts, engine, depth, s, budget)?);
        }
    }
    Ok((out, budget))
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// One gnuplot data block per engine (separated by two blank lines, so
/// `index 0` / `index 1` select them): `x activation_bytes peak_bytes status`,
/// where `x` is `depth` or `size`.
pub fn to_gnuplot(records: &[BenchRecord], by_size: bool) -> String {
    let mut s = String::new();
    for (i, engine) in [Engine::Recompute, Engine::Store].into_iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        let _ = writeln!(s, "# mode={engine}");
        let _ = writeln!(s, "# {} activation_bytes peak_bytes status", if by_size { "size" } else { "depth" });
        for r in records.iter().filter(|r| r.mode == engine) {
            let x = if by_size { r.size } else { r.depth };
            let _ = writeln!(s, "{x} {} {} {}", r.activation_bytes(), r.peak_bytes, r.status);
        }
    }
    s
}

/// Activation peak at the deepest over the shallowest configuration of
/// `engine`.
pub fn depth_ratio(records: &[BenchRecord], engine: Engine) -> Option<f64> {
    let rows: Vec<_> = records.iter().filter(|r| r.mode == engine && r.status == Status::Ok).collect();
    let lo = rows.iter().min_by_key(|r| r.depth)?;
    let hi = rows.iter().max_by_key(|r| r.depth)?;
    Some(hi.activation_bytes() as f64 / lo.activation_bytes() as f64)
}

/// Activation-peak ratios between consecutive sizes of `engine`.
pub fn size_ratios(records: &[BenchRecord], engine: Engine) -> Vec<(usize, usize, f64)> {
    let mut rows: Vec<_> = records.iter().filter(|r| r.mode == engine && r.status == Status::Ok).collect();
    rows.sort_by_key(|r| r.size);
    rows.windows(2)
        .map(|w| (w[0].size, w[1].size, w[1].activation_bytes() as f64 / w[0].activation_bytes() as f64))
        .collect()
}

pub const DEPTH_LAW: std::ops::RangeInclusive<f64> = 0.95..=1.10;
