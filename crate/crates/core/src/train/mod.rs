//! Likelihood objective, optimizer, toy data and the training loop.

mod adam;
pub mod data;
mod objective;

pub use adam::{clip_grad_norm, grad_norm, Adam, AdamConfig, StepOutcome};
pub use data::{BatchStream, Dataset};
pub use objective::{nll, NllResult, HALF_LN_2PI};

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::meter::MemoryMeter;
use crate::checkpoint::{self, CheckpointHeader};
use crate::conditioner::DEFAULT_HIDDEN;
use crate::error::{Error, Result};
use crate::flow::{Engine, FlowConfig, FlowModel};
use crate::layers::CouplingKind;
use crate::tensor::{DType, Element, Rng, Tensor};

pub const METRICS_HEADER: &str = "iter,nll,grad_norm,peak_bytes,wall_ms";

/// Eval-set size for the 2-D datasets; image datasets evaluate on one batch.
pub const POINT_EVAL_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub batch: usize,
    /// Multiscale levels; ignored for 2-D datasets, which never squeeze.
    pub scales: usize,
    pub steps: usize,
    pub coupling: CouplingKind,
    pub hidden: usize,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    pub clip: f64,
    pub engine: Engine,
    pub dtype: DType,
    /// Record real wall-clock time per iteration (otherwise 0, keeping the
    /// metrics file reproducible).
    pub timing: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "two_moons".into(),
            batch: 8,
            scales: 2,
            steps: 4,
            coupling: CouplingKind::Affine,
            hidden: DEFAULT_HIDDEN,
            lr: 1e-3,
            iters: 1000,
            seed: 0,
            clip: 10.0,
            engine: Engine::Recompute,
            dtype: DType::F32,
            timing: false,
            eval_batch: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl TrainConfig {
    pub fn dataset(&self) -> Result<Dataset> {
        self.dataset.parse()
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        let base = match self.dataset()? {
            Dataset::Blobs(s) => FlowConfig::new(3, s, s, self.scales, self.steps),
            _ => FlowConfig::points(self.steps),
        };
        let cfg = base.with_coupling(self.coupling).with_hidden(self.hidden);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip)));
        }
        if self.eval_batch == Some(0) {
            return Err(Error::Config("eval batch must be at least 1".into()));
        }
        self.flow_config().map(drop)
    }

    fn eval_size(&self) -> Result<usize> {
        Ok(self.eval_batch.unwrap_or(if self.dataset()?.is_points() { POINT_EVAL_SIZE } else { self.batch }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub iter: usize,
    pub nll: f64,
    pub grad_norm: f64,
    pub peak_bytes: u64,
    pub wall_ms: f64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.nll, self.grad_norm, self.peak_bytes, self.wall_ms)
    }
}

#[derive(Debug)]
pub struct TrainReport<T: Element> {
    pub model: FlowModel<T>,
    pub records: Vec<MetricRecord>,
    /// Eval-set mean NLL after ActNorm init, before the first update.
    pub initial_nll: Option<f64>,
    pub final_nll: Option<f64>,
    pub skipped_steps: usize,
    pub optimizer_steps: u64,
}

impl<T: Element> TrainReport<T> {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

fn eval_nll<T: Element>(model: &mut FlowModel<T>, x: &Tensor<T>, iter: usize) -> Result<f64> {
    let bundle = model.forward(x)?;
    nll(&bundle).map(|r| r.mean).map_err(|e| diverged(e, iter))
}

fn diverged(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged { iter, what: format!("non-finite {what}") },
        other => other,
    }
}

/// Runs the configured training. Everything this thread allocates is
/// metered privately, so `peak_bytes` is unaffected by other threads.
pub fn train_loop<T: Element>(cfg: &TrainConfig) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if cfg.dtype != T::DTYPE {
        return Err(Error::Config(format!("config asks for {}, loop runs {}", cfg.dtype, T::DTYPE)));
    }
    let meter = Arc::new(MemoryMeter::new());
    let _scope = MemoryMeter::enter(&meter);

    let dataset = cfg.dataset()?;
    let mut root = Rng::new(cfg.seed);
    let mut model_rng = root.fork();
    let data_seed = root.next_u64();
    let mut eval_rng = root.fork();

    let mut model = FlowModel::<T>::new(cfg.flow_config()?, &mut model_rng)?;
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut opt = Adam::<T>::new(adam_cfg);
    let mut metrics = match &cfg.metrics {
        Some(path) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(cfg.iters);
    let mut initial_nll = None;
    let mut final_nll = None;
    let mut skipped = 0;
    if cfg.iters > 0 {
        let eval = dataset.generate::<T>(cfg.eval_size()?, &mut eval_rng)?;
        let mut stream = BatchStream::spawn(dataset, cfg.batch, cfg.iters, data_seed);
        for iter in 0..cfg.iters {
            let x = stream
                .next_batch::<T>()?
                .ok_or_else(|| Error::Config("data stream ended early".into()))?;
            meter.reset();
            let start = Instant::now();
            let mut batch_nll = f64::NAN;
            let dx = model
                .grad(cfg.engine, &x, |bundle| {
                    let r = nll(bundle)?;
                    batch_nll = r.mean;
                    Ok(r.objective)
                })
                .map_err(|e| diverged(e, iter))?;
            drop((dx, x));
            let peak_bytes = meter.peak();
            if iter == 0 {
                // ActNorm is initialized now; parameters not yet updated
                initial_nll = Some(eval_nll(&mut model, &eval, 0)?);
            }
            let mut params: Vec<_> = model.params_mut().into_iter().map(|(_, p)| p).collect();
            let norm = clip_grad_norm(&mut params, cfg.clip);
            if opt.step(params)? == StepOutcome::Skipped {
                skipped += 1;
            }
            let wall_ms = if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
            let rec = MetricRecord { iter, nll: batch_nll, grad_norm: norm, peak_bytes, wall_ms };
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", rec.csv_row())?;
            }
            records.push(rec);
        }
        final_nll = Some(eval_nll(&mut model, &eval, cfg.iters)?);
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if let Some(path) = &cfg.checkpoint {
        let mut header = CheckpointHeader::for_model(&model, adam_cfg, opt.step_count());
        header.dataset = Some(dataset.to_string());
        checkpoint::save(path, &model, &header)?;
    }
    Ok(TrainReport {
        model,
        records,
        initial_nll,
        final_nll,
        skipped_steps: skipped,
        optimizer_steps: opt.step_count(),
    })
}
