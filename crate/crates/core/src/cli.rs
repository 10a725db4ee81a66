//! `revflow` command line: train | sample | bench | verify.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::bench::{self, Budget, SweepOptions, DEPTHS, DEPTH_LAW, SIZES};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flow::{Engine, FlowModel};
use crate::layers::CouplingKind;
use crate::tensor::{io as nft, DType, Element, Rng, Tensor};
use crate::train::{train_loop, TrainConfig};
use crate::verify;

pub const SEED_ENV: &str = "REVFLOW_SEED";

#[derive(Debug, Parser)]
#[command(name = "revflow", version, about = "Memory-frugal normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a flow on a toy dataset.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Measure peak training memory against depth and input size.
    Bench(BenchArgs),
    /// Run the gradient and invertibility self-checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// two_moons | eight_gaussians | checkerboard | blobsN
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    /// Flow steps per scale.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    coupling: Option<CouplingKind>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    engine: Option<Engine>,
    #[arg(long)]
    dtype: Option<DType>,
    /// Record wall-clock time in the metrics file.
    #[arg(long)]
    timing: bool,
    /// Output directory for checkpoint.nfc and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for samples.nft and the image grid.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Depth,
    Size,
    Both,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Sweep::Depth)]
    sweep: Sweep,
    /// Byte cap for the size sweep: `auto`, `none` or a byte count.
    #[arg(long, default_value = "none")]
    budget: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write gnuplot data blocks.
    #[arg(long)]
    gnuplot: bool,
    #[arg(long, value_delimiter = ',', default_values_t = DEPTHS)]
    depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = SIZES)]
    sizes: Vec<usize>,
    /// Input size for the depth sweep.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Steps per scale for the size sweep.
    #[arg(long, default_value_t = 8)]
    depth: usize,
    #[arg(long, default_value_t = SweepOptions::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = SweepOptions::default().channels)]
    channels: usize,
    #[arg(long, default_value_t = SweepOptions::default().scales)]
    scales: usize,
    #[arg(long, default_value_t = SweepOptions::default().hidden)]
    hidden: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Run a single check group.
    #[arg(long)]
    only: Option<String>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a).map_err(Failure::from),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn env_seed() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Merges the config file, the flags (which win) and the environment seed
/// (which only fills a gap) into a validated training config.
fn train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut map = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(e.into()))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Failure::Usage(format!("{}: config must be a JSON object", path.display()))),
                Err(e) => return Err(Failure::Usage(format!("{}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            map.insert(key.into(), v);
        }
    };
    set("dataset", a.dataset.clone().map(Value::from));
    set("batch", a.batch.map(Value::from));
    set("scales", a.scales.map(Value::from));
    set("steps", a.steps.map(Value::from));
    set("coupling", a.coupling.map(|k| Value::from(k.to_string())));
    set("hidden", a.hidden.map(Value::from));
    set("lr", a.lr.map(Value::from));
    set("iters", a.iters.map(Value::from));
    set("seed", a.seed.map(Value::from));
    set("clip", a.clip.map(Value::from));
    set("engine", a.engine.map(|e| Value::from(e.to_string())));
    set("dtype", a.dtype.map(|d| Value::from(d.to_string())));
    if a.timing {
        set("timing", Some(Value::Bool(true)));
    }
    if !map.contains_key("dataset") {
        return Err(Failure::Usage("the following required arguments were not provided: --dataset".into()));
    }
    if !map.contains_key("seed") {
        if let Some(seed) = env_seed()? {
            map.insert("seed".into(), Value::from(seed));
        }
    }
    if let Some(out) = &a.out {
        map.insert("checkpoint".into(), Value::from(out.join("checkpoint.nfc").to_string_lossy().as_ref()));
        map.insert("metrics".into(), Value::from(out.join("metrics.csv").to_string_lossy().as_ref()));
    } else {
        map.entry("checkpoint").or_insert_with(|| Value::from("checkpoint.nfc"));
        map.entry("metrics").or_insert_with(|| Value::from("metrics.csv"));
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(map)).map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> std::result::Result<i32, Failure> {
    let cfg = train_config(&a)?;
    for path in [&cfg.checkpoint, &cfg.metrics].into_iter().flatten() {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
        }
    }
    let summary = match cfg.dtype {
        DType::F32 => train_and_summarize::<f32>(&cfg)?,
        DType::F64 => train_and_summarize::<f64>(&cfg)?,
    };
    println!("{summary}");
    Ok(0)
}

fn train_and_summarize<T: Element>(cfg: &TrainConfig) -> Result<String> {
    let report = train_loop::<T>(cfg)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut s = format!(
        "trained {} iterations ({} skipped): eval nll {} -> {}",
        report.records.len(),
        report.skipped_steps,
        fmt(report.initial_nll),
        fmt(report.final_nll)
    );
    for (what, path) in [("checkpoint", &cfg.checkpoint), ("metrics", &cfg.metrics)] {
        if let Some(p) = path {
            s.push_str(&format!("\n{what}: {}", p.display()));
        }
    }
    Ok(s)
}

fn cmd_sample(a: SampleArgs) -> Result<i32> {
    let bytes = std::fs::read(&a.ckpt)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", a.ckpt.display())))?;
    let header = checkpoint::decode_header(&bytes)?;
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed().map_err(|f| match f {
            Failure::Usage(m) => Error::Config(m),
            Failure::Runtime(e) => e,
        })?
        .unwrap_or(0),
    };
    std::fs::create_dir_all(&a.out)?;
    let written = match header.dtype {
        DType::F32 => sample_into::<f32>(&bytes, a.n, seed, &a.out)?,
        DType::F64 => sample_into::<f64>(&bytes, a.n, seed, &a.out)?,
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

fn sample_into<T: Element>(bytes: &[u8], n: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, _) = checkpoint::decode::<T>(bytes)?;
    let x = draw(&model, n, seed)?;
    let mut written = vec![out.join("samples.nft")];
    nft::save(&written[0], &x)?;
    let s = x.shape();
    if s.h > 1 || s.w > 1 {
        let (ext, img) = image_grid(&x);
        let path = out.join(format!("samples.{ext}"));
        std::fs::write(&path, img)?;
        written.push(path);
    }
    Ok(written)
}

fn draw<T: Element>(model: &FlowModel<T>, n: usize, seed: u64) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    model.sample(n, &mut Rng::new(seed))
}

/// Tiles the samples into a near-square grid as binary PGM (one channel,
/// or channel 0 when not three) or PPM (three channels), min-max scaled to
/// 0..=255 over the whole grid. Unused cells are black.
pub fn image_grid<T: Element>(x: &Tensor<T>) -> (&'static str, Vec<u8>) {
    let s = x.shape();
    let rgb = s.c == 3;
    let cols = (s.n as f64).sqrt().ceil() as usize;
    let rows = s.n.div_ceil(cols);
    let (gw, gh) = (cols * s.w, rows * s.h);
    let bands = if rgb { 3 } else { 1 };
    let vals: Vec<f64> = x.to_f64_vec();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut pixels = vec![0u8; gw * gh * bands];
    for i in 0..s.n {
        let (gy, gx) = (i / cols * s.h, i % cols * s.w);
        for b in 0..bands {
            let plane = &vals[(i * s.c + b) * s.h * s.w..];
            for y in 0..s.h {
                for xx in 0..s.w {
                    let v = plane[y * s.w + xx];
                    pixels[((gy + y) * gw + gx + xx) * bands + b] = ((v - lo) * scale).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    let mut out = format!("{}\n{gw} {gh}\n255\n", if rgb { "P6" } else { "P5" }).into_bytes();
    out.extend_from_slice(&pixels);
    (if rgb { "ppm" } else { "pgm" }, out)
}

fn parse_budget(s: &str) -> std::result::Result<Budget, Failure> {
    match s {
        "auto" => Ok(Budget::Auto(bench::AUTO_BUDGET_FACTOR)),
        "none" => Ok(Budget::None),
        n => n
            .parse()
            .map(Budget::Bytes)
            .map_err(|_| Failure::Usage(format!("--budget must be `auto`, `none` or a byte count, got `{n}`"))),
    }
}

fn cmd_bench(a: BenchArgs) -> std::result::Result<i32, Failure> {
    let budget = parse_budget(&a.budget)?;
    if a.depths.is_empty() || a.sizes.is_empty() {
        return Err(Failure::Usage("--depths and --sizes need at least one value".into()));
    }
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let opts = SweepOptions { channels: a.channels, batch: a.batch, scales: a.scales, hidden: a.hidden, seed };
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.into()))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path = a.out.join(name);
        std::fs::write(&path, body)?;
        println!("wrote {}", path.display());
        Ok(())
    };
    let config_err = |e: Error| match e {
        Error::Config(m) | Error::InvalidArgument(m) | Error::Shape(m) => Failure::Usage(m),
        other => Failure::Runtime(other),
    };

    if matches!(a.sweep, Sweep::Depth | Sweep::Both) {
        let recs = bench::sweep_depth(&opts, a.size, &a.depths).map_err(config_err)?;
        write("bench_depth.csv", bench::to_csv(&recs))?;
        if a.gnuplot {
            write("bench_depth.dat", bench::to_gnuplot(&recs, false))?;
        }
        if let Some(store) = bench::depth_ratio(&recs, Engine::Store) {
            println!("store depth ratio: {store:.2}x");
        }
        match bench::depth_ratio(&recs, Engine::Recompute) {
            Some(r) => {
                let verdict = if DEPTH_LAW.contains(&r) { "PASS" } else { "FAIL" };
                println!("recompute activation peak, deepest/shallowest: {r:.4}");
                println!("depth-law ratio: {r:.1}x {verdict}");
            }
            None => println!("depth-law ratio: n/a"),
        }
    }
    if matches!(a.sweep, Sweep::Size | Sweep::Both) {
        let (recs, applied) = bench::sweep_size(&opts, a.depth, &a.sizes, budget).map_err(config_err)?;
        write("bench_size.csv", bench::to_csv(&recs))?;
        if a.gnuplot {
            write("bench_size.dat", bench::to_gnuplot(&recs, true))?;
        }
        if let Some(b) = applied {
            println!("budget: {b} bytes");
        }
        for engine in [Engine::Recompute, Engine::Store] {
            for (s0, s1, r) in bench::size_ratios(&recs, engine) {
                println!("{engine} size ratio {s0}->{s1}: {r:.2}x");
            }
            let oom: Vec<String> = recs
                .iter()
                .filter(|r| r.mode == engine && r.status == bench::Status::Oom)
                .map(|r| r.size.to_string())
                .collect();
            if !oom.is_empty() {
                println!("{engine} oom at sizes: {}", oom.join(", "));
            }
        }
    }
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> std::result::Result<i32, Failure> {
    let checks = verify::run(a.only.as_deref()).map_err(|e| match e {
        Error::Config(m) => Failure::Usage(m),
        other => Failure::Runtime(other),
    })?;
    print!("{}", verify::render_table(&checks));
    Ok(if checks.iter().all(verify::Check::passed) { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_header_and_scaling() {
        let x = Tensor::<f32>::from_vec((2, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let (ext, img) = image_grid(&x);
        assert_eq!(ext, "pgm");
        let head = b"P5\n4 2\n255\n";
        assert_eq!(&img[..head.len()], head);
        let px = &img[head.len()..];
        assert_eq!(px.len(), 8);
        assert_eq!(px[0], 0);
        assert_eq!(px[2 + 4 + 1], 255);
        let rgb = Tensor::<f32>::zeros((3, 3, 2, 2)).unwrap();
        let (ext, img) = image_grid(&rgb);
        assert_eq!(ext, "ppm");
        assert!(img.starts_with(b"P6\n4 4\n255\n"));
    }

    #[test]
    fn flags_override_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"dataset":"checkerboard","steps":3,"iters":5}"#).unwrap();
        let args = TrainArgs {
            config: Some(file.clone()),
            dataset: None,
            batch: None,
            scales: None,
            steps: Some(2),
            coupling: None,
            hidden: None,
            lr: None,
            iters: None,
            seed: Some(9),
            clip: None,
            engine: None,
            dtype: None,
            timing: false,
            out: Some(dir.path().into()),
        };
        let cfg = train_config(&args).ok().unwrap();
        assert_eq!((cfg.dataset.as_str(), cfg.steps, cfg.iters, cfg.seed), ("checkerboard", 2, 5, 9));
        assert_eq!(cfg.checkpoint.unwrap(), dir.path().join("checkpoint.nfc"));

        std::fs::write(&file, r#"{"dataset":"checkerboard","stepz":3}"#).unwrap();
        assert!(matches!(train_config(&args), Err(Failure::Usage(m)) if m.contains("stepz")));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["revflow", "train", "--steps", "2"]), 2);
        assert_eq!(run(["revflow", "frobnicate"]), 2);
        assert_eq!(run(["revflow", "bench", "--budget", "lots"]), 2);
        assert_eq!(run(["revflow", "verify", "--only", "nope"]), 2);
    }
}
