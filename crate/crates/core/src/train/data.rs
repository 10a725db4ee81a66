//! Deterministic synthetic datasets.
//!
//! The 2-D sets come out as `(n, 2, 1, 1)` and are standardized with their
//! analytic moments, so every batch shares one fixed affine normalization.

use std::f64::consts::PI;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::tensor::{Element, Rng, Shape, Tensor};

/// Two-moons radial noise.
pub const MOON_NOISE: f64 = 0.1;
/// Noise is clamped to this many standard deviations.
pub const MOON_CLAMP: f64 = 3.0;
pub const GAUSSIAN_RADIUS: f64 = 2.0;
pub const GAUSSIAN_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    TwoMoons,
    EightGaussians,
    Checkerboard,
    /// `(n, 3, S, S)` images of soft coloured blobs.
    Blobs(usize),
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(Dataset::TwoMoons),
            "eight_gaussians" => Ok(Dataset::EightGaussians),
            "checkerboard" => Ok(Dataset::Checkerboard),
            _ => match s.strip_prefix("blobs").map(str::parse::<usize>) {
                Some(Ok(size)) if size >= 2 => Ok(Dataset::Blobs(size)),
                _ => Err(Error::Config(format!(
                    "unknown dataset `{s}` (expected two_moons, eight_gaussians, checkerboard or blobs<S>)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dataset::TwoMoons => f.write_str("two_moons"),
            Dataset::EightGaussians => f.write_str("eight_gaussians"),
            Dataset::Checkerboard => f.write_str("checkerboard"),
            Dataset::Blobs(s) => write!(f, "blobs{s}"),
        }
    }
}

impl Dataset {
    pub fn shape(&self, n: usize) -> Shape {
        match self {
            Dataset::Blobs(s) => Shape { n, c: 3, h: *s, w: *s },
            _ => Shape { n, c: 2, h: 1, w: 1 },
        }
    }

    pub fn is_points(&self) -> bool {
        !matches!(self, Dataset::Blobs(_))
    }

    /// Raw `f64` batch in NCHW order.
    pub fn generate_raw(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            Dataset::TwoMoons => standardize(two_moons_raw(n, rng), [0.5, 0.25], two_moons_variance()),
            Dataset::EightGaussians => {
                let var = GAUSSIAN_RADIUS * GAUSSIAN_RADIUS / 2.0 + GAUSSIAN_STD * GAUSSIAN_STD;
                standardize(eight_gaussians_raw(n, rng), [0.0, 0.0], [var, var])
            }
            Dataset::Checkerboard => standardize(checkerboard_raw(n, rng), [0.0, 0.0], [4.0 / 3.0; 2]),
            Dataset::Blobs(s) => blobs(n, *s, rng),
        }
    }

    pub fn generate<T: Element>(&self, n: usize, rng: &mut Rng) -> Result<Tensor<T>> {
        let raw = self.generate_raw(n, rng);
        Tensor::from_vec(self.shape(n), raw.into_iter().map(T::from_f64).collect())
    }
}

fn standardize(points: Vec<[f64; 2]>, mean: [f64; 2], var: [f64; 2]) -> Vec<f64> {
    let std = [var[0].sqrt(), var[1].sqrt()];
    points
        .into_iter()
        .flat_map(|p| [(p[0] - mean[0]) / std[0], (p[1] - mean[1]) / std[1]])
        .collect()
}

/// `E[min(Z^2, 9)]` for standard normal `Z`: the second moment of noise
/// clamped at three standard deviations.
const CLAMPED_SECOND_MOMENT: f64 = 0.995_007_3;

/// Per-axis variance of the two-moons mixture.
pub fn two_moons_variance() -> [f64; 2] {
    let r2 = 1.0 + MOON_NOISE * MOON_NOISE * CLAMPED_SECOND_MOMENT;
    let vx = (1.0 + r2) / 2.0 - 0.25;
    let ey2 = (r2 + 0.25 - 2.0 / PI) / 2.0;
    [vx, ey2 - 0.0625]
}

/// Two interleaved half-annuli: the upper one centred at the origin, the
/// lower one mirrored and centred at `(1, 0.5)`. Radii are `1 + noise`.
pub fn two_moons_raw(n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let lower = rng.below(2) == 1;
            let theta = PI * rng.uniform();
            let noise = (MOON_NOISE * rng.normal()).clamp(-MOON_CLAMP * MOON_NOISE, MOON_CLAMP * MOON_NOISE);
            let r = 1.0 + noise;
            if lower {
                [1.0 - r * theta.cos(), 0.5 - r * theta.sin()]
            } else {
                [r * theta.cos(), r * theta.sin()]
            }
        })
        .collect()
}

pub fn eight_gaussians_centers() -> [[f64; 2]; 8] {
    std::array::from_fn(|k| {
        let a = k as f64 * PI / 4.0;
        [GAUSSIAN_RADIUS * a.cos(), GAUSSIAN_RADIUS * a.sin()]
    })
}

pub fn eight_gaussians_raw(n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    let centers = eight_gaussians_centers();
    (0..n)
        .map(|_| {
            let c = centers[rng.below(8) as usize];
            [c[0] + GAUSSIAN_STD * rng.normal(), c[1] + GAUSSIAN_STD * rng.normal()]
        })
        .collect()
}

/// Uniform over the "black" unit squares of a 4x4 board on `[-2, 2]^2`,
/// those whose integer corner coordinates sum to an even number.
pub fn checkerboard_raw(n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let cell = rng.below(8) as i64;
            let col = cell % 4 - 2;
            let row = 2 * (cell / 4) + (col.rem_euclid(2)) - 2;
            [col as f64 + rng.uniform(), row as f64 + rng.uniform()]
        })
        .collect()
}

/// Three soft Gaussian blobs per image with random colours, plus a little
/// pixel noise so no channel is ever constant.
fn blobs(n: usize, size: usize, rng: &mut Rng) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; n * 3 * plane];
    for img in out.chunks_exact_mut(3 * plane) {
        for _ in 0..3 {
            let (cy, cx) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
            let radius = size as f64 * rng.uniform_range(0.08, 0.25);
            let colour = [rng.normal(), rng.normal(), rng.normal()];
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let k = (-d2 / (2.0 * radius * radius)).exp();
                    for (c, col) in colour.iter().enumerate() {
                        img[c * plane + y * size + x] += col * k;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    out
}

/// Batches generated on a background thread and delivered in order through
/// a bounded queue. The stream is a pure function of `(dataset, batch, seed)`.
pub struct BatchStream {
    rx: Receiver<Vec<f64>>,
    worker: Option<JoinHandle<()>>,
    shape: Shape,
}

impl BatchStream {
    pub fn spawn(dataset: Dataset, batch: usize, count: usize, seed: u64) -> Self {
        let (tx, rx) = sync_channel(4);
        let worker = std::thread::spawn(move || {
            let mut rng = Rng::new(seed);
            for _ in 0..count {
                if tx.send(dataset.generate_raw(batch, &mut rng)).is_err() {
                    break;
                }
            }
        });
        BatchStream { rx, worker: Some(worker), shape: dataset.shape(batch) }
    }

    /// Next batch as a tensor allocated on the calling thread, so it is
    /// metered where it is used.
    pub fn next_batch<T: Element>(&mut self) -> Result<Option<Tensor<T>>> {
        match self.rx.recv() {
            Ok(raw) => Ok(Some(Tensor::from_vec(self.shape, raw.into_iter().map(T::from_f64).collect())?)),
            Err(_) => Ok(None),
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // unblock the producer, then reap it
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for name in ["two_moons", "eight_gaussians", "checkerboard", "blobs16"] {
            assert_eq!(name.parse::<Dataset>().unwrap().to_string(), name);
        }
        assert!("spirals".parse::<Dataset>().is_err());
        assert!("blobs".parse::<Dataset>().is_err());
    }

    #[test]
    fn seeded_batches_repeat() {
        for ds in [Dataset::TwoMoons, Dataset::Checkerboard, Dataset::Blobs(4)] {
            let a = ds.generate_raw(16, &mut Rng::new(5));
            assert_eq!(a, ds.generate_raw(16, &mut Rng::new(5)));
        }
    }

    #[test]
    fn moons_stay_in_their_annuli() {
        let (lo, hi) = (1.0 - MOON_CLAMP * MOON_NOISE, 1.0 + MOON_CLAMP * MOON_NOISE);
        for p in two_moons_raw(5000, &mut Rng::new(1)) {
            let upper = p[0].hypot(p[1]);
            let lower = (p[0] - 1.0).hypot(p[1] - 0.5);
            let in_upper = p[1] >= 0.0 && (lo - 1e-12..=hi + 1e-12).contains(&upper);
            let in_lower = p[1] <= 0.5 && (lo - 1e-12..=hi + 1e-12).contains(&lower);
            assert!(in_upper || in_lower, "{p:?}");
        }
    }

    #[test]
    fn standardized_moments() {
        for ds in [Dataset::TwoMoons, Dataset::EightGaussians, Dataset::Checkerboard] {
            let v = ds.generate_raw(200_000, &mut Rng::new(2));
            for axis in 0..2 {
                let xs: Vec<f64> = v.iter().skip(axis).step_by(2).copied().collect();
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
                assert!(mean.abs() < 0.02, "{ds} axis {axis} mean {mean}");
                assert!((var - 1.0).abs() < 0.02, "{ds} axis {axis} var {var}");
            }
        }
    }

    #[test]
    fn gaussian_centers_on_circle() {
        for (k, c) in eight_gaussians_centers().iter().enumerate() {
            assert!((c[0].hypot(c[1]) - 2.0).abs() < 1e-12);
            let angle = c[1].atan2(c[0]).rem_euclid(2.0 * PI);
            assert!((angle - k as f64 * PI / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkerboard_cells_are_black() {
        for p in checkerboard_raw(2000, &mut Rng::new(3)) {
            assert!(p.iter().all(|v| (-2.0..2.0).contains(v)));
            assert_eq!((p[0].floor() as i64 + p[1].floor() as i64).rem_euclid(2), 0, "{p:?}");
        }
    }

    #[test]
    fn stream_matches_direct_generation() {
        let mut rng = Rng::new(9);
        let direct: Vec<Vec<f64>> = (0..5).map(|_| Dataset::TwoMoons.generate_raw(4, &mut rng)).collect();
        let mut s = BatchStream::spawn(Dataset::TwoMoons, 4, 5, 9);
        for want in direct {
            let got = s.next_batch::<f64>().unwrap().unwrap();
            assert_eq!(got.data(), &want[..]);
        }
        assert!(s.next_batch::<f64>().unwrap().is_none());
        // dropping a stream mid-way must not hang
        let mut early = BatchStream::spawn(Dataset::Blobs(8), 2, 100, 1);
        early.next_batch::<f32>().unwrap();
    }
}
