use crate::error::{Error, Result};
use crate::flow::{LatentBundle, Objective};
use crate::tensor::Element;

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Negative log-likelihood of a batch under a standard-normal base, in nats.
#[derive(Debug)]
pub struct NllResult<T: Element> {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// Gradient of the batch SUM: `dz = z`, `dlogdet = -1`.
    pub objective: Objective<T>,
}

/// `nll_n = 0.5 |z_n|^2 + 0.5 D ln(2 pi) - logdet_n`, accumulated in `f64`
/// left to right.
pub fn nll<T: Element>(bundle: &LatentBundle<T>) -> Result<NllResult<T>> {
    let n = bundle.batch();
    let d = bundle.dims() as f64;
    let mut per_sample = Vec::with_capacity(n);
    for (i, &ld) in bundle.logdet.iter().enumerate() {
        let mut sq = 0.0;
        for part in &bundle.parts {
            sq = part.sample(i).iter().fold(sq, |a, &v| {
                let v = v.as_f64();
                a + v * v
            });
        }
        let v = 0.5 * sq + d * HALF_LN_2PI - ld.as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("latent or log-determinant"));
        }
        per_sample.push(v);
    }
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    Ok(NllResult {
        per_sample,
        mean,
        objective: Objective { dz: bundle.parts.clone(), dlogdet: vec![-T::one(); n] },
    })
}
