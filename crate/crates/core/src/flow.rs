//! Multiscale flow composition and the two gradient engines.
//!
//! Per scale the stack is `[Haar, K x (ActNorm, Inv1x1, Coupling), FactorOut]`,
//! with the last scale skipping the factor-out. `scales == 0` drops the Haar
//! squeeze entirely, which is the layout used for 2-D point data stored as
//! `(n, 2, 1, 1)`.
//!
//! The recompute engine consumes the latent bundle and walks the layers in
//! reverse, holding only the current `(y, dy)` boundary: every layer rebuilds
//! its input by inversion. The store engine keeps each layer's input during a
//! fresh forward pass, the way an autodiff tape would.

use serde::{Deserialize, Serialize};

use crate::bench::meter;
use crate::conditioner::DEFAULT_HIDDEN;
use crate::error::{Error, Result};
use crate::layers::{
    ActNorm, ActNormSaved, Coupling, CouplingKind, CouplingSaved, FactorOut, HaarSaved, HaarSqueeze, Inv1x1Conv,
    Inv1x1Saved, InvertibleLayer,
};
use crate::param::Param;
use crate::tensor::{Element, Rng, Shape, Tensor};

/// Architecture of a [`FlowModel`]; serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub scales: usize,
    pub steps: usize,
    pub coupling: CouplingKind,
    pub hidden: usize,
}

impl FlowConfig {
    pub fn new(channels: usize, height: usize, width: usize, scales: usize, steps: usize) -> Self {
        FlowConfig {
            channels,
            height,
            width,
            scales,
            steps,
            coupling: CouplingKind::Affine,
            hidden: DEFAULT_HIDDEN,
        }
    }

    /// 2-D point data: no Haar squeeze, two channels at 1x1.
    pub fn points(steps: usize) -> Self {
        Self::new(2, 1, 1, 0, steps)
    }

    pub fn with_coupling(mut self, kind: CouplingKind) -> Self {
        self.coupling = kind;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        Shape { n, c: self.channels, h: self.height, w: self.width }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad(format!("input dims must be positive, got {}x{}x{}", self.channels, self.height, self.width));
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        let div = 1usize.checked_shl(self.scales as u32).unwrap_or(0);
        if div == 0 || self.height % div != 0 || self.width % div != 0 {
            return bad(format!(
                "input {}x{} is not divisible by 2^{} for {} scales",
                self.height, self.width, self.scales, self.scales
            ));
        }
        if self.scales == 0 && self.steps > 0 && self.channels % 2 != 0 {
            return bad(format!("coupling needs an even channel count, got {}", self.channels));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum FlowLayer<T: Element> {
    Haar(HaarSqueeze),
    ActNorm(ActNorm<T>),
    Inv1x1(Inv1x1Conv<T>),
    Coupling(Coupling<T>),
    Factor(FactorOut),
}

impl<T: Element> FlowLayer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            FlowLayer::Haar(_) => "haar",
            FlowLayer::ActNorm(_) => "actnorm",
            FlowLayer::Inv1x1(_) => "inv1x1",
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::Factor(_) => "factor",
        }
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            FlowLayer::Haar(_) | FlowLayer::Factor(_) => Vec::new(),
            FlowLayer::ActNorm(l) => l.params(),
            FlowLayer::Inv1x1(l) => l.params(),
            FlowLayer::Coupling(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match self {
            FlowLayer::Haar(_) | FlowLayer::Factor(_) => Vec::new(),
            FlowLayer::ActNorm(l) => l.params_mut(),
            FlowLayer::Inv1x1(l) => l.params_mut(),
            FlowLayer::Coupling(l) => l.params_mut(),
        }
    }
}

enum Saved<T: Element> {
    Haar(HaarSaved<T>),
    ActNorm(ActNormSaved<T>),
    Inv1x1(Inv1x1Saved<T>),
    Coupling(CouplingSaved<T>),
    Factor,
}

/// Model output: factored-out parts in scale order followed by the final
/// tensor, plus the per-sample log-determinant.
#[derive(Debug)]
pub struct LatentBundle<T: Element> {
    pub parts: Vec<Tensor<T>>,
    pub logdet: Vec<T>,
    version: u64,
}

impl<T: Element> LatentBundle<T> {
    pub fn batch(&self) -> usize {
        self.logdet.len()
    }

    /// Total latent elements per sample.
    pub fn dims(&self) -> usize {
        self.parts.iter().map(|p| p.shape().sample_len()).sum()
    }

    /// Sample `n` flattened across all parts, in part order.
    pub fn flatten_sample(&self, n: usize) -> Vec<T> {
        self.parts.iter().flat_map(|p| p.sample(n).iter().copied()).collect()
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// Upstream gradients for a gradient engine: `dz` per latent part and the
/// weight of each sample's log-determinant.
#[derive(Debug)]
pub struct Objective<T: Element> {
    pub dz: Vec<Tensor<T>>,
    pub dlogdet: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Recompute,
    Store,
}

impl std::str::FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recompute" => Ok(Engine::Recompute),
            "store" => Ok(Engine::Store),
            other => Err(format!("unknown engine `{other}` (expected recompute or store)")),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Recompute => "recompute",
            Engine::Store => "store",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FlowModel<T: Element> {
    config: FlowConfig,
    layers: Vec<FlowLayer<T>>,
    // bumped on every mutable parameter access; bundles remember it
    version: u64,
}

fn add_logdet<T: Element>(acc: &mut [T], ld: &[T]) {
    for (a, &l) in acc.iter_mut().zip(ld) {
        *a = *a + l;
    }
}

impl<T: Element> FlowModel<T> {
    pub fn new(config: FlowConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut c = config.channels;
        let push_steps = |layers: &mut Vec<FlowLayer<T>>, c: usize, rng: &mut Rng| -> Result<()> {
            for _ in 0..config.steps {
                layers.push(FlowLayer::ActNorm(ActNorm::new(c)?));
                layers.push(FlowLayer::Inv1x1(Inv1x1Conv::new(c, rng)?));
                layers.push(FlowLayer::Coupling(Coupling::new(config.coupling, c, config.hidden, rng)?));
            }
            Ok(())
        };
        if config.scales == 0 {
            push_steps(&mut layers, c, rng)?;
        }
        for scale in 0..config.scales {
            layers.push(FlowLayer::Haar(HaarSqueeze));
            c *= 4;
            push_steps(&mut layers, c, rng)?;
            if scale + 1 < config.scales {
                layers.push(FlowLayer::Factor(FactorOut::new(c)?));
                c -= c / 2;
            }
        }
        Ok(FlowModel { config, layers, version: 0 })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn layers(&self) -> &[FlowLayer<T>] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Shapes of the latent parts for a batch of `n`, in bundle order.
    pub fn latent_shapes(&self, n: usize) -> Vec<Shape> {
        let mut s = self.config.input_shape(n);
        let mut parts = Vec::new();
        for layer in &self.layers {
            match layer {
                FlowLayer::Haar(_) => s = Shape { n, c: 4 * s.c, h: s.h / 2, w: s.w / 2 },
                FlowLayer::Factor(f) => {
                    parts.push(f.factored_shape(s));
                    s = f.kept_shape(s);
                }
                _ => {}
            }
        }
        parts.push(s);
        parts
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.config.input_shape(x.shape().n);
        if x.shape() != want {
            return Err(Error::shape(format!("model input must be {want}, got {}", x.shape())));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<LatentBundle<T>> {
        self.check_input(x)?;
        let n = x.shape().n;
        let mut logdet = vec![T::zero(); n];
        let mut parts = Vec::new();
        let mut cur: Option<Tensor<T>> = None;
        for layer in &mut self.layers {
            let input = cur.as_ref().unwrap_or(x);
            let (y, ld) = match layer {
                FlowLayer::Haar(l) => l.forward(input)?,
                FlowLayer::ActNorm(l) => l.forward(input)?,
                FlowLayer::Inv1x1(l) => l.forward(input)?,
                FlowLayer::Coupling(l) => l.forward(input)?,
                FlowLayer::Factor(f) => {
                    let (kept, part) = f.split(input)?;
                    parts.push(part);
                    (kept, Vec::new())
                }
            };
            add_logdet(&mut logdet, &ld);
            cur = Some(y);
            meter::check_budget()?;
        }
        parts.push(match cur {
            Some(t) => t,
            None => x.clone(),
        });
        Ok(LatentBundle { parts, logdet, version: self.version })
    }

    /// Inverse from latent parts (bundle order).
    pub fn inverse(&self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let n = parts.first().map(|p| p.shape().n).unwrap_or(0);
        let want = self.latent_shapes(n.max(1));
        if parts.len() != want.len() {
            return Err(Error::shape(format!(
                "model expects {} latent parts, got {}",
                want.len(),
                parts.len()
            )));
        }
        for (i, (p, w)) in parts.iter().zip(&want).enumerate() {
            if p.shape() != *w {
                return Err(Error::shape(format!("latent part {i} must be {w}, got {}", p.shape())));
            }
        }
        let mut idx = parts.len() - 1;
        let mut cur = parts[idx].clone();
        for layer in self.layers.iter().rev() {
            cur = match layer {
                FlowLayer::Haar(l) => InvertibleLayer::<T>::inverse(l, &cur)?,
                FlowLayer::ActNorm(l) => l.inverse(&cur)?,
                FlowLayer::Inv1x1(l) => l.inverse(&cur)?,
                FlowLayer::Coupling(l) => l.inverse(&cur)?,
                FlowLayer::Factor(f) => {
                    idx -= 1;
                    f.merge(&cur, &parts[idx])?
                }
            };
        }
        Ok(cur)
    }

    /// Draws every latent part from a standard normal (parts in bundle
    /// order) and maps them back to data space.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor<T>> {
        let parts = self
            .latent_shapes(n)
            .into_iter()
            .map(|s| Tensor::randn(s, rng))
            .collect::<Result<Vec<_>>>()?;
        self.inverse(&parts)
    }

    fn check_objective(&self, shapes: &[Shape], obj: &Objective<T>, n: usize) -> Result<()> {
        if obj.dz.len() != shapes.len() {
            return Err(Error::shape(format!(
                "expected {} latent gradients, got {}",
                shapes.len(),
                obj.dz.len()
            )));
        }
        for (i, (g, s)) in obj.dz.iter().zip(shapes).enumerate() {
            if g.shape() != *s {
                return Err(Error::shape(format!("latent gradient {i} must be {s}, got {}", g.shape())));
            }
        }
        if obj.dlogdet.len() != n {
            return Err(Error::shape(format!("dlogdet needs {n} entries, got {}", obj.dlogdet.len())));
        }
        Ok(())
    }

    /// Recompute-mode gradient. Consumes the bundle; returns `dL/dx` and
    /// accumulates parameter gradients.
    pub fn grad_recompute(&mut self, bundle: LatentBundle<T>, obj: Objective<T>) -> Result<Tensor<T>> {
        if bundle.version != self.version {
            return Err(Error::StaleBundle { bundle: bundle.version, model: self.version });
        }
        let n = bundle.batch();
        let shapes: Vec<Shape> = bundle.parts.iter().map(|p| p.shape()).collect();
        self.check_objective(&shapes, &obj, n)?;
        let Objective { dz: mut dparts, dlogdet } = obj;
        let mut parts = bundle.parts;
        drop(bundle.logdet);
        let mut y = parts.pop().expect("bundle has a final part");
        let mut dy = dparts.pop().expect("checked above");
        for layer in self.layers.iter_mut().rev() {
            let (dx, x) = match layer {
                FlowLayer::Haar(l) => l.backward(&dy, &y, &dlogdet)?,
                FlowLayer::ActNorm(l) => l.backward(&dy, &y, &dlogdet)?,
                FlowLayer::Inv1x1(l) => l.backward(&dy, &y, &dlogdet)?,
                FlowLayer::Coupling(l) => l.backward(&dy, &y, &dlogdet)?,
                FlowLayer::Factor(f) => {
                    let part = parts.pop().expect("part count checked");
                    let x = f.merge(&y, &part)?;
                    drop((y, part));
                    let dpart = dparts.pop().expect("part count checked");
                    let dx = f.merge(&dy, &dpart)?;
                    (dx, x)
                }
            };
            // release the deeper boundary before moving on
            y = x;
            dy = dx;
            meter::check_budget()?;
        }
        drop(y);
        Ok(dy)
    }

    /// Store-all forward: every layer keeps its input for backward.
    fn forward_recorded(&mut self, x: &Tensor<T>) -> Result<(LatentBundle<T>, Vec<Saved<T>>)> {
        self.check_input(x)?;
        let n = x.shape().n;
        let mut logdet = vec![T::zero(); n];
        let mut parts = Vec::new();
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, ld, s) = match layer {
                FlowLayer::Haar(l) => {
                    let (y, ld, s) = l.forward_saving(cur)?;
                    (y, ld, Saved::Haar(s))
                }
                FlowLayer::ActNorm(l) => {
                    let (y, ld, s) = l.forward_saving(cur)?;
                    (y, ld, Saved::ActNorm(s))
                }
                FlowLayer::Inv1x1(l) => {
                    let (y, ld, s) = l.forward_saving(cur)?;
                    (y, ld, Saved::Inv1x1(s))
                }
                FlowLayer::Coupling(l) => {
                    let (y, ld, s) = l.forward_saving(cur)?;
                    (y, ld, Saved::Coupling(s))
                }
                FlowLayer::Factor(f) => {
                    let (kept, part) = f.split(&cur)?;
                    drop(cur);
                    parts.push(part);
                    (kept, Vec::new(), Saved::Factor)
                }
            };
            add_logdet(&mut logdet, &ld);
            saved.push(s);
            cur = y;
            meter::check_budget()?;
        }
        parts.push(cur);
        Ok((LatentBundle { parts, logdet, version: self.version }, saved))
    }

    /// Store-all gradient: runs its own forward, hands the bundle to
    /// `objective`, then backpropagates through the cached inputs.
    pub fn grad_store_with(
        &mut self,
        x: &Tensor<T>,
        objective: impl FnOnce(&LatentBundle<T>) -> Result<Objective<T>>,
    ) -> Result<Tensor<T>> {
        let (bundle, mut saved) = self.forward_recorded(x)?;
        let n = bundle.batch();
        let shapes: Vec<Shape> = bundle.parts.iter().map(|p| p.shape()).collect();
        let obj = objective(&bundle)?;
        drop(bundle);
        self.check_objective(&shapes, &obj, n)?;
        let Objective { dz: mut dparts, dlogdet } = obj;
        let mut dy = dparts.pop().expect("checked above");
        for layer in self.layers.iter_mut().rev() {
            let s = saved.pop().expect("one record per layer");
            let dx = match (layer, s) {
                (FlowLayer::Haar(l), Saved::Haar(s)) => l.backward_saved(s, &dy, &dlogdet)?.0,
                (FlowLayer::ActNorm(l), Saved::ActNorm(s)) => l.backward_saved(s, &dy, &dlogdet)?.0,
                (FlowLayer::Inv1x1(l), Saved::Inv1x1(s)) => l.backward_saved(s, &dy, &dlogdet)?.0,
                (FlowLayer::Coupling(l), Saved::Coupling(s)) => l.backward_saved(s, &dy, &dlogdet)?.0,
                (FlowLayer::Factor(f), Saved::Factor) => {
                    let dpart = dparts.pop().expect("part count checked");
                    f.merge(&dy, &dpart)?
                }
                _ => unreachable!("records follow the layer order"),
            };
            dy = dx;
            meter::check_budget()?;
        }
        Ok(dy)
    }

    /// Store-all gradient with fixed upstream gradients.
    pub fn grad_store(&mut self, x: &Tensor<T>, obj: Objective<T>) -> Result<Tensor<T>> {
        self.grad_store_with(x, move |_| Ok(obj))
    }

    /// One forward + gradient evaluation with either engine.
    pub fn grad(
        &mut self,
        engine: Engine,
        x: &Tensor<T>,
        objective: impl FnOnce(&LatentBundle<T>) -> Result<Objective<T>>,
    ) -> Result<Tensor<T>> {
        match engine {
            Engine::Store => self.grad_store_with(x, objective),
            Engine::Recompute => {
                let bundle = self.forward(x)?;
                let obj = objective(&bundle)?;
                self.grad_recompute(bundle, obj)
            }
        }
    }

    /// Parameters named `layer{i}.{param}`.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.params() {
                out.push((format!("layer{i}.{name}"), p));
            }
        }
        out
    }

    /// Mutable parameter access. Invalidates outstanding latent bundles.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.version += 1;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in layer.params_mut() {
                out.push((format!("layer{i}.{name}"), p));
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, p) in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    /// Payload bytes of all parameters and their gradients.
    pub fn param_bytes(&self) -> u64 {
        self.params().iter().map(|(_, p)| p.bytes()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Initialized flag of every ActNorm, in layer order.
    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                FlowLayer::ActNorm(a) => Some(a.is_initialized()),
                _ => None,
            })
            .collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let count = self.actnorm_flags().len();
        if flags.len() != count {
            return Err(Error::Config(format!(
                "model has {count} actnorm layers, got {} flags",
                flags.len()
            )));
        }
        let mut it = flags.iter();
        for layer in &mut self.layers {
            if let FlowLayer::ActNorm(a) = layer {
                a.set_initialized(*it.next().expect("length checked"));
            }
        }
        Ok(())
    }

    /// Turns every layer into the identity: ActNorm `s = 1, b = 0`
    /// (initialized), `W = I`, zeroed conditioner output layers.
    pub fn make_identity(&mut self) -> Result<()> {
        self.version += 1;
        for layer in &mut self.layers {
            match layer {
                FlowLayer::ActNorm(a) => {
                    a.scale.value.fill(T::one());
                    a.bias.value.fill(T::zero());
                    a.set_initialized(true);
                }
                FlowLayer::Inv1x1(l) => *l = Inv1x1Conv::identity(l.channels())?,
                FlowLayer::Coupling(l) => {
                    l.cond.conv2_weight.value.fill(T::zero());
                    l.cond.conv2_bias.value.fill(T::zero());
                }
                FlowLayer::Haar(_) | FlowLayer::Factor(_) => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::meter::MemoryMeter;
    use std::sync::Arc;

    fn nll_objective<T: Element>(b: &LatentBundle<T>) -> Result<Objective<T>> {
        Ok(Objective { dz: b.parts.clone(), dlogdet: vec![-T::one(); b.batch()] })
    }

    #[test]
    fn layer_layout() {
        let m = FlowModel::<f32>::new(FlowConfig::new(3, 8, 8, 2, 1).with_hidden(4), &mut Rng::new(0)).unwrap();
        let names: Vec<_> = m.layers().iter().map(|l| l.name()).collect();
        assert_eq!(
            names,
            ["haar", "actnorm", "inv1x1", "coupling", "factor", "haar", "actnorm", "inv1x1", "coupling"]
        );
        assert_eq!(m.latent_shapes(2), vec![Shape { n: 2, c: 6, h: 4, w: 4 }, Shape { n: 2, c: 24, h: 2, w: 2 }]);
        assert!(FlowModel::<f32>::new(FlowConfig::new(3, 6, 6, 2, 1), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn haar_only_model() {
        let mut m = FlowModel::<f64>::new(FlowConfig::new(1, 4, 4, 1, 0), &mut Rng::new(0)).unwrap();
        let x = Tensor::randn((2, 1, 4, 4), &mut Rng::new(1)).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(b.parts.len(), 1);
        assert_eq!(b.parts[0], crate::layers::haar_forward(&x).unwrap());
        assert_eq!(b.logdet, vec![0.0, 0.0]);
    }

    #[test]
    fn element_count_conserved_and_round_trip() {
        let mut rng = Rng::new(2);
        let mut m = FlowModel::<f32>::new(FlowConfig::new(3, 16, 16, 2, 2).with_hidden(8), &mut rng).unwrap();
        let x = Tensor::randn((2, 3, 16, 16), &mut rng).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(b.parts.iter().map(|p| p.len()).sum::<usize>(), x.len());
        let back = m.inverse(&b.parts).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-4);
        assert!(m.inverse(&b.parts[1..]).is_err());
    }

    #[test]
    fn fresh_logdet_is_actnorm_init_only() {
        let mut rng = Rng::new(3);
        let mut m = FlowModel::<f64>::new(FlowConfig::new(1, 4, 4, 1, 2).with_hidden(4), &mut rng).unwrap();
        let x = Tensor::randn((4, 1, 4, 4), &mut rng).unwrap();
        let b = m.forward(&x).unwrap();
        let mut want = 0.0;
        for l in m.layers() {
            if let FlowLayer::ActNorm(a) = l {
                want += 4.0 * a.scale.value.data().iter().map(|s| s.abs().ln()).sum::<f64>();
            }
        }
        for &ld in &b.logdet {
            assert!((ld - want).abs() < 1e-9, "{ld} vs {want}");
        }
    }

    #[test]
    fn zero_latent_through_identity_model() {
        let mut m = FlowModel::<f64>::new(FlowConfig::new(3, 8, 8, 2, 2).with_hidden(4), &mut Rng::new(4)).unwrap();
        m.make_identity().unwrap();
        let parts: Vec<_> = m.latent_shapes(1).into_iter().map(|s| Tensor::zeros(s).unwrap()).collect();
        assert!(m.inverse(&parts).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_model_gradient_preserves_norm() {
        let mut rng = Rng::new(5);
        let mut m = FlowModel::<f64>::new(FlowConfig::new(3, 8, 8, 2, 2).with_hidden(4), &mut rng).unwrap();
        m.make_identity().unwrap();
        let x = Tensor::randn((2, 3, 8, 8), &mut rng).unwrap();
        let b = m.forward(&x).unwrap();
        let dz: Vec<_> = b.parts.iter().map(|p| Tensor::randn(p.shape(), &mut rng).unwrap()).collect();
        let norm: f64 = dz.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
        let dz_store = dz.clone();
        let dx = m.grad_recompute(b, Objective { dz, dlogdet: vec![0.0; 2] }).unwrap();
        assert!((dx.sum_sq().sqrt() - norm).abs() / norm < 1e-6);
        let dx_store = m.grad_store(&x, Objective { dz: dz_store, dlogdet: vec![0.0; 2] }).unwrap();
        assert!(dx.max_abs_diff(&dx_store).unwrap() < 1e-6);
    }

    #[test]
    fn stale_bundle_rejected() {
        let mut rng = Rng::new(6);
        let mut m = FlowModel::<f64>::new(FlowConfig::points(2).with_hidden(4), &mut rng).unwrap();
        let x = Tensor::randn((8, 2, 1, 1), &mut rng).unwrap();
        let b = m.forward(&x).unwrap();
        let obj = nll_objective(&b).unwrap();
        m.params_mut()[0].1.value.data_mut()[0] += 0.1;
        assert!(matches!(m.grad_recompute(b, obj), Err(Error::StaleBundle { .. })));
    }

    #[test]
    fn engines_agree() {
        let mut rng = Rng::new(7);
        let mut a = FlowModel::<f64>::new(FlowConfig::new(2, 4, 4, 2, 2).with_hidden(4), &mut rng).unwrap();
        let x = Tensor::randn((8, 2, 4, 4), &mut rng).unwrap();
        drop(a.forward(&x).unwrap());
        for (_, p) in a.params_mut() {
            for v in p.value.data_mut() {
                *v += 0.05 * rng.normal();
            }
        }
        let mut b = a.clone();
        let dx_a = a.grad(Engine::Recompute, &x, nll_objective).unwrap();
        let dx_b = b.grad(Engine::Store, &x, nll_objective).unwrap();
        let rel = |p: &Tensor<f64>, q: &Tensor<f64>| p.max_abs_diff(q).unwrap() / q.max_abs().max(1e-12);
        assert!(rel(&dx_a, &dx_b) < 1e-10);
        for ((name, p), (_, q)) in a.params().iter().zip(b.params()) {
            assert!(rel(&p.grad, &q.grad) < 1e-10, "{name}");
        }
    }

    #[test]
    fn sample_is_seeded() {
        let mut rng = Rng::new(8);
        let mut m = FlowModel::<f32>::new(FlowConfig::new(3, 16, 16, 2, 1).with_hidden(4), &mut rng).unwrap();
        let fresh = m.sample(1, &mut Rng::new(1));
        assert!(matches!(fresh, Err(Error::Uninitialized)));
        drop(m.forward(&Tensor::randn((4, 3, 16, 16), &mut rng).unwrap()).unwrap());
        let a = m.sample(4, &mut Rng::new(3)).unwrap();
        assert_eq!(a.shape(), Shape { n: 4, c: 3, h: 16, w: 16 });
        assert_eq!(a, m.sample(4, &mut Rng::new(3)).unwrap());
    }

    #[test]
    fn budget_unwinds_cleanly() {
        let meter = Arc::new(MemoryMeter::new());
        let _g = MemoryMeter::enter(&meter);
        let mut rng = Rng::new(9);
        let mut m = FlowModel::<f32>::new(FlowConfig::new(3, 8, 8, 2, 2).with_hidden(4), &mut rng).unwrap();
        let x = Tensor::randn((2, 3, 8, 8), &mut rng).unwrap();
        let base = meter.live();
        meter.set_budget(Some(base));
        let r = m.grad(Engine::Store, &x, nll_objective);
        assert!(matches!(r, Err(Error::OutOfBudget { .. })));
        assert_eq!(meter.live(), base);
    }
}
