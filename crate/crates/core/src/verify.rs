//! Self-verification suite run by `revflow verify`: round trips,
//! finite-difference gradients, dense-Jacobian log-determinants and engine
//! equivalence, all at 64-bit.

use std::fmt::Write as _;

use crate::conditioner::CondNet;
use crate::error::{Error, Result};
use crate::flow::{Engine, FlowConfig, FlowModel, Objective};
use crate::layers::{
    haar_forward, haar_inverse, log_abs_det, ActNorm, Coupling, CouplingKind, FactorOut, HaarSqueeze, Inv1x1Conv,
    InvertibleLayer,
};
use crate::tensor::{conv3x3, conv3x3_backward, Rng, Tensor};

pub const GROUPS: [&str; 9] = [
    "tensor",
    "conditioner",
    "actnorm",
    "inv1x1",
    "coupling",
    "haar",
    "factor",
    "flow",
    "engines",
];

pub const ROUND_TRIP_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
pub const LOGDET_TOL: f64 = 1e-3;
pub const ENGINE_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;
const JAC_STEP: f64 = 1e-6;
/// Gradient entries smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    /// Measured error.
    pub value: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value < self.tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Runs every group, or only `only`.
pub fn run(only: Option<&str>) -> Result<Vec<Check>> {
    if let Some(g) = only {
        if !GROUPS.contains(&g) {
            return Err(Error::Config(format!("unknown check group `{g}` (one of: {})", GROUPS.join(", "))));
        }
    }
    let mut out = Vec::new();
    for group in GROUPS.iter().filter(|g| only.is_none_or(|o| o == **g)) {
        let mut rng = Rng::new(0x5eed ^ group.len() as u64);
        let checks = match *group {
            "tensor" => tensor_checks(&mut rng)?,
            "conditioner" => conditioner_checks(&mut rng)?,
            "actnorm" => {
                let mut l = ActNorm::with_params(&[1.3, -0.7, 0.9], &[0.1, -0.2, 0.3])?;
                layer_checks("actnorm", &mut l, (1, 3, 2, 2), true, &mut rng)?
            }
            "inv1x1" => {
                let mut l = Inv1x1Conv::new(3, &mut rng)?;
                perturb(l.params_mut().into_iter().map(|(_, p)| p), 0.2, &mut rng);
                layer_checks("inv1x1", &mut l, (1, 3, 2, 2), true, &mut rng)?
            }
            "coupling" => {
                let mut checks = Vec::new();
                for kind in [CouplingKind::Affine, CouplingKind::Additive] {
                    let mut l = Coupling::new(kind, 2, 4, &mut rng)?;
                    perturb(l.params_mut().into_iter().map(|(_, p)| p), 0.3, &mut rng);
                    let mut c = layer_checks("coupling", &mut l, (1, 2, 3, 3), kind == CouplingKind::Affine, &mut rng)?;
                    for ch in &mut c {
                        ch.name = format!("{kind} {}", ch.name);
                    }
                    if kind == CouplingKind::Additive {
                        c.push(zero_logdet_check("coupling", "additive logdet", &mut l, (2, 2, 3, 3), &mut rng)?);
                    }
                    checks.extend(c);
                }
                checks
            }
            "haar" => {
                let mut checks = layer_checks("haar", &mut HaarSqueeze, (1, 2, 4, 4), false, &mut rng)?;
                checks.push(zero_logdet_check("haar", "logdet", &mut HaarSqueeze, (2, 3, 4, 4), &mut rng)?);
                let x = Tensor::<f64>::randn((2, 3, 4, 4), &mut rng)?;
                let y = haar_forward(&x)?;
                checks.push(Check {
                    group: "haar",
                    name: "norm preserved".into(),
                    value: (y.sum_sq().sqrt() - x.sum_sq().sqrt()).abs() / x.sum_sq().sqrt(),
                    tol: 1e-12,
                });
                checks.push(Check {
                    group: "haar",
                    name: "inverse is adjoint".into(),
                    value: adjoint_gap(&x, &y, &mut rng)?,
                    tol: 1e-12,
                });
                checks
            }
            "factor" => factor_checks(&mut rng)?,
            "flow" => flow_checks(&mut rng)?,
            "engines" => engine_checks(&mut rng)?,
            _ => unreachable!(),
        };
        out.extend(checks);
    }
    Ok(out)
}

pub fn render_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:<width$} {:>12} {:>10}  result", "group", "check", "error", "tol");
    for c in checks {
        let _ = writeln!(
            s,
            "{:<12} {:<width$} {:>12.3e} {:>10.1e}  {}",
            c.group,
            c.name,
            c.value,
            c.tol,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    let _ = writeln!(s, "{} checks, {} failed", checks.len(), failed);
    s
}

fn perturb<'a>(params: impl IntoIterator<Item = &'a mut crate::param::Param<f64>>, amp: f64, rng: &mut Rng) {
    for p in params {
        for v in p.value.data_mut() {
            *v += amp * rng.normal();
        }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn adjoint_gap(x: &Tensor<f64>, y: &Tensor<f64>, rng: &mut Rng) -> Result<f64> {
    // <H x, g> == <x, H^T g> with H^T = H^{-1}
    let g = Tensor::randn(y.shape(), rng)?;
    let lhs = dot(y, &g);
    let rhs = dot(x, &haar_inverse(&g)?);
    Ok((lhs - rhs).abs() / lhs.abs().max(1.0))
}

/// Central-difference Jacobian of `f` at `x` (single sample) and its
/// `log|det|`.
fn dense_logdet(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> Result<Vec<f64>>) -> Result<f64> {
    let d = x.len();
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let mut xp = x.clone();
        xp.data_mut()[j] += JAC_STEP;
        let mut xm = x.clone();
        xm.data_mut()[j] -= JAC_STEP;
        let (yp, ym) = (f(&xp)?, f(&xm)?);
        if yp.len() != d {
            return Err(Error::shape("dense Jacobian needs a square map"));
        }
        for i in 0..d {
            jac[i * d + j] = (yp[i] - ym[i]) / (2.0 * JAC_STEP);
        }
    }
    log_abs_det(&jac, d).ok_or(Error::SingularMatrix { threshold: 0.0 })
}

fn layer_objective<L: InvertibleLayer<f64>>(l: &mut L, x: &Tensor<f64>, dy: &Tensor<f64>, dl: &[f64]) -> Result<f64> {
    let (y, ld) = l.forward(x)?;
    Ok(dot(&y, dy) + ld.iter().zip(dl).map(|(a, b)| a * b).sum::<f64>())
}

/// Round trip, backward-from-output consistency, finite-difference
/// gradients and (optionally) the dense-Jacobian logdet of one layer.
fn layer_checks<L: InvertibleLayer<f64>>(
    group: &'static str,
    l: &mut L,
    shape: (usize, usize, usize, usize),
    logdet: bool,
    rng: &mut Rng,
) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let x = Tensor::randn(shape, rng)?;
    let (y, _) = l.forward(&x)?;
    checks.push(Check {
        group,
        name: "round trip".into(),
        value: l.inverse(&y)?.max_abs_diff(&x)?,
        tol: ROUND_TRIP_TOL,
    });

    let dy = Tensor::randn(y.shape(), rng)?;
    let dl = vec![-1.0; shape.0];
    for (_, p) in l.params_mut() {
        p.zero_grad();
    }
    // reference that kept x, then the output-only backward
    let (_, _, saved) = l.forward_saving(x.clone())?;
    let (dx_kept, _) = l.backward_saved(saved, &dy, &dl)?;
    let kept: Vec<Tensor<f64>> = l.params().iter().map(|(_, p)| p.grad.clone()).collect();
    for (_, p) in l.params_mut() {
        p.zero_grad();
    }
    let (dx, _) = l.backward(&dy, &y, &dl)?;
    let mut gap = dx.max_abs_diff(&dx_kept)? / dx_kept.max_abs().max(1.0);
    for ((_, p), k) in l.params().iter().zip(&kept) {
        gap = gap.max(p.grad.max_abs_diff(k)? / k.max_abs().max(1.0));
    }
    checks.push(Check { group, name: "backward from output".into(), value: gap, tol: 1e-10 });

    let mut worst_dx: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let fd = (layer_objective(l, &xp, &dy, &dl)? - layer_objective(l, &xm, &dy, &dl)?) / (2.0 * FD_STEP);
        worst_dx = worst_dx.max(rel_err(dx.data()[i], fd));
    }
    checks.push(Check { group, name: "input gradient vs FD".into(), value: worst_dx, tol: GRAD_TOL });

    let analytic: Vec<(&'static str, Vec<f64>)> =
        l.params().iter().map(|(n, p)| (*n, p.grad.data().to_vec())).collect();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &g) in grad.iter().enumerate() {
            let mut at = |delta: f64| -> Result<f64> {
                l.params_mut()[pi].1.value.data_mut()[j] += delta;
                layer_objective(l, &x, &dy, &dl)
            };
            let up = at(FD_STEP)?;
            let down = at(-2.0 * FD_STEP)?;
            at(FD_STEP)?;
            worst = worst.max(rel_err(g, (up - down) / (2.0 * FD_STEP)));
        }
        checks.push(Check { group, name: format!("{name} gradient vs FD"), value: worst, tol: GRAD_TOL });
    }

    if logdet {
        let analytic = l.forward(&x)?.1[0];
        let dense = dense_logdet(&x, |xi| Ok(l.forward(xi)?.0.data().to_vec()))?;
        checks.push(Check {
            group,
            name: "logdet vs dense Jacobian".into(),
            value: (analytic - dense).abs() / dense.abs().max(1e-12),
            tol: LOGDET_TOL,
        });
    }
    Ok(checks)
}

fn zero_logdet_check<L: InvertibleLayer<f64>>(
    group: &'static str,
    name: &str,
    l: &mut L,
    shape: (usize, usize, usize, usize),
    rng: &mut Rng,
) -> Result<Check> {
    let x = Tensor::randn(shape, rng)?;
    let (_, ld) = l.forward(&x)?;
    Ok(Check {
        group,
        name: format!("{name} exactly zero"),
        value: if ld.iter().all(|&v| v == 0.0) { 0.0 } else { f64::INFINITY },
        tol: f64::MIN_POSITIVE,
    })
}

fn tensor_checks(rng: &mut Rng) -> Result<Vec<Check>> {
    let x = Tensor::<f64>::randn((1, 2, 4, 4), rng)?;
    let w = Tensor::randn((3, 2, 3, 3), rng)?;
    let b = Tensor::randn((1, 3, 1, 1), rng)?;
    let dy = Tensor::randn((1, 3, 4, 4), rng)?;
    let (dx, dw, db) = conv3x3_backward(&x, &w, &dy)?;
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> { Ok(dot(&conv3x3(x, w, b)?, &dy)) };
    let mut checks = Vec::new();
    for (name, grad, which) in [("conv3x3 dx", &dx, 0), ("conv3x3 dweight", &dw, 1), ("conv3x3 dbias", &db, 2)] {
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let mut args = [x.clone(), w.clone(), b.clone()];
            args[which].data_mut()[i] += FD_STEP;
            let up = loss(&args[0], &args[1], &args[2])?;
            args[which].data_mut()[i] -= 2.0 * FD_STEP;
            let down = loss(&args[0], &args[1], &args[2])?;
            worst = worst.max(rel_err(grad.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
        checks.push(Check { group: "tensor", name: format!("{name} vs FD"), value: worst, tol: GRAD_TOL });
    }
    let (a, c) = x.channel_split(1)?;
    checks.push(Check {
        group: "tensor",
        name: "split/concat round trip".into(),
        value: Tensor::channel_concat(&a, &c)?.max_abs_diff(&x)?,
        tol: f64::MIN_POSITIVE,
    });
    Ok(checks)
}

fn conditioner_checks(rng: &mut Rng) -> Result<Vec<Check>> {
    let mut net = CondNet::<f64>::new(2, 4, 3, rng)?;
    perturb(net.params_mut().into_iter().map(|(_, p)| p), 0.3, rng);
    let x = Tensor::randn((1, 2, 4, 4), rng)?;
    let dy = Tensor::randn((1, 3, 4, 4), rng)?;
    let dx = net.backward(&x, &dy)?;
    let mut checks = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let fd = (dot(&net.forward(&xp)?, &dy) - dot(&net.forward(&xm)?, &dy)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(dx.data()[i], fd));
    }
    checks.push(Check { group: "conditioner", name: "input gradient vs FD".into(), value: worst, tol: GRAD_TOL });
    let grads: Vec<(&'static str, Vec<f64>)> = net.params().iter().map(|(n, p)| (*n, p.grad.data().to_vec())).collect();
    for (pi, (name, grad)) in grads.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &g) in grad.iter().enumerate() {
            let mut at = |delta: f64| -> Result<f64> {
                net.params_mut()[pi].1.value.data_mut()[j] += delta;
                Ok(dot(&net.forward(&x)?, &dy))
            };
            let up = at(FD_STEP)?;
            let down = at(-2.0 * FD_STEP)?;
            at(FD_STEP)?;
            worst = worst.max(rel_err(g, (up - down) / (2.0 * FD_STEP)));
        }
        checks.push(Check { group: "conditioner", name: format!("{name} gradient vs FD"), value: worst, tol: GRAD_TOL });
    }
    Ok(checks)
}

fn factor_checks(rng: &mut Rng) -> Result<Vec<Check>> {
    let f = FactorOut::new(4)?;
    let x = Tensor::<f64>::randn((2, 4, 2, 2), rng)?;
    let (kept, part) = f.split(&x)?;
    Ok(vec![Check {
        group: "factor",
        name: "split/merge round trip".into(),
        value: f.merge(&kept, &part)?.max_abs_diff(&x)?,
        tol: f64::MIN_POSITIVE,
    }])
}

/// A model with every parameter moved off its initialization and all
/// ActNorm layers marked initialized, so every gradient path is exercised.
pub fn randomized_model(config: FlowConfig, amp: f64, rng: &mut Rng) -> Result<FlowModel<f64>> {
    let mut m = FlowModel::<f64>::new(config, rng)?;
    perturb(m.params_mut().into_iter().map(|(_, p)| p), amp, rng);
    let flags = vec![true; m.actnorm_flags().len()];
    m.set_actnorm_flags(&flags)?;
    Ok(m)
}

fn model_objective(m: &mut FlowModel<f64>, x: &Tensor<f64>, dz: &[Tensor<f64>], dl: &[f64]) -> Result<f64> {
    let b = m.forward(x)?;
    let inner: f64 = b.parts.iter().zip(dz).map(|(z, g)| dot(z, g)).sum();
    Ok(inner + b.logdet.iter().zip(dl).map(|(a, b)| a * b).sum::<f64>())
}

fn flow_checks(rng: &mut Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (shape, scales, steps) in [((1, 2, 4, 4), 1, 1), ((1, 1, 8, 8), 2, 1)] {
        let cfg = FlowConfig::new(shape.1, shape.2, shape.3, scales, steps).with_hidden(4);
        let tag = format!("L={scales} K={steps}");
        let mut m = randomized_model(cfg, 0.1, rng)?;
        let x = Tensor::randn(shape, rng)?;
        let b = m.forward(&x)?;
        checks.push(Check {
            group: "flow",
            name: format!("{tag} round trip"),
            value: m.inverse(&b.parts)?.max_abs_diff(&x)?,
            tol: ROUND_TRIP_TOL,
        });

        let dz: Vec<_> = b.parts.iter().map(|p| Tensor::randn(p.shape(), rng)).collect::<Result<_>>()?;
        let dl = vec![-1.0];
        if x.len() <= 32 {
            let analytic = b.logdet[0];
            let dense = dense_logdet(&x, |xi| Ok(m.forward(xi)?.flatten_sample(0)))?;
            checks.push(Check {
                group: "flow",
                name: format!("{tag} logdet vs dense Jacobian"),
                value: (analytic - dense).abs() / dense.abs().max(1e-12),
                tol: LOGDET_TOL,
            });
        }
        m.zero_grad();
        let b = m.forward(&x)?;
        let dx = m.grad_recompute(b, Objective { dz: dz.clone(), dlogdet: dl.clone() })?;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += FD_STEP;
            let mut xm = x.clone();
            xm.data_mut()[i] -= FD_STEP;
            let fd = (model_objective(&mut m, &xp, &dz, &dl)? - model_objective(&mut m, &xm, &dz, &dl)?)
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(dx.data()[i], fd));
        }
        checks.push(Check { group: "flow", name: format!("{tag} input gradient vs FD"), value: worst, tol: GRAD_TOL });

        let grads: Vec<Vec<f64>> = m.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect();
        let mut worst: f64 = 0.0;
        for (pi, grad) in grads.iter().enumerate() {
            for (j, &g) in grad.iter().enumerate() {
                let mut at = |delta: f64| -> Result<f64> {
                    m.params_mut()[pi].1.value.data_mut()[j] += delta;
                    model_objective(&mut m, &x, &dz, &dl)
                };
                let up = at(FD_STEP)?;
                let down = at(-2.0 * FD_STEP)?;
                at(FD_STEP)?;
                worst = worst.max(rel_err(g, (up - down) / (2.0 * FD_STEP)));
            }
        }
        checks.push(Check { group: "flow", name: format!("{tag} parameter gradients vs FD"), value: worst, tol: GRAD_TOL });
    }
    Ok(checks)
}

fn engine_checks(rng: &mut Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (i, kind) in [CouplingKind::Affine, CouplingKind::Additive].into_iter().enumerate() {
        let cfg = FlowConfig::new(2, 8, 8, 2, 2).with_hidden(8).with_coupling(kind);
        let mut a = randomized_model(cfg, 0.05, rng)?;
        let mut b = a.clone();
        let x = Tensor::randn((2, 2, 8, 8), rng)?;
        let nll = |bundle: &crate::flow::LatentBundle<f64>| Ok(crate::train::nll(bundle)?.objective);
        let dx_a = a.grad(Engine::Recompute, &x, nll)?;
        let dx_b = b.grad(Engine::Store, &x, nll)?;
        let mut gap = norm_rel(&dx_a, &dx_b);
        for ((_, p), (_, q)) in a.params().iter().zip(b.params()) {
            gap = gap.max(norm_rel(&p.grad, &q.grad));
        }
        checks.push(Check {
            group: "engines",
            name: format!("config {i} ({kind}) recompute vs store"),
            value: gap,
            tol: ENGINE_TOL,
        });
    }
    Ok(checks)
}

/// `|a - b|_2 / |b|_2`, or `|a - b|_2` when `b` vanishes.
pub fn norm_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let nb = b.sum_sq().sqrt();
    if nb > 0.0 {
        diff / nb
    } else {
        diff
    }
}
