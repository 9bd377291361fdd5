//! Free-embedding convergence probe.
//!
//! One learnable unit vector per sample (anchor, augmentation positive,
//! queue positives, negatives) and no encoder. Quasi-Newton descent on the
//! anchor's loss runs until the gradient norm falls below a tolerance; the
//! terminal `p(z⁺ | z_i)` is then compared with the loss's fixed point.

use std::fmt::Write;

use rand::Rng;
use serde::Serialize;

use super::plot::bar_plot;
use super::{Check, ExperimentReport};
use crate::error::{Error, Result};
use crate::losses::{dscl_from_logits, scl_from_logits, ContrastMode};
use crate::seed;
use crate::tensor::{self, Graph, Tensor};
use crate::train::ExperimentConfig;

pub const PROBE_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeSettings {
    pub dim: usize,
    pub negatives: usize,
    pub temperature: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            dim: 16,
            negatives: 8,
            temperature: 0.07,
            max_steps: 5_000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeOutcome {
    pub mode: ContrastMode,
    pub positives: usize,
    /// `1/(|P|+1)` for SCL, `α` for DSCL (`|P| ≥ 1`).
    pub theory: f64,
    pub p_plus: f64,
    pub grad_norm: f64,
    pub steps: usize,
    pub converged: bool,
}

impl ProbeOutcome {
    pub fn within(&self, tol: f64) -> bool {
        self.converged && (self.p_plus - self.theory).abs() <= tol
    }
}

pub fn fixed_point(mode: ContrastMode, positives: usize) -> f64 {
    match mode {
        ContrastMode::Scl => 1.0 / (positives as f64 + 1.0),
        ContrastMode::Dscl { alpha } if positives > 0 => alpha,
        ContrastMode::Dscl { .. } => 1.0,
    }
}

fn normalize_rows(u: &mut [f64], dim: usize) {
    for row in u.chunks_mut(dim) {
        let n = tensor::dot(row, row).sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
}

/// Loss, gradient and `p⁺` at the stacked raw vectors `u`
/// (rows: anchor, z⁺, positives…, negatives…).
fn evaluate(
    u: &[f64],
    dim: usize,
    positive: &[bool],
    mode: ContrastMode,
    tau: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let rows = u.len() / dim;
    let mut g = Graph::new();
    let vars: Vec<_> = (0..rows)
        .map(|r| g.param(Tensor::vector(u[r * dim..(r + 1) * dim].to_vec())))
        .collect();
    let z: Vec<_> = vars
        .iter()
        .map(|&v| g.l2_normalize(v, 1e-12))
        .collect::<Result<_>>()?;
    let dots: Vec<_> = z[1..]
        .iter()
        .map(|&c| g.dot(z[0], c))
        .collect::<Result<_>>()?;
    let logits = g.concat(&dots)?;
    let loss = match mode {
        ContrastMode::Scl => scl_from_logits(&mut g, logits, positive, tau)?,
        ContrastMode::Dscl { alpha } => dscl_from_logits(&mut g, logits, positive, tau, alpha)?,
    };
    let value = g.scalar_value(loss)?;
    let p_plus = tensor::softmax(g.value(logits).data(), tau)[0];
    g.backward(loss)?;
    let grad = vars.iter().flat_map(|&v| g.grad(v).unwrap().to_vec()).collect();
    Ok((value, grad, p_plus))
}

/// Gradient norm at the row-normalised point. The loss is invariant to
/// each row's scale, so the gradient at `u` is the normalised-point
/// gradient divided by `‖u_row‖`.
fn sphere_grad_norm(u: &[f64], grad: &[f64], dim: usize) -> f64 {
    u.chunks(dim)
        .zip(grad.chunks(dim))
        .map(|(r, g)| tensor::dot(r, r) * tensor::dot(g, g))
        .sum::<f64>()
        .sqrt()
}

const LBFGS_MEMORY: usize = 10;

/// Two-loop recursion: approximate inverse Hessian times `grad`.
fn lbfgs_direction(grad: &[f64], hist: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * tensor::dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.last() {
        let gamma = tensor::dot(s, y) / tensor::dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = rho * tensor::dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q
}

/// Minimise the anchor's loss over all free vectors with L-BFGS and an
/// Armijo backtracking line search, from a seeded random start.
pub fn convergence_probe(
    mode: ContrastMode,
    positives: usize,
    settings: &ProbeSettings,
    seed_value: u64,
) -> Result<ProbeOutcome> {
    let d = settings.dim;
    let rows = 2 + positives + settings.negatives;
    let mut rng = seed::rng(seed_value, &[positives as u64]);
    let mut u: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize_rows(&mut u, d);
    // candidates: z⁺, positives, negatives
    let positive: Vec<bool> = (0..rows - 1).map(|m| m <= positives).collect();
    let tau = settings.temperature;

    let (mut loss, mut grad, mut p_plus) = evaluate(&u, d, &positive, mode, tau)?;
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut steps = 0;
    let mut gnorm = sphere_grad_norm(&u, &grad, d);
    while gnorm >= settings.grad_tol && steps < settings.max_steps {
        let mut dir = lbfgs_direction(&grad, &hist);
        let mut slope = tensor::dot(&grad, &dir);
        if !(slope > 0.0) {
            hist.clear();
            dir = grad.clone();
            slope = tensor::dot(&grad, &grad);
        }
        let mut t = if hist.is_empty() { 0.05 } else { 1.0 };
        let mut next = None;
        for _ in 0..60 {
            let cand: Vec<f64> = u.iter().zip(&dir).map(|(x, p)| x - t * p).collect();
            let (l2, g2, p2) = evaluate(&cand, d, &positive, mode, tau)?;
            if l2 <= loss - 1e-4 * t * slope {
                next = Some((cand, l2, g2, p2));
                break;
            }
            t *= 0.5;
        }
        steps += 1;
        let Some((mut cand, l2, g2, p2)) = next else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let sv: Vec<f64> = cand.iter().zip(&u).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g2.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = tensor::dot(&sv, &yv);
        let (mut g2, mut reset) = (g2, false);
        // rows drift outward because the gradient is tangent; rescale them
        // back (the loss is unchanged) and restart the memory
        if cand.chunks(d).any(|r| (tensor::dot(r, r) - 1.0).abs() > 0.5) {
            let norms: Vec<f64> = cand.chunks(d).map(|r| tensor::dot(r, r).sqrt()).collect();
            for ((r, g), n) in cand.chunks_mut(d).zip(g2.chunks_mut(d)).zip(norms) {
                r.iter_mut().for_each(|x| *x /= n);
                g.iter_mut().for_each(|x| *x *= n);
            }
            reset = true;
        }
        if reset {
            hist.clear();
        } else if sy > 1e-300 {
            hist.push((sv, yv, 1.0 / sy));
            if hist.len() > LBFGS_MEMORY {
                hist.remove(0);
            }
        }
        u = cand;
        loss = l2;
        grad = g2;
        p_plus = p2;
        gnorm = sphere_grad_norm(&u, &grad, d);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("probe loss {loss}")));
    }
    Ok(ProbeOutcome {
        mode,
        positives,
        theory: fixed_point(mode, positives),
        p_plus,
        grad_norm: gnorm,
        steps,
        converged: gnorm < settings.grad_tol,
    })
}

/// The standard grid: SCL and DSCL at each configured α, for `|P|` ∈ {1, 4, 16}.
pub fn probe_grid(alphas: &[f64]) -> Vec<(ContrastMode, usize)> {
    let mut modes = vec![ContrastMode::Scl];
    modes.extend(alphas.iter().map(|&alpha| ContrastMode::Dscl { alpha }));
    modes
        .into_iter()
        .flat_map(|m| [1, 4, 16].into_iter().map(move |p| (m, p)))
        .collect()
}

fn mode_label(m: ContrastMode) -> String {
    match m {
        ContrastMode::Scl => "scl".into(),
        ContrastMode::Dscl { alpha } => format!("dscl_a{alpha}"),
    }
}

pub fn outcomes_csv(outcomes: &[ProbeOutcome]) -> String {
    let mut s = String::from("case,mode,positives,theory,p_plus,grad_norm,steps,converged\n");
    for o in outcomes {
        let _ = writeln!(
            s,
            "{}_p{},{},{},{},{},{},{},{}",
            mode_label(o.mode),
            o.positives,
            mode_label(o.mode),
            o.positives,
            o.theory,
            o.p_plus,
            o.grad_norm,
            o.steps,
            o.converged
        );
    }
    s
}

pub fn run_convergence_probe(config: &ExperimentConfig, run_seed: u64) -> Result<ExperimentReport> {
    let settings = ProbeSettings {
        temperature: config.loss.temperature,
        ..ProbeSettings::default()
    };
    let mut alphas = vec![0.1, 0.3];
    if !alphas.contains(&config.loss.alpha) {
        alphas.push(config.loss.alpha);
    }
    let outcomes: Vec<ProbeOutcome> = probe_grid(&alphas)
        .into_iter()
        .map(|(m, p)| convergence_probe(m, p, &settings, run_seed))
        .collect::<Result<_>>()?;
    let mut report = ExperimentReport::new("converge-probe", config, vec![run_seed]);
    for o in &outcomes {
        report.checks.push(Check::new(
            &format!("{}-p{}", mode_label(o.mode), o.positives),
            o.within(PROBE_TOLERANCE),
            format!(
                "p+ {:.4} vs {:.4}, |grad| {:.2e} after {} steps",
                o.p_plus, o.theory, o.grad_norm, o.steps
            ),
        ));
    }
    let csv = outcomes_csv(&outcomes);
    let svg = bar_plot(
        &csv,
        "Terminal p(z+|z) vs fixed point",
        "case",
        &[("p_plus", None), ("theory", None)],
    )?;
    report.summary = serde_json::to_value(&outcomes)?;
    report.add_file("converge.csv", csv);
    report.add_file("converge.svg", svg);
    Ok(report)
}
