//! Moving-average kernels: the time-domain kernel `φ` assembled from the mixed partial `g̃` of the
//! spectral filter over sign orthants, its homogeneity, and the moving-average covariance
//! `∫ (φ(s−u) − φ(−u))(φ(t−u) − φ(−u))ᵀ du`.
//!
//! Normalization: `φ(v) = (2π)^{−m} ∫ g(x) e^{i⟨x,v⟩} dx` (regularized), so the Fourier transform of
//! `φ` is `g` and the harmonizable covariance equals `(2π)^m` times the moving-average covariance.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{bail, Error, Result};
use crate::homog::CMatrix;
use crate::matcalc::{real_diagonalize, ExponentPair, SquareMatrix, C64};
use crate::polar::{PolarSystem, SphereParametrization};
use crate::quad::{gk15_nodes, pairwise_sum, radial_integral, GenPoly, OscTerm, RadialOptions};
use crate::spectral::{CovarianceResult, SpectralModel};

/// Mixed partial `∂₁…∂_m` of the frame filter `y ↦ g(W^{−T} y)`, where `E = W E₀ W⁻¹` is the real
/// diagonalization of `E` (for diagonal `E`, `W = I` and this is `∂₁…∂_m g`).
pub type GTildeFn = Arc<dyn Fn(&[f64]) -> CMatrix + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GTildeMode {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Debug)]
pub struct KernelOptions {
    /// Relative tolerance of the angular quadrature for `φ_σ`.
    pub angular_rel_tol: f64,
    pub max_angular_panels: usize,
    /// Dyadic grading levels of the kernel table towards each axis.
    pub table_grading: u32,
    /// Chebyshev nodes per table panel.
    pub table_nodes: usize,
    /// Relative tolerance of the angular quadrature for the covariance.
    pub covariance_rel_tol: f64,
    pub radial: RadialOptions,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            angular_rel_tol: 1e-7,
            max_angular_panels: 400,
            table_grading: 10,
            table_nodes: 6,
            covariance_rel_tol: 1e-7,
            radial: RadialOptions { omega_max: 200.0, rel_tol: 1e-10, max_panels: 200_000 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub pass: bool,
    pub detail: String,
}

impl Condition {
    fn ok(detail: impl Into<String>) -> Self {
        Condition { pass: true, detail: detail.into() }
    }
    fn fail(detail: impl Into<String>) -> Self {
        Condition { pass: false, detail: detail.into() }
    }
}

/// Status of the kernel-construction hypotheses:
/// (c.1) `g̃` is the mixed partial of `g`; (c.2) `g̃` is bounded on `S₀`;
/// (c.3) `E` and `H` are diagonalizable with real eigenvalues and eigenvectors;
/// (c.4) `max eig(H) + tr(E)/2 < m·min eig(E)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionsReport {
    pub c1: Condition,
    pub c2: Condition,
    pub c3: Condition,
    pub c4: Condition,
}

impl ConditionsReport {
    pub fn pass(&self) -> bool {
        self.c1.pass && self.c2.pass && self.c3.pass && self.c4.pass
    }

    pub fn failures(&self) -> Vec<String> {
        [("(c.1)", &self.c1), ("(c.2)", &self.c2), ("(c.3)", &self.c3), ("(c.4)", &self.c4)]
            .iter()
            .filter(|(_, c)| !c.pass)
            .map(|(name, c)| format!("{name} {}", c.detail))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct KernelValue {
    /// `φ(v)`, an `n×n` real matrix.
    pub phi: SquareMatrix,
    pub est_error: f64,
}

/// Diagonal frame: `E = W E₀ W⁻¹`, `H = V H₀ V⁻¹`.
#[derive(Clone, Debug)]
struct Frame {
    w_inv: SquareMatrix,
    w_inv_t: SquareMatrix,
    det_w: f64,
    v: SquareMatrix,
    v_inv: SquareMatrix,
    e0: Vec<f64>,
    h0: Vec<f64>,
    q: f64,
}

impl Frame {
    fn new(pair: &ExponentPair) -> std::result::Result<Self, String> {
        let ed = real_diagonalize(pair.e()).map_err(|e| format!("E is not real-diagonalizable: {e}"))?;
        let hd = real_diagonalize(pair.h()).map_err(|e| format!("H is not real-diagonalizable: {e}"))?;
        Ok(Frame {
            w_inv_t: ed.v_inv.transpose(),
            det_w: ed.v.determinant().abs(),
            w_inv: ed.v_inv.clone(),
            v: hd.v.clone(),
            v_inv: hd.v_inv.clone(),
            e0: ed.eigenvalues(),
            h0: hd.eigenvalues(),
            q: pair.trace_e(),
        })
    }

    fn to_frame(&self, x: &[f64]) -> Vec<f64> {
        (&self.w_inv * DVector::from_column_slice(x)).iter().copied().collect()
    }
}

fn check_off_axes(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        bail!(Domain, "point {x:?} is not finite");
    }
    if x.iter().any(|v| *v == 0.0) {
        bail!(Domain, "point {x:?} lies on a coordinate axis, where g̃ and φ_σ are singular");
    }
    Ok(())
}

/// Central mixed difference `∂₁…∂_m g(x)` with per-axis steps proportional to `|x_j|`.
pub fn mixed_partial_fd<F>(g: F, x: &[f64]) -> Result<CMatrix>
where
    F: Fn(&[f64]) -> Result<CMatrix>,
{
    check_off_axes(x)?;
    let m = x.len();
    let rel = f64::EPSILON.powf(1.0 / (m as f64 + 2.0));
    let h: Vec<f64> = x.iter().map(|v| (v + rel * v.abs()) - v).collect();
    let mut acc: Option<CMatrix> = None;
    let mut y = x.to_vec();
    for mask in 0..(1usize << m) {
        let mut sign = 1.0;
        for j in 0..m {
            if (mask >> j) & 1 == 1 {
                y[j] = x[j] + h[j];
            } else {
                y[j] = x[j] - h[j];
                sign = -sign;
            }
        }
        let v = g(&y)? * C64::new(sign, 0.0);
        acc = Some(match acc {
            None => v,
            Some(a) => a + v,
        });
    }
    let denom: f64 = h.iter().map(|v| 2.0 * v).product();
    Ok(acc.expect("at least one stencil point") / C64::new(denom, 0.0))
}

/// Closed-form `g̃` for the quasinorm filter `g = ρ^{−H_E}` with `ρ(x) = (Σ|x_j|^{2/e_j})^{1/2}`
/// (diagonal `E`): `∂₁…∂_m Q^{−γ} = (−1)^m γ(γ+1)…(γ+m−1) Q^{−γ−m} Π p_j |x_j|^{p_j−1} sgn x_j`.
pub fn quasinorm_g_tilde(pair: &ExponentPair) -> Result<GTildeFn> {
    let m = pair.m();
    let n = pair.n();
    let e = pair.e();
    if !(0..m).all(|i| (0..m).all(|j| i == j || e[(i, j)] == 0.0)) {
        bail!(Validation, "the quasinorm g̃ needs a diagonal E");
    }
    let powers: Vec<f64> = (0..m).map(|j| 2.0 / e[(j, j)]).collect();
    let hd = real_diagonalize(pair.h())?;
    let half_q = 0.5 * pair.trace_e();
    let gammas: Vec<f64> = hd.eigenvalues().iter().map(|h| 0.5 * (h + half_q)).collect();
    let (v, v_inv) = (hd.v, hd.v_inv);
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    Ok(Arc::new(move |x: &[f64]| {
        let q: f64 = powers.iter().zip(x).map(|(p, y)| y.abs().powf(*p)).sum();
        let prod: f64 = powers.iter().zip(x).map(|(p, y)| p * y.abs().powf(p - 1.0) * y.signum()).product();
        let d = DVector::from_iterator(
            n,
            gammas.iter().map(|g| {
                let rising: f64 = (0..m).map(|k| g + k as f64).product();
                sign * rising * q.powf(-g - m as f64) * prod
            }),
        );
        (&v * SquareMatrix::from_diagonal(&d) * &v_inv).map(|z| C64::new(z, 0.0))
    }))
}

/// Kernel model: the spectral model plus `g̃`, validated against (c.1)–(c.4) before any
/// integration.
pub struct MAKernelModel {
    model: SpectralModel,
    g_tilde: Option<GTildeFn>,
    mode: GTildeMode,
    frame: Frame,
    sphere: Option<SphereParametrization>,
    conditions: ConditionsReport,
    even: bool,
    options: KernelOptions,
    table: OnceLock<KernelTable>,
}

impl std::fmt::Debug for MAKernelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MAKernelModel").field("mode", &self.mode).field("conditions", &self.conditions).finish()
    }
}

/// Sample points on the frame sphere `S₀` of `E₀`, away from the axes.
fn frame_sphere_samples(frame: &Frame, sphere: Option<&SphereParametrization>, count: usize) -> Result<Vec<Vec<f64>>> {
    match sphere {
        None => Ok(vec![vec![frame.e0[0]], vec![-frame.e0[0]]]),
        Some(sp) => (0..count)
            .map(|k| {
                let s = -PI + (k as f64 + 0.5) * 2.0 * PI / count as f64 + 1e-3;
                Ok(sp.theta(s)?.to_vec())
            })
            .collect(),
    }
}

/// Evaluates (c.1)–(c.4) without failing; only point evaluations of `g` and `g̃` are used.
pub fn check_conditions(model: &SpectralModel, g_tilde: Option<&GTildeFn>, mode: GTildeMode) -> ConditionsReport {
    let skipped = || Condition::fail("not evaluated: (c.3) failed");
    let frame = match Frame::new(model.pair()) {
        Ok(f) => f,
        Err(msg) => {
            return ConditionsReport {
                c1: skipped(),
                c2: skipped(),
                c3: Condition::fail(msg),
                c4: match model.pair().check_c4() {
                    Ok(()) => Condition::ok("holds"),
                    Err(e) => Condition::fail(e.to_string()),
                },
            }
        }
    };
    let c3 = Condition::ok(format!("eig(E) = {:?}, eig(H) = {:?}", frame.e0, frame.h0));
    let c4 = match model.pair().check_c4() {
        Ok(()) => Condition::ok(format!(
            "max eig(H) + tr(E)/2 = {} < {}",
            model.pair().h_spectrum().max_real + frame.q / 2.0,
            model.m() as f64 * model.pair().e_spectrum().min_real
        )),
        Err(e) => Condition::fail(e.to_string()),
    };
    let sphere = if model.m() == 2 {
        PolarSystem::new(&SquareMatrix::from_diagonal(&DVector::from_column_slice(&frame.e0)))
            .and_then(|s| SphereParametrization::new(&s))
            .ok()
    } else {
        None
    };
    let eval = |y: &[f64], mode: GTildeMode| -> Result<CMatrix> { g_tilde_frame(model, &frame, g_tilde, y, mode) };
    let (c1, c2) = if mode == GTildeMode::Analytic && g_tilde.is_none() {
        (Condition::fail("analytic mode needs a g̃ callback"), Condition::fail("not evaluated: no g̃"))
    } else {
        let samples = match frame_sphere_samples(&frame, sphere.as_ref(), 720) {
            Ok(s) => s,
            Err(e) => return ConditionsReport { c1: Condition::fail(e.to_string()), c2: skipped(), c3, c4 },
        };
        let usable: Vec<&Vec<f64>> = samples.iter().filter(|p| p.iter().all(|v| v.abs() > 1e-9)).collect();
        let norms: Vec<f64> = usable
            .iter()
            .map(|p| eval(p, mode).map(|g| g.norm()).unwrap_or(f64::INFINITY))
            .collect();
        let sup = norms.iter().cloned().fold(0.0, f64::max);
        let mut sorted = norms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let c2 = if sup.is_finite() && sup <= 1e8 * median.max(1e-300) {
            Condition::ok(format!("sup ‖g̃‖ on S₀ ≈ {sup:.6e} over {} samples", norms.len()))
        } else {
            Condition::fail(format!("g̃ unbounded on S₀: sup {sup:.3e}, median {median:.3e}"))
        };
        let c1 = if mode == GTildeMode::Analytic {
            // interior points only: near an axis the difference quotient loses to rounding
            let interior = frame_sphere_samples(&frame, sphere.as_ref(), 8).unwrap_or_default();
            let mut worst = 0.0f64;
            let mut failure = None;
            for p in &interior {
                match (eval(p, GTildeMode::Analytic), eval(p, GTildeMode::FiniteDifference)) {
                    (Ok(a), Ok(f)) => {
                        let rel = (&a - &f).norm() / a.norm().max(f.norm()).max(1e-300);
                        worst = worst.max(rel);
                    }
                    (Err(e), _) | (_, Err(e)) => failure = Some(e.to_string()),
                }
            }
            match failure {
                Some(e) => Condition::fail(e),
                None if worst <= 1e-4 => Condition::ok(format!("analytic g̃ matches finite differences (rel {worst:.2e})")),
                None => Condition::fail(format!("g̃ is not the mixed partial of g: relative mismatch {worst:.3e}")),
            }
        } else {
            Condition::ok("g̃ by finite differences")
        };
        (c1, c2)
    };
    ConditionsReport { c1, c2, c3, c4 }
}

fn g_frame(model: &SpectralModel, frame: &Frame, y: &[f64]) -> Result<CMatrix> {
    let x: Vec<f64> = (&frame.w_inv_t * DVector::from_column_slice(y)).iter().copied().collect();
    let g = model.g(&x)?;
    Ok(frame.v_inv.map(|z| C64::new(z, 0.0)) * g)
}

fn g_tilde_frame(
    model: &SpectralModel,
    frame: &Frame,
    g_tilde: Option<&GTildeFn>,
    y: &[f64],
    mode: GTildeMode,
) -> Result<CMatrix> {
    check_off_axes(y)?;
    match mode {
        GTildeMode::Analytic => match g_tilde {
            Some(f) => Ok(frame.v_inv.map(|z| C64::new(z, 0.0)) * f(y)),
            None => bail!(Validation, "analytic mode needs a g̃ callback"),
        },
        GTildeMode::FiniteDifference => mixed_partial_fd(|p| g_frame(model, frame, p), y),
    }
}

impl MAKernelModel {
    pub fn new(model: SpectralModel, g_tilde: Option<GTildeFn>, mode: GTildeMode) -> Result<Self> {
        if model.m() > 2 {
            bail!(Validation, "moving-average kernels support m ≤ 2, got m = {}", model.m());
        }
        let conditions = check_conditions(&model, g_tilde.as_ref(), mode);
        if !conditions.pass() {
            bail!(Validation, "kernel conditions fail: {}", conditions.failures().join("; "));
        }
        let frame = Frame::new(model.pair()).map_err(Error::Validation)?;
        let sphere = if model.m() == 2 {
            Some(SphereParametrization::new(&PolarSystem::new(&SquareMatrix::from_diagonal(
                &DVector::from_column_slice(&frame.e0),
            ))?)?)
        } else {
            None
        };
        let mut me = MAKernelModel {
            model,
            g_tilde,
            mode,
            frame,
            sphere,
            conditions,
            even: false,
            options: KernelOptions::default(),
            table: OnceLock::new(),
        };
        me.even = me.detect_evenness()?;
        Ok(me)
    }

    /// Kernel model for [`crate::spectral::BuiltinProfile::Quasinorm`] with its closed-form `g̃`.
    pub fn quasinorm(model: SpectralModel) -> Result<Self> {
        let gt = quasinorm_g_tilde(model.pair())?;
        Self::new(model, Some(gt), GTildeMode::Analytic)
    }

    pub fn with_options(mut self, options: KernelOptions) -> Self {
        self.options = options;
        self.table = OnceLock::new();
        self
    }

    pub fn options(&self) -> &KernelOptions {
        &self.options
    }

    pub fn conditions(&self) -> &ConditionsReport {
        &self.conditions
    }

    pub fn model(&self) -> &SpectralModel {
        &self.model
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    /// `g` even in every coordinate of the frame, so that `φ` is too.
    fn detect_evenness(&self) -> Result<bool> {
        let m = self.m();
        let probes: Vec<Vec<f64>> = match m {
            1 => vec![vec![0.7], vec![1.9]],
            _ => vec![vec![0.7, 1.3], vec![1.9, 0.4], vec![0.35, 2.2]],
        };
        for p in &probes {
            let base = g_frame(&self.model, &self.frame, p)?;
            for mask in 1..(1usize << m) {
                let q: Vec<f64> = p.iter().enumerate().map(|(j, v)| if (mask >> j) & 1 == 1 { -v } else { *v }).collect();
                let other = g_frame(&self.model, &self.frame, &q)?;
                if (&other - &base).norm() > 1e-12 * base.norm().max(1e-300) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// `g̃` at `x` in frame coordinates (`x ↦ V⁻¹ ∂₁…∂_m g(W^{−T} x)`).
    pub fn g_tilde_eval(&self, x: &[f64], mode: GTildeMode) -> Result<CMatrix> {
        if x.len() != self.m() {
            bail!(Validation, "point has {} coordinates, expected {}", x.len(), self.m());
        }
        g_tilde_frame(&self.model, &self.frame, self.g_tilde.as_ref(), x, mode)
    }

    fn g_tilde0(&self, y: &[f64]) -> Result<CMatrix> {
        g_tilde_frame(&self.model, &self.frame, self.g_tilde.as_ref(), y, self.mode)
    }

    /// One direction `θ ∈ S₀ ∩ (0,∞)^m` of the orthant integrals, one `n×n` block per sign vector.
    fn orthant_direction(&self, theta: &[f64], weight: f64, v0: &[f64], sigmas: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        let n = self.n();
        let m = self.m();
        let e0 = &self.frame.e0;
        let kappas: Vec<C64> = self.frame.h0.iter().map(|h| C64::new(h + 0.5 * self.frame.q, 0.0)).collect();
        let minus_i_pow = C64::new(0.0, -1.0).powi(m as i32);
        let mut out = Vec::with_capacity(sigmas.len() * n * n);
        let mut err = 0.0;
        for sigma in sigmas {
            let a: Vec<f64> = (0..m).map(|j| theta[j] * sigma[j] * v0[j]).collect();
            let mut terms = Vec::with_capacity(1 << m);
            for mask in 0..(1usize << m) {
                let mut phase: Vec<(f64, f64)> = Vec::new();
                for j in 0..m {
                    if (mask >> j) & 1 == 1 {
                        match phase.iter_mut().find(|(_, l)| (*l - e0[j]).abs() <= 1e-12 * e0[j]) {
                            Some(t) => t.0 += a[j],
                            None => phase.push((a[j], e0[j])),
                        }
                    }
                }
                let missing = m - mask.count_ones() as usize;
                let coef = if missing % 2 == 0 { 1.0 } else { -1.0 };
                terms.push(OscTerm { coef: C64::new(coef, 0.0), phase: GenPoly::new(phase) });
            }
            let body = |r: f64| -> C64 {
                let mut acc = C64::new(1.0, 0.0);
                for j in 0..m {
                    let ph = a[j] * r.powf(e0[j]);
                    acc *= C64::from_polar(2.0 * (0.5 * ph).sin(), 0.5 * ph) * C64::new(0.0, 1.0);
                }
                acc
            };
            let rad = radial_integral(&kappas, &terms, Some(&body), &self.options.radial)?;
            let flipped: Vec<f64> = theta.iter().zip(sigma).map(|(t, s)| t * s).collect();
            let sign: f64 = sigma.iter().product();
            let gt = self.g_tilde0(&flipped)? * C64::new(sign, 0.0);
            let denom: f64 = sigma.iter().zip(v0).map(|(s, v)| s * v).product();
            for i in 0..n {
                for k in 0..n {
                    out.push(weight * (gt[(i, k)] * minus_i_pow * rad.values[i]).re / denom);
                }
            }
            err += weight * rad.err * gt.norm() / denom.abs();
        }
        Ok((out, err))
    }

    /// `Σ_σ φ_σ` for one direction when `g` is even: `2^m g̃(θ) ∫ r^{−κ−1} Π sin(a_j r^{e_j}) dr / Π v_j`.
    fn sine_direction(&self, theta: &[f64], weight: f64, v0: &[f64]) -> Result<(Vec<f64>, f64)> {
        let n = self.n();
        let m = self.m();
        let e0 = &self.frame.e0;
        let kappas: Vec<C64> = self.frame.h0.iter().map(|h| C64::new(h + 0.5 * self.frame.q, 0.0)).collect();
        let a: Vec<f64> = (0..m).map(|j| theta[j] * v0[j]).collect();
        // Π sin A_j = (2i)^{−m} Σ_ε (Π ε) e^{i Σ ε_j A_j}
        let unit = C64::new(0.0, 2.0).powi(-(m as i32));
        let mut terms = Vec::with_capacity(1 << m);
        for mask in 0..(1usize << m) {
            let mut phase: Vec<(f64, f64)> = Vec::new();
            let mut sign = 1.0;
            for j in 0..m {
                let eps = if (mask >> j) & 1 == 1 { -1.0 } else { 1.0 };
                sign *= eps;
                match phase.iter_mut().find(|(_, l)| (*l - e0[j]).abs() <= 1e-12 * e0[j]) {
                    Some(t) => t.0 += eps * a[j],
                    None => phase.push((eps * a[j], e0[j])),
                }
            }
            terms.push(OscTerm { coef: unit * sign, phase: GenPoly::new(phase) });
        }
        let body = |r: f64| -> C64 { C64::new((0..m).map(|j| (a[j] * r.powf(e0[j])).sin()).product(), 0.0) };
        let rad = radial_integral(&kappas, &terms, Some(&body), &self.options.radial)?;
        let gt = self.g_tilde0(theta)?;
        let f = weight * 2f64.powi(m as i32) / v0.iter().product::<f64>();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for k in 0..n {
                out.push(f * (gt[(i, k)] * rad.values[i].re).re);
            }
        }
        Ok((out, f.abs() * rad.err * gt.norm()))
    }

    /// Orthant integrals `φ_σ(v₀)` (frame coordinates) for each sign vector, with error estimate.
    /// For even `g` and the full set of sign vectors a single block holding their sum is returned.
    fn orthant_integrals(&self, v0: &[f64], sigmas: &[Vec<f64>]) -> Result<(Vec<SquareMatrix>, f64)> {
        check_off_axes(v0)?;
        let n = self.n();
        let summed = self.even && sigmas.len() == 1 << self.m();
        let direction = |theta: &[f64], weight: f64| {
            if summed {
                self.sine_direction(theta, weight, v0)
            } else {
                self.orthant_direction(theta, weight, v0, sigmas)
            }
        };
        let (flat, err) = match &self.sphere {
            None => {
                let e = self.frame.e0[0];
                direction(&[e], e * e)?
            }
            Some(sp) => {
                let dim = if summed { n * n } else { sigmas.len() * n * n };
                let (vals, err, _) = adaptive_vec(
                    |s| {
                        let p = sp.point(s)?;
                        direction(&p.theta, p.density)
                    },
                    &[0.0, 0.5 * PI],
                    dim,
                    self.options.angular_rel_tol,
                    self.options.max_angular_panels,
                )?;
                (vals, err)
            }
        };
        let blocks = flat.chunks(n * n).map(|c| SquareMatrix::from_row_slice(n, n, c)).collect();
        Ok((blocks, err))
    }

    /// `φ_σ(v)` for one sign vector, `v` in frame coordinates with no zero component.
    pub fn phi_sigma(&self, sigma: &[f64], v: &[f64]) -> Result<KernelValue> {
        let m = self.m();
        if sigma.len() != m || v.len() != m || sigma.iter().any(|s| *s != 1.0 && *s != -1.0) {
            bail!(Validation, "sign vector and point must have {m} components, signs in {{−1, 1}}");
        }
        let (vals, err) = self.orthant_integrals(v, &[sigma.to_vec()])?;
        Ok(KernelValue { phi: vals.into_iter().next().expect("one block"), est_error: err })
    }

    fn all_sigmas(&self) -> Vec<Vec<f64>> {
        let m = self.m();
        (0..(1usize << m))
            .map(|mask| (0..m).map(|j| if (mask >> j) & 1 == 1 { -1.0 } else { 1.0 }).collect())
            .collect()
    }

    /// `φ₀(v₀) = (2π)^{−m} (−1)^m Σ_σ φ_σ(v₀)` in the frame.
    fn phi0(&self, v0: &[f64]) -> Result<(SquareMatrix, f64)> {
        let m = self.m();
        let (vals, err) = self.orthant_integrals(v0, &self.all_sigmas())?;
        let scale = (if m % 2 == 0 { 1.0 } else { -1.0 }) * (2.0 * PI).powi(-(m as i32));
        let sum = vals.iter().fold(SquareMatrix::zeros(self.n(), self.n()), |a, b| a + b);
        Ok((sum * scale, err * scale.abs()))
    }

    /// The kernel `φ(v) = |det W|⁻¹ V φ₀(W⁻¹ v)`.
    pub fn phi(&self, v: &[f64]) -> Result<KernelValue> {
        if v.len() != self.m() {
            bail!(Validation, "point has {} coordinates, expected {}", v.len(), self.m());
        }
        let v0 = self.frame.to_frame(v);
        let (p0, err) = self.phi0(&v0)?;
        let phi = &self.frame.v * p0 / self.frame.det_w;
        let amp = self.frame.v.norm() / self.frame.det_w;
        Ok(KernelValue { phi, est_error: err * amp })
    }

    fn table(&self) -> Result<&KernelTable> {
        if let Some(t) = self.table.get() {
            return Ok(t);
        }
        let t = KernelTable::build(self)?;
        let _ = self.table.set(t);
        Ok(self.table.get().expect("table just set"))
    }

    /// Relative interpolation error estimate of the kernel table (builds it if needed).
    pub fn table_error(&self) -> Result<f64> {
        Ok(self.table()?.est_error)
    }

    /// `φ₀(v)` from the table, row-major into `out`; `v` must be non-zero.
    fn phi0_fast(&self, table: &KernelTable, v: &[f64], out: &mut [f64]) {
        let fr = &self.frame;
        let n = self.n();
        let (rho, vals) = match v.len() {
            1 => {
                let rho = v[0].abs().powf(1.0 / fr.e0[0]);
                (rho, if v[0] > 0.0 { &table.point_values[0] } else { &table.point_values[1] })
            }
            _ => {
                let a = v[0].abs().powf(2.0 / fr.e0[0]);
                let b = v[1].abs().powf(2.0 / fr.e0[1]);
                let rho = (a + b).sqrt();
                let (c, s) = (a.sqrt(), b.sqrt());
                let psi = if table.even { s.atan2(c) } else { (s * v[1].signum()).atan2(c * v[0].signum()) };
                table.interpolate(psi, out);
                for i in 0..n {
                    let f = ((fr.h0[i] - 0.5 * fr.q) * rho.ln()).exp();
                    for k in 0..n {
                        out[i * n + k] *= f;
                    }
                }
                return;
            }
        };
        for i in 0..n {
            let f = ((fr.h0[i] - 0.5 * fr.q) * rho.ln()).exp();
            for k in 0..n {
                out[i * n + k] = vals[(i, k)] * f;
            }
        }
    }

    /// `∫ (φ(s−u) − φ(−u))(φ(t−u) − φ(−u))ᵀ du`, using the kernel table.
    pub fn ma_covariance(&self, s: &[f64], t: &[f64]) -> Result<CovarianceResult> {
        let m = self.m();
        let n = self.n();
        if s.len() != m || t.len() != m {
            bail!(Validation, "points must have {m} coordinates");
        }
        if s.iter().chain(t).any(|v| !v.is_finite()) {
            bail!(Validation, "points must be finite");
        }
        let zero = CovarianceResult {
            value: SquareMatrix::zeros(n, n),
            est_error: 0.0,
            imag_residue: 0.0,
            angular_nodes: 0,
            radial_evals: 0,
        };
        if s.iter().all(|v| *v == 0.0) || t.iter().all(|v| *v == 0.0) {
            return Ok(zero);
        }
        let table = self.table()?;
        let s0 = self.frame.to_frame(s);
        let t0 = self.frame.to_frame(t);
        let mut centers: Vec<Vec<f64>> = vec![vec![0.0; m], s0.clone()];
        if t0 != s0 {
            centers.push(t0.clone());
        }
        let setup = MaSetup { s0, t0, centers: centers.clone() };
        let mut total = vec![0.0; n * n];
        let mut err = 0.0;
        let mut nodes = 0usize;
        let mut evals = 0usize;
        for c in 0..centers.len() {
            let (vals, e, an, ev) = self.ma_piece(table, &setup, c)?;
            for (a, b) in total.iter_mut().zip(&vals) {
                *a += b;
            }
            err += e;
            nodes += an;
            evals += ev;
        }
        let c0 = SquareMatrix::from_row_slice(n, n, &total);
        let value = &self.frame.v * c0 * self.frame.v.transpose() / self.frame.det_w;
        let scale = value.norm();
        let amp = self.frame.v.norm().powi(2) / self.frame.det_w;
        Ok(CovarianceResult {
            est_error: err * amp + 2.0 * table.est_error * scale,
            value,
            imag_residue: 0.0,
            angular_nodes: nodes,
            radial_evals: evals,
        })
    }

    /// Partition-of-unity piece around center `c`: `∫ w_c(u) F(u) du` in quasi-polar
    /// coordinates `u = c + r^{E₀} θ`.
    fn ma_piece(&self, table: &KernelTable, setup: &MaSetup, c: usize) -> Result<(Vec<f64>, f64, usize, usize)> {
        let n = self.n();
        let e0 = &self.frame.e0;
        match &self.sphere {
            None => {
                let e = e0[0];
                let mut vals = vec![0.0; n * n];
                let mut err = 0.0;
                let mut evals = 0;
                for dir in [e, -e] {
                    let (v, er, ev) = self.ma_radial(table, setup, c, &[dir])?;
                    for (a, b) in vals.iter_mut().zip(&v) {
                        *a += e * e * b;
                    }
                    err += e * e * er;
                    evals += ev;
                }
                Ok((vals, err, 2, evals))
            }
            Some(sp) => {
                let mut breaks = vec![-PI, -0.5 * PI, 0.0, 0.5 * PI, PI];
                for (k, other) in setup.centers.iter().enumerate() {
                    if k != c {
                        let d: Vec<f64> = other.iter().zip(&setup.centers[c]).map(|(a, b)| a - b).collect();
                        breaks.push(orbit_angle(e0, &d));
                    }
                }
                breaks.sort_by(f64::total_cmp);
                breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
                let evals = std::sync::atomic::AtomicUsize::new(0);
                let (vals, err, nodes) = adaptive_vec(
                    |s| {
                        let p = sp.point(s)?;
                        let (v, er, ev) = self.ma_radial(table, setup, c, &p.theta)?;
                        evals.fetch_add(ev, std::sync::atomic::Ordering::Relaxed);
                        Ok((v.iter().map(|x| x * p.density).collect(), er * p.density))
                    },
                    &breaks,
                    n * n,
                    self.options.covariance_rel_tol,
                    2000,
                )?;
                Ok((vals, err, nodes, evals.into_inner()))
            }
        }
    }

    /// Radial integral `∫₀^∞ r^{q−1} w_c F(c + r^{E₀}θ) dr` in `z = ln r`, with breaks where a
    /// kernel argument crosses an axis and geometric tail extrapolation at both ends.
    fn ma_radial(&self, table: &KernelTable, setup: &MaSetup, c: usize, theta: &[f64]) -> Result<(Vec<f64>, f64, usize)> {
        let n = self.n();
        let m = self.m();
        let e0 = &self.frame.e0;
        let q = self.frame.q;
        let center = &setup.centers[c];
        let mut zbreaks: Vec<f64> = Vec::new();
        for j in 0..m {
            if theta[j] == 0.0 {
                continue;
            }
            for k in [0.0, setup.s0[j], setup.t0[j]] {
                let ratio = (k - center[j]) / theta[j];
                if ratio > 0.0 {
                    zbreaks.push(ratio.ln() / e0[j]);
                }
            }
        }
        zbreaks.sort_by(f64::total_cmp);
        let nn = n * n;
        let integrand = |z: f64, out: &mut [f64]| {
            let r = z.exp();
            let u: Vec<f64> = (0..m).map(|j| center[j] + r.powf(e0[j]) * theta[j]).collect();
            let dist = |p: &[f64]| -> f64 { p.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() };
            let dc = dist(center);
            let mut denom = 0.0;
            for (k, other) in setup.centers.iter().enumerate() {
                let d = if k == c { dc } else { dist(other) };
                if d == 0.0 {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    return;
                }
                denom += (dc / d).powi(4);
            }
            let w = 1.0 / denom;
            let mut p_s = vec![0.0; nn];
            let mut p_t = vec![0.0; nn];
            let mut p_0 = vec![0.0; nn];
            let vs: Vec<f64> = (0..m).map(|j| setup.s0[j] - u[j]).collect();
            let vt: Vec<f64> = (0..m).map(|j| setup.t0[j] - u[j]).collect();
            let v0: Vec<f64> = u.iter().map(|x| -x).collect();
            self.phi0_fast(table, &vs, &mut p_s);
            self.phi0_fast(table, &vt, &mut p_t);
            self.phi0_fast(table, &v0, &mut p_0);
            let f = r.powf(q) * w;
            for i in 0..n {
                for k in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += (p_s[i * n + l] - p_0[i * n + l]) * (p_t[k * n + l] - p_0[k * n + l]);
                    }
                    out[i * n + k] = f * acc;
                }
            }
        };
        let panel = |za: f64, zb: f64, evals: &mut usize| -> (Vec<f64>, f64) {
            let mut cuts = vec![za];
            cuts.extend(zbreaks.iter().copied().filter(|b| *b > za && *b < zb));
            cuts.push(zb);
            let mut val = vec![0.0; nn];
            let mut err = 0.0;
            let mut buf = vec![0.0; nn];
            for w in cuts.windows(2) {
                let mut kron = vec![0.0; nn];
                let mut gauss = vec![0.0; nn];
                for (x, wk, wg) in gk15_nodes(w[0], w[1]) {
                    integrand(x, &mut buf);
                    for d in 0..nn {
                        kron[d] += wk * buf[d];
                        gauss[d] += wg * buf[d];
                    }
                }
                *evals += 15;
                err += kron.iter().zip(&gauss).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                for (a, b) in val.iter_mut().zip(&kron) {
                    *a += b;
                }
            }
            (val, err)
        };
        let lo_break = zbreaks.first().copied().unwrap_or(0.0).min(0.0);
        let hi_break = zbreaks.last().copied().unwrap_or(0.0).max(0.0);
        let mut evals = 0usize;
        let mut parts: Vec<Vec<f64>> = Vec::new();
        let mut err = 0.0;
        for dir in [-1.0, 1.0] {
            let mut z = 0.0;
            let mut prev_norm = 0.0;
            let mut prev_ratio = f64::NAN;
            let mut tiny = 0;
            let mut running = 0.0f64;
            for step in 0.. {
                if step >= 400 {
                    bail!(Numerical, "moving-average radial integral did not settle (z = {z})");
                }
                let (za, zb) = if dir < 0.0 { (z - LN2, z) } else { (z, z + LN2) };
                let (val, e) = panel(za, zb, &mut evals);
                err += e;
                let norm = val.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                running = running.max(parts.iter().fold(0.0f64, |a, p| a.max(p.iter().fold(0.0f64, |x, y| x.max(y.abs())))));
                parts.push(val.clone());
                z = if dir < 0.0 { za } else { zb };
                let past = if dir < 0.0 { z < lo_break } else { z > hi_break };
                if !past {
                    prev_norm = norm;
                    continue;
                }
                let total_norm = running.max(norm).max(1e-300);
                if norm <= 1e-15 * total_norm {
                    tiny += 1;
                    if tiny >= 2 {
                        break;
                    }
                    prev_norm = norm;
                    continue;
                }
                tiny = 0;
                if prev_norm > 0.0 {
                    let ratio = norm / prev_norm;
                    if ratio < 0.95 && (ratio - prev_ratio).abs() <= 0.02 * ratio && norm <= 1e-4 * total_norm {
                        let tail: Vec<f64> = val.iter().map(|v| v * ratio / (1.0 - ratio)).collect();
                        let alt = prev_ratio / (1.0 - prev_ratio) - ratio / (1.0 - ratio);
                        err += norm * alt.abs() + 1e-3 * norm * ratio / (1.0 - ratio);
                        parts.push(tail);
                        break;
                    }
                    prev_ratio = ratio;
                }
                prev_norm = norm;
            }
        }
        let out = (0..nn).map(|d| pairwise_sum(&parts.iter().map(|p| p[d]).collect::<Vec<_>>())).collect();
        Ok((out, err, evals))
    }

    /// `φ(t−u) − φ(−u)` computed directly from `g` as `(2π)^{−m} ∫ g(x)(e^{i⟨x,t−u⟩} − e^{−i⟨x,u⟩}) dx`
    /// with Gaussian damping `e^{−δ²|x|²/2}` extrapolated to `δ → 0`, without the orthant split.
    pub fn increment_kernel_direct(&self, t: &[f64], u: &[f64]) -> Result<KernelValue> {
        let m = self.m();
        let n = self.n();
        if t.len() != m || u.len() != m {
            bail!(Validation, "points must have {m} coordinates");
        }
        let fr = &self.frame;
        // x = r^{E*} θ = W^{−T} (r^{e_j} ζ_j) with ζ = Wᵀ θ; ⟨x, a⟩ = Σ r^{e_j} ζ_j (W⁻¹ a)_j.
        let wa = fr.to_frame(&t.iter().zip(u).map(|(a, b)| a - b).collect::<Vec<_>>());
        let wb = fr.to_frame(&u.iter().map(|b| -b).collect::<Vec<_>>());
        let deltas = [0.15, 0.1, 0.075];
        let nd = deltas.len();
        let w_t = fr.w_inv_t.clone().try_inverse().ok_or_else(|| Error::Numerical("singular eigenvector matrix".into()))?;
        let v_c = fr.v.map(|z| C64::new(z, 0.0));
        let vi_c = fr.v_inv.map(|z| C64::new(z, 0.0));
        let direction = |theta: &[f64], weight: f64| -> Result<(Vec<f64>, f64)> {
            let zeta: Vec<f64> = (&w_t * DVector::from_column_slice(theta)).iter().copied().collect();
            let js = damped_radial(&fr.e0, &fr.h0, fr.q, &zeta, &wa, &wb, &fr.w_inv_t, &deltas)?;
            let g = self.model.g(theta)?;
            let mut out = Vec::with_capacity(nd * n * n);
            for d in 0..nd {
                let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, (0..n).map(|i| js[d * n + i])));
                let f = &v_c * diag * &vi_c * &g;
                for i in 0..n {
                    for k in 0..n {
                        out.push(weight * f[(i, k)].re * (2.0 * PI).powi(-(m as i32)));
                    }
                }
            }
            Ok((out, 0.0))
        };
        let flat = match m {
            1 => {
                let e = fr.e0[0];
                let (a, _) = direction(&[e], e * e)?;
                let (b, _) = direction(&[-e], e * e)?;
                a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>()
            }
            _ => {
                let sys = self.model.filter().system().clone();
                let sp = SphereParametrization::new(&sys)?;
                let mut breaks = vec![-PI, -0.5 * PI, 0.0, 0.5 * PI, PI];
                breaks.extend(sp.singular_angles());
                breaks.iter_mut().for_each(|b| *b = (*b + PI).rem_euclid(2.0 * PI) - PI);
                breaks.push(PI);
                breaks.sort_by(f64::total_cmp);
                breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
                let (vals, _, _) = adaptive_vec(
                    |s| {
                        let p = sp.point(s)?;
                        direction(&p.theta, p.density)
                    },
                    &breaks,
                    nd * n * n,
                    1e-8,
                    2000,
                )?;
                vals
            }
        };
        // Neville extrapolation in δ² to 0.
        let xs: Vec<f64> = deltas.iter().map(|d| d * d).collect();
        let mut phi = SquareMatrix::zeros(n, n);
        let mut err = 0.0f64;
        for i in 0..n {
            for k in 0..n {
                let ys: Vec<f64> = (0..nd).map(|d| flat[d * n * n + i * n + k]).collect();
                let full = neville_at_zero(&xs, &ys);
                let partial = neville_at_zero(&xs[1..], &ys[1..]);
                phi[(i, k)] = full;
                err = err.max((full - partial).abs());
            }
        }
        Ok(KernelValue { phi, est_error: err })
    }
}

const LN2: f64 = std::f64::consts::LN_2;

struct MaSetup {
    s0: Vec<f64>,
    t0: Vec<f64>,
    centers: Vec<Vec<f64>>,
}

/// Angle `s` of the unit-circle point on the `r^{E₀}` orbit of `x` (diagonal `E₀`).
fn orbit_angle(e0: &[f64], x: &[f64]) -> f64 {
    let norm2 = |u: f64| -> f64 { e0.iter().zip(x).map(|(e, v)| (2.0 * e * u).exp() * v * v).sum() };
    let (mut lo, mut hi) = (-200.0, 200.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm2(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let u = 0.5 * (lo + hi);
    let y: Vec<f64> = e0.iter().zip(x).map(|(e, v)| (e * u).exp() * v).collect();
    y[1].atan2(y[0])
}

fn neville_at_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let k = xs.len();
    for level in 1..k {
        for i in 0..k - level {
            p[i] = (xs[i + level] * p[i] - xs[i] * p[i + 1]) / (xs[i + level] - xs[i]);
        }
    }
    p[0]
}

/// `J_i(δ) = ∫₀^∞ r^{q/2 − h_i − 1} (e^{i⟨x,a⟩} − e^{i⟨x,b⟩}) e^{−δ²|x|²/2} dr` along
/// `x = W^{−T}(r^{e_j} ζ_j)`; returns `J` indexed `[δ][i]`.
#[allow(clippy::too_many_arguments)]
fn damped_radial(
    e0: &[f64],
    h0: &[f64],
    q: f64,
    zeta: &[f64],
    wa: &[f64],
    wb: &[f64],
    w_inv_t: &SquareMatrix,
    deltas: &[f64],
) -> Result<Vec<C64>> {
    let m = e0.len();
    let n = h0.len();
    let nd = deltas.len();
    let dmin = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let eval = |z: f64, out: &mut [C64]| {
        let r = z.exp();
        let y: Vec<f64> = (0..m).map(|j| r.powf(e0[j]) * zeta[j]).collect();
        let pa: f64 = y.iter().zip(wa).map(|(a, b)| a * b).sum();
        let pb: f64 = y.iter().zip(wb).map(|(a, b)| a * b).sum();
        let x = w_inv_t * DVector::from_column_slice(&y);
        let x2 = x.norm_squared();
        // e^{ia} − e^{ib} = 2i sin((a−b)/2) e^{i(a+b)/2}
        let br = C64::from_polar(2.0 * (0.5 * (pa - pb)).sin(), 0.5 * (pa + pb)) * C64::new(0.0, 1.0);
        for (d, delta) in deltas.iter().enumerate() {
            let damp = (-0.5 * delta * delta * x2).exp();
            for i in 0..n {
                out[d * n + i] = br * damp * ((0.5 * q - h0[i]) * z).exp();
            }
        }
    };
    let velocity = |z: f64| -> f64 {
        let r = z.exp();
        (0..m).map(|j| e0[j] * r.powf(e0[j]) * zeta[j].abs() * (wa[j].abs() + wb[j].abs())).sum::<f64>()
    };
    let mut parts: Vec<Vec<C64>> = Vec::new();
    let mut buf = vec![C64::new(0.0, 0.0); nd * n];
    let mut run = |za: f64, zb: f64, parts: &mut Vec<Vec<C64>>| -> f64 {
        let mut acc = vec![C64::new(0.0, 0.0); nd * n];
        for (x, wk, _) in gk15_nodes(za, zb) {
            eval(x, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b * wk;
            }
        }
        let norm = acc.iter().map(|v| v.norm()).fold(0.0, f64::max);
        parts.push(acc);
        norm
    };
    // downwards: the bracket vanishes like r^{e_min}
    let mut z = 0.0;
    let mut first = 0.0f64;
    for step in 0..2000 {
        let norm = run(z - 0.5, z, &mut parts);
        first = first.max(norm);
        z -= 0.5;
        if step > 4 && norm <= 1e-16 * first.max(1e-300) {
            break;
        }
    }
    // upwards until the damping kills the integrand
    let mut z = 0.0;
    for _ in 0..200_000 {
        let vel = velocity(z);
        let dz = (0.5f64).min(2.0 / vel.max(1e-300));
        run(z, z + dz, &mut parts);
        z += dz;
        let r = z.exp();
        let y: Vec<f64> = (0..m).map(|j| r.powf(e0[j]) * zeta[j]).collect();
        let x2 = (w_inv_t * DVector::from_column_slice(&y)).norm_squared();
        if 0.5 * dmin * dmin * x2 > 45.0 {
            return Ok((0..nd * n).map(|d| parts.iter().map(|p| p[d]).sum()).collect());
        }
    }
    bail!(Numerical, "damped radial integral did not reach the damping cutoff")
}

/// Univariate kernel `φ(v) = (2π)^{−1} ∫ (cos(xv) − 1_{h>1/2}) |x|^{−h−1/2} dx` for `g = |x|^{−h−1/2}`:
/// a Lebesgue integral for `h > 1/2` and an improper Riemann integral for `h < 1/2`.
pub fn univariate_kernel(h: f64, v: f64) -> Result<KernelValue> {
    if !(h > 0.0 && h < 1.0) || (h - 0.5).abs() < 1e-12 {
        bail!(Domain, "univariate kernel needs h in (0, 1/2) ∪ (1/2, 1), got {h}");
    }
    if v == 0.0 || !v.is_finite() {
        bail!(Domain, "univariate kernel is singular at v = 0");
    }
    let a = h + 0.5;
    let w = v.abs();
    let opts = RadialOptions { omega_max: 200.0, rel_tol: 1e-12, max_panels: 200_000 };
    let one = C64::new(1.0, 0.0);
    let terms = [OscTerm { coef: one, phase: GenPoly::new(vec![(w, 1.0)]) }, OscTerm { coef: -one, phase: GenPoly::new(Vec::new()) }];
    let body = |r: f64| -> C64 { C64::from_polar(2.0 * (0.5 * w * r).sin(), 0.5 * w * r) * C64::new(0.0, 1.0) };
    let (value, err) = if h > 0.5 {
        // ∫₀^∞ x^{−a}(cos(xw) − 1) dx with κ = a − 1
        let rad = radial_integral(&[C64::new(a - 1.0, 0.0)], &terms, Some(&body), &opts)?;
        (rad.values[0].re, rad.err)
    } else {
        // ∫₀^∞ x^{−a} cos(xw) dx = (a/w) ∫₀^∞ x^{−a−1} sin(xw) dx
        let rad = radial_integral(&[C64::new(a, 0.0)], &terms, Some(&body), &opts)?;
        (a / w * rad.values[0].im, a / w * rad.err)
    };
    Ok(KernelValue { phi: SquareMatrix::from_element(1, 1, value / PI), est_error: err / PI })
}

/// Tabulated `Φ(ψ) = φ₀(ω(ψ))` on the quasi-circle `ω(ψ) = (sgn cos ψ |cos ψ|^{e₁}, sgn sin ψ |sin ψ|^{e₂})`,
/// so that `φ₀(v) = ρ(v)^{H₀ − q/2} Φ(ψ(v))` row-wise.
struct KernelTable {
    even: bool,
    point_values: Vec<SquareMatrix>,
    panels: Vec<TablePanel>,
    est_error: f64,
}

struct TablePanel {
    lo: f64,
    hi: f64,
    /// Values at the Chebyshev nodes, row-major `n×n` each.
    values: Vec<Vec<f64>>,
}

fn cheb_node(k: usize, count: usize) -> f64 {
    ((2 * k + 1) as f64 * PI / (2 * count) as f64).cos()
}

impl KernelTable {
    fn build(model: &MAKernelModel) -> Result<Self> {
        let n = model.n();
        if model.m() == 1 {
            let e = model.frame.e0[0];
            let _ = e;
            let vals = [1.0, -1.0]
                .par_iter()
                .map(|v| model.phi0(&[*v]))
                .collect::<Result<Vec<_>>>()?;
            let scale = vals.iter().map(|(p, _)| p.norm()).fold(0.0, f64::max).max(1e-300);
            let err = vals.iter().map(|(_, e)| *e).fold(0.0, f64::max) / scale;
            return Ok(KernelTable { even: model.even, point_values: vals.into_iter().map(|(p, _)| p).collect(), panels: Vec::new(), est_error: err });
        }
        let quadrants: Vec<(f64, f64)> =
            if model.even { vec![(0.0, 0.5 * PI)] } else { vec![(-PI, -0.5 * PI), (-0.5 * PI, 0.0), (0.0, 0.5 * PI), (0.5 * PI, PI)] };
        let k = model.options.table_grading as i32;
        let mut rel = vec![0.0];
        for j in (2..=k + 1).rev() {
            rel.push(2f64.powi(-j));
        }
        rel.push(0.5);
        for j in 2..=k + 1 {
            rel.push(1.0 - 2f64.powi(-j));
        }
        rel.push(1.0);
        let mut bounds = Vec::new();
        for (a, b) in quadrants {
            for w in rel.windows(2) {
                bounds.push((a + (b - a) * w[0], a + (b - a) * w[1]));
            }
        }
        let count = model.options.table_nodes;
        let e0 = model.frame.e0.clone();
        let jobs: Vec<(usize, usize, f64)> = bounds
            .iter()
            .enumerate()
            .flat_map(|(p, &(lo, hi))| (0..count).map(move |k| (p, k, 0.5 * (lo + hi) + 0.5 * (hi - lo) * cheb_node(k, count))))
            .collect();
        let results = jobs
            .par_iter()
            .map(|&(_, _, psi)| {
                let (c, s) = (psi.cos(), psi.sin());
                let v = [c.signum() * c.abs().powf(e0[0]), s.signum() * s.abs().powf(e0[1])];
                model.phi0(&v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut panels: Vec<TablePanel> =
            bounds.iter().map(|&(lo, hi)| TablePanel { lo, hi, values: vec![Vec::new(); count] }).collect();
        let mut quad_err = 0.0f64;
        for ((p, k, _), (val, e)) in jobs.iter().zip(results) {
            panels[*p].values[*k] = val.transpose().iter().copied().collect();
            quad_err = quad_err.max(e);
        }
        let scale = panels
            .iter()
            .flat_map(|p| p.values.iter().flat_map(|v| v.iter().map(|x| x.abs())))
            .fold(0.0, f64::max)
            .max(1e-300);
        // trailing Chebyshev coefficient as the interpolation error per panel
        let mut interp_err = 0.0f64;
        for p in &panels {
            for d in 0..n * n {
                let c_last: f64 = (0..count)
                    .map(|k| p.values[k][d] * ((count - 1) as f64 * (2 * k + 1) as f64 * PI / (2 * count) as f64).cos())
                    .sum::<f64>()
                    * 2.0
                    / count as f64;
                interp_err = interp_err.max(c_last.abs());
            }
        }
        Ok(KernelTable { even: model.even, point_values: Vec::new(), panels, est_error: (interp_err + quad_err) / scale })
    }

    fn interpolate(&self, psi: f64, out: &mut [f64]) {
        let idx = match self.panels.binary_search_by(|p| p.lo.total_cmp(&psi)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
        .min(self.panels.len() - 1);
        let p = &self.panels[idx];
        let count = p.values.len();
        let x = ((2.0 * psi - p.lo - p.hi) / (p.hi - p.lo)).clamp(-1.0, 1.0);
        let mut num = vec![0.0; out.len()];
        let mut den = 0.0;
        for k in 0..count {
            let xk = cheb_node(k, count);
            let diff = x - xk;
            if diff == 0.0 {
                out.copy_from_slice(&p.values[k]);
                return;
            }
            let wk = if k % 2 == 0 { 1.0 } else { -1.0 } * ((2 * k + 1) as f64 * PI / (2 * count) as f64).sin() / diff;
            den += wk;
            for (a, b) in num.iter_mut().zip(&p.values[k]) {
                *a += wk * b;
            }
        }
        for (o, a) in out.iter_mut().zip(&num) {
            *o = a / den;
        }
    }
}

/// Adaptive GK15 for vector integrands over consecutive `breaks`; splits the panel with the
/// largest error until the total error is below `rel_tol` times the largest component.
fn adaptive_vec<F>(f: F, breaks: &[f64], dim: usize, rel_tol: f64, max_panels: usize) -> Result<(Vec<f64>, f64, usize)>
where
    F: Fn(f64) -> Result<(Vec<f64>, f64)> + Sync,
{
    struct Panel {
        a: f64,
        b: f64,
        val: Vec<f64>,
        err: f64,
        aux: f64,
    }
    let eval = |a: f64, b: f64| -> Result<Panel> {
        let nodes = gk15_nodes(a, b);
        let vals: Vec<Result<(Vec<f64>, f64)>> = nodes.par_iter().map(|(x, _, _)| f(*x)).collect();
        let mut k = vec![0.0; dim];
        let mut g = vec![0.0; dim];
        let mut aux = 0.0;
        for ((_, wk, wg), v) in nodes.iter().zip(vals) {
            let (v, e) = v?;
            for d in 0..dim {
                if !v[d].is_finite() {
                    bail!(Numerical, "non-finite integrand on [{a}, {b}]");
                }
                k[d] += wk * v[d];
                g[d] += wg * v[d];
            }
            aux += wk.abs() * e;
        }
        let err = k.iter().zip(&g).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        Ok(Panel { a, b, val: k, err, aux })
    };
    let mut panels: Vec<Panel> = breaks.windows(2).filter(|w| w[1] > w[0]).map(|w| eval(w[0], w[1])).collect::<Result<_>>()?;
    loop {
        let total: Vec<f64> = (0..dim).map(|d| panels.iter().map(|p| p.val[d]).sum()).collect();
        let scale = total.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let err: f64 = panels.iter().map(|p| p.err).sum();
        if err <= rel_tol * scale || err == 0.0 {
            break;
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .filter(|(_, p)| p.b - p.a > 1e-13 * (1.0 + p.a.abs()))
            .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
            .unwrap_or((usize::MAX, &panels[0]));
        if worst == usize::MAX || panels.len() >= max_panels {
            if err > 1e3 * rel_tol * scale {
                bail!(Numerical, "angular quadrature did not converge: error {err:.3e} vs scale {scale:.3e}");
            }
            break;
        }
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        let (l, r) = rayon::join(|| eval(p.a, mid), || eval(mid, p.b));
        panels.push(l?);
        panels.push(r?);
    }
    panels.sort_by(|x, y| x.a.total_cmp(&y.a));
    let out = (0..dim).map(|d| pairwise_sum(&panels.iter().map(|p| p.val[d]).collect::<Vec<_>>())).collect();
    let err = panels.iter().map(|p| p.err + p.aux).sum();
    Ok((out, err, panels.len() * 15))
}
