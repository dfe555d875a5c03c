//! Operator polar coordinates `x = τ(x)^E l(x)` built on the norm
//! `‖x‖₀ = ∫₀^∞ ‖e^{-uE} x‖ du`, its unit sphere `S₀`, the spherical measure for `m = 2`, and
//! polar-coordinate integration.

use crate::error::{bail, Error, Result};
use crate::matcalc::{check_matrix, spectrum, MatrixPower, SquareMatrix};
use crate::quad::{gk15_nodes, pairwise_sum};

const TAU_MIN: f64 = 1e-12;
const TAU_MAX: f64 = 1e12;
/// Step of the central differences for the sphere tangent.
pub const SPHERE_DIFF_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct PolarSystem {
    power: MatrixPower,
    e_min: f64,
    e_max: f64,
    panel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolarDecomposition {
    pub tau: f64,
    pub l: Vec<f64>,
}

fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl PolarSystem {
    pub fn new(e: &SquareMatrix) -> Result<Self> {
        check_matrix(e, "E")?;
        let spec = spectrum(e)?;
        if !(spec.min_real > 0.0) {
            bail!(
                Validation,
                "polar coordinates need min Re eig(E) > 0, got {} (eig(E) = {})",
                spec.min_real,
                spec.describe()
            );
        }
        let modulus = spec.eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
        Ok(PolarSystem {
            power: MatrixPower::new(e)?,
            e_min: spec.min_real,
            e_max: spec.max_real,
            panel: 3.0 / modulus.max(0.25),
        })
    }

    pub fn dim(&self) -> usize {
        self.power.dim()
    }

    pub fn e(&self) -> &SquareMatrix {
        self.power.matrix()
    }

    pub fn power(&self) -> &MatrixPower {
        &self.power
    }

    pub fn trace(&self) -> f64 {
        self.e().trace()
    }

    pub fn min_real_eig(&self) -> f64 {
        self.e_min
    }

    /// `c^E x`.
    pub fn scale(&self, c: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.power.apply_scaled(c.ln(), x, &mut out);
        out
    }

    /// `τ^E l`.
    pub fn compose(&self, d: &PolarDecomposition) -> Vec<f64> {
        self.scale(d.tau, &d.l)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            bail!(Validation, "point has dimension {}, expected {}", x.len(), self.dim());
        }
        if x.iter().any(|v| !v.is_finite()) {
            bail!(Validation, "point has non-finite coordinates");
        }
        Ok(())
    }

    /// `‖e^{-vE} x‖`.
    fn orbit_norm(&self, v: f64, x: &[f64], buf: &mut [f64]) -> f64 {
        self.power.apply_scaled(-v, x, buf);
        euclid(buf)
    }

    /// `∫_a^b ‖e^{-vE}x‖ dv` on one panel with adaptive bisection; `abs_tol` covers the whole panel.
    fn panel_integral(&self, x: &[f64], a: f64, b: f64, abs_tol: f64, buf: &mut [f64]) -> Result<f64> {
        let mut stack = vec![(a, b, 0u32)];
        let mut parts = Vec::new();
        let mut scale = 0.0f64;
        while let Some((lo, hi, depth)) = stack.pop() {
            let mut k = 0.0;
            let mut g = 0.0;
            for (v, wk, wg) in gk15_nodes(lo, hi) {
                let n = self.orbit_norm(v, x, buf);
                k += wk * n;
                g += wg * n;
            }
            if !k.is_finite() {
                bail!(Numerical, "non-finite orbit norm on [{lo}, {hi}]");
            }
            if depth == 0 {
                scale = k.abs();
            }
            // width share of the panel tolerance, floored at the rounding level of the matrix exponential
            let tol = ((1e-14 * scale).max(abs_tol) * (hi - lo) / (b - a)).max(1e-12 * k.abs());
            if (k - g).abs() <= tol || depth >= 30 {
                if depth >= 30 && (k - g).abs() > 1e-8 * scale {
                    bail!(Numerical, "norm quadrature did not converge on [{lo}, {hi}]: {k} vs {g}");
                }
                parts.push(k);
            } else {
                if parts.len() + stack.len() > 4096 {
                    bail!(Numerical, "norm quadrature needs more than 4096 subintervals on [{a}, {b}]");
                }
                let mid = 0.5 * (lo + hi);
                stack.push((mid, hi, depth + 1));
                stack.push((lo, mid, depth + 1));
            }
        }
        Ok(pairwise_sum(&parts))
    }

    /// `‖x‖₀`.
    pub fn zero_norm(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        if x.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        let mut buf = vec![0.0; x.len()];
        let mut parts: Vec<f64> = Vec::new();
        let mut total = 0.0;
        let mut prev = 0.0;
        let mut prev_ratio = 0.0;
        let mut stable = 0;
        let mut small = 0;
        for k in 0..100_000usize {
            let a = k as f64 * self.panel;
            let s = self.panel_integral(x, a, a + self.panel, 1e-17 * total, &mut buf)?;
            parts.push(s);
            total += s;
            if s <= 1e-17 * total {
                small += 1;
                if small >= 2 {
                    return Ok(pairwise_sum(&parts));
                }
            } else {
                small = 0;
            }
            if k > 0 && prev > 0.0 {
                let ratio = s / prev;
                if (ratio - prev_ratio).abs() <= 1e-11 * ratio && ratio < 0.99 {
                    stable += 1;
                } else {
                    stable = 0;
                }
                if stable >= 2 && s <= 1e-5 * total {
                    parts.push(s * ratio / (1.0 - ratio));
                    return Ok(pairwise_sum(&parts));
                }
                prev_ratio = ratio;
            }
            prev = s;
        }
        Err(Error::Numerical(format!("norm quadrature did not terminate (partial value {total})")))
    }

    /// `τ_E(x)`, the unique `r` with `‖r^{-E}x‖₀ = 1`.
    pub fn tau(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        if x.iter().all(|v| *v == 0.0) {
            bail!(Domain, "tau is undefined at the origin");
        }
        let mut buf = vec![0.0; x.len()];
        let mut rho = 0.0f64;
        let mut f = self.zero_norm(x)?;
        let rho_limit = TAU_MAX.ln() + 1.0;
        // Outer Newton iterations on ln F(ρ) with F(ρ) = ‖e^{-ρE}x‖₀ and F' = -‖e^{-ρE}x‖.
        // F is decreasing, so a bracket with bisection fallback keeps non-normal orbits from cycling.
        let (mut below, mut above) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut iter = 0;
        while f.ln().abs() > 0.5 {
            if f > 1.0 {
                below = rho;
            } else {
                above = rho;
            }
            let n = self.orbit_norm(rho, x, &mut buf);
            let mut next = rho + (f.ln() * f / n).clamp(-5.0, 5.0);
            if !(next > below && next < above) {
                next = 0.5 * (below + above);
            }
            rho = next;
            if rho.abs() > rho_limit {
                bail!(Range, "tau outside [{TAU_MIN:e}, {TAU_MAX:e}]");
            }
            let y = self.scale((-rho).exp(), x);
            f = self.zero_norm(&y)?;
            iter += 1;
            if iter > 200 {
                bail!(Numerical, "tau bracket search did not converge");
            }
        }
        // Inner Newton on F(ρ_a) - ∫_{ρ_a}^{ρ} n(v) dv = 1, safeguarded by a bracket.
        let rho_a = rho;
        let f_a = f;
        let (mut lo, mut hi) = (rho_a - 2.0 / self.e_min, rho_a + 2.0 / self.e_min);
        if f_a >= 1.0 {
            lo = rho_a;
        } else {
            hi = rho_a;
        }
        let mut r = rho_a;
        for _ in 0..100 {
            let integral = if r >= rho_a {
                self.panel_integral(x, rho_a, r.max(rho_a), 1e-16 * f_a, &mut buf)?
            } else {
                -self.panel_integral(x, r, rho_a, 1e-16 * f_a, &mut buf)?
            };
            let g = f_a - integral - 1.0;
            if g > 0.0 {
                lo = lo.max(r);
            } else {
                hi = hi.min(r);
            }
            let n = self.orbit_norm(r, x, &mut buf);
            let mut next = r + g / n;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - r).abs() <= 1e-15 * (1.0 + r.abs()) {
                r = next;
                let tau = r.exp();
                if !(TAU_MIN..=TAU_MAX).contains(&tau) {
                    bail!(Range, "tau = {tau:e} outside [{TAU_MIN:e}, {TAU_MAX:e}]");
                }
                return Ok(tau);
            }
            r = next;
        }
        let tau = r.exp();
        if !(TAU_MIN..=TAU_MAX).contains(&tau) {
            bail!(Range, "tau = {tau:e} outside [{TAU_MIN:e}, {TAU_MAX:e}]");
        }
        Ok(tau)
    }

    pub fn decompose(&self, x: &[f64]) -> Result<PolarDecomposition> {
        let tau = self.tau(x)?;
        Ok(PolarDecomposition { tau, l: self.scale(1.0 / tau, x) })
    }
}

pub fn zero_norm(sys: &PolarSystem, x: &[f64]) -> Result<f64> {
    sys.zero_norm(x)
}

pub fn tau(sys: &PolarSystem, x: &[f64]) -> Result<f64> {
    sys.tau(x)
}

pub fn polar_decompose(sys: &PolarSystem, x: &[f64]) -> Result<PolarDecomposition> {
    sys.decompose(x)
}

/// Which side of the unit sphere a point lies on, for the radial sandwich bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RadialRegime {
    /// `‖x‖₀ ≤ 1` and `τ ≤ 1`.
    Inner,
    /// `‖x‖₀ > 1` and `τ > 1`.
    Outer,
    NotApplicable,
}

/// Sandwich `C_lo ‖x‖₀^{p_lo} ≤ τ ≤ C_hi ‖x‖₀^{p_hi}` with the implied constants at `x`.
#[derive(Clone, Debug)]
pub struct RadialBoundsReport {
    pub regime: RadialRegime,
    pub tau: f64,
    pub norm0: f64,
    pub lower_exponent: f64,
    pub upper_exponent: f64,
    pub lower_power: f64,
    pub upper_power: f64,
    /// `τ / ‖x‖₀^{p_lo}`: any admissible lower constant is at most this value.
    pub implied_lower_constant: f64,
    /// `τ / ‖x‖₀^{p_hi}`: any admissible upper constant is at least this value.
    pub implied_upper_constant: f64,
}

pub fn radial_bounds_check(sys: &PolarSystem, x: &[f64], delta: f64) -> Result<RadialBoundsReport> {
    let (e_min, e_max) = (sys.e_min, sys.e_max);
    if !(delta > 0.0 && delta < e_min) {
        bail!(Domain, "delta must lie in (0, {e_min}), got {delta}");
    }
    let norm0 = sys.zero_norm(x)?;
    let tau = sys.tau(x)?;
    let regime = if norm0 <= 1.0 && tau <= 1.0 {
        RadialRegime::Inner
    } else if norm0 > 1.0 && tau > 1.0 {
        RadialRegime::Outer
    } else {
        RadialRegime::NotApplicable
    };
    let (lower_exponent, upper_exponent) = match regime {
        RadialRegime::Inner => (1.0 / (e_min + delta), 1.0 / (e_max - delta).max(f64::MIN_POSITIVE)),
        _ => (1.0 / (e_max + delta), 1.0 / (e_min - delta)),
    };
    let lower_power = norm0.powf(lower_exponent);
    let upper_power = norm0.powf(upper_exponent);
    Ok(RadialBoundsReport {
        regime,
        tau,
        norm0,
        lower_exponent,
        upper_exponent,
        lower_power,
        upper_power,
        implied_lower_constant: tau / lower_power,
        implied_upper_constant: tau / upper_power,
    })
}

/// Best constants `(C_lo, C_hi)` over a sample of points sharing one regime.
pub fn fit_radial_constants(sys: &PolarSystem, points: &[Vec<f64>], delta: f64) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for p in points {
        let r = radial_bounds_check(sys, p, delta)?;
        if r.regime == RadialRegime::NotApplicable {
            continue;
        }
        lo = lo.min(r.implied_lower_constant);
        hi = hi.max(r.implied_upper_constant);
    }
    Ok((lo, hi))
}

/// Angle parametrization `θ(s) = l(cos s, sin s)` of `S₀` for `m = 2`.
#[derive(Clone, Debug)]
pub struct SphereParametrization {
    sys: PolarSystem,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpherePoint {
    pub s: f64,
    pub theta: [f64; 2],
    /// Density of `σ(dθ)` with respect to `ds`.
    pub density: f64,
}

impl SphereParametrization {
    pub fn new(sys: &PolarSystem) -> Result<Self> {
        if sys.dim() != 2 {
            bail!(Validation, "sphere parametrization is only available for m = 2, got m = {}", sys.dim());
        }
        Ok(SphereParametrization { sys: sys.clone() })
    }

    pub fn system(&self) -> &PolarSystem {
        &self.sys
    }

    pub fn theta(&self, s: f64) -> Result<[f64; 2]> {
        let d = self.sys.decompose(&[s.cos(), s.sin()])?;
        Ok([d.l[0], d.l[1]])
    }

    pub fn point(&self, s: f64) -> Result<SpherePoint> {
        let theta = self.theta(s)?;
        let h = SPHERE_DIFF_STEP;
        let p = self.theta(s + h)?;
        let q = self.theta(s - h)?;
        let dt = [(p[0] - q[0]) / (2.0 * h), (p[1] - q[1]) / (2.0 * h)];
        let e = self.sys.e();
        let et = [e[(0, 0)] * theta[0] + e[(0, 1)] * theta[1], e[(1, 0)] * theta[0] + e[(1, 1)] * theta[1]];
        let density = (et[0] * dt[1] - et[1] * dt[0]).abs();
        if !density.is_finite() || !dt[0].is_finite() || !dt[1].is_finite() {
            bail!(Numerical, "sphere parametrization has a non-finite derivative at s = {s}");
        }
        Ok(SpherePoint { s, theta, density })
    }

    pub fn density(&self, s: f64) -> Result<f64> {
        Ok(self.point(s)?.density)
    }

    /// Angles of the real eigen-directions of `E` (distinct real spectrum only). `θ(s)` is not
    /// analytic there because the orbit norm switches its dominant mode.
    pub fn singular_angles(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(eb) = self.sys.power.eigen() {
            let real = eb.values.iter().all(|z| z.im.abs() < 1e-12 * (1.0 + z.norm()));
            let distinct = (eb.values[0] - eb.values[1]).norm() > 1e-9 * (1.0 + eb.values[0].norm());
            if real && distinct {
                for k in 0..2 {
                    let v = [eb.vectors[(0, k)], eb.vectors[(1, k)]];
                    // fix the complex phase so the eigenvector is real
                    let ph = if v[0].norm() > v[1].norm() { v[0] / v[0].norm() } else { v[1] / v[1].norm() };
                    let (a, b) = ((v[0] / ph).re, (v[1] / ph).re);
                    out.push(b.atan2(a));
                    out.push((-b).atan2(-a));
                }
            }
        }
        out
    }

    /// Tanh-sinh rule on `S₀`: arcs between the singular angles and `extra_breaks`, step
    /// `2^{-level}`. Weights include the density of `σ`.
    pub fn quadrature(&self, extra_breaks: &[f64], level: u32) -> Result<Vec<(SpherePoint, f64)>> {
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut breaks: Vec<f64> = self
            .singular_angles()
            .into_iter()
            .chain(extra_breaks.iter().copied())
            .map(|a| a.rem_euclid(two_pi))
            .collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        if breaks.len() > 1 && (breaks[0] + two_pi - breaks[breaks.len() - 1]).abs() < 1e-12 {
            breaks.pop();
        }
        if breaks.len() < 2 {
            let start = breaks.first().copied().unwrap_or(0.0);
            breaks = vec![start, start + std::f64::consts::PI];
        }
        let mut out = Vec::new();
        for i in 0..breaks.len() {
            let a = breaks[i];
            let b = if i + 1 < breaks.len() { breaks[i + 1] } else { breaks[0] + two_pi };
            for node in crate::quad::tanh_sinh(a, b, level, 1e-14) {
                let p = self.point(node.x)?;
                out.push((p, node.weight * p.density));
            }
        }
        Ok(out)
    }

    /// `σ(S₀)`.
    pub fn total_mass(&self, level: u32) -> Result<f64> {
        let q = self.quadrature(&[], level)?;
        let vals: Vec<f64> = q.iter().map(|(_, w)| *w).collect();
        Ok(pairwise_sum(&vals))
    }
}

pub fn sphere_parametrize(sys: &PolarSystem) -> Result<SphereParametrization> {
    SphereParametrization::new(sys)
}

/// Truncation and node counts for [`polar_integrate`].
#[derive(Clone, Copy, Debug)]
pub struct PolarIntegrateOptions {
    pub r_min: f64,
    pub r_max: f64,
    /// Radial node count (rounded up to a multiple of 15 Gauss–Kronrod nodes per log panel).
    pub radial_nodes: usize,
    /// Tanh-sinh level of the angular rule (step `2^{-level}` per arc).
    pub angular_level: u32,
    /// Half width of the box for the Cartesian fallback (`m ≥ 3`).
    pub cartesian_half_width: f64,
    pub cartesian_panels: usize,
    pub rel_tol: f64,
}

impl Default for PolarIntegrateOptions {
    fn default() -> Self {
        PolarIntegrateOptions {
            r_min: 1e-6,
            r_max: 1e6,
            radial_nodes: 480,
            angular_level: 3,
            cartesian_half_width: 8.0,
            cartesian_panels: 4,
            rel_tol: 1e-6,
        }
    }
}

fn polar_sum<F: Fn(&[f64]) -> f64>(
    sys: &PolarSystem,
    h: &F,
    opts: &PolarIntegrateOptions,
    radial_nodes: usize,
    angular_level: u32,
) -> Result<f64> {
    let panels = radial_nodes.div_ceil(15).max(1);
    let (ua, ub) = (opts.r_min.ln(), opts.r_max.ln());
    let width = (ub - ua) / panels as f64;
    let mut radial: Vec<(f64, f64)> = Vec::with_capacity(panels * 15);
    for p in 0..panels {
        let a = ua + p as f64 * width;
        for (u, wk, _) in gk15_nodes(a, a + width) {
            radial.push((u, wk));
        }
    }
    let tr = sys.trace();
    let m = sys.dim();
    let directions: Vec<(Vec<f64>, f64)> = match m {
        1 => {
            let e = sys.e()[(0, 0)];
            vec![(vec![e], e * e), (vec![-e], e * e)]
        }
        2 => {
            let sp = SphereParametrization::new(sys)?;
            sp.quadrature(&[], angular_level)?.into_iter().map(|(p, w)| (p.theta.to_vec(), w)).collect()
        }
        _ => unreachable!(),
    };
    let mut parts = Vec::with_capacity(directions.len());
    let mut buf = vec![0.0; m];
    for (theta, w) in &directions {
        let mut inner = Vec::with_capacity(radial.len());
        for &(u, wr) in &radial {
            sys.power.apply_scaled(u, theta, &mut buf);
            inner.push(wr * h(&buf) * (tr * u).exp());
        }
        parts.push(w * pairwise_sum(&inner));
    }
    Ok(pairwise_sum(&parts))
}

fn cartesian_sum<F: Fn(&[f64]) -> f64>(h: &F, m: usize, half: f64, panels: usize) -> f64 {
    let width = 2.0 * half / panels as f64;
    let mut axis: Vec<(f64, f64)> = Vec::new();
    for p in 0..panels {
        let a = -half + p as f64 * width;
        for (x, wk, _) in gk15_nodes(a, a + width) {
            axis.push((x, wk));
        }
    }
    let n = axis.len();
    let total = n.pow(m as u32);
    let mut point = vec![0.0; m];
    let mut parts = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut w = 1.0;
        for p in point.iter_mut() {
            let (x, wx) = axis[rem % n];
            *p = x;
            w *= wx;
            rem /= n;
        }
        parts.push(w * h(&point));
    }
    pairwise_sum(&parts)
}

/// `∫_{ℝ^m} h(x) dx` via `∫∫ h(r^E θ) r^{tr E − 1} σ(dθ) dr` (`m ≤ 2`) or a Cartesian tensor rule
/// on `[−L, L]^m` (`m ≥ 3`). The node counts are doubled once and the two estimates must agree.
pub fn polar_integrate<F: Fn(&[f64]) -> f64>(sys: &PolarSystem, h: F, opts: &PolarIntegrateOptions) -> Result<f64> {
    if !(opts.r_min > 0.0 && opts.r_max > opts.r_min) {
        bail!(Validation, "radial truncation must satisfy 0 < r_min < r_max");
    }
    let (coarse, fine) = if sys.dim() <= 2 {
        (
            polar_sum(sys, &h, opts, opts.radial_nodes, opts.angular_level)?,
            polar_sum(sys, &h, opts, 2 * opts.radial_nodes, opts.angular_level + 1)?,
        )
    } else {
        (
            cartesian_sum(&h, sys.dim(), opts.cartesian_half_width, opts.cartesian_panels),
            cartesian_sum(&h, sys.dim(), opts.cartesian_half_width, 2 * opts.cartesian_panels),
        )
    };
    if !fine.is_finite() {
        bail!(Numerical, "polar integral is not finite");
    }
    if (fine - coarse).abs() > opts.rel_tol * fine.abs() {
        bail!(Numerical, "polar integral refinement did not converge: estimates {coarse} and {fine}");
    }
    Ok(fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn diag(a: f64, b: f64) -> SquareMatrix {
        SquareMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b])
    }

    #[test]
    fn identity_generator_is_euclidean() {
        let sys = PolarSystem::new(&SquareMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(sys.zero_norm(&[3.0, 4.0]).unwrap(), 5.0, max_relative = 1e-13);
        assert_relative_eq!(sys.tau(&[3.0, 4.0]).unwrap(), 5.0, max_relative = 1e-12);
        let d = sys.decompose(&[0.0, 2.0]).unwrap();
        assert_relative_eq!(d.tau, 2.0, max_relative = 1e-12);
        assert!(d.l[0].abs() < 1e-14);
        assert_relative_eq!(d.l[1], 1.0, max_relative = 1e-12);
        assert_eq!(sys.zero_norm(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(sys.tau(&[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn diagonal_axis_cases() {
        let (a, b) = (0.7, 1.6);
        let sys = PolarSystem::new(&diag(a, b)).unwrap();
        let x1 = 2.5;
        assert_relative_eq!(sys.zero_norm(&[x1, 0.0]).unwrap(), x1 / a, max_relative = 1e-13);
        let expect = (x1 / a).powf(1.0 / a);
        assert_relative_eq!(sys.tau(&[x1, 0.0]).unwrap(), expect, max_relative = 1e-12);
        let d = sys.decompose(&[x1, 0.0]).unwrap();
        assert_relative_eq!(d.l[0], a, max_relative = 1e-12);
        assert!(d.l[1].abs() < 1e-15);
        assert_relative_eq!(sys.zero_norm(&d.l).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn rejects_non_positive_spectrum() {
        assert!(PolarSystem::new(&diag(-0.5, 1.0)).is_err());
    }

    #[test]
    fn tau_range_error() {
        let sys = PolarSystem::new(&SquareMatrix::identity(2, 2)).unwrap();
        assert!(matches!(sys.tau(&[1e-14, 0.0]), Err(Error::Range(_))));
        assert!(matches!(sys.tau(&[1e14, 0.0]), Err(Error::Range(_))));
    }

    #[test]
    fn sphere_of_identity() {
        let sys = PolarSystem::new(&SquareMatrix::identity(2, 2)).unwrap();
        let sp = sphere_parametrize(&sys).unwrap();
        let p = sp.point(0.7).unwrap();
        assert_relative_eq!(p.theta[0], 0.7f64.cos(), max_relative = 1e-12);
        assert_relative_eq!(p.density, 1.0, max_relative = 1e-9);
        assert_relative_eq!(sp.total_mass(3).unwrap(), 2.0 * std::f64::consts::PI, max_relative = 1e-9);
    }

    #[test]
    fn sphere_mass_finite_for_diagonal() {
        let sys = PolarSystem::new(&diag(0.8, 1.2)).unwrap();
        let sp = sphere_parametrize(&sys).unwrap();
        let m1 = sp.total_mass(3).unwrap();
        let m2 = sp.total_mass(4).unwrap();
        assert!(m1 > 0.0 && m1.is_finite());
        assert_relative_eq!(m1, m2, max_relative = 1e-8);
        for k in 0..16 {
            let th = sp.theta(k as f64 * 0.4).unwrap();
            assert_relative_eq!(sys.zero_norm(&th).unwrap(), 1.0, max_relative = 1e-10);
        }
    }

    #[test]
    fn gaussian_integral_identity_and_diagonal() {
        for e in [SquareMatrix::identity(2, 2), diag(0.8, 1.2)] {
            let sys = PolarSystem::new(&e).unwrap();
            let v = polar_integrate(&sys, |x| (-(x[0] * x[0] + x[1] * x[1])).exp(), &PolarIntegrateOptions::default())
                .unwrap();
            assert_relative_eq!(v, std::f64::consts::PI, max_relative = 1e-6);
        }
    }

    #[test]
    fn unit_ball_volume() {
        let sys = PolarSystem::new(&diag(0.8, 1.2)).unwrap();
        let sp = sphere_parametrize(&sys).unwrap();
        let mass = sp.total_mass(4).unwrap();
        let opts = PolarIntegrateOptions { angular_level: 2, ..Default::default() };
        let sys2 = sys.clone();
        let v = polar_integrate(&sys, |x| if sys2.tau(x).unwrap() <= 1.0 { 1.0 } else { 0.0 }, &opts);
        // the indicator jumps exactly at u = 0, a panel edge of the default symmetric grid
        let v = v.unwrap();
        assert_relative_eq!(v, mass / sys.trace(), max_relative = 1e-6);
    }

    #[test]
    fn one_dimensional_polar_integral() {
        let sys = PolarSystem::new(&SquareMatrix::from_element(1, 1, 0.6)).unwrap();
        let opts = PolarIntegrateOptions { r_min: 1e-30, r_max: 1e30, radial_nodes: 900, ..Default::default() };
        let v = polar_integrate(&sys, |x| (-x[0] * x[0]).exp(), &opts).unwrap();
        assert_relative_eq!(v, std::f64::consts::PI.sqrt(), max_relative = 1e-8);
    }

    #[test]
    fn cartesian_fallback_three_dimensions() {
        let sys = PolarSystem::new(&SquareMatrix::identity(3, 3)).unwrap();
        let opts = PolarIntegrateOptions { cartesian_panels: 2, ..Default::default() };
        let v = polar_integrate(&sys, |x| (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp(), &opts).unwrap();
        assert_relative_eq!(v, std::f64::consts::PI.powf(1.5), max_relative = 1e-8);
    }

    #[test]
    fn radial_bounds_examples() {
        let sys = PolarSystem::new(&SquareMatrix::identity(2, 2)).unwrap();
        let r = radial_bounds_check(&sys, &[0.3, 0.0], 0.1).unwrap();
        assert_eq!(r.regime, RadialRegime::Inner);
        assert_relative_eq!(r.tau, 0.3, max_relative = 1e-12);
        assert!(r.lower_power >= r.tau && r.tau >= r.upper_power);

        let sys = PolarSystem::new(&diag(0.5, 1.5)).unwrap();
        let ray: Vec<Vec<f64>> = (0..100).map(|k| sys.scale(1.5 + 0.2 * k as f64, &[0.6, 0.8])).collect();
        let (c_lo, c_hi) = fit_radial_constants(&sys, &ray, 0.1).unwrap();
        assert!(c_lo > 0.0 && c_hi.is_finite());
        for p in &ray {
            let r = radial_bounds_check(&sys, p, 0.1).unwrap();
            assert_eq!(r.regime, RadialRegime::Outer);
            assert!(r.tau <= c_hi * r.upper_power * (1.0 + 1e-12));
            assert!(r.tau >= c_lo * r.lower_power * (1.0 - 1e-12));
        }
        let sp = sphere_parametrize(&sys).unwrap();
        let th = sp.theta(1.0).unwrap();
        assert_relative_eq!(sys.tau(&th).unwrap(), 1.0, max_relative = 1e-12);
    }

    fn random_generator() -> impl Strategy<Value = SquareMatrix> {
        (0.3f64..2.0, 0.3f64..2.0, -0.5f64..0.5, -0.5f64..0.5).prop_map(|(a, b, s, t)| {
            let p = SquareMatrix::from_row_slice(2, 2, &[1.0, s, t, 1.0]);
            let d = diag(a, b);
            &p * d * p.clone().try_inverse().unwrap()
        })
    }

    #[test]
    fn tau_for_strongly_non_normal_and_near_defective_exponents() {
        // rotation-scaling exponent whose orbit norms oscillate strongly
        let rot = SquareMatrix::from_column_slice(2, 2, &[-2.1338018340717264, 9.478196885665549, -1.213778908563705, 4.134955310454131]);
        // conjugated Jordan-type block, off the exact eigen path
        let jordan = SquareMatrix::from_column_slice(
            3,
            3,
            &[
                0.7474838541507958, 0.08302134816032045, -0.04858284088408951, -0.017238174963177613, 0.7943242447560075,
                -0.19134270938786316, -0.04995179663633874, 1.0600467437480607, -0.10610498915480163,
            ],
        );
        for (ex, x) in [(rot, vec![1.2972135935677547, 0.808810897734485]), (jordan, vec![-1.545027310308378, -1.52565011944941, 0.6813494804262068])] {
            let sys = PolarSystem::new(&ex).unwrap();
            let d = sys.decompose(&x).unwrap();
            assert!((sys.zero_norm(&d.l).unwrap() - 1.0).abs() < 1e-10);
            let back = sys.compose(&d);
            assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn scaling_identities(e in random_generator(), x in prop::collection::vec(-3.0f64..3.0, 2), c in 0.1f64..10.0) {
            prop_assume!(x[0].abs() + x[1].abs() > 1e-3);
            let sys = PolarSystem::new(&e).unwrap();
            let d = sys.decompose(&x).unwrap();
            let dc = sys.decompose(&sys.scale(c, &x)).unwrap();
            prop_assert!((dc.tau - c * d.tau).abs() <= 1e-7 * c * d.tau);
            prop_assert!(((dc.l[0] - d.l[0]).powi(2) + (dc.l[1] - d.l[1]).powi(2)).sqrt() <= 1e-7);
            let back = sys.compose(&d);
            let xn = euclid(&x);
            prop_assert!(((back[0] - x[0]).powi(2) + (back[1] - x[1]).powi(2)).sqrt() <= 1e-8 * xn);
            prop_assert!((sys.zero_norm(&d.l).unwrap() - 1.0).abs() <= 1e-8);
        }

        #[test]
        fn norm_monotone_along_orbits(e in random_generator(), x in prop::collection::vec(-3.0f64..3.0, 2)) {
            prop_assume!(x[0].abs() + x[1].abs() > 1e-3);
            let sys = PolarSystem::new(&e).unwrap();
            let mut prev = 0.0;
            for k in 0..20 {
                let r = 0.1 * 1.3f64.powi(k);
                let v = sys.zero_norm(&sys.scale(r, &x)).unwrap();
                prop_assert!(v > prev);
                prev = v;
            }
        }
    }
}
