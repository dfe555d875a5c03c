//! Harmonizable model: the spectral filter `g`, integrability diagnostics and covariances.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{bail, Result};
use crate::homog::{extend_from_sphere, CMatrix, HomogeneityKind, HomogeneousFn, SphericalProfile};
use crate::matcalc::{eigen_basis, real_diagonalize, validate_exponents, ExponentPair, MatrixPower, SquareMatrix, C64};
use crate::polar::{PolarSystem, SphereParametrization};
use crate::quad::{radial_integral, tanh_sinh, GenPoly, OscTerm, RadialOptions};

const H_BASIS_MAX_COND: f64 = 1e8;

/// Named profiles `A` on the sphere of `E*`.
#[derive(Clone, Debug, PartialEq)]
pub enum BuiltinProfile {
    /// `A ≡ I`.
    Isotropic,
    /// `A(θ) = ((a θ₁² + b θ₂²) / |θ|²)^{1/2} I` for `m = 2`.
    Elliptic { a: f64, b: f64 },
    /// `A(θ) = ρ(θ)^{−H_E}` with `ρ(x) = (Σ |x_j|^{2/e_j})^{1/2}` for diagonal `E`, so that
    /// `g(x) = ρ(x)^{−H_E}` everywhere.
    Quasinorm,
}

impl BuiltinProfile {
    pub fn build(&self, pair: &ExponentPair) -> Result<SphericalProfile> {
        let n = pair.n();
        let m = pair.m();
        match *self {
            BuiltinProfile::Isotropic => Ok(SphericalProfile::constant("isotropic", CMatrix::identity(n, n))),
            BuiltinProfile::Elliptic { a, b } => {
                if m != 2 {
                    bail!(Validation, "elliptic profile needs m = 2, got m = {m}");
                }
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    bail!(Validation, "elliptic profile needs a, b > 0, got a = {a}, b = {b}");
                }
                Ok(SphericalProfile::scalar("elliptic", n, move |t| {
                    let q = (a * t[0] * t[0] + b * t[1] * t[1]) / (t[0] * t[0] + t[1] * t[1]);
                    C64::new(q.sqrt(), 0.0)
                }))
            }
            BuiltinProfile::Quasinorm => {
                let e = pair.e();
                let diag = (0..m).all(|i| (0..m).all(|j| i == j || e[(i, j)] == 0.0));
                if !diag {
                    bail!(Validation, "quasinorm profile needs a diagonal E");
                }
                let powers: Vec<f64> = (0..m).map(|j| 2.0 / e[(j, j)]).collect();
                let hp = MatrixPower::new(&h_e(pair))?;
                Ok(SphericalProfile::closed_form("quasinorm", n, n, move |t| {
                    let rho = quasinorm(&powers, t);
                    hp.exp_scaled(-rho.ln()).map(|v| C64::new(v, 0.0))
                }))
            }
        }
    }
}

/// `(Σ |x_j|^{p_j})^{1/2}`.
pub fn quasinorm(powers: &[f64], x: &[f64]) -> f64 {
    powers.iter().zip(x).map(|(p, v)| v.abs().powf(*p)).sum::<f64>().sqrt()
}

/// `H_E = H + tr(E*) I / 2`.
pub fn h_e(pair: &ExponentPair) -> SquareMatrix {
    let n = pair.n();
    pair.h() + SquareMatrix::identity(n, n) * (0.5 * pair.trace_e())
}

#[derive(Clone, Debug)]
pub struct CovarianceOptions {
    /// Initial tanh-sinh level on each angular arc.
    pub angular_level: u32,
    pub max_angular_level: u32,
    /// Required agreement between consecutive angular levels, relative to the covariance scale.
    pub rel_tol: f64,
    pub radial: RadialOptions,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions { angular_level: 3, max_angular_level: 6, rel_tol: 1e-6, radial: RadialOptions { rel_tol: 1e-9, ..Default::default() } }
    }
}

#[derive(Clone, Debug)]
pub struct CovarianceResult {
    pub value: SquareMatrix,
    /// Difference between the last two angular refinements plus the radial error estimate.
    pub est_error: f64,
    /// Largest imaginary part discarded from the result.
    pub imag_residue: f64,
    pub angular_nodes: usize,
    pub radial_evals: usize,
}

/// Eigen-groups of `E*`: `r^{E*} = Σ_g r^{λ_g} P_g`.
#[derive(Clone, Debug)]
struct SpectralGroups {
    lambdas: Vec<f64>,
    /// `P_gᵀ` per group, so that `⟨v, P_g θ⟩ = ⟨P_gᵀ v, θ⟩`.
    proj_t: Vec<SquareMatrix>,
}

impl SpectralGroups {
    fn new(e_star: &SquareMatrix) -> Result<Self> {
        let d = real_diagonalize(e_star).map_err(|err| {
            crate::Error::Validation(format!(
                "covariance quadrature needs E with a real, diagonalizable spectrum: {err}"
            ))
        })?;
        let ev = d.eigenvalues();
        let m = ev.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| ev[a].total_cmp(&ev[b]));
        let mut lambdas: Vec<f64> = Vec::new();
        let mut proj_t: Vec<SquareMatrix> = Vec::new();
        for &k in &order {
            let pk = d.v.column(k) * d.v_inv.row(k);
            match lambdas.last() {
                Some(&l) if (ev[k] - l).abs() <= 1e-9 * (1.0 + l.abs()) => {
                    let last = proj_t.last_mut().expect("group exists");
                    *last += pk.transpose();
                }
                _ => {
                    lambdas.push(ev[k]);
                    proj_t.push(pk.transpose());
                }
            }
        }
        Ok(SpectralGroups { lambdas, proj_t })
    }

    fn coefficients(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let vv = nalgebra::DVector::from_column_slice(v);
        self.proj_t.iter().map(|p| (p * &vv).iter().copied().collect()).collect()
    }
}

/// The harmonizable model with filter `g(x) = τ_{E*}(x)^{−H_E} A(l_{E*}(x))`.
#[derive(Clone, Debug)]
pub struct SpectralModel {
    pair: ExponentPair,
    h_e: SquareMatrix,
    g: HomogeneousFn,
    /// Complex eigenbasis of `H`.
    h_vectors: CMatrix,
    h_inverse: CMatrix,
    h_values: Vec<C64>,
    groups: std::result::Result<SpectralGroups, String>,
    sphere: Option<SphereParametrization>,
    profile_breaks: Vec<f64>,
    options: CovarianceOptions,
}

impl SpectralModel {
    pub fn new(pair: ExponentPair, profile: SphericalProfile) -> Result<Self> {
        let n = pair.n();
        if profile.rows() != n || profile.cols() != n {
            bail!(Validation, "profile must be {n}x{n}, got {}x{}", profile.rows(), profile.cols());
        }
        let h_e = h_e(&pair);
        let g = extend_from_sphere(&pair.e_star(), &(-&h_e), profile, HomogeneityKind::Left)?;
        let hb = eigen_basis(pair.h(), H_BASIS_MAX_COND)?.ok_or_else(|| {
            crate::Error::Validation("covariance quadrature needs a diagonalizable H".into())
        })?;
        let sphere = if pair.m() == 2 { Some(SphereParametrization::new(g.system())?) } else { None };
        let groups = SpectralGroups::new(&pair.e_star()).map_err(|e| e.to_string());
        let model = SpectralModel {
            pair,
            h_e,
            g,
            h_vectors: hb.vectors,
            h_inverse: hb.inverse,
            h_values: hb.values,
            groups,
            sphere,
            profile_breaks: Vec::new(),
            options: CovarianceOptions::default(),
        };
        model.check_reality()?;
        Ok(model)
    }

    pub fn from_builtin(e: &SquareMatrix, h: &SquareMatrix, profile: &BuiltinProfile) -> Result<Self> {
        let pair = validate_exponents(e, h)?;
        let prof = profile.build(&pair)?;
        Self::new(pair, prof)
    }

    /// Angles (in the `atan2` sense of the unit circle direction mapped to `S₀`) where the profile
    /// is not smooth; they become arc boundaries of the angular quadrature.
    pub fn with_profile_breaks(mut self, breaks: Vec<f64>) -> Self {
        self.profile_breaks = breaks;
        self
    }

    pub fn with_options(mut self, options: CovarianceOptions) -> Self {
        self.options = options;
        self
    }

    pub fn options(&self) -> &CovarianceOptions {
        &self.options
    }

    pub fn pair(&self) -> &ExponentPair {
        &self.pair
    }

    pub fn h_e(&self) -> &SquareMatrix {
        &self.h_e
    }

    pub fn filter(&self) -> &HomogeneousFn {
        &self.g
    }

    pub fn m(&self) -> usize {
        self.pair.m()
    }

    pub fn n(&self) -> usize {
        self.pair.n()
    }

    pub fn g(&self, x: &[f64]) -> Result<CMatrix> {
        self.g.eval(x)
    }

    /// Spectral density `ψ(x) = g(x) g(x)*`.
    pub fn density(&self, x: &[f64]) -> Result<CMatrix> {
        let g = self.g.eval(x)?;
        Ok(&g * g.adjoint())
    }

    /// Sample points of `S₀` for diagnostics.
    pub fn sphere_samples(&self, count: usize) -> Result<Vec<Vec<f64>>> {
        let sys = self.g.system();
        let m = self.m();
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let dir: Vec<f64> = match m {
                1 => vec![if k % 2 == 0 { 1.0 } else { -1.0 }],
                2 => {
                    let s = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / count as f64;
                    vec![s.cos(), s.sin()]
                }
                _ => fibonacci_direction(k, count, m),
            };
            out.push(sys.decompose(&dir)?.l);
        }
        Ok(out)
    }

    fn check_reality(&self) -> Result<()> {
        let profile = self.g.profile();
        for theta in self.sphere_samples(64)? {
            let neg: Vec<f64> = theta.iter().map(|v| -v).collect();
            let a = profile.eval(&theta);
            let b = profile.eval(&neg);
            let scale = 1.0 + a.norm();
            if !a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                continue;
            }
            if (b - a.map(|z| z.conj())).norm() > 1e-10 * scale {
                bail!(
                    Validation,
                    "profile violates the reality constraint A(-θ) = conj(A(θ)) at θ = {theta:?}"
                );
            }
        }
        Ok(())
    }

    /// `E X(s) X(t)*`.
    pub fn covariance(&self, s: &[f64], t: &[f64]) -> Result<CovarianceResult> {
        let m = self.m();
        let n = self.n();
        if s.len() != m || t.len() != m {
            bail!(Validation, "points must have {m} coordinates");
        }
        if s.iter().chain(t).any(|v| !v.is_finite()) {
            bail!(Validation, "points must be finite");
        }
        if s.iter().all(|v| *v == 0.0) || t.iter().all(|v| *v == 0.0) {
            return Ok(CovarianceResult {
                value: SquareMatrix::zeros(n, n),
                est_error: 0.0,
                imag_residue: 0.0,
                angular_nodes: 0,
                radial_evals: 0,
            });
        }
        let groups = match &self.groups {
            Ok(g) => g,
            Err(msg) => bail!(Validation, "{msg}"),
        };
        if m > 2 {
            bail!(Validation, "covariance quadrature supports m ≤ 2, got m = {m}");
        }
        let setup = PairSetup::new(groups, s, t, &self.h_values);
        let contribution = |theta: &[f64]| self.direction_contribution(groups, &setup, theta);
        let (ps, pt, pd) = (&setup.ps, &setup.pt, &setup.pd);

        let v = &self.h_vectors;
        let finish = |acc: &CMatrix| -> CMatrix { v * acc * v.adjoint() };

        if m == 1 {
            let e = self.pair.e()[(0, 0)];
            let mut acc = CMatrix::zeros(n, n);
            let mut err = 0.0;
            let mut evals = 0;
            for theta in [e, -e] {
                let (c, er, ev) = contribution(&[theta])?;
                acc += c * C64::new(e * e, 0.0);
                err += er * e * e;
                evals += ev;
            }
            let full = finish(&acc);
            return Ok(real_result(&full, err, 2, evals));
        }

        let sphere = self.sphere.as_ref().expect("m = 2 model has a sphere parametrization");
        let mut breaks: Vec<(f64, bool)> = self.profile_breaks.iter().map(|b| (*b, false)).collect();
        let top = groups.lambdas.len() - 1;
        for coefs in [ps, pt, pd] {
            for (g, p) in coefs.iter().enumerate() {
                if p[0].abs() + p[1].abs() > 0.0 {
                    // the top group's zero line carries a stationary point running off to infinity
                    let osc = g == top && top > 0;
                    breaks.push((p[0].atan2(-p[1]), osc));
                    breaks.push(((-p[0]).atan2(p[1]), osc));
                }
            }
        }
        let arcs = build_arcs(sphere, &breaks);
        let eval_dir = |ang: f64| -> Result<(CMatrix, f64, usize)> {
            let p = sphere.point(ang)?;
            let (c, er, ev) = contribution(&p.theta)?;
            Ok((c * C64::new(p.density, 0.0), er * p.density, ev))
        };
        let smooth: Vec<(f64, f64)> = arcs.iter().filter(|a| !a.2).map(|a| (a.0, a.1)).collect();
        let oscillatory: Vec<(f64, f64)> = arcs.iter().filter(|a| a.2).map(|a| (a.0, a.1)).collect();

        let mut acc = CMatrix::zeros(n, n);
        let (mut err, mut nodes_used, mut evals) = (0.0, 0usize, 0usize);
        if !smooth.is_empty() {
            let r = self.tanh_sinh_arcs(&smooth, &eval_dir, n)?;
            acc += r.0;
            err += r.1;
            nodes_used += r.2;
            evals += r.3;
        }
        if !oscillatory.is_empty() {
            let scale_hint = finish(&acc).norm();
            let r = adaptive_arcs(&oscillatory, &eval_dir, n, self.options.rel_tol, scale_hint, |m| finish(m).norm())?;
            acc += r.0;
            err += r.1;
            nodes_used += r.2;
            evals += r.3;
        }
        let full = finish(&acc);
        Ok(real_result(&full, err, nodes_used, evals))
    }

    /// Nested tanh-sinh levels on arcs with analytic interiors; returns the eigenbasis sum, the
    /// error estimate, the node count and the radial evaluations.
    fn tanh_sinh_arcs(
        &self,
        arcs: &[(f64, f64)],
        eval_dir: &(dyn Fn(f64) -> Result<(CMatrix, f64, usize)> + Sync),
        n: usize,
    ) -> Result<(CMatrix, f64, usize, usize)> {
        let v = &self.h_vectors;
        let mut cache: HashMap<u64, (CMatrix, f64, usize)> = HashMap::new();
        let mut level = self.options.angular_level.max(1);
        let mut prev: Option<CMatrix> = None;
        let mut prev_delta = f64::NAN;
        loop {
            let nodes: Vec<(f64, f64)> = arcs
                .iter()
                .flat_map(|&(a, b)| tanh_sinh(a, b, level, 1e-14).into_iter().map(|t| (t.x, t.weight)))
                .collect();
            let missing: Vec<f64> = nodes.iter().map(|(s, _)| *s).filter(|s| !cache.contains_key(&s.to_bits())).collect();
            let fresh: Vec<Result<(u64, (CMatrix, f64, usize))>> =
                missing.par_iter().map(|&s| Ok((s.to_bits(), eval_dir(s)?))).collect();
            for f in fresh {
                let (k, val) = f?;
                cache.insert(k, val);
            }
            let parts: Vec<CMatrix> = nodes.iter().map(|(s, w)| &cache[&s.to_bits()].0 * C64::new(*w, 0.0)).collect();
            let acc = pairwise_sum_mat(&parts, n);
            let rad_err: f64 = nodes.iter().map(|(s, w)| w * cache[&s.to_bits()].1).sum();
            let evals: usize = cache.values().map(|c| c.2).sum();
            let full = v * &acc * v.adjoint();
            if let Some(p) = &prev {
                let delta = (&full - p).norm();
                let scale = full.norm();
                if delta <= self.options.rel_tol * scale.max(1e-300) || scale == 0.0 {
                    return Ok((acc, delta + rad_err, nodes.len(), evals));
                }
                if level >= self.options.max_angular_level {
                    bail!(
                        Numerical,
                        "angular quadrature did not converge: level {} changed the covariance by {:.3e}, level {} by {:.3e} (scale {:.3e})",
                        level - 1,
                        prev_delta,
                        level,
                        delta,
                        scale
                    );
                }
                prev_delta = delta;
            }
            prev = Some(full);
            level += 1;
        }
    }

    /// `Q_ij(θ) I_ij(θ)` at one direction in the eigenbasis of `H`, with the radial error and
    /// evaluation count.
    fn direction_contribution(
        &self,
        groups: &SpectralGroups,
        setup: &PairSetup,
        theta: &[f64],
    ) -> Result<(CMatrix, f64, usize)> {
        let n = self.n();
        let dot = |p: &[Vec<f64>]| -> Vec<(f64, f64)> {
            p.iter()
                .zip(&groups.lambdas)
                .map(|(pg, l)| (pg.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>(), *l))
                .collect()
        };
        let a_terms = dot(&setup.ps);
        let b_terms = dot(&setup.pt);
        let d_terms = dot(&setup.pd);
        let one = C64::new(1.0, 0.0);
        let terms = vec![
            OscTerm { coef: one, phase: GenPoly::new(d_terms) },
            OscTerm { coef: -one, phase: GenPoly::new(a_terms.clone()) },
            OscTerm { coef: -one, phase: GenPoly::new(b_terms.iter().map(|(b, l)| (-b, *l)).collect()) },
            OscTerm { coef: one, phase: GenPoly::new(Vec::new()) },
        ];
        let pa = GenPoly::new(a_terms);
        let pb = GenPoly::new(b_terms);
        let body = move |r: f64| -> C64 {
            let u = r.ln();
            let a = pa.eval_u(u);
            let b = pb.eval_u(u);
            C64::from_polar(4.0 * (0.5 * a).sin() * (0.5 * b).sin(), 0.5 * (a - b))
        };
        let rad = radial_integral(&setup.kappas, &terms, Some(&body), &self.options.radial)?;
        let prof = self.g.profile().eval(theta);
        let v_inv = &self.h_inverse;
        let q = v_inv * &prof * prof.adjoint() * v_inv.adjoint();
        let c = CMatrix::from_fn(n, n, |i, j| q[(i, j)] * rad.values[i * n + j]);
        Ok((c, rad.err * q.norm(), rad.evals))
    }

    /// Covariance matrix of the stacked vector `(X(t_1), …, X(t_P))`, each block `n×n`.
    pub fn covariance_matrix(&self, points: &[Vec<f64>]) -> Result<(SquareMatrix, f64)> {
        let n = self.n();
        let p = points.len();
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
        let blocks: Vec<Result<CovarianceResult>> =
            pairs.par_iter().map(|&(i, j)| self.covariance(&points[i], &points[j])).collect();
        let mut out = SquareMatrix::zeros(n * p, n * p);
        let mut err = 0.0f64;
        for (&(i, j), c) in pairs.iter().zip(blocks) {
            let c = c?;
            err = err.max(c.est_error);
            for a in 0..n {
                for b in 0..n {
                    out[(i * n + a, j * n + b)] = c.value[(a, b)];
                    out[(j * n + b, i * n + a)] = c.value[(a, b)];
                }
            }
        }
        Ok((out, err))
    }

    /// `∫ ψ(x) dx` over the complement of the box `Π [−L_j, L_j]` (`m ≤ 2`).
    pub fn mass_outside_box(&self, half_widths: &[f64]) -> Result<SquareMatrix> {
        let m = self.m();
        let n = self.n();
        if half_widths.len() != m || half_widths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            bail!(Validation, "box needs {m} positive half-widths");
        }
        let es = self.g.system().power();
        let exit_u = |theta: &[f64]| -> f64 {
            let mut buf = vec![0.0; m];
            let outside = |u: f64, buf: &mut Vec<f64>| {
                es.apply_scaled(u, theta, buf);
                buf.iter().zip(half_widths).any(|(x, l)| x.abs() >= *l)
            };
            let (mut lo, mut hi) = (-60.0, 60.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if outside(mid, &mut buf) {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo < 1e-13 {
                    break;
                }
            }
            0.5 * (lo + hi)
        };
        let directions: Vec<(Vec<f64>, f64)> = match m {
            1 => {
                let e = self.pair.e()[(0, 0)];
                vec![(vec![e], e * e), (vec![-e], e * e)]
            }
            2 => {
                let sphere = self.sphere.as_ref().expect("m = 2 model has a sphere parametrization");
                // orbits through the box corners, where the exit face switches
                let mut corners = Vec::new();
                for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
                    let c = [sx * half_widths[0], sy * half_widths[1]];
                    let mut buf = [0.0; 2];
                    let (mut lo, mut hi) = (-60.0, 60.0);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        es.apply_scaled(mid, &c, &mut buf);
                        if buf[0].hypot(buf[1]) >= 1.0 {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    es.apply_scaled(0.5 * (lo + hi), &c, &mut buf);
                    corners.push(buf[1].atan2(buf[0]));
                }
                sphere.quadrature(&corners, 6)?.into_iter().map(|(p, w)| (p.theta.to_vec(), w)).collect()
            }
            _ => bail!(Validation, "outer spectral mass supports m ≤ 2, got m = {m}"),
        };
        let v_inv = &self.h_inverse;
        let parts: Vec<CMatrix> = directions
            .par_iter()
            .map(|(theta, w)| {
                let ub = exit_u(theta);
                let prof = self.g.profile().eval(theta);
                let q = v_inv * &prof * prof.adjoint() * v_inv.adjoint();
                CMatrix::from_fn(n, n, |i, j| {
                    let kappa = self.h_values[i] + self.h_values[j].conj();
                    q[(i, j)] * (-kappa * ub).exp() / kappa * *w
                })
            })
            .collect();
        let acc = pairwise_sum_mat(&parts, n);
        let full = &self.h_vectors * acc * self.h_vectors.adjoint();
        Ok(full.map(|z| z.re))
    }
}

/// Group coefficients of `s`, `t`, `s − t` and the radial exponents `μ_i + conj(μ_j)`.
struct PairSetup {
    ps: Vec<Vec<f64>>,
    pt: Vec<Vec<f64>>,
    pd: Vec<Vec<f64>>,
    kappas: Vec<C64>,
}

impl PairSetup {
    fn new(groups: &SpectralGroups, s: &[f64], t: &[f64], mu: &[C64]) -> Self {
        let n = mu.len();
        let diff: Vec<f64> = s.iter().zip(t).map(|(a, b)| a - b).collect();
        PairSetup {
            ps: groups.coefficients(s),
            pt: groups.coefficients(t),
            pd: groups.coefficients(&diff),
            kappas: (0..n * n).map(|k| mu[k / n] + mu[k % n].conj()).collect(),
        }
    }
}

fn real_result(full: &CMatrix, err: f64, nodes: usize, evals: usize) -> CovarianceResult {
    let value = full.map(|z| z.re);
    let imag_residue = full.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    CovarianceResult { value, est_error: err, imag_residue, angular_nodes: nodes, radial_evals: evals }
}

fn pairwise_sum_mat(parts: &[CMatrix], n: usize) -> CMatrix {
    match parts.len() {
        0 => CMatrix::zeros(n, n),
        1 => parts[0].clone(),
        len => {
            let mid = len / 2;
            pairwise_sum_mat(&parts[..mid], n) + pairwise_sum_mat(&parts[mid..], n)
        }
    }
}

/// Arcs `(a, b, oscillatory)` of the angle circle between the singular angles of `S₀` and the
/// given breakpoints; an arc is oscillatory when either endpoint is.
fn build_arcs(sphere: &SphereParametrization, breaks: &[(f64, bool)]) -> Vec<(f64, f64, bool)> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut all: Vec<(f64, bool)> = sphere
        .singular_angles()
        .into_iter()
        .map(|a| (a, false))
        .chain(breaks.iter().copied())
        .map(|(a, o)| (a.rem_euclid(two_pi), o))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, bool)> = Vec::new();
    for (a, o) in all {
        match merged.last_mut() {
            Some(last) if (a - last.0).abs() < 1e-12 => last.1 |= o,
            _ => merged.push((a, o)),
        }
    }
    if merged.len() > 1 && (merged[0].0 + two_pi - merged[merged.len() - 1].0).abs() < 1e-12 {
        let (_, o) = merged.pop().expect("non-empty");
        merged[0].1 |= o;
    }
    if merged.len() < 2 {
        let (start, o) = merged.first().copied().unwrap_or((0.0, false));
        merged = vec![(start, o), (start + std::f64::consts::PI, o)];
    }
    (0..merged.len())
        .map(|i| {
            let (a, oa) = merged[i];
            let (b, ob) = if i + 1 < merged.len() { merged[i + 1] } else { (merged[0].0 + two_pi, merged[0].1) };
            (a, b, oa || ob)
        })
        .collect()
}

/// Globally adaptive Gauss–Kronrod over `arcs` until the estimated error of the transformed sum
/// `norm_of` is below `rel_tol` of the running total (plus `scale_hint`).
fn adaptive_arcs(
    arcs: &[(f64, f64)],
    eval_dir: &(dyn Fn(f64) -> Result<(CMatrix, f64, usize)> + Sync),
    n: usize,
    rel_tol: f64,
    scale_hint: f64,
    norm_of: impl Fn(&CMatrix) -> f64,
) -> Result<(CMatrix, f64, usize, usize)> {
    const MAX_INTERVALS: usize = 4000;
    struct Piece {
        a: f64,
        b: f64,
        kron: CMatrix,
        err: f64,
        rad_err: f64,
    }
    let mut evals = 0usize;
    let mut nodes = 0usize;
    let mut panel = |a: f64, b: f64| -> Result<Piece> {
        let rule = crate::quad::gk15_nodes(a, b);
        let vals: Vec<Result<(CMatrix, f64, usize)>> = rule.par_iter().map(|(x, _, _)| eval_dir(*x)).collect();
        let mut kron = CMatrix::zeros(n, n);
        let mut gauss = CMatrix::zeros(n, n);
        let mut rad_err = 0.0;
        for ((_, wk, wg), v) in rule.iter().zip(vals) {
            let (c, e, ev) = v?;
            kron += &c * C64::new(*wk, 0.0);
            gauss += &c * C64::new(*wg, 0.0);
            rad_err += wk * e;
            evals += ev;
        }
        nodes += 15;
        let err = norm_of(&(&kron - &gauss));
        Ok(Piece { a, b, kron, err, rad_err })
    };
    let mut pieces: Vec<Piece> = Vec::new();
    for &(a, b) in arcs {
        pieces.push(panel(a, b)?);
    }
    loop {
        let total: CMatrix = pieces.iter().fold(CMatrix::zeros(n, n), |acc, p| acc + &p.kron);
        let err: f64 = pieces.iter().map(|p| p.err).sum();
        let scale = norm_of(&total) + scale_hint;
        if err <= rel_tol * scale || scale == 0.0 {
            let rad: f64 = pieces.iter().map(|p| p.rad_err).sum();
            return Ok((total, err + rad, nodes, evals));
        }
        if pieces.len() >= MAX_INTERVALS {
            bail!(
                Numerical,
                "adaptive angular quadrature hit {MAX_INTERVALS} intervals with error {err:.3e} (scale {scale:.3e})"
            );
        }
        let worst = (0..pieces.len()).max_by(|&i, &j| pieces[i].err.total_cmp(&pieces[j].err)).expect("non-empty");
        let p = pieces.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        pieces.push(panel(p.a, mid)?);
        pieces.push(panel(mid, p.b)?);
    }
}

fn fibonacci_direction(k: usize, count: usize, m: usize) -> Vec<f64> {
    // quasi-random directions from a Kronecker sequence
    let mut v = Vec::with_capacity(m);
    for j in 0..m {
        let alpha = ((j + 2) as f64).sqrt().fract();
        let u = ((k as f64 + 0.5) / count as f64 + alpha * (k + 1) as f64).fract().clamp(1e-6, 1.0 - 1e-6);
        v.push((u - 0.5) * (1.0 + (j as f64) * 0.1));
    }
    if v.iter().all(|x| x.abs() < 1e-9) {
        v[0] = 1.0;
    }
    v
}

#[derive(Clone, Debug)]
pub struct IntegrabilityReport {
    /// Exponent `γ₀` with integrand `~ r^{γ₀}` as `r → 0`; integrable iff `γ₀ > −1`.
    pub small_r_exponent: f64,
    /// Exponent `γ∞` with integrand `~ r^{γ∞}` as `r → ∞`; integrable iff `γ∞ < −1`.
    pub large_r_exponent: f64,
    pub profile_bound: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Radial power counting of `|e^{i⟨t,r^{E*}θ⟩}−1|² ‖r^{−H_E}‖² r^{tr E − 1}` and a sampled bound of
/// the profile on `S₀`.
pub fn integrability_check(e: &SquareMatrix, h: &SquareMatrix, profile: &SphericalProfile) -> Result<IntegrabilityReport> {
    let sys = PolarSystem::new(&e.transpose())?;
    let e_spec = crate::matcalc::spectrum(e)?;
    let h_spec = crate::matcalc::spectrum(h)?;
    let tr = e.trace();
    let mut failures = Vec::new();
    let small = 2.0 * e_spec.min_real - 2.0 * (h_spec.max_real + 0.5 * tr) + tr - 1.0;
    let large = -2.0 * (h_spec.min_real + 0.5 * tr) + tr - 1.0;
    if !(h_spec.min_real > 0.0) {
        failures.push(format!(
            "0 < min Re eig(H) fails (min Re eig(H) = {}); large-r exponent {large} is not below -1",
            h_spec.min_real
        ));
    }
    if !(h_spec.max_real < e_spec.min_real) {
        failures.push(format!(
            "max Re eig(H) < min Re eig(E*) fails ({} >= {}); small-r exponent {small} is not above -1",
            h_spec.max_real, e_spec.min_real
        ));
    }
    let points: Vec<Vec<f64>> = match sys.dim() {
        1 => vec![sys.decompose(&[1.0])?.l, sys.decompose(&[-1.0])?.l],
        2 => {
            let sample = |count: usize| -> Result<Vec<Vec<f64>>> {
                (0..count)
                    .map(|k| {
                        let s = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                        Ok(sys.decompose(&[s.cos(), s.sin()])?.l)
                    })
                    .collect()
            };
            sample(1440)?
        }
        m => (0..512).map(|k| sys.decompose(&fibonacci_direction(k, 512, m)).map(|d| d.l)).collect::<Result<_>>()?,
    };
    let bound = profile.bound(&points);
    let norms: Vec<f64> = points
        .iter()
        .map(|p| {
            let v = profile.eval(p);
            if v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                v.norm()
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if !bound.is_finite() || bound > 1e8 * median.max(1e-300) {
        failures.push(format!("profile unbounded on S₀ (sampled sup {bound:.3e}, median {median:.3e})"));
    }
    Ok(IntegrabilityReport {
        small_r_exponent: small,
        large_r_exponent: large,
        profile_bound: bound,
        pass: failures.is_empty(),
        failures,
    })
}

impl SpectralModel {
    pub fn integrability(&self) -> Result<IntegrabilityReport> {
        integrability_check(self.pair.e(), self.pair.h(), self.g.profile())
    }
}

/// `E X(s) X(t)` for the field driven by the singular control measure on the diagonal `x₁ = x₂`
/// with density `‖x‖^{−(d+1)}`.
pub fn singular_example_cov(s: &[f64; 2], t: &[f64; 2], d: f64) -> Result<f64> {
    if !(d > -0.5 && d < 0.5) {
        bail!(Domain, "d must lie in (-1/2, 1/2), got {d}");
    }
    let a = s[0] + s[1];
    let b = t[0] + t[1];
    if a == 0.0 || b == 0.0 {
        return Ok(0.0);
    }
    let one = C64::new(1.0, 0.0);
    let terms = vec![
        OscTerm { coef: one, phase: GenPoly::new(vec![(a - b, 1.0)]) },
        OscTerm { coef: -one, phase: GenPoly::new(vec![(a, 1.0)]) },
        OscTerm { coef: -one, phase: GenPoly::new(vec![(-b, 1.0)]) },
        OscTerm { coef: one, phase: GenPoly::new(Vec::new()) },
    ];
    let body = move |y: f64| C64::from_polar(4.0 * (0.5 * a * y).sin() * (0.5 * b * y).sin(), 0.5 * (a - b) * y);
    let kappa = C64::new(2.0 * d + 1.0, 0.0);
    let rad = radial_integral(&[kappa], &terms, Some(&body), &RadialOptions::default())?;
    // the integrand over y < 0 is the conjugate of the one over y > 0
    Ok(2f64.powf(-d) * rad.values[0].re)
}

/// `(c/2)(‖s‖^{2h} + ‖t‖^{2h} − ‖s−t‖^{2h})`.
pub fn isotropic_reference_cov(s: &[f64], t: &[f64], h: f64, c: f64) -> Result<f64> {
    if !(h > 0.0 && h < 1.0) {
        bail!(Domain, "h must lie in (0, 1), got {h}");
    }
    if s.len() != t.len() {
        bail!(Validation, "points must have the same dimension");
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let ns = norm(&mut s.iter().copied());
    let nt = norm(&mut t.iter().copied());
    let nd = norm(&mut s.iter().zip(t).map(|(a, b)| a - b));
    Ok(0.5 * c * (ns.powf(2.0 * h) + nt.powf(2.0 * h) - nd.powf(2.0 * h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::function::gamma::gamma;

    fn iso(h: f64) -> SpectralModel {
        SpectralModel::from_builtin(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, h), &BuiltinProfile::Isotropic)
            .unwrap()
    }

    /// `2 π^{d/2} Γ(1−h) / (4^h h Γ(h + d/2))` for `d = 2`.
    fn iso_variance_constant(h: f64) -> f64 {
        2.0 * std::f64::consts::PI * gamma(1.0 - h) / (4f64.powf(h) * h * gamma(h + 1.0))
    }

    #[test]
    fn isotropic_variance_closed_form() {
        for h in [0.3, 0.5, 0.7] {
            let m = iso(h);
            let c = m.covariance(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
            assert_relative_eq!(c.value[(0, 0)], iso_variance_constant(h), max_relative = 1e-6);
            let c2 = m.covariance(&[0.0, 2.0], &[0.0, 2.0]).unwrap();
            assert_relative_eq!(c2.value[(0, 0)], iso_variance_constant(h) * 2f64.powf(2.0 * h), max_relative = 1e-6);
        }
    }

    #[test]
    fn isotropic_cross_covariance() {
        let h = 0.4;
        let m = iso(h);
        let k = iso_variance_constant(h);
        let (s, t) = ([1.0, 0.5], [-0.3, 0.8]);
        let c = m.covariance(&s, &t).unwrap();
        let want = isotropic_reference_cov(&s, &t, h, k).unwrap();
        assert_relative_eq!(c.value[(0, 0)], want, max_relative = 1e-6);
        assert!(c.imag_residue < 1e-8);
    }

    #[test]
    fn zero_point_gives_zero() {
        let m = iso(0.5);
        assert_eq!(m.covariance(&[0.0, 0.0], &[1.0, 2.0]).unwrap().value[(0, 0)], 0.0);
    }

    #[test]
    fn reference_examples() {
        assert_relative_eq!(isotropic_reference_cov(&[1.0, 0.0], &[1.0, 0.0], 0.5, 2.0).unwrap(), 2.0);
        let v = isotropic_reference_cov(&[1.0, 0.0], &[0.0, 1.0], 0.5, 2.0).unwrap();
        assert_relative_eq!(v, 2.0 - 2f64.sqrt(), max_relative = 1e-15);
        assert!(isotropic_reference_cov(&[1.0], &[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn singular_example() {
        assert_eq!(singular_example_cov(&[1.0, -1.0], &[1.0, -1.0], 0.1).unwrap(), 0.0);
        assert!(singular_example_cov(&[1.0, 0.0], &[1.0, 0.0], 0.5).is_err());
        for d in [-0.25, 0.0, 0.25] {
            let (s, t) = ([0.7, 0.2], [0.1, 1.3]);
            let base = singular_example_cov(&s, &t, d).unwrap();
            let scaled = singular_example_cov(&[1.4, 0.4], &[0.2, 2.6], d).unwrap();
            assert_relative_eq!(scaled, 2f64.powf(2.0 * d + 1.0) * base, max_relative = 1e-9);
        }
        let kappa = singular_example_cov(&[1.0, 0.0], &[1.0, 0.0], 0.0).unwrap();
        // |a|+|b|−|a−b| form with a = 1.5, b = 0.5
        let v = singular_example_cov(&[1.0, 0.5], &[0.25, 0.25], 0.0).unwrap();
        assert_relative_eq!(v, kappa * (1.5 + 0.5 - 1.0) / 2.0, max_relative = 1e-9);
    }

    #[test]
    fn integrability_reports() {
        let prof = SphericalProfile::scalar("one", 1, |_| C64::new(1.0, 0.0));
        let r = integrability_check(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, 0.4), &prof).unwrap();
        assert!(r.pass);
        assert_relative_eq!(r.small_r_exponent, 1.0 - 2.0 * 0.4, max_relative = 1e-12);
        assert_relative_eq!(r.large_r_exponent, -2.0 * 0.4 - 1.0, max_relative = 1e-12);
        let bad = integrability_check(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, 1.2), &prof).unwrap();
        assert!(!bad.pass && bad.failures[0].contains("max Re eig(H) < min Re eig(E*)"));
        let unb = SphericalProfile::scalar("inv", 1, |t| C64::new(1.0 / t[0], 0.0));
        let r = integrability_check(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, 0.4), &unb).unwrap();
        assert!(!r.pass && r.failures[0].contains("profile unbounded on S₀"));
    }

    #[test]
    fn reality_constraint_enforced() {
        let pair = validate_exponents(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, 0.4)).unwrap();
        let odd = SphericalProfile::scalar("odd", 1, |t| C64::new(1.0 + 0.5 * t[0], 0.0));
        assert!(SpectralModel::new(pair.clone(), odd).is_err());
        let herm = SphericalProfile::scalar("herm", 1, |t| C64::new(1.0, 0.5 * t[0]));
        assert!(SpectralModel::new(pair, herm).is_ok());
    }

    #[test]
    fn density_homogeneity() {
        let e = SquareMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.0, 1.2]);
        let h = SquareMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.5]);
        let m = SpectralModel::from_builtin(&e, &h, &BuiltinProfile::Elliptic { a: 1.0, b: 2.0 }).unwrap();
        let he = MatrixPower::new(m.h_e()).unwrap();
        let es = MatrixPower::new(&m.pair().e_star()).unwrap();
        for (c, x) in [(2.0, [0.3, -0.7]), (0.3, [1.5, 0.2])] {
            let mut cx = [0.0; 2];
            es.apply_scaled(f64::ln(c), &x, &mut cx);
            let p = he.exp_scaled(-f64::ln(c)).map(|v| C64::new(v, 0.0));
            let want = &p * m.density(&x).unwrap() * p.transpose();
            let got = m.density(&cx).unwrap();
            assert!((got - &want).norm() <= 1e-8 * want.norm());
        }
    }

    #[test]
    fn anisotropic_self_similarity_and_symmetry() {
        let e = SquareMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.0, 1.2]);
        let h = SquareMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.5]);
        let m = SpectralModel::from_builtin(&e, &h, &BuiltinProfile::Isotropic).unwrap();
        let (s, t) = ([1.0, 0.4], [0.2, -0.9]);
        let base = m.covariance(&s, &t).unwrap();
        let swapped = m.covariance(&t, &s).unwrap();
        assert!((&base.value - swapped.value.transpose()).norm() <= 1e-7 * base.value.norm());
        let c = 2.0;
        let ep = MatrixPower::new(&e).unwrap();
        let mut cs = [0.0; 2];
        let mut ct = [0.0; 2];
        ep.apply_scaled(f64::ln(c), &s, &mut cs);
        ep.apply_scaled(f64::ln(c), &t, &mut ct);
        let scaled = m.covariance(&cs, &ct).unwrap();
        let hp = MatrixPower::new(&h).unwrap().exp_scaled(f64::ln(c));
        let want = &hp * &base.value * hp.transpose();
        assert!((&scaled.value - &want).norm() <= 1e-6 * want.norm());
    }

    #[test]
    fn outer_mass_isotropic_disc() {
        // ψ = |x|^{-2h-2}; outside the square [-L, L]² the mass equals
        // ∫ dφ ∫_{L/max(|cos|,|sin|)}^∞ r^{-2h-1} dr = (L^{-2h} / 2h) ∫ max(|cos φ|, |sin φ|)^{2h} dφ
        let h = 0.4;
        let m = iso(h);
        let l = 3.0;
        let got = m.mass_outside_box(&[l, l]).unwrap()[(0, 0)];
        let (ang, _) = crate::quad::adaptive_gk15(
            |p: f64| p.cos().abs().max(p.sin().abs()).powf(2.0 * h),
            0.0,
            std::f64::consts::FRAC_PI_4,
            1e-14,
            1e-13,
        )
        .unwrap();
        let want = l.powf(-2.0 * h) / (2.0 * h) * 8.0 * ang;
        assert_relative_eq!(got, want, max_relative = 1e-5);
    }

    #[test]
    fn one_dimensional_fbm() {
        let h = 0.3;
        let m = SpectralModel::from_builtin(&SquareMatrix::identity(1, 1), &SquareMatrix::from_element(1, 1, h), &BuiltinProfile::Isotropic)
            .unwrap();
        let k = m.covariance(&[1.0], &[1.0]).unwrap().value[(0, 0)];
        let v = m.covariance(&[2.0], &[-0.5]).unwrap().value[(0, 0)];
        assert_relative_eq!(v, isotropic_reference_cov(&[2.0], &[-0.5], h, k).unwrap(), max_relative = 1e-8);
    }
}
