//! Matrix functional calculus: real powers `c^M`, spectra, real diagonalization and the
//! eigenvalue conditions on exponent pairs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{bail, Error, Result};

pub type SquareMatrix = DMatrix<f64>;
pub type C64 = Complex64;

/// Eigenvector bases with a worse condition number use the Padé exponential instead.
const EIGEN_PATH_MAX_COND: f64 = 1e4;
/// Condition number above which a matrix is treated as defective.
pub const DEFECTIVE_COND: f64 = 1e8;
/// Imaginary dust allowed on eigenvalues reported as real, relative to `1 + |λ|`.
pub const REAL_EIG_TOL: f64 = 1e-10;

const SCHUR_MAX_ITER: usize = 10_000;

pub(crate) fn check_matrix(m: &SquareMatrix, name: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        bail!(Validation, "{name} must be a non-empty square matrix, got {}x{}", m.nrows(), m.ncols());
    }
    if m.iter().any(|v| !v.is_finite()) {
        bail!(Validation, "{name} has non-finite entries");
    }
    Ok(())
}

/// Eigenvalues of a real square matrix, with multiplicity.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Sorted by real part, then imaginary part.
    pub eigenvalues: Vec<C64>,
    pub min_real: f64,
    pub max_real: f64,
}

impl Spectrum {
    fn from_values(mut eigenvalues: Vec<C64>) -> Self {
        eigenvalues.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        let min_real = eigenvalues.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let max_real = eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        Spectrum { eigenvalues, min_real, max_real }
    }

    /// True when every eigenvalue has negligible imaginary part.
    pub fn is_real(&self) -> bool {
        self.eigenvalues.iter().all(|z| z.im.abs() < REAL_EIG_TOL * (1.0 + z.norm()))
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .eigenvalues
            .iter()
            .map(|z| if z.im == 0.0 { format!("{}", z.re) } else { format!("{}{:+}i", z.re, z.im) })
            .collect();
        format!("[{}]", parts.join(", "))
    }
}

pub fn spectrum(m: &SquareMatrix) -> Result<Spectrum> {
    check_matrix(m, "matrix")?;
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER).ok_or_else(|| {
        Error::Numerical(format!(
            "Schur eigensolver did not converge within {SCHUR_MAX_ITER} iterations (dim {}, max |entry| {})",
            m.nrows(),
            m.amax()
        ))
    })?;
    Ok(Spectrum::from_values(schur.complex_eigenvalues().iter().copied().collect()))
}

/// 2-norm condition number.
pub fn condition_number(m: &SquareMatrix) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn condition_number_c(m: &DMatrix<C64>) -> f64 {
    let sv = m.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Complex eigendecomposition `M = V diag(λ) V⁻¹`.
#[derive(Clone, Debug)]
pub struct EigenBasis {
    pub values: Vec<C64>,
    pub vectors: DMatrix<C64>,
    pub inverse: DMatrix<C64>,
    pub cond: f64,
}

/// Eigendecomposition over ℂ, or `None` when the eigenvector basis is singular or badly conditioned.
pub fn eigen_basis(m: &SquareMatrix, max_cond: f64) -> Result<Option<EigenBasis>> {
    let spec = spectrum(m)?;
    let d = m.nrows();
    let mc: DMatrix<C64> = m.map(|v| C64::new(v, 0.0));
    let scale = m.norm().max(1e-300);
    let mut vectors = DMatrix::<C64>::zeros(d, d);
    let mut col = 0;
    let vals = &spec.eigenvalues;
    let mut i = 0;
    while i < d {
        let lam = vals[i];
        let mut j = i + 1;
        while j < d && (vals[j] - lam).norm() <= 1e-7 * (1.0 + lam.norm()) {
            j += 1;
        }
        let k = j - i;
        let centre = vals[i..j].iter().sum::<C64>() / k as f64;
        let shifted = &mc - DMatrix::<C64>::identity(d, d) * centre;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed to return right vectors".into()))?;
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        for &idx in order.iter().take(k) {
            if svd.singular_values[idx] > 1e-6 * scale {
                return Ok(None);
            }
            let v: DVector<C64> = v_t.row(idx).transpose().map(|z| z.conj());
            vectors.set_column(col, &v);
            col += 1;
        }
        i = j;
    }
    let cond = condition_number_c(&vectors);
    if !cond.is_finite() || cond > max_cond {
        return Ok(None);
    }
    let inverse = match vectors.clone().try_inverse() {
        Some(inv) => inv,
        None => return Ok(None),
    };
    let projected = &inverse * &mc * &vectors;
    let values: Vec<C64> = (0..d).map(|k| projected[(k, k)]).collect();
    let mut off = 0.0f64;
    for r in 0..d {
        for c in 0..d {
            if r != c {
                off = off.max(projected[(r, c)].norm());
            }
        }
    }
    if off > 1e-9 * scale * cond {
        return Ok(None);
    }
    Ok(Some(EigenBasis { values, vectors, inverse, cond }))
}

/// `M = λI + N` with `N` nilpotent, so `exp(uM) = e^{uλ} Σ_{k<d} (uN)^k / k!` exactly.
#[derive(Clone, Debug)]
struct Unipotent {
    lambda: f64,
    /// `N^k / k!` for `k = 0..d`.
    terms: Vec<SquareMatrix>,
}

impl Unipotent {
    fn detect(m: &SquareMatrix) -> Option<Self> {
        let d = m.nrows();
        let lambda = m.trace() / d as f64;
        let n = m - SquareMatrix::identity(d, d) * lambda;
        let scale = n.norm().max(1.0);
        let mut terms = vec![SquareMatrix::identity(d, d)];
        let mut pw = SquareMatrix::identity(d, d);
        for k in 1..=d {
            pw = &pw * &n / k as f64;
            if k < d {
                terms.push(pw.clone());
            }
        }
        if pw.norm() <= 1e-12 * scale.powi(d as i32) {
            Some(Unipotent { lambda, terms })
        } else {
            None
        }
    }

    fn exp(&self, u: f64) -> SquareMatrix {
        let mut out = self.terms[0].clone();
        let mut uk = 1.0;
        for t in &self.terms[1..] {
            uk *= u;
            out += t * uk;
        }
        out * (self.lambda * u).exp()
    }
}

/// Precomputed evaluator for `c ↦ c^M = exp(ln c · M)`.
#[derive(Clone, Debug)]
pub struct MatrixPower {
    matrix: SquareMatrix,
    eigen: Option<EigenBasis>,
    unipotent: Option<Unipotent>,
}

impl MatrixPower {
    pub fn new(m: &SquareMatrix) -> Result<Self> {
        check_matrix(m, "matrix")?;
        let eigen = eigen_basis(m, EIGEN_PATH_MAX_COND)?;
        let unipotent = if eigen.is_none() { Unipotent::detect(m) } else { None };
        Ok(MatrixPower { matrix: m.clone(), eigen, unipotent })
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigen(&self) -> Option<&EigenBasis> {
        self.eigen.as_ref()
    }

    /// `exp(u·M)`.
    pub fn exp_scaled(&self, u: f64) -> SquareMatrix {
        match &self.eigen {
            Some(eb) => {
                let d = self.dim();
                let mut out = SquareMatrix::zeros(d, d);
                for r in 0..d {
                    for c in 0..d {
                        let mut acc = C64::new(0.0, 0.0);
                        for k in 0..d {
                            acc += eb.vectors[(r, k)] * (eb.values[k] * u).exp() * eb.inverse[(k, c)];
                        }
                        out[(r, c)] = acc.re;
                    }
                }
                out
            }
            None => match &self.unipotent {
                Some(up) => up.exp(u),
                None => (&self.matrix * u).exp(),
            },
        }
    }

    /// `c^M`.
    pub fn at(&self, c: f64) -> Result<SquareMatrix> {
        if !(c > 0.0) || !c.is_finite() {
            bail!(Domain, "matrix power needs a positive finite base, got {c}");
        }
        Ok(self.exp_scaled(c.ln()))
    }

    /// `exp(u·M) x` written into `out`.
    pub fn apply_scaled(&self, u: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        match &self.eigen {
            Some(eb) => {
                let mut w = [C64::new(0.0, 0.0); 16];
                if d <= 16 {
                    for k in 0..d {
                        let mut acc = C64::new(0.0, 0.0);
                        for c in 0..d {
                            acc += eb.inverse[(k, c)] * x[c];
                        }
                        w[k] = acc * (eb.values[k] * u).exp();
                    }
                    for r in 0..d {
                        let mut acc = C64::new(0.0, 0.0);
                        for k in 0..d {
                            acc += eb.vectors[(r, k)] * w[k];
                        }
                        out[r] = acc.re;
                    }
                    return;
                }
                let y = self.exp_scaled(u) * DVector::from_column_slice(x);
                out.copy_from_slice(y.as_slice());
            }
            None => {
                let y = self.exp_scaled(u) * DVector::from_column_slice(x);
                out.copy_from_slice(y.as_slice());
            }
        }
    }

    /// Coefficients `α_k` with `⟨u, c^M x⟩ = Σ_k α_k c^{λ_k}`; needs the eigen path.
    pub fn bilinear_expansion(&self, u: &[f64], x: &[f64]) -> Option<Vec<(C64, C64)>> {
        let eb = self.eigen.as_ref()?;
        let d = self.dim();
        Some(
            (0..d)
                .map(|k| {
                    let mut left = C64::new(0.0, 0.0);
                    let mut right = C64::new(0.0, 0.0);
                    for i in 0..d {
                        left += eb.vectors[(i, k)] * u[i];
                        right += eb.inverse[(k, i)] * x[i];
                    }
                    (eb.values[k], left * right)
                })
                .collect(),
        )
    }
}

/// `c^M = exp(ln c · M)`.
pub fn matrix_power(m: &SquareMatrix, c: f64) -> Result<SquareMatrix> {
    if !(c > 0.0) || !c.is_finite() {
        bail!(Domain, "matrix power needs a positive finite base, got {c}");
    }
    MatrixPower::new(m)?.at(c)
}

/// Validated exponents `(E, H)` with `0 < min Re eig(H) ≤ max Re eig(H) < min Re eig(E*)`.
#[derive(Clone, Debug)]
pub struct ExponentPair {
    e: SquareMatrix,
    h: SquareMatrix,
    e_spec: Spectrum,
    h_spec: Spectrum,
}

impl ExponentPair {
    pub fn e(&self) -> &SquareMatrix {
        &self.e
    }
    pub fn h(&self) -> &SquareMatrix {
        &self.h
    }
    pub fn e_star(&self) -> SquareMatrix {
        self.e.transpose()
    }
    pub fn m(&self) -> usize {
        self.e.nrows()
    }
    pub fn n(&self) -> usize {
        self.h.nrows()
    }
    pub fn e_spectrum(&self) -> &Spectrum {
        &self.e_spec
    }
    pub fn h_spectrum(&self) -> &Spectrum {
        &self.h_spec
    }
    pub fn trace_e(&self) -> f64 {
        self.e.trace()
    }

    /// The kernel-construction inequality `max eig(H) + tr(E)/2 < m·min eig(E)`.
    pub fn check_c4(&self) -> Result<()> {
        let lhs = self.h_spec.max_real + self.trace_e() / 2.0;
        let rhs = self.m() as f64 * self.e_spec.min_real;
        if lhs < rhs {
            Ok(())
        } else {
            bail!(
                Validation,
                "inequality (c.4) max eig(H) + tr(E)/2 < m*min eig(E) violated: {} + {} = {lhs} >= {} * {} = {rhs}; eig(H) = {}, eig(E) = {}",
                self.h_spec.max_real,
                self.trace_e() / 2.0,
                self.m(),
                self.e_spec.min_real,
                self.h_spec.describe(),
                self.e_spec.describe()
            )
        }
    }
}

pub fn validate_exponents(e: &SquareMatrix, h: &SquareMatrix) -> Result<ExponentPair> {
    check_matrix(e, "E")?;
    check_matrix(h, "H")?;
    let e_spec = spectrum(e)?;
    let h_spec = spectrum(h)?;
    let mut violations = Vec::new();
    if !(h_spec.min_real > 0.0) {
        violations.push(format!(
            "0 < min Re eig(H) violated: min Re eig(H) = {} with eig(H) = {}",
            h_spec.min_real,
            h_spec.describe()
        ));
    }
    if !(h_spec.max_real < e_spec.min_real) {
        violations.push(format!(
            "max Re eig(H) < min Re eig(E*) violated: max Re eig(H) = {} >= min Re eig(E*) = {}; eig(H) = {}, eig(E*) = {}",
            h_spec.max_real,
            e_spec.min_real,
            h_spec.describe(),
            e_spec.describe()
        ));
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations.join("; ")));
    }
    Ok(ExponentPair { e: e.clone(), h: h.clone(), e_spec, h_spec })
}

/// `M = V D V⁻¹` with real `V` and real diagonal `D`.
#[derive(Clone, Debug)]
pub struct RealDiagonalization {
    pub v: SquareMatrix,
    pub d: SquareMatrix,
    pub v_inv: SquareMatrix,
}

impl RealDiagonalization {
    pub fn eigenvalues(&self) -> Vec<f64> {
        (0..self.d.nrows()).map(|i| self.d[(i, i)]).collect()
    }
}

pub fn real_diagonalize(m: &SquareMatrix) -> Result<RealDiagonalization> {
    check_matrix(m, "matrix")?;
    let d = m.nrows();
    let is_diag = (0..d).all(|r| (0..d).all(|c| r == c || m[(r, c)] == 0.0));
    if is_diag {
        return Ok(RealDiagonalization {
            v: SquareMatrix::identity(d, d),
            d: m.clone(),
            v_inv: SquareMatrix::identity(d, d),
        });
    }
    let spec = spectrum(m)?;
    if !spec.is_real() {
        bail!(Validation, "matrix is not real-diagonalizable: complex eigenvalues {}", spec.describe());
    }
    let vals: Vec<f64> = spec.eigenvalues.iter().map(|z| z.re).collect();
    let scale = m.norm();
    let mut v = SquareMatrix::zeros(d, d);
    let mut col = 0;
    let mut i = 0;
    while i < d {
        let mut j = i + 1;
        while j < d && (vals[j] - vals[i]).abs() <= 1e-9 * (1.0 + vals[i].abs()) {
            j += 1;
        }
        let k = j - i;
        let centre = vals[i..j].iter().sum::<f64>() / k as f64;
        let shifted = m - SquareMatrix::identity(d, d) * centre;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed to return right vectors".into()))?;
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        for &idx in order.iter().take(k) {
            if svd.singular_values[idx] > 1e-6 * scale {
                bail!(Validation, "matrix is not real-diagonalizable: defective eigenvalue {centre}");
            }
            let mut vec: DVector<f64> = v_t.row(idx).transpose();
            if let Some(first) = vec.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    vec = -vec;
                }
            }
            v.set_column(col, &vec);
            col += 1;
        }
        i = j;
    }
    let cond = condition_number(&v);
    if !cond.is_finite() || cond > DEFECTIVE_COND {
        bail!(Validation, "matrix is not real-diagonalizable: eigenvector condition number {cond:.3e} exceeds {DEFECTIVE_COND:e}");
    }
    let v_inv = v
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Validation("matrix is not real-diagonalizable: singular eigenvector matrix".into()))?;
    let projected = &v_inv * m * &v;
    let dmat = SquareMatrix::from_diagonal(&projected.diagonal());
    let off = (&projected - &dmat).amax();
    if off > 1e-9 * scale * cond {
        bail!(Validation, "matrix is not real-diagonalizable: eigenvector basis leaves off-diagonal residue {off:.3e}");
    }
    Ok(RealDiagonalization { v, d: dmat, v_inv })
}
