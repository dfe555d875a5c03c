//! Homogeneous matrix-valued functions built from their values on the sphere `S₀`.

use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::matcalc::{check_matrix, MatrixPower, SquareMatrix, C64};
use crate::polar::PolarSystem;

pub type CMatrix = DMatrix<C64>;

type ProfileFn = dyn Fn(&[f64]) -> CMatrix + Send + Sync;

#[derive(Clone)]
enum ProfileKind {
    Closed(Arc<ProfileFn>),
    Tabulated(Arc<Tabulated>),
}

/// Matrix-valued function on `S₀`.
#[derive(Clone)]
pub struct SphericalProfile {
    rows: usize,
    cols: usize,
    name: String,
    kind: ProfileKind,
}

impl fmt::Debug for SphericalProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SphericalProfile({}, {}x{})", self.name, self.rows, self.cols)
    }
}

impl SphericalProfile {
    pub fn closed_form<F>(name: &str, rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> CMatrix + Send + Sync + 'static,
    {
        SphericalProfile { rows, cols, name: name.to_string(), kind: ProfileKind::Closed(Arc::new(f)) }
    }

    /// Scalar profile times the identity of size `n`.
    pub fn scalar<F>(name: &str, n: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> C64 + Send + Sync + 'static,
    {
        Self::closed_form(name, n, n, move |theta| CMatrix::identity(n, n) * f(theta))
    }

    pub fn constant(name: &str, value: CMatrix) -> Self {
        let (rows, cols) = value.shape();
        Self::closed_form(name, rows, cols, move |_| value.clone())
    }

    /// Tabulated values on a uniform angular grid over `[0, 2π)` (`m = 2`), interpolated by
    /// periodic cubic splines in the angle `atan2(θ₂, θ₁)` of the sphere point.
    pub fn tabulated(name: &str, values: Vec<CMatrix>) -> Result<Self> {
        let tab = Tabulated::new(values)?;
        Ok(SphericalProfile { rows: tab.rows, cols: tab.cols, name: name.to_string(), kind: ProfileKind::Tabulated(Arc::new(tab)) })
    }

    /// CSV with columns `s, Re(a11), Im(a11), Re(a12), …` (row-major entries); `s` must form a
    /// uniform grid on `[0, 2π)`. A non-numeric first line is taken as the header.
    pub fn from_csv<R: BufRead>(name: &str, reader: R, rows: usize, cols: usize) -> Result<Self> {
        let mut angles = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = t.split(',').map(|f| f.trim()).collect();
            let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            let nums = match parsed {
                Ok(v) => v,
                Err(_) if angles.is_empty() && values.is_empty() => continue,
                Err(_) => bail!(Validation, "profile CSV line {}: non-numeric field", lineno + 1),
            };
            if nums.len() != 1 + 2 * rows * cols {
                bail!(
                    Validation,
                    "profile CSV line {}: expected {} columns for a {rows}x{cols} profile, got {}",
                    lineno + 1,
                    1 + 2 * rows * cols,
                    nums.len()
                );
            }
            angles.push(nums[0]);
            values.push(CMatrix::from_fn(rows, cols, |r, c| {
                let k = 1 + 2 * (r * cols + c);
                C64::new(nums[k], nums[k + 1])
            }));
        }
        let n = angles.len();
        if n < 4 {
            bail!(Validation, "profile CSV needs at least 4 rows, got {n}");
        }
        let h = 2.0 * std::f64::consts::PI / n as f64;
        for (k, s) in angles.iter().enumerate() {
            if (s - k as f64 * h).abs() > 1e-9 {
                bail!(Validation, "profile CSV angles must be the uniform grid 2πk/{n}; row {k} has s = {s}");
            }
        }
        Self::tabulated(name, values)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn eval(&self, theta: &[f64]) -> CMatrix {
        match &self.kind {
            ProfileKind::Closed(f) => f(theta),
            ProfileKind::Tabulated(t) => t.eval(theta[1].atan2(theta[0])),
        }
    }

    /// Largest spectral norm over the given sphere points (infinite if any value is not finite).
    pub fn bound(&self, points: &[Vec<f64>]) -> f64 {
        let mut sup = 0.0f64;
        for p in points {
            let v = self.eval(p);
            if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return f64::INFINITY;
            }
            sup = sup.max(v.clone().singular_values().max());
        }
        sup
    }
}

/// Periodic cubic spline coefficients per real component.
struct Tabulated {
    rows: usize,
    cols: usize,
    h: f64,
    /// `[component][node]` values and second derivatives, components ordered (entry, re/im).
    y: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl Tabulated {
    fn new(values: Vec<CMatrix>) -> Result<Self> {
        let n = values.len();
        if n < 4 {
            bail!(Validation, "tabulated profile needs at least 4 nodes");
        }
        let (rows, cols) = values[0].shape();
        if values.iter().any(|v| v.shape() != (rows, cols)) {
            bail!(Validation, "tabulated profile values have inconsistent shapes");
        }
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let mut y = Vec::new();
        let mut m2 = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                for part in 0..2 {
                    let comp: Vec<f64> =
                        values.iter().map(|v| if part == 0 { v[(r, c)].re } else { v[(r, c)].im }).collect();
                    if comp.iter().any(|v| !v.is_finite()) {
                        bail!(Validation, "tabulated profile has non-finite values");
                    }
                    let rhs: Vec<f64> =
                        (0..n).map(|i| 6.0 * (comp[(i + 1) % n] - 2.0 * comp[i] + comp[(i + n - 1) % n]) / (h * h)).collect();
                    m2.push(solve_cyclic(n, 1.0, 4.0, &rhs));
                    y.push(comp);
                }
            }
        }
        Ok(Tabulated { rows, cols, h, y, m2 })
    }

    fn eval(&self, s: f64) -> CMatrix {
        let n = self.y[0].len();
        let s = s.rem_euclid(2.0 * std::f64::consts::PI);
        let pos = s / self.h;
        let i = (pos.floor() as usize).min(n - 1);
        let t = pos - i as f64;
        let j = (i + 1) % n;
        let h2 = self.h * self.h;
        let comp = |k: usize| {
            let (y0, y1, m0, m1) = (self.y[k][i], self.y[k][j], self.m2[k][i], self.m2[k][j]);
            (1.0 - t) * y0 + t * y1 + h2 / 6.0 * (((1.0 - t).powi(3) - (1.0 - t)) * m0 + (t.powi(3) - t) * m1)
        };
        CMatrix::from_fn(self.rows, self.cols, |r, c| {
            let k = 2 * (r * self.cols + c);
            C64::new(comp(k), comp(k + 1))
        })
    }
}

/// Solves the circulant tridiagonal system `off·x_{i−1} + diag·x_i + off·x_{i+1} = rhs_i`.
fn solve_cyclic(n: usize, off: f64, diag: f64, rhs: &[f64]) -> Vec<f64> {
    // Sherman–Morrison on top of a Thomas sweep.
    let gamma = -diag;
    let mut b = vec![diag; n];
    b[0] = diag - gamma;
    b[n - 1] = diag - off * off / gamma;
    let thomas = |d: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        let mut x = vec![0.0; n];
        c[0] = off / b[0];
        x[0] = d[0] / b[0];
        for i in 1..n {
            let m = b[i] - off * c[i - 1];
            c[i] = off / m;
            x[i] = (d[i] - off * x[i - 1]) / m;
        }
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    };
    let x = thomas(rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = off;
    let z = thomas(&u);
    let fact = (x[0] + off * x[n - 1] / gamma) / (1.0 + z[0] + off * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HomogeneityKind {
    /// `φ(x) = τ^H φ(l)`, satisfying `φ(c^E x) = c^H φ(x)`.
    Left,
    /// `φ(x) = τ^{H/2} φ(l) τ^{H*/2}`, satisfying `φ(c^E x) = c^{H/2} φ(x) c^{H*/2}`.
    TwoSided,
}

/// Homogeneous function extended from its profile on `S₀`.
#[derive(Clone, Debug)]
pub struct HomogeneousFn {
    sys: PolarSystem,
    exponent: SquareMatrix,
    exp_power: MatrixPower,
    profile: SphericalProfile,
    kind: HomogeneityKind,
}

impl HomogeneousFn {
    pub fn generator(&self) -> &SquareMatrix {
        self.sys.e()
    }

    pub fn system(&self) -> &PolarSystem {
        &self.sys
    }

    pub fn left_exponent(&self) -> SquareMatrix {
        match self.kind {
            HomogeneityKind::Left => self.exponent.clone(),
            HomogeneityKind::TwoSided => &self.exponent / 2.0,
        }
    }

    pub fn right_exponent(&self) -> Option<SquareMatrix> {
        match self.kind {
            HomogeneityKind::Left => None,
            HomogeneityKind::TwoSided => Some(self.exponent.transpose() / 2.0),
        }
    }

    pub fn profile(&self) -> &SphericalProfile {
        &self.profile
    }

    pub fn kind(&self) -> HomogeneityKind {
        self.kind
    }

    /// `c^H` (left kind) as a complex matrix.
    fn exponent_power(&self, c: f64, half: bool) -> CMatrix {
        let u = if half { 0.5 * c.ln() } else { c.ln() };
        self.exp_power.exp_scaled(u).map(|v| C64::new(v, 0.0))
    }

    /// Value from a known polar decomposition.
    pub fn eval_polar(&self, tau: f64, l: &[f64]) -> CMatrix {
        let a = self.profile.eval(l);
        match self.kind {
            HomogeneityKind::Left => self.exponent_power(tau, false) * a,
            HomogeneityKind::TwoSided => {
                let p = self.exponent_power(tau, true);
                &p * a * p.transpose()
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<CMatrix> {
        if x.iter().all(|v| *v == 0.0) {
            bail!(Domain, "homogeneous functions are not defined at the origin");
        }
        let d = self.sys.decompose(x)?;
        Ok(self.eval_polar(d.tau, &d.l))
    }
}

pub fn extend_from_sphere(
    generator: &SquareMatrix,
    exponent: &SquareMatrix,
    profile: SphericalProfile,
    kind: HomogeneityKind,
) -> Result<HomogeneousFn> {
    check_matrix(exponent, "exponent")?;
    let sys = PolarSystem::new(generator)?;
    if exponent.nrows() != profile.rows() {
        bail!(
            Validation,
            "exponent is {}x{} but the profile has {} rows",
            exponent.nrows(),
            exponent.ncols(),
            profile.rows()
        );
    }
    if kind == HomogeneityKind::TwoSided && profile.rows() != profile.cols() {
        bail!(Validation, "two-sided homogeneity needs a square profile");
    }
    let exp_power = MatrixPower::new(exponent)?;
    Ok(HomogeneousFn { sys, exponent: exponent.clone(), exp_power, profile, kind })
}

#[derive(Clone, Debug)]
pub struct HomogeneityReport {
    pub samples: usize,
    pub max_violation: f64,
    pub worst_c: f64,
    pub worst_x: Vec<f64>,
    pub pass: bool,
}

/// Audits `f(c^E x)` against the scaling law of `kind` with exponent `exponent` at random
/// `c ∈ [0.01, 100]` (log-uniform) and `x ∈ [−2, 2]^m`.
pub fn check_scaling<F>(
    f: F,
    generator: &SquareMatrix,
    exponent: &SquareMatrix,
    kind: HomogeneityKind,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<HomogeneityReport>
where
    F: Fn(&[f64]) -> Result<CMatrix>,
{
    if samples == 0 {
        bail!(Validation, "samples must be at least 1");
    }
    let gp = MatrixPower::new(generator)?;
    let hp = MatrixPower::new(exponent)?;
    let m = generator.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 1.0, vec![0.0; m]);
    for _ in 0..samples {
        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        let x: Vec<f64> = loop {
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            if x.iter().any(|v| v.abs() > 1e-3) {
                break x;
            }
        };
        let mut cx = vec![0.0; m];
        gp.apply_scaled(c.ln(), &x, &mut cx);
        let fx = f(&x)?;
        let fcx = f(&cx)?;
        let expected = match kind {
            HomogeneityKind::Left => hp.exp_scaled(c.ln()).map(|v| C64::new(v, 0.0)) * &fx,
            HomogeneityKind::TwoSided => {
                let p = hp.exp_scaled(0.5 * c.ln()).map(|v| C64::new(v, 0.0));
                &p * &fx * p.transpose()
            }
        };
        let scale = expected.norm().max(1e-300);
        let v = (&fcx - &expected).norm() / scale;
        if !(v <= worst.0) {
            worst = (v, c, x);
        }
    }
    Ok(HomogeneityReport { samples, max_violation: worst.0, worst_c: worst.1, worst_x: worst.2, pass: worst.0 <= tol })
}

pub fn check_homogeneity(f: &HomogeneousFn, samples: usize, tol: f64) -> Result<HomogeneityReport> {
    check_scaling(|x| f.eval(x), f.generator(), &f.exponent, f.kind, samples, tol, 0x5eed)
}
