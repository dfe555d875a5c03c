//! Field sampling: exact Cholesky draws, spectral-grid synthesis, empirical covariances and
//! operator self-similarity tests.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{bail, Error, Result};
use crate::homog::CMatrix;
use crate::matcalc::{ExponentPair, MatrixPower, SquareMatrix, C64};
use crate::spectral::SpectralModel;

/// Largest `n·P` accepted by [`simulate_cholesky`].
pub const CHOLESKY_MAX_DIM: usize = 4096;
const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-8;
const REPLICATE_BATCH: usize = 64;

/// Sample points, optionally with the shape of the tensor grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    points: Vec<Vec<f64>>,
    shape: Option<Vec<usize>>,
}

impl Lattice {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            bail!(Validation, "lattice needs at least one point");
        }
        let m = points[0].len();
        if m == 0 {
            bail!(Validation, "lattice points need at least one coordinate");
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != m {
                bail!(Validation, "lattice point {i} has {} coordinates, expected {m}", p.len());
            }
            if p.iter().any(|v| !v.is_finite()) {
                bail!(Validation, "lattice point {i} is not finite");
            }
        }
        let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
        sorted.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            bail!(Validation, "lattice points must be distinct");
        }
        Ok(Lattice { points, shape: None })
    }

    /// Tensor grid from per-axis `(lo, hi, count)` ranges; the first axis varies slowest.
    pub fn grid(axes: &[(f64, f64, usize)]) -> Result<Self> {
        if axes.is_empty() {
            bail!(Validation, "grid needs at least one axis");
        }
        let coords: Vec<Vec<f64>> = axes
            .iter()
            .map(|&(lo, hi, n)| {
                if n == 0 {
                    return Err(Error::Validation("grid axis needs at least one node".into()));
                }
                if n == 1 {
                    return Ok(vec![lo]);
                }
                Ok((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect())
            })
            .collect::<Result<_>>()?;
        let total: usize = coords.iter().map(|c| c.len()).product();
        let mut points = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rem = idx;
            let mut p = vec![0.0; axes.len()];
            for (j, c) in coords.iter().enumerate().rev() {
                p[j] = c[rem % c.len()];
                rem /= c.len();
            }
            points.push(p);
        }
        let mut lat = Lattice::new(points)?;
        lat.shape = Some(coords.iter().map(|c| c.len()).collect());
        Ok(lat)
    }

    /// Parses `lo:hi:count` per axis separated by commas (a tensor grid), or explicit points
    /// `x,y;x,y;…`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.contains(':') {
            let axes = spec
                .split(',')
                .map(|ax| {
                    let f: Vec<&str> = ax.split(':').map(str::trim).collect();
                    if f.len() != 3 {
                        return Err(Error::Validation(format!("grid axis '{ax}' must be lo:hi:count")));
                    }
                    let lo: f64 = f[0].parse().map_err(|_| Error::Validation(format!("bad grid bound '{}'", f[0])))?;
                    let hi: f64 = f[1].parse().map_err(|_| Error::Validation(format!("bad grid bound '{}'", f[1])))?;
                    let n: usize = f[2].parse().map_err(|_| Error::Validation(format!("bad grid count '{}'", f[2])))?;
                    Ok((lo, hi, n))
                })
                .collect::<Result<Vec<_>>>()?;
            Lattice::grid(&axes)
        } else {
            let points = spec
                .split(';')
                .map(|p| parse_vector(p))
                .collect::<Result<Vec<_>>>()?;
            Lattice::new(points)
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn shape(&self) -> Option<&[usize]> {
        self.shape.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// The lattice `{c^E t}`.
    pub fn scaled(&self, e: &SquareMatrix, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            bail!(Domain, "scale factor must be positive, got {c}");
        }
        let p = MatrixPower::new(e)?;
        let mut buf = vec![0.0; self.dim()];
        let points = self
            .points
            .iter()
            .map(|t| {
                p.apply_scaled(c.ln(), t, &mut buf);
                buf.clone()
            })
            .collect();
        Ok(Lattice { points, shape: self.shape.clone() })
    }

    fn is_origin(&self, i: usize) -> bool {
        self.points[i].iter().all(|v| *v == 0.0)
    }
}

/// Comma-separated numbers.
pub fn parse_vector(s: &str) -> Result<Vec<f64>> {
    let v: std::result::Result<Vec<f64>, _> = s.split(',').map(|x| x.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => bail!(Validation, "cannot parse '{s}' as a comma-separated vector"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Cholesky,
    Spectral,
}

impl Method {
    fn code(self) -> u32 {
        match self {
            Method::Cholesky => 0,
            Method::Spectral => 1,
        }
    }
}

/// Realized field values, laid out as `values[(replicate·P + point)·n + component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub lattice: Lattice,
    pub n: usize,
    pub replicates: usize,
    pub values: Vec<f64>,
    pub seed: u64,
    pub method: Method,
}

const MAGIC: &[u8; 4] = b"OFBF";
const VERSION: u32 = 1;

impl FieldSample {
    pub fn value(&self, replicate: usize, point: usize) -> &[f64] {
        let p = self.lattice.len();
        let start = (replicate * p + point) * self.n;
        &self.values[start..start + self.n]
    }

    /// Second moments `E X X*` of the stacked vector (the mean is zero) and their standard errors.
    pub fn empirical_covariance(&self) -> (SquareMatrix, SquareMatrix) {
        let d = self.lattice.len() * self.n;
        let r = self.replicates as f64;
        let rows: Vec<&[f64]> = self.values.chunks(d).collect();
        let mut sum = SquareMatrix::zeros(d, d);
        let mut sum_sq = SquareMatrix::zeros(d, d);
        for row in &rows {
            for a in 0..d {
                for b in a..d {
                    let v = row[a] * row[b];
                    sum[(a, b)] += v;
                    sum_sq[(a, b)] += v * v;
                }
            }
        }
        let mut cov = SquareMatrix::zeros(d, d);
        let mut se = SquareMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let mean = sum[(a, b)] / r;
                let var = (sum_sq[(a, b)] / r - mean * mean).max(0.0);
                cov[(a, b)] = mean;
                cov[(b, a)] = mean;
                se[(a, b)] = (var / r).sqrt();
                se[(b, a)] = se[(a, b)];
            }
        }
        (cov, se)
    }

    /// OFBF1: magic, version, `m, n, P, R` as little-endian `u32`, then point coordinates and
    /// values as little-endian `f64`, row-major.
    pub fn write_ofbf1<W: Write>(&self, mut w: W) -> Result<()> {
        let header = [VERSION, self.lattice.dim() as u32, self.n as u32, self.lattice.len() as u32, self.replicates as u32];
        w.write_all(MAGIC)?;
        for h in header {
            w.write_all(&h.to_le_bytes())?;
        }
        for p in self.lattice.points() {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an OFBF1 stream; the seed and method are not part of the format and are returned as
    /// `0` and [`Method::Cholesky`].
    pub fn read_ofbf1<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!(Validation, "not an OFBF1 file (bad magic)");
        }
        let mut u32s = [0u32; 5];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, m, n, p, reps] = u32s;
        if version != VERSION {
            bail!(Validation, "unsupported OFBF version {version}");
        }
        let (m, n, p, reps) = (m as usize, n as usize, p as usize, reps as usize);
        let mut read_f64 = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut points = Vec::with_capacity(p);
        for _ in 0..p {
            points.push((0..m).map(|_| read_f64()).collect::<Result<Vec<_>>>()?);
        }
        let values = (0..reps * p * n).map(|_| read_f64()).collect::<Result<Vec<_>>>()?;
        Ok(FieldSample { lattice: Lattice::new(points)?, n, replicates: reps, values, seed: 0, method: Method::Cholesky })
    }

    /// Flat CSV: `replicate, point, t1..tm, x1..xn`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.lattice.dim();
        let mut header = vec!["replicate".to_string(), "point".to_string()];
        header.extend((1..=m).map(|j| format!("t{j}")));
        header.extend((1..=self.n).map(|j| format!("x{j}")));
        writeln!(w, "{}", header.join(","))?;
        for rep in 0..self.replicates {
            for (i, t) in self.lattice.points().iter().enumerate() {
                let mut fields = vec![rep.to_string(), i.to_string()];
                fields.extend(t.iter().map(|v| format!("{v:.17e}")));
                fields.extend(self.value(rep, i).iter().map(|v| format!("{v:.17e}")));
                writeln!(w, "{}", fields.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Method code as stored by callers that track provenance alongside OFBF1 files.
    pub fn method_code(&self) -> u32 {
        self.method.code()
    }
}

/// Standard normal stream for one replicate.
fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Lower Cholesky factor with escalating diagonal jitter `ε·tr/d·I`.
fn jittered_cholesky(cov: &SquareMatrix) -> Result<(SquareMatrix, f64)> {
    let d = cov.nrows();
    if let Some(ch) = cov.clone().cholesky() {
        return Ok((ch.l(), 0.0));
    }
    let base = (cov.trace() / d as f64).abs().max(1e-300);
    let mut eps = JITTER_START;
    while eps <= JITTER_MAX * (1.0 + 1e-9) {
        let jittered = cov + SquareMatrix::identity(d, d) * (eps * base);
        if let Some(ch) = jittered.cholesky() {
            return Ok((ch.l(), eps));
        }
        eps *= 10.0;
    }
    let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
    bail!(
        Numerical,
        "covariance is not positive semidefinite within the jitter budget: most negative eigenvalue {min_eig:.3e} (trace/dim {base:.3e})"
    )
}

/// Exact Gaussian draws from the quadrature covariance on `lattice`; the origin is pinned to zero.
pub fn simulate_cholesky(model: &SpectralModel, lattice: &Lattice, replicates: usize, seed: u64) -> Result<FieldSample> {
    if replicates == 0 {
        bail!(Validation, "replicates must be at least 1");
    }
    if lattice.dim() != model.m() {
        bail!(Validation, "lattice points have {} coordinates but the model has m = {}", lattice.dim(), model.m());
    }
    let n = model.n();
    let p = lattice.len();
    if n * p > CHOLESKY_MAX_DIM {
        bail!(Validation, "n·P = {} exceeds the Cholesky limit {CHOLESKY_MAX_DIM}", n * p);
    }
    let active: Vec<usize> = (0..p).filter(|&i| !lattice.is_origin(i)).collect();
    let pts: Vec<Vec<f64>> = active.iter().map(|&i| lattice.points()[i].clone()).collect();
    let d = active.len() * n;
    let factor = if d > 0 { Some(jittered_cholesky(&model.covariance_matrix(&pts)?.0)?.0) } else { None };
    let mut values = vec![0.0; replicates * p * n];
    values.par_chunks_mut(p * n).enumerate().for_each(|(rep, out)| {
        if let Some(l) = &factor {
            let mut rng = replicate_rng(seed, rep);
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (k, &i) in active.iter().enumerate() {
                for a in 0..n {
                    let row = k * n + a;
                    let mut acc = 0.0;
                    for (c, zc) in z.iter().enumerate().take(row + 1) {
                        acc += l[(row, c)] * zc;
                    }
                    out[i * n + a] = acc;
                }
            }
        }
    });
    Ok(FieldSample { lattice: lattice.clone(), n, replicates, values, seed, method: Method::Cholesky })
}

/// Tensor frequency grid with per-axis nodes and cell widths, symmetric under negation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    axes: Vec<Vec<f64>>,
    widths: Vec<Vec<f64>>,
}

impl FrequencyGrid {
    /// `nodes` cell midpoints per axis on `[−half_width, half_width]`; for odd `nodes` the centre
    /// cell sits at 0 and the origin node is dropped.
    pub fn uniform(m: usize, half_width: f64, nodes: usize) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) || nodes < 2 || m == 0 {
            bail!(Validation, "frequency grid needs m ≥ 1, R > 0 and at least 2 nodes per axis");
        }
        let w = 2.0 * half_width / nodes as f64;
        let axis: Vec<f64> = (0..nodes).map(|k| -half_width + (k as f64 + 0.5) * w).collect();
        Self::from_axes(vec![axis; m], vec![vec![w; nodes]; m])
    }

    pub fn from_axes(axes: Vec<Vec<f64>>, widths: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.len() != widths.len() {
            bail!(Validation, "frequency grid needs matching node and width lists");
        }
        for (j, (ax, w)) in axes.iter().zip(&widths).enumerate() {
            if ax.len() != w.len() || ax.is_empty() {
                bail!(Validation, "frequency axis {j} has mismatched node and width counts");
            }
            let scale = ax.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
            let k = ax.len();
            for i in 0..k {
                if (ax[i] + ax[k - 1 - i]).abs() > 1e-12 * scale || (w[i] - w[k - 1 - i]).abs() > 1e-12 * scale {
                    bail!(Validation, "frequency axis {j} is not symmetric under negation (node {i})");
                }
                if !(w[i] > 0.0) {
                    bail!(Validation, "frequency axis {j} has a non-positive cell width");
                }
                if i > 0 && !(ax[i] > ax[i - 1]) {
                    bail!(Validation, "frequency axis {j} must be strictly increasing");
                }
            }
        }
        Ok(FrequencyGrid { axes, widths })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Half-widths of the box covered by the cells.
    pub fn box_half_widths(&self) -> Vec<f64> {
        self.axes.iter().zip(&self.widths).map(|(a, w)| a[a.len() - 1] + 0.5 * w[w.len() - 1]).collect()
    }

    /// `(x_k, Δ_k)` for one representative of each `±` pair, plus the mirrored points.
    fn half_grid(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let sizes: Vec<usize> = self.axes.iter().map(|a| a.len()).collect();
        let total: usize = sizes.iter().product();
        let mut pts = Vec::new();
        let mut cells = Vec::new();
        for idx in 0..total {
            let mut rem = idx;
            let mut multi = vec![0usize; sizes.len()];
            for j in (0..sizes.len()).rev() {
                multi[j] = rem % sizes[j];
                rem /= sizes[j];
            }
            let mut mirror = 0usize;
            for j in 0..sizes.len() {
                mirror = mirror * sizes[j] + (sizes[j] - 1 - multi[j]);
            }
            if idx >= mirror {
                continue;
            }
            pts.push(multi.iter().enumerate().map(|(j, &i)| self.axes[j][i]).collect());
            cells.push(multi.iter().enumerate().map(|(j, &i)| self.widths[j][i]).product());
        }
        (pts, cells)
    }
}

#[derive(Clone, Debug)]
pub struct SpectralOptions {
    pub grid: FrequencyGrid,
    pub replicates: usize,
    /// Adds the mass of `ψ` outside the grid box as a common plus a per-point Gaussian term.
    pub tail_closure: bool,
}

impl SpectralOptions {
    /// `[−64, 64]^m` with 256 nodes per axis and the tail closure.
    pub fn default_for(m: usize, replicates: usize) -> Result<Self> {
        Ok(SpectralOptions { grid: FrequencyGrid::uniform(m, 64.0, 256)?, replicates, tail_closure: true })
    }
}

/// Spectral-grid synthesis `X(t) = Σ_k (e^{i⟨x_k,t⟩} − 1) g(x_k) √Δ_k Z_k` with
/// `Z_{−k} = conj(Z_k)`. Replicate `r` draws its normals from stream `r` of the seed.
pub fn simulate_spectral(model: &SpectralModel, lattice: &Lattice, opts: &SpectralOptions, seed: u64) -> Result<FieldSample> {
    let m = model.m();
    let n = model.n();
    if opts.replicates == 0 {
        bail!(Validation, "replicates must be at least 1");
    }
    if lattice.dim() != m || opts.grid.dim() != m {
        bail!(Validation, "lattice and frequency grid must have m = {m} coordinates");
    }
    let p = lattice.len();
    let (freqs, cells) = opts.grid.half_grid();
    let k = freqs.len();
    let gs: Vec<CMatrix> = freqs.par_iter().map(|x| model.g(x)).collect::<Result<_>>()?;
    let gs_neg: Vec<CMatrix> =
        freqs.par_iter().map(|x| model.g(&x.iter().map(|v| -v).collect::<Vec<_>>())).collect::<Result<_>>()?;

    // X = A·ζ with ζ = (U_k, V_k) real normals and Z_k = (U_k + i V_k)/√2.
    let cols = 2 * n * k;
    let mut a_mat = DMatrix::<f64>::zeros(p * n, cols);
    let sqrt2 = std::f64::consts::SQRT_2;
    for (i, t) in lattice.points().iter().enumerate() {
        for (kk, (x, g)) in freqs.iter().zip(&gs).enumerate() {
            let phase: f64 = x.iter().zip(t).map(|(a, b)| a * b).sum();
            let e = C64::new(phase.cos() - 1.0, phase.sin()) * (cells[kk].sqrt() * sqrt2);
            for a in 0..n {
                for b in 0..n {
                    let mkb = e * g[(a, b)];
                    a_mat[(i * n + a, kk * 2 * n + b)] = mkb.re;
                    a_mat[(i * n + a, kk * 2 * n + n + b)] = -mkb.im;
                }
            }
        }
    }

    let closure = if opts.tail_closure {
        let mass = model.mass_outside_box(&opts.grid.box_half_widths())?;
        let sym = (&mass + mass.transpose()) * 0.5;
        Some(jittered_cholesky(&sym)?.0)
    } else {
        None
    };
    let extra = if closure.is_some() { n * (1 + p) } else { 0 };
    let draw = |rep: usize| -> Vec<f64> {
        let mut rng = replicate_rng(seed, rep);
        (0..cols + extra).map(|_| StandardNormal.sample(&mut rng)).collect()
    };

    // Imaginary residue of the full complex sum for the first replicate.
    {
        let z = draw(0);
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for t in lattice.points() {
            let mut acc = vec![C64::new(0.0, 0.0); n];
            for (kk, x) in freqs.iter().enumerate() {
                let phase: f64 = x.iter().zip(t).map(|(a, b)| a * b).sum();
                let e_pos = C64::new(phase.cos() - 1.0, phase.sin()) * cells[kk].sqrt();
                let e_neg = e_pos.conj();
                for a in 0..n {
                    for b in 0..n {
                        let zk = C64::new(z[kk * 2 * n + b], z[kk * 2 * n + n + b]) / sqrt2;
                        acc[a] += e_pos * gs[kk][(a, b)] * zk + e_neg * gs_neg[kk][(a, b)] * zk.conj();
                    }
                }
            }
            for v in acc {
                worst = worst.max(v.im.abs());
                scale = scale.max(v.re.abs());
            }
        }
        if worst > 1e-8 * scale.max(1e-300) {
            bail!(
                Numerical,
                "spectral sum has imaginary residue {worst:.3e} (scale {scale:.3e}); the filter violates g(-x) = conj(g(x))"
            );
        }
    }

    let reps = opts.replicates;
    let mut values = vec![0.0; reps * p * n];
    for start in (0..reps).step_by(REPLICATE_BATCH) {
        let end = (start + REPLICATE_BATCH).min(reps);
        let draws: Vec<Vec<f64>> = (start..end).into_par_iter().map(draw).collect();
        let z = DMatrix::from_fn(cols, end - start, |r, c| draws[c][r]);
        let x = &a_mat * z;
        for (c, rep) in (start..end).enumerate() {
            let out = &mut values[rep * p * n..(rep + 1) * p * n];
            for row in 0..p * n {
                out[row] = x[(row, c)];
            }
            if let Some(l) = &closure {
                let w = &draws[c][cols..];
                let common = l * nalgebra::DVector::from_column_slice(&w[..n]);
                for i in 0..p {
                    if lattice.is_origin(i) {
                        continue;
                    }
                    let own = l * nalgebra::DVector::from_column_slice(&w[n * (1 + i)..n * (2 + i)]);
                    for a in 0..n {
                        out[i * n + a] += own[a] - common[a];
                    }
                }
            }
            for i in 0..p {
                if lattice.is_origin(i) {
                    for a in 0..n {
                        out[i * n + a] = 0.0;
                    }
                }
            }
        }
    }
    Ok(FieldSample { lattice: lattice.clone(), n, replicates: reps, values, seed, method: Method::Spectral })
}

#[derive(Clone, Debug)]
pub struct SelfSimReport {
    /// Largest `|Ĉ_scaled − c^H Ĉ_base c^{H*}| / se` over covariance entries.
    pub max_deviation: f64,
    pub worst_entry: (usize, usize),
    pub pass: bool,
}

/// Compares the empirical covariance of `X(c^E t_i)` with `c^H Cov(X(t_i)) c^{H*}` entrywise,
/// standardized by the combined standard errors; passes at 4σ.
pub fn selfsim_test(base: &FieldSample, scaled: &FieldSample, pair: &ExponentPair, c: f64) -> Result<SelfSimReport> {
    if base.n != scaled.n || base.n != pair.n() || base.lattice.len() != scaled.lattice.len() {
        bail!(Validation, "samples have mismatched shapes");
    }
    let expected = base.lattice.scaled(pair.e(), c)?;
    for (i, (a, b)) in expected.points().iter().zip(scaled.lattice.points()).enumerate() {
        let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9 * scale) {
            bail!(Validation, "scaled lattice point {i} is not c^E times the base point");
        }
    }
    let n = base.n;
    let p = base.lattice.len();
    let ch = MatrixPower::new(pair.h())?.at(c)?;
    let mut block = SquareMatrix::zeros(n * p, n * p);
    for i in 0..p {
        block.view_mut((i * n, i * n), (n, n)).copy_from(&ch);
    }
    let (cb, seb) = base.empirical_covariance();
    let (cs, ses) = scaled.empirical_covariance();
    let pred = &block * &cb * block.transpose();
    let abs_block = block.map(f64::abs);
    let se_pred = (&abs_block * seb.map(|v| v * v) * abs_block.transpose()).map(f64::sqrt);
    let mut worst = (0.0f64, (0, 0));
    for a in 0..n * p {
        for b in a..n * p {
            let se = (ses[(a, b)].powi(2) + se_pred[(a, b)].powi(2)).sqrt();
            let diff = (cs[(a, b)] - pred[(a, b)]).abs();
            if se == 0.0 {
                if diff > 0.0 {
                    worst = (f64::INFINITY, (a, b));
                }
                continue;
            }
            let z = diff / se;
            if z > worst.0 {
                worst = (z, (a, b));
            }
        }
    }
    Ok(SelfSimReport { max_deviation: worst.0, worst_entry: worst.1, pass: worst.0 <= 4.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcalc::validate_exponents;
    use crate::spectral::BuiltinProfile;

    fn iso(h: f64) -> SpectralModel {
        SpectralModel::from_builtin(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, h), &BuiltinProfile::Isotropic)
            .unwrap()
    }

    #[test]
    fn lattice_validation_and_parsing() {
        assert!(Lattice::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).is_err());
        assert!(Lattice::new(vec![vec![1.0, f64::NAN]]).is_err());
        let g = Lattice::parse("-1:1:3, 0:1:2").unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.points()[1], vec![-1.0, 1.0]);
        assert_eq!(g.shape(), Some(&[3usize, 2][..]));
        let e = Lattice::parse("1,0; 0,1").unwrap();
        assert_eq!(e.points(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(Lattice::parse("1,x").is_err());
    }

    #[test]
    fn pinned_origin_is_zero() {
        let m = iso(0.5);
        let lat = Lattice::new(vec![vec![0.0, 0.0]]).unwrap();
        let s = simulate_cholesky(&m, &lat, 5, 1).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cholesky_deterministic_and_seed_sensitive() {
        let m = iso(0.5);
        let lat = Lattice::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = simulate_cholesky(&m, &lat, 50, 7).unwrap();
        let b = simulate_cholesky(&m, &lat, 50, 7).unwrap();
        let c = simulate_cholesky(&m, &lat, 50, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn ofbf1_round_trip() {
        let m = iso(0.5);
        let lat = Lattice::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let s = simulate_cholesky(&m, &lat, 4, 3).unwrap();
        let mut buf = Vec::new();
        s.write_ofbf1(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"OFBF");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(buf.len(), 4 + 5 * 4 + 8 * (3 * 2 + 4 * 3));
        let back = FieldSample::read_ofbf1(&buf[..]).unwrap();
        assert_eq!(back.values, s.values);
        assert_eq!(back.lattice, Lattice::new(lat.points().to_vec()).unwrap());
        assert!(FieldSample::read_ofbf1(&b"NOPE"[..]).is_err());
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("replicate,point,t1,t2,x1\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 3);
    }

    #[test]
    fn frequency_grid_symmetry() {
        let g = FrequencyGrid::uniform(2, 4.0, 8).unwrap();
        let (pts, cells) = g.half_grid();
        assert_eq!(pts.len(), 32);
        assert!(cells.iter().all(|c| (*c - 1.0).abs() < 1e-15));
        let odd = FrequencyGrid::uniform(2, 4.0, 5).unwrap();
        assert_eq!(odd.half_grid().0.len(), 12);
        assert!(FrequencyGrid::from_axes(vec![vec![-1.0, 2.0]], vec![vec![1.0, 1.0]]).is_err());
        assert_eq!(g.box_half_widths(), vec![4.0, 4.0]);
    }

    #[test]
    fn spectral_sampler_basics() {
        let m = iso(0.4);
        let lat = Lattice::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let opts = SpectralOptions { grid: FrequencyGrid::uniform(2, 16.0, 32).unwrap(), replicates: 300, tail_closure: true };
        let a = simulate_spectral(&m, &lat, &opts, 11).unwrap();
        let b = simulate_spectral(&m, &lat, &opts, 11).unwrap();
        assert_eq!(a, b);
        for r in 0..a.replicates {
            assert_eq!(a.value(r, 0), &[0.0]);
        }
        assert!(a.values.iter().all(|v| v.is_finite()));
        // negating all normals flips the sign of every value and leaves second moments unchanged
        let (c, _) = a.empirical_covariance();
        let neg = FieldSample { values: a.values.iter().map(|v| -v).collect(), ..a.clone() };
        assert_eq!(neg.empirical_covariance().0, c);
    }

    #[test]
    fn spectral_rejects_non_real_filter() {
        let pair = validate_exponents(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, 0.4)).unwrap();
        let prof = crate::homog::SphericalProfile::scalar("cplx", 1, |t| C64::new(1.0, 0.3 * t[0]));
        let m = SpectralModel::new(pair, prof).unwrap();
        let lat = Lattice::new(vec![vec![1.0, 0.0]]).unwrap();
        let opts = SpectralOptions { grid: FrequencyGrid::uniform(2, 8.0, 16).unwrap(), replicates: 2, tail_closure: false };
        assert!(simulate_spectral(&m, &lat, &opts, 1).is_ok());
        // a filter with g(-x) ≠ conj(g(x)) cannot enter through SpectralModel::new
        let bad = crate::homog::SphericalProfile::scalar("odd", 1, |t| C64::new(1.0, 0.3 * t[0].abs()));
        let pair = validate_exponents(&SquareMatrix::identity(2, 2), &SquareMatrix::from_element(1, 1, 0.4)).unwrap();
        assert!(SpectralModel::new(pair, bad).is_err());
    }

    #[test]
    fn selfsim_identity_and_mismatch() {
        let m = iso(0.5);
        let lat = Lattice::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = simulate_cholesky(&m, &lat, 200, 5).unwrap();
        let rep = selfsim_test(&s, &s, m.pair(), 1.0).unwrap();
        assert_eq!(rep.max_deviation, 0.0);
        assert!(selfsim_test(&s, &s, m.pair(), 2.0).is_err());
    }

    #[test]
    fn jitter_policy() {
        let psd = SquareMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, eps) = jittered_cholesky(&psd).unwrap();
        assert!(eps > 0.0 && eps <= JITTER_MAX);
        let bad = SquareMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = jittered_cholesky(&bad).unwrap_err().to_string();
        assert!(err.contains("most negative eigenvalue"), "{err}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn product_grid_size_and_order(n1 in 1usize..6, n2 in 1usize..6, lo in -3.0f64..0.0, w in 0.5f64..4.0) {
            let g = Lattice::parse(&format!("{lo}:{}:{n1},{lo}:{}:{n2}", lo + w, lo + 2.0 * w)).unwrap();
            proptest::prop_assert_eq!(g.len(), n1 * n2);
            proptest::prop_assert_eq!(g.points()[0].clone(), vec![lo, lo]);
            let last = g.points()[n1 * n2 - 1].clone();
            let want = [if n1 > 1 { lo + w } else { lo }, if n2 > 1 { lo + 2.0 * w } else { lo }];
            proptest::prop_assert!((last[0] - want[0]).abs() < 1e-12 && (last[1] - want[1]).abs() < 1e-12);
        }

        #[test]
        fn ofbf1_round_trips_arbitrary_values(
            pts in proptest::collection::btree_set((-50i32..50, -50i32..50), 1..8),
            reps in 1usize..4,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let points: Vec<Vec<f64>> = pts.iter().map(|&(a, b)| vec![a as f64 * 0.25, b as f64 * 0.5]).collect();
            let lattice = Lattice::new(points).unwrap();
            let values: Vec<f64> = (0..lattice.len() * reps).map(|k| (k as f64 + 0.5).ln() * if k % 2 == 0 { 1.0 } else { -1e-3 }).collect();
            let s = FieldSample { lattice, n: 1, replicates: reps, values, seed, method: Method::Cholesky };
            let mut buf = Vec::new();
            s.write_ofbf1(&mut buf).unwrap();
            let back = FieldSample::read_ofbf1(&buf[..]).unwrap();
            proptest::prop_assert_eq!(back.values, s.values);
            proptest::prop_assert_eq!(back.lattice, s.lattice);
            proptest::prop_assert_eq!(back.replicates, reps);
        }
    }
}
