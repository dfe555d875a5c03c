//! Run configuration: flat `key = value` text with dotted keys and `#` comments.
//!
//! ```text
//! model.E = [[0.8, 0], [0, 1.2]]
//! model.H = [[0.3]]
//! model.profile = elliptic(1, 2)
//! quadrature.rel_tol = 1e-6
//! seed = 7
//! output.format = csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ofbf::matcalc::{validate_exponents, SquareMatrix};
use ofbf::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ProfileSpec {
    Isotropic,
    Elliptic { a: f64, b: f64 },
    Counterexample { d: f64 },
    Quasinorm,
    Csv(PathBuf),
}

impl ProfileSpec {
    fn parse(raw: &str) -> Result<Self> {
        let s = raw.trim();
        let args = |name: &str| -> Result<Vec<f64>> {
            let inner = s[name.len()..].trim();
            let inner = inner
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| Error::Validation(format!("model.profile: expected {name}(...), got `{s}`")))?;
            inner
                .split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| Error::Validation(format!("model.profile: bad number `{}`", a.trim()))))
                .collect()
        };
        if s == "isotropic" {
            Ok(ProfileSpec::Isotropic)
        } else if s == "quasinorm" {
            Ok(ProfileSpec::Quasinorm)
        } else if s.starts_with("elliptic") {
            match args("elliptic")?[..] {
                [a, b] => Ok(ProfileSpec::Elliptic { a, b }),
                _ => Err(Error::Validation("model.profile: elliptic takes two parameters (a, b)".into())),
            }
        } else if s.starts_with("counterexample") {
            match args("counterexample")?[..] {
                [d] => Ok(ProfileSpec::Counterexample { d }),
                _ => Err(Error::Validation("model.profile: counterexample takes one parameter (d)".into())),
            }
        } else if let Some(path) = s.strip_prefix("csv:") {
            Ok(ProfileSpec::Csv(PathBuf::from(path.trim())))
        } else {
            Err(Error::Validation(format!(
                "model.profile: unknown profile `{s}` (isotropic, elliptic(a,b), counterexample(d), quasinorm, csv:<path>)"
            )))
        }
    }

    fn render(&self) -> String {
        match self {
            ProfileSpec::Isotropic => "isotropic".into(),
            ProfileSpec::Elliptic { a, b } => format!("elliptic({a}, {b})"),
            ProfileSpec::Counterexample { d } => format!("counterexample({d})"),
            ProfileSpec::Quasinorm => "quasinorm".into(),
            ProfileSpec::Csv(p) => format!("csv:{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Ofbf1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GTildeSource {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureConfig {
    pub rel_tol: f64,
    pub radial_rel_tol: f64,
    pub angular_level: u32,
    pub max_angular_level: u32,
    /// Spectral sampler: nodes per axis and box half-width.
    pub grid_nodes: usize,
    pub grid_radius: f64,
    pub tail_closure: bool,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            rel_tol: 1e-6,
            radial_rel_tol: 1e-9,
            angular_level: 3,
            max_angular_level: 6,
            grid_nodes: 256,
            grid_radius: 64.0,
            tail_closure: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub m: usize,
    pub n: usize,
    pub e: SquareMatrix,
    pub h: SquareMatrix,
    pub profile: ProfileSpec,
    pub quadrature: QuadratureConfig,
    pub g_tilde: GTildeSource,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
}

const KEYS: &[&str] = &[
    "model.m",
    "model.n",
    "model.E",
    "model.H",
    "model.profile",
    "quadrature.rel_tol",
    "quadrature.radial_rel_tol",
    "quadrature.angular_level",
    "quadrature.max_angular_level",
    "quadrature.grid_nodes",
    "quadrature.grid_radius",
    "quadrature.tail_closure",
    "kernel.g_tilde",
    "seed",
    "output.path",
    "output.format",
];

/// `[[a, b], [c, d]]`; a bare number is a 1×1 matrix.
pub fn parse_matrix(key: &str, raw: &str) -> Result<SquareMatrix> {
    let raw = raw.trim();
    if let Ok(x) = raw.parse::<f64>() {
        return Ok(SquareMatrix::from_element(1, 1, x));
    }
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(raw).map_err(|e| Error::Validation(format!("{key}: expected a matrix like [[1, 0], [0, 1]]: {e}")))?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::Validation(format!("{key}: empty matrix")));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(Error::Validation(format!("{key}: row {} has {} entries, expected {n} (square matrix)", i + 1, r.len())));
        }
    }
    Ok(SquareMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn render_matrix(m: &SquareMatrix) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| format!("[{}]", (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Validation(format!("{key}: cannot parse `{}`", raw.trim())))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Validation(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Validation(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let require = |k: &str| get(k).ok_or_else(|| Error::Validation(format!("{k}: missing")));
        let e = parse_matrix("model.E", require("model.E")?)?;
        let h = parse_matrix("model.H", require("model.H")?)?;
        let m = match get("model.m") {
            Some(v) => parse_num::<usize>("model.m", v)?,
            None => e.nrows(),
        };
        let n = match get("model.n") {
            Some(v) => parse_num::<usize>("model.n", v)?,
            None => h.nrows(),
        };
        if m != e.nrows() {
            return Err(Error::Validation(format!("model.E: is {0}x{0} but model.m = {m}", e.nrows())));
        }
        if n != h.nrows() {
            return Err(Error::Validation(format!("model.H: is {0}x{0} but model.n = {n}", h.nrows())));
        }
        validate_exponents(&e, &h).map_err(|err| Error::Validation(format!("model.E/model.H: {err}")))?;
        let profile = ProfileSpec::parse(get("model.profile").unwrap_or("isotropic"))?;
        let d = QuadratureConfig::default();
        let quadrature = QuadratureConfig {
            rel_tol: get("quadrature.rel_tol").map(|v| parse_num("quadrature.rel_tol", v)).transpose()?.unwrap_or(d.rel_tol),
            radial_rel_tol: get("quadrature.radial_rel_tol")
                .map(|v| parse_num("quadrature.radial_rel_tol", v))
                .transpose()?
                .unwrap_or(d.radial_rel_tol),
            angular_level: get("quadrature.angular_level")
                .map(|v| parse_num("quadrature.angular_level", v))
                .transpose()?
                .unwrap_or(d.angular_level),
            max_angular_level: get("quadrature.max_angular_level")
                .map(|v| parse_num("quadrature.max_angular_level", v))
                .transpose()?
                .unwrap_or(d.max_angular_level),
            grid_nodes: get("quadrature.grid_nodes").map(|v| parse_num("quadrature.grid_nodes", v)).transpose()?.unwrap_or(d.grid_nodes),
            grid_radius: get("quadrature.grid_radius")
                .map(|v| parse_num("quadrature.grid_radius", v))
                .transpose()?
                .unwrap_or(d.grid_radius),
            tail_closure: get("quadrature.tail_closure")
                .map(|v| parse_num("quadrature.tail_closure", v))
                .transpose()?
                .unwrap_or(d.tail_closure),
        };
        if !(quadrature.rel_tol > 0.0 && quadrature.radial_rel_tol > 0.0) {
            return Err(Error::Validation("quadrature.rel_tol: tolerances must be positive".into()));
        }
        if quadrature.max_angular_level < quadrature.angular_level {
            return Err(Error::Validation("quadrature.max_angular_level: must be at least quadrature.angular_level".into()));
        }
        let g_tilde = match get("kernel.g_tilde").unwrap_or("analytic") {
            "analytic" => GTildeSource::Analytic,
            "finite_difference" => GTildeSource::FiniteDifference,
            other => return Err(Error::Validation(format!("kernel.g_tilde: expected analytic or finite_difference, got `{other}`"))),
        };
        let seed = get("seed").map(|v| parse_num::<u64>("seed", v)).transpose()?.unwrap_or(0);
        let output_format = match get("output.format").unwrap_or("ofbf1") {
            "csv" => OutputFormat::Csv,
            "ofbf1" => OutputFormat::Ofbf1,
            other => return Err(Error::Validation(format!("output.format: expected csv or ofbf1, got `{other}`"))),
        };
        let cfg = RunConfig {
            m,
            n,
            e,
            h,
            profile,
            quadrature,
            g_tilde,
            seed,
            output_path: get("output.path").map(PathBuf::from),
            output_format,
        };
        cfg.check_profile()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        // relative profile paths are resolved against the config file
        if let ProfileSpec::Csv(p) = &cfg.profile {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.profile = ProfileSpec::Csv(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    fn check_profile(&self) -> Result<()> {
        match &self.profile {
            ProfileSpec::Elliptic { a, b } if !(*a > 0.0 && *b > 0.0) => {
                Err(Error::Validation(format!("model.profile: elliptic needs a, b > 0, got ({a}, {b})")))
            }
            ProfileSpec::Elliptic { .. } | ProfileSpec::Csv(_) if self.m != 2 => {
                Err(Error::Validation(format!("model.profile: {} needs m = 2", self.profile.render())))
            }
            ProfileSpec::Counterexample { d } => {
                if !(*d > -0.5 && *d < 0.5) {
                    return Err(Error::Validation(format!("model.profile: counterexample needs d in (-1/2, 1/2), got {d}")));
                }
                let identity = self.m == 2 && self.e == SquareMatrix::identity(2, 2);
                if !identity || self.n != 1 || (self.h[(0, 0)] - (d + 0.5)).abs() > 1e-12 {
                    return Err(Error::Validation(format!(
                        "model.profile: counterexample({d}) needs model.E = I (2x2) and model.H = [[{}]]",
                        d + 0.5
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Serializes every key, so that `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let q = &self.quadrature;
        let mut s = String::new();
        let _ = writeln!(s, "model.m = {}", self.m);
        let _ = writeln!(s, "model.n = {}", self.n);
        let _ = writeln!(s, "model.E = {}", render_matrix(&self.e));
        let _ = writeln!(s, "model.H = {}", render_matrix(&self.h));
        let _ = writeln!(s, "model.profile = {}", self.profile.render());
        let _ = writeln!(s, "quadrature.rel_tol = {:e}", q.rel_tol);
        let _ = writeln!(s, "quadrature.radial_rel_tol = {:e}", q.radial_rel_tol);
        let _ = writeln!(s, "quadrature.angular_level = {}", q.angular_level);
        let _ = writeln!(s, "quadrature.max_angular_level = {}", q.max_angular_level);
        let _ = writeln!(s, "quadrature.grid_nodes = {}", q.grid_nodes);
        let _ = writeln!(s, "quadrature.grid_radius = {}", q.grid_radius);
        let _ = writeln!(s, "quadrature.tail_closure = {}", q.tail_closure);
        let _ = writeln!(
            s,
            "kernel.g_tilde = {}",
            match self.g_tilde {
                GTildeSource::Analytic => "analytic",
                GTildeSource::FiniteDifference => "finite_difference",
            }
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(p) = &self.output_path {
            let _ = writeln!(s, "output.path = {}", p.display());
        }
        let _ = writeln!(
            s,
            "output.format = {}",
            match self.output_format {
                OutputFormat::Csv => "csv",
                OutputFormat::Ofbf1 => "ofbf1",
            }
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "# anisotropic model\nmodel.E = [[0.8, 0], [0, 1.2]]\nmodel.H = 0.3   # scalar\nmodel.profile = elliptic(1, 2.5)\nseed = 11\n";

    #[test]
    fn parses_and_round_trips() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!((c.m, c.n, c.seed), (2, 1, 11));
        assert_eq!(c.profile, ProfileSpec::Elliptic { a: 1.0, b: 2.5 });
        assert_eq!(c.e[(1, 1)], 1.2);
        let again = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = SAMPLE.replace("[[0.8, 0], [0, 1.2]]", "[[0.8, 0], [0, 1.2, 3]]");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("model.E"), "{err}");
        let err = RunConfig::parse("model.E = 1\nmodel.H = 1.2\n").unwrap_err().to_string();
        assert!(err.contains("model.E/model.H"), "{err}");
        let err = RunConfig::parse("model.E = 1\nmodel.H = 0.3\nmodel.q = 2\n").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
        let err = RunConfig::parse("model.E = 1\nmodel.H = 0.3\nmodel.profile = wavy\n").unwrap_err().to_string();
        assert!(err.contains("model.profile"), "{err}");
    }

    #[test]
    fn counterexample_needs_matching_exponents() {
        let ok = "model.E = [[1,0],[0,1]]\nmodel.H = 0.75\nmodel.profile = counterexample(0.25)\n";
        assert_eq!(RunConfig::parse(ok).unwrap().profile, ProfileSpec::Counterexample { d: 0.25 });
        assert!(RunConfig::parse(&ok.replace("0.75", "0.5")).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn render_parse_round_trip(
            e1 in 0.5f64..2.0, e2 in 0.5f64..2.0, off in -0.3f64..0.3,
            h in 0.05f64..0.45, a in 0.1f64..5.0, b in 0.1f64..5.0,
            seed in proptest::prelude::any::<u64>(), pick in 0usize..3, rel_tol in 1e-10f64..1e-3,
        ) {
            let profile = match pick {
                0 => "isotropic".to_string(),
                1 => format!("elliptic({a}, {b})"),
                _ => "quasinorm".to_string(),
            };
            let text = format!(
                "model.E = [[{e1}, {off}], [0, {e2}]]\nmodel.H = {h}\nmodel.profile = {profile}\nseed = {seed}\nquadrature.rel_tol = {rel_tol}\n"
            );
            let c = RunConfig::parse(&text).unwrap();
            proptest::prop_assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        }
    }
}
