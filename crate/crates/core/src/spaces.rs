//! Haar system spaces `X`, `Y` and the bi-parameter Hardy spaces `Z(sigma, X, Y)`.

use crate::dyadic::{exp2i, haar_synthesis, level_of, DyadicInterval, StepFunction1D, StepFunction2D};
use crate::error::{Error, Result};
use crate::expectation::{self, Expectation, Field};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpaceKind {
    Lp(f64),
    Linf,
}

impl SpaceKind {
    pub fn lp(p: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(Error::InvalidSpec(format!("L{p}")));
        }
        Ok(SpaceKind::Lp(p))
    }

    /// Norm of a step function given by its cell values, each of measure `2^-depth`.
    pub fn norm_of(&self, values: &[f64], depth: u32) -> f64 {
        let w = exp2i(-(depth as i32));
        match *self {
            SpaceKind::Linf => values.iter().fold(0.0, |m, v| m.max(v.abs())),
            SpaceKind::Lp(p) if p == 1.0 => values.iter().map(|v| v.abs()).sum::<f64>() * w,
            SpaceKind::Lp(p) if p == 2.0 => (values.iter().map(|v| v * v).sum::<f64>() * w).sqrt(),
            SpaceKind::Lp(p) => (values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * w).powf(1.0 / p),
        }
    }

    /// `||chi_I||` which equals `||h_I||`.
    pub fn indicator_norm(&self, interval: &DyadicInterval) -> f64 {
        match *self {
            SpaceKind::Linf => 1.0,
            SpaceKind::Lp(p) => interval.measure().powf(1.0 / p),
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceKind::Linf => write!(f, "Linf"),
            SpaceKind::Lp(p) => write!(f, "L{p}"),
        }
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "Linf" {
            return Ok(SpaceKind::Linf);
        }
        let p = s
            .strip_prefix('L')
            .and_then(|r| r.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidSpec(s.to_string()))?;
        SpaceKind::lp(p).map_err(|_| Error::InvalidSpec(s.to_string()))
    }
}

/// Which tensor factors carry independent random signs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignRegime {
    pub first_independent: bool,
    pub second_independent: bool,
}

impl SignRegime {
    pub const S00: Self = Self { first_independent: false, second_independent: false };
    pub const S01: Self = Self { first_independent: false, second_independent: true };
    pub const S10: Self = Self { first_independent: true, second_independent: false };
    pub const S11: Self = Self { first_independent: true, second_independent: true };

    pub fn all() -> [Self; 4] {
        [Self::S00, Self::S01, Self::S10, Self::S11]
    }

    pub fn is_deterministic(&self) -> bool {
        !self.first_independent && !self.second_independent
    }
}

/// `Z(sigma, X, Y)`, written `s<ab>:<X>:<Y>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZSpec {
    pub regime: SignRegime,
    pub x: SpaceKind,
    pub y: SpaceKind,
}

impl ZSpec {
    pub fn new(regime: SignRegime, x: SpaceKind, y: SpaceKind) -> Self {
        Self { regime, x, y }
    }
}

impl fmt::Display for ZSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "s{}{}:{}:{}",
            self.regime.first_independent as u8, self.regime.second_independent as u8, self.x, self.y
        )
    }
}

impl FromStr for ZSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(s.to_string());
        let mut parts = s.split(':');
        let head = parts.next().ok_or_else(bad)?;
        let regime = match head {
            "s00" => SignRegime::S00,
            "s01" => SignRegime::S01,
            "s10" => SignRegime::S10,
            "s11" => SignRegime::S11,
            _ => return Err(bad()),
        };
        let x = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let y = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { regime, x, y })
    }
}

impl Serialize for ZSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ZSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Finite coefficient map `(I, J) -> a_{I,J}` keyed by iota pairs.
///
/// Zero coefficients are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoeffsJson", into = "CoeffsJson")]
pub struct Coeffs2D {
    max_level_first: u32,
    max_level_second: u32,
    entries: BTreeMap<(u64, u64), f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CoeffsJson {
    max_level_first: u32,
    max_level_second: u32,
    entries: Vec<(u64, u64, f64)>,
}

impl TryFrom<CoeffsJson> for Coeffs2D {
    type Error = Error;

    fn try_from(j: CoeffsJson) -> Result<Self> {
        let mut z = Coeffs2D::new(j.max_level_first, j.max_level_second);
        for (n, (i, k, a)) in j.entries.into_iter().enumerate() {
            if i == 0 || k == 0 {
                return Err(Error::InvalidArgument(format!("entries[{n}]: iota must be positive")));
            }
            if !a.is_finite() {
                return Err(Error::InvalidArgument(format!("entries[{n}]: coefficient is not finite")));
            }
            z.add_iota(i, k, a).map_err(|e| Error::InvalidArgument(format!("entries[{n}]: {e}")))?;
        }
        Ok(z)
    }
}

impl From<Coeffs2D> for CoeffsJson {
    fn from(z: Coeffs2D) -> Self {
        CoeffsJson {
            max_level_first: z.max_level_first,
            max_level_second: z.max_level_second,
            entries: z.entries.into_iter().map(|((i, k), a)| (i, k, a)).collect(),
        }
    }
}

impl Coeffs2D {
    pub fn new(max_level_first: u32, max_level_second: u32) -> Self {
        Self { max_level_first, max_level_second, entries: BTreeMap::new() }
    }

    pub fn single(i: DyadicInterval, j: DyadicInterval, a: f64) -> Self {
        let mut z = Self::new(i.level, j.level);
        z.entries.insert((i.iota(), j.iota()), a);
        z.entries.retain(|_, v| *v != 0.0);
        z
    }

    pub fn max_level_first(&self) -> u32 {
        self.max_level_first
    }

    pub fn max_level_second(&self) -> u32 {
        self.max_level_second
    }

    /// Same entries with (possibly larger) declared maxima.
    pub fn with_levels(mut self, first: u32, second: u32) -> Result<Self> {
        if let Some((a, b)) = self.actual_levels() {
            if a > first {
                return Err(Error::LevelOverflow { level: a, max: first });
            }
            if b > second {
                return Err(Error::LevelOverflow { level: b, max: second });
            }
        }
        self.max_level_first = first;
        self.max_level_second = second;
        Ok(self)
    }

    fn check(&self, iota_i: u64, iota_j: u64) -> Result<()> {
        let (li, lj) = (level_of(iota_i), level_of(iota_j));
        if li > self.max_level_first {
            return Err(Error::LevelOverflow { level: li, max: self.max_level_first });
        }
        if lj > self.max_level_second {
            return Err(Error::LevelOverflow { level: lj, max: self.max_level_second });
        }
        Ok(())
    }

    pub fn add(&mut self, i: DyadicInterval, j: DyadicInterval, a: f64) -> Result<()> {
        self.add_iota(i.iota(), j.iota(), a)
    }

    pub fn add_iota(&mut self, iota_i: u64, iota_j: u64, a: f64) -> Result<()> {
        self.check(iota_i, iota_j)?;
        let v = self.entries.entry((iota_i, iota_j)).or_insert(0.0);
        *v += a;
        if *v == 0.0 {
            self.entries.remove(&(iota_i, iota_j));
        }
        Ok(())
    }

    pub fn set_iota(&mut self, iota_i: u64, iota_j: u64, a: f64) -> Result<()> {
        self.check(iota_i, iota_j)?;
        if a == 0.0 {
            self.entries.remove(&(iota_i, iota_j));
        } else {
            self.entries.insert((iota_i, iota_j), a);
        }
        Ok(())
    }

    pub fn get(&self, i: DyadicInterval, j: DyadicInterval) -> f64 {
        self.get_iota(i.iota(), j.iota())
    }

    pub fn get_iota(&self, iota_i: u64, iota_j: u64) -> f64 {
        self.entries.get(&(iota_i, iota_j)).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &a)| (i, j, a))
    }

    /// Entries whose first iota equals `iota_i`.
    pub fn row(&self, iota_i: u64) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.entries.range((iota_i, 0)..(iota_i + 1, 0)).map(|(&(_, j), &a)| (j, a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest levels actually carrying a coefficient.
    pub fn actual_levels(&self) -> Option<(u32, u32)> {
        self.entries.keys().fold(None, |acc, &(i, j)| {
            let (a, b) = (level_of(i), level_of(j));
            Some(match acc {
                None => (a, b),
                Some((x, y)) => (x.max(a), y.max(b)),
            })
        })
    }

    pub fn firsts(&self) -> BTreeSet<u64> {
        self.entries.keys().map(|k| k.0).collect()
    }

    pub fn seconds(&self) -> BTreeSet<u64> {
        self.entries.keys().map(|k| k.1).collect()
    }

    pub fn filter(&self, keep: impl Fn(u64, u64) -> bool) -> Self {
        let mut out = Self::new(self.max_level_first, self.max_level_second);
        out.entries = self.entries.iter().filter(|(k, _)| keep(k.0, k.1)).map(|(k, v)| (*k, *v)).collect();
        out
    }

    pub fn map_values(&self, f: impl Fn(u64, u64, f64) -> f64) -> Self {
        let mut out = Self::new(self.max_level_first, self.max_level_second);
        for (&(i, j), &a) in &self.entries {
            let v = f(i, j, a);
            if v != 0.0 {
                out.entries.insert((i, j), v);
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map_values(|_, _, a| c * a)
    }

    /// Coefficient-wise sum; maxima are the larger of the two.
    pub fn plus(&self, other: &Self) -> Self {
        let mut out = Self::new(
            self.max_level_first.max(other.max_level_first),
            self.max_level_second.max(other.max_level_second),
        );
        out.entries = self.entries.clone();
        for (&(i, j), &a) in &other.entries {
            out.add_iota(i, j, a).expect("levels fit the joined maxima");
        }
        out
    }

    pub fn minus(&self, other: &Self) -> Self {
        self.plus(&other.scale(-1.0))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let keys: BTreeSet<_> = self.entries.keys().chain(other.entries.keys()).collect();
        keys.into_iter()
            .map(|&(i, j)| (self.get_iota(i, j) - other.get_iota(i, j)).abs())
            .fold(0.0, f64::max)
    }

    /// The function `sum a h_I(s) k_J(t)` on the square grid of side `2^depth`.
    pub fn to_grid(&self, depth: u32) -> Result<StepFunction2D> {
        if let Some((a, b)) = self.actual_levels() {
            let need = a.max(b) + 1;
            if depth < need {
                return Err(Error::GridTooCoarse { need, got: depth });
            }
        }
        let values = synthesize_2d(self, depth, depth, |_, _, a| a);
        StepFunction2D::new(depth, values)
    }
}

/// Dense 2D synthesis on a `2^n1 x 2^n2` grid, row-major over s-cells.
pub(crate) fn synthesize_2d(z: &Coeffs2D, n1: u32, n2: u32, coeff: impl Fn(u64, u64, f64) -> f64) -> Vec<f64> {
    let (r, c) = (1usize << n1, 1usize << n2);
    let mut grid = vec![0.0; r * c];
    for (i, j, a) in z.iter() {
        grid[i as usize * c + j as usize] = coeff(i, j, a);
    }
    synthesize_in_place(&mut grid, n1, n2);
    grid
}

pub(crate) fn synthesize_in_place(grid: &mut [f64], n1: u32, n2: u32) {
    let (r, c) = (1usize << n1, 1usize << n2);
    for row in grid.chunks_mut(c) {
        if row.iter().any(|v| *v != 0.0) {
            let out = haar_synthesis(row, n2);
            row.copy_from_slice(&out);
        }
    }
    let mut col = vec![0.0; r];
    for k in 0..c {
        for i in 0..r {
            col[i] = grid[i * c + k];
        }
        let out = haar_synthesis(&col, n1);
        for i in 0..r {
            grid[i * c + k] = out[i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMethod {
    ExactEnumeration,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NormEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: EvalMethod,
    pub samples: usize,
}

impl NormEstimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, method: EvalMethod::ExactEnumeration, samples: 0 }
    }
}

/// How the sign expectation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Exact when every grid cell sees at most `exact_threshold` sign variables.
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NormOptions {
    pub grid_depth: Option<u32>,
    pub method: Method,
    pub samples: usize,
    pub seed: u64,
    pub exact_threshold: u32,
}

impl Default for NormOptions {
    fn default() -> Self {
        Self { grid_depth: None, method: Method::Auto, samples: 2000, seed: 0, exact_threshold: 16 }
    }
}

impl NormOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }
}

pub fn x_norm(f: &StepFunction1D, x: SpaceKind) -> f64 {
    x.norm_of(&f.values, f.depth)
}

/// Mixed norm `|| s -> || t -> g(s,t) ||_Y ||_X` of a row-major grid.
pub fn mixed_norm(g: &[f64], n1: u32, n2: u32, x: SpaceKind, y: SpaceKind) -> f64 {
    let c = 1usize << n2;
    let rows: Vec<f64> = g.chunks(c).map(|row| y.norm_of(row, n2)).collect();
    x.norm_of(&rows, n1)
}

pub(crate) fn check_grid(z: &Coeffs2D, grid_depth: Option<u32>) -> Result<()> {
    let need = z.max_level_first().max(z.max_level_second()) + 1;
    if let Some(g) = grid_depth {
        if g < need {
            return Err(Error::GridTooCoarse { need, got: g });
        }
    }
    Ok(())
}

/// Smallest grid on which `z` is exactly represented; norms do not depend on refinement.
pub(crate) fn native_dims(z: &Coeffs2D) -> Option<(u32, u32)> {
    z.actual_levels().map(|(a, b)| (a + 1, b + 1))
}

/// `|| E | sum sigma_I sigma_J a_{I,J} h_I(s) k_J(t) | ||_{X(Y)}`.
pub fn z_norm(z: &Coeffs2D, spec: &ZSpec, opts: &NormOptions) -> Result<NormEstimate> {
    check_grid(z, opts.grid_depth)?;
    let Some((n1, n2)) = native_dims(z) else {
        return Ok(NormEstimate::exact(0.0));
    };
    let field = Field { layers: vec![z], weights: vec![None], n1, n2 };
    estimate_field_norm(&field, spec, opts)
}

pub(crate) fn estimate_field_norm(field: &Field<'_>, spec: &ZSpec, opts: &NormOptions) -> Result<NormEstimate> {
    let (n1, n2) = (field.n1, field.n2);
    match expectation::expected_abs(field, spec.regime, opts)? {
        Expectation::Exact(g) => Ok(NormEstimate::exact(mixed_norm(&g, n1, n2, spec.x, spec.y))),
        Expectation::Sampled { mean, batches, samples } => {
            let value = mixed_norm(&mean, n1, n2, spec.x, spec.y);
            let norms: Vec<f64> = batches.iter().map(|b| mixed_norm(b, n1, n2, spec.x, spec.y)).collect();
            let k = norms.len() as f64;
            let std_error = if norms.len() > 1 {
                let m = norms.iter().sum::<f64>() / k;
                let var = norms.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0);
                (var / k).sqrt()
            } else {
                0.0
            };
            Ok(NormEstimate { value, std_error, method: EvalMethod::MonteCarlo, samples })
        }
    }
}

/// `sum a'_{I,J} a_{I,J} |I||J|`.
pub fn scalar_product(zprime: &Coeffs2D, z: &Coeffs2D) -> f64 {
    let (small, large) = if zprime.len() <= z.len() { (zprime, z) } else { (z, zprime) };
    small
        .iter()
        .map(|(i, j, a)| {
            let b = large.get_iota(i, j);
            a * b * exp2i(-((level_of(i) + level_of(j)) as i32))
        })
        .sum()
}

/// Regime-appropriate (partial) square function norm in `X(Y)`.
pub fn square_surrogate_norm(z: &Coeffs2D, spec: &ZSpec, grid_depth: Option<u32>) -> Result<f64> {
    if spec.regime.is_deterministic() {
        return Err(Error::NoSurrogate);
    }
    check_grid(z, grid_depth)?;
    let Some((n1, n2)) = native_dims(z) else {
        return Ok(0.0);
    };
    let field = Field { layers: vec![z], weights: vec![None], n1, n2 };
    let g = expectation::square_function(&field, spec.regime);
    Ok(mixed_norm(&g, n1, n2, spec.x, spec.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::haar_step;

    fn iv(level: u32, index: u64) -> DyadicInterval {
        DyadicInterval::new(level, index).unwrap()
    }

    fn exact() -> NormOptions {
        NormOptions::default()
    }

    #[test]
    fn spec_grammar_round_trip() {
        for s in ["s00:L1:L2", "s11:Linf:L1", "s01:L1.5:L3", "s10:L2:Linf"] {
            let z: ZSpec = s.parse().unwrap();
            assert_eq!(z.to_string(), s);
        }
        for s in ["s02:L1:L1", "s00:L0.5:L1", "s00:L1", "s00:Lx:L1", "s00:L1:L1:L1", "s00:Linfinity:L1"] {
            assert!(s.parse::<ZSpec>().is_err(), "{s}");
        }
    }

    #[test]
    fn x_norm_examples() {
        for x in [SpaceKind::Lp(1.0), SpaceKind::Lp(3.0), SpaceKind::Linf] {
            assert_eq!(x_norm(&StepFunction1D::constant(3, 1.0), x), 1.0);
        }
        let h = haar_step(iv(2, 1), 5).unwrap();
        assert!((x_norm(&h, SpaceKind::Lp(2.0)) - 0.5).abs() < 1e-15);
        assert!((x_norm(&h, SpaceKind::Lp(3.0)) - 0.25f64.powf(1.0 / 3.0)).abs() < 1e-15);
        let f = haar_step(DyadicInterval::root(), 2).unwrap().add(&haar_step(iv(1, 0), 2).unwrap()).unwrap();
        assert_eq!(x_norm(&f, SpaceKind::Lp(1.0)), 1.0);
    }

    #[test]
    fn single_term_norm_is_product() {
        let (i, j) = (iv(1, 1), iv(2, 2));
        let z = Coeffs2D::single(i, j, -1.5);
        for regime in SignRegime::all() {
            for (x, y) in [(SpaceKind::Lp(1.0), SpaceKind::Lp(2.0)), (SpaceKind::Linf, SpaceKind::Lp(3.0))] {
                let spec = ZSpec::new(regime, x, y);
                let est = z_norm(&z, &spec, &exact()).unwrap();
                let want = 1.5 * x.indicator_norm(&i) * y.indicator_norm(&j);
                assert!((est.value - want).abs() < 1e-14, "{spec}: {} vs {want}", est.value);
                assert_eq!(est.method, EvalMethod::ExactEnumeration);
            }
        }
    }

    #[test]
    fn l2_norm_is_orthogonal_sum() {
        let mut z = Coeffs2D::new(2, 2);
        z.add(iv(0, 0), iv(0, 0), 1.0).unwrap();
        z.add(iv(1, 1), iv(0, 0), -2.0).unwrap();
        z.add(iv(2, 3), iv(1, 0), 0.5).unwrap();
        z.add(iv(1, 0), iv(2, 1), 3.0).unwrap();
        let spec: ZSpec = "s00:L2:L2".parse().unwrap();
        let est = z_norm(&z, &spec, &exact()).unwrap();
        let want: f64 = z.iter().map(|(i, j, a)| a * a * exp2i(-((level_of(i) + level_of(j)) as i32))).sum();
        assert!((est.value - want.sqrt()).abs() < 1e-12);
        let g = z.to_grid(3).unwrap();
        let direct = (g.values.iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
        assert!((est.value - direct).abs() < 1e-12);
    }

    #[test]
    fn s11_matches_brute_force_over_sign_patterns() {
        let mut z = Coeffs2D::new(1, 1);
        z.add(iv(0, 0), iv(0, 0), 1.0).unwrap();
        z.add(iv(1, 0), iv(1, 0), 1.0).unwrap();
        let spec: ZSpec = "s11:L1:L1".parse().unwrap();
        let est = z_norm(&z, &spec, &exact()).unwrap();
        // enumerate sigma_root, sigma_left, tau_root, tau_left on a depth-2 grid
        let mut acc = vec![0.0; 16];
        for bits in 0..16u32 {
            let s = |b: u32| if bits >> b & 1 == 1 { -1.0 } else { 1.0 };
            let mut w = Coeffs2D::new(1, 1);
            w.add(iv(0, 0), iv(0, 0), s(0) * s(2)).unwrap();
            w.add(iv(1, 0), iv(1, 0), s(1) * s(3)).unwrap();
            let g = w.to_grid(2).unwrap();
            for (a, v) in acc.iter_mut().zip(&g.values) {
                *a += v.abs() / 16.0;
            }
        }
        let brute = acc.iter().sum::<f64>() / 16.0;
        assert!((est.value - brute).abs() < 1e-14);
        let sq = square_surrogate_norm(&z, &spec, None).unwrap();
        assert!(sq / 2f64.sqrt() <= est.value + 1e-12 && est.value <= sq + 1e-12);
    }

    #[test]
    fn scalar_product_examples() {
        let (r, l) = (iv(0, 0), iv(1, 0));
        let a = Coeffs2D::single(l, iv(2, 1), 1.0);
        assert_eq!(scalar_product(&a, &a), 0.5 * 0.25);
        assert_eq!(scalar_product(&a, &Coeffs2D::single(r, iv(2, 1), 1.0)), 0.0);
        let mut z = Coeffs2D::new(1, 0);
        z.add(r, r, 2.0).unwrap();
        z.add(l, r, 3.0).unwrap();
        let w = Coeffs2D::single(l, r, 1.0).with_levels(1, 0).unwrap();
        assert_eq!(scalar_product(&z, &w), 1.5);
        let gz = z.to_grid(2).unwrap();
        let gw = w.to_grid(2).unwrap();
        let integral: f64 = gz.values.iter().zip(&gw.values).map(|(a, b)| a * b).sum::<f64>() / 16.0;
        assert_eq!(integral, 1.5);
    }

    #[test]
    fn surrogate_rejects_s00() {
        let z = Coeffs2D::single(iv(0, 0), iv(0, 0), 1.0);
        assert_eq!(square_surrogate_norm(&z, &"s00:L1:L1".parse().unwrap(), None), Err(Error::NoSurrogate));
    }

    #[test]
    fn surrogate_disjoint_levels_matches_grid() {
        let mut z = Coeffs2D::new(2, 2);
        for l in 0..=2u32 {
            z.add(iv(l, 0), iv(l, (1u64 << l) - 1), 1.0).unwrap();
        }
        let spec: ZSpec = "s11:L1:L1".parse().unwrap();
        let sq = square_surrogate_norm(&z, &spec, None).unwrap();
        let depth = 3;
        let mut acc = vec![0.0; 64];
        for (i, j, _) in z.iter() {
            let h = haar_step(DyadicInterval::from_iota(i).unwrap(), depth).unwrap();
            let k = haar_step(DyadicInterval::from_iota(j).unwrap(), depth).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    acc[r * 8 + c] += (h.values[r] * k.values[c]).powi(2);
                }
            }
        }
        let want = acc.iter().map(|v| v.sqrt()).sum::<f64>() / 64.0;
        assert!((sq - want).abs() < 1e-14);
    }

    #[test]
    fn grid_too_coarse() {
        let z = Coeffs2D::single(iv(3, 0), iv(0, 0), 1.0);
        let opts = NormOptions { grid_depth: Some(3), ..Default::default() };
        let spec: ZSpec = "s00:L1:L1".parse().unwrap();
        assert_eq!(z_norm(&z, &spec, &opts), Err(Error::GridTooCoarse { need: 4, got: 3 }));
    }

    #[test]
    fn monte_carlo_zero_samples_rejected() {
        let z = Coeffs2D::single(iv(0, 0), iv(0, 0), 1.0);
        let opts = NormOptions { method: Method::MonteCarlo, samples: 0, ..Default::default() };
        assert_eq!(z_norm(&z, &"s11:L1:L1".parse().unwrap(), &opts), Err(Error::ZeroSamples));
    }

    #[test]
    fn json_round_trip() {
        let mut z = Coeffs2D::new(2, 3);
        z.add(iv(1, 1), iv(3, 5), 0.25).unwrap();
        z.add(iv(0, 0), iv(0, 0), -1.0).unwrap();
        let s = serde_json::to_string(&z).unwrap();
        assert!(s.contains("\"maxLevelFirst\":2"));
        let back: Coeffs2D = serde_json::from_str(&s).unwrap();
        assert_eq!(back, z);
        let bad = r#"{"maxLevelFirst":0,"maxLevelSecond":0,"entries":[[2,1,1.0]]}"#;
        assert!(serde_json::from_str::<Coeffs2D>(bad).is_err());
    }
}
