//! Haar multipliers: entries, pavement averages, lambda/mu, variation norms,
//! the Capon projection and the canonical operators.

use crate::dyadic::{exp2i, level_of, DyadicInterval, StepFunction2D};
use crate::error::{Error, Result};
use crate::expectation::Field;
use crate::hash;
use crate::spaces::{self, Coeffs2D, NormOptions, ZSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum Backing2D {
    /// Row-major by iota pair, row stride `2^(maxLevelSecond + 1)`.
    Dense(Vec<f64>),
    /// `matrix[i][j]` is the entry on `D_i x D_j`.
    Level(Vec<Vec<f64>>),
    Seeded { seed: u64, amplitude: f64 },
}

/// Bi-parameter Haar multiplier `(I, J) -> d_{I,J}` up to declared levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MultiplierJson", into = "MultiplierJson")]
pub struct Multiplier2D {
    backing: Backing2D,
    max_first: u32,
    max_second: u32,
}

impl Multiplier2D {
    pub fn level(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let rows = matrix.len();
        let cols = matrix.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || matrix.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("level matrix must be rectangular and non-empty".into()));
        }
        Ok(Self { backing: Backing2D::Level(matrix), max_first: rows as u32 - 1, max_second: cols as u32 - 1 })
    }

    pub fn level_fn(max_first: u32, max_second: u32, f: impl Fn(u32, u32) -> f64) -> Self {
        let matrix = (0..=max_first).map(|i| (0..=max_second).map(|j| f(i, j)).collect()).collect();
        Self { backing: Backing2D::Level(matrix), max_first, max_second }
    }

    pub fn identity(max_first: u32, max_second: u32) -> Self {
        Self::level_fn(max_first, max_second, |_, _| 1.0)
    }

    /// Keeps exactly the pairs with `level(I) >= level(J)`.
    pub fn capon(max_first: u32, max_second: u32) -> Self {
        Self::level_fn(max_first, max_second, |i, j| if i >= j { 1.0 } else { 0.0 })
    }

    /// `lambda * C + mu * (Id - C)`.
    pub fn capon_pattern(max_first: u32, max_second: u32, lambda: f64, mu: f64) -> Self {
        Self::level_fn(max_first, max_second, |i, j| if i >= j { lambda } else { mu })
    }

    pub fn seeded(seed: u64, amplitude: f64, max_first: u32, max_second: u32) -> Self {
        Self { backing: Backing2D::Seeded { seed, amplitude }, max_first, max_second }
    }

    pub fn dense_fn(max_first: u32, max_second: u32, f: impl Fn(DyadicInterval, DyadicInterval) -> f64) -> Self {
        let stride = 1usize << (max_second + 1);
        let mut data = vec![0.0; (1usize << (max_first + 1)) * stride];
        for li in 0..=max_first {
            for i in DyadicInterval::level_intervals(li) {
                for lj in 0..=max_second {
                    for j in DyadicInterval::level_intervals(lj) {
                        data[i.iota() as usize * stride + j.iota() as usize] = f(i, j);
                    }
                }
            }
        }
        Self { backing: Backing2D::Dense(data), max_first, max_second }
    }

    /// Dense multiplier from iota-indexed rows; missing entries are zero.
    pub fn dense_from_entries(max_first: u32, max_second: u32, entries: &[(u64, u64, f64)]) -> Result<Self> {
        let stride = 1usize << (max_second + 1);
        let mut data = vec![0.0; (1usize << (max_first + 1)) * stride];
        for &(i, j, d) in entries {
            if i == 0 || j == 0 {
                return Err(Error::InvalidArgument("iota must be positive".into()));
            }
            let (li, lj) = (level_of(i), level_of(j));
            if li > max_first {
                return Err(Error::LevelOverflow { level: li, max: max_first });
            }
            if lj > max_second {
                return Err(Error::LevelOverflow { level: lj, max: max_second });
            }
            data[i as usize * stride + j as usize] = d;
        }
        Ok(Self { backing: Backing2D::Dense(data), max_first, max_second })
    }

    pub fn backing(&self) -> &Backing2D {
        &self.backing
    }

    pub fn max_first(&self) -> u32 {
        self.max_first
    }

    pub fn max_second(&self) -> u32 {
        self.max_second
    }

    pub fn is_seeded(&self) -> bool {
        matches!(self.backing, Backing2D::Seeded { .. })
    }

    fn check_levels(&self, li: u32, lj: u32) -> Result<()> {
        if li > self.max_first {
            return Err(Error::LevelOverflow { level: li, max: self.max_first });
        }
        if lj > self.max_second {
            return Err(Error::LevelOverflow { level: lj, max: self.max_second });
        }
        Ok(())
    }

    pub fn entry(&self, i: DyadicInterval, j: DyadicInterval) -> Result<f64> {
        self.check_levels(i.level, j.level)?;
        Ok(self.at_iota(i.iota(), j.iota()))
    }

    /// Unchecked entry by iota pair.
    #[inline]
    pub fn at_iota(&self, iota_i: u64, iota_j: u64) -> f64 {
        match &self.backing {
            Backing2D::Dense(data) => data[iota_i as usize * (1usize << (self.max_second + 1)) + iota_j as usize],
            Backing2D::Level(m) => m[level_of(iota_i) as usize][level_of(iota_j) as usize],
            Backing2D::Seeded { seed, amplitude } => amplitude * hash::unit_symmetric(hash::hash3(*seed, iota_i, iota_j)),
        }
    }

    /// Unchecked entry by `(level, index)` pairs.
    #[inline]
    pub fn at(&self, li: u32, ii: u64, lj: u32, ij: u64) -> f64 {
        self.at_iota((1u64 << li) + ii, (1u64 << lj) + ij)
    }

    pub fn sup_norm(&self) -> f64 {
        match &self.backing {
            Backing2D::Dense(data) => self.dense_values(data).fold(0.0, |m, v| m.max(v.abs())),
            Backing2D::Level(m) => m.iter().flatten().fold(0.0, |a, v| a.max(v.abs())),
            Backing2D::Seeded { amplitude, .. } => amplitude.abs(),
        }
    }

    fn dense_values<'a>(&'a self, data: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let stride = 1usize << (self.max_second + 1);
        (1..1usize << (self.max_first + 1)).flat_map(move |i| (1..stride).map(move |j| data[i * stride + j]))
    }

    /// Dense copy restricted to the given maxima.
    pub fn to_dense(&self, max_first: u32, max_second: u32) -> Result<Self> {
        self.check_levels(max_first, max_second)?;
        Ok(Self::dense_fn(max_first, max_second, |i, j| self.at_iota(i.iota(), j.iota())))
    }

    /// Dense entry list `(iota_I, iota_J, d)` with zeros omitted.
    pub fn dense_entries(&self) -> Vec<(u64, u64, f64)> {
        let mut out = Vec::new();
        for i in 1..1u64 << (self.max_first + 1) {
            for j in 1..1u64 << (self.max_second + 1) {
                let d = self.at_iota(i, j);
                if d != 0.0 {
                    out.push((i, j, d));
                }
            }
        }
        out
    }

    /// `alpha * self + beta * other`, level-homogeneous when both are.
    pub fn lin_comb(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        let (m1, m2) = (self.max_first.min(other.max_first), self.max_second.min(other.max_second));
        if let (Backing2D::Level(a), Backing2D::Level(b)) = (&self.backing, &other.backing) {
            return Ok(Self::level_fn(m1, m2, |i, j| alpha * a[i as usize][j as usize] + beta * b[i as usize][j as usize]));
        }
        Ok(Self::dense_fn(m1, m2, |i, j| {
            alpha * self.at_iota(i.iota(), j.iota()) + beta * other.at_iota(i.iota(), j.iota())
        }))
    }

    /// Entries minus the `lambda C + mu (Id - C)` pattern.
    pub fn residual(&self, lambda: f64, mu: f64) -> Result<Self> {
        self.lin_comb(1.0, &Self::capon_pattern(self.max_first, self.max_second, lambda, mu), -1.0)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct MultiplierJson {
    kind: String,
    max_level_first: u32,
    max_level_second: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    entries: Option<Vec<(u64, u64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    amplitude: Option<f64>,
}

impl TryFrom<MultiplierJson> for Multiplier2D {
    type Error = Error;

    fn try_from(j: MultiplierJson) -> Result<Self> {
        let (m1, m2) = (j.max_level_first, j.max_level_second);
        let missing = |f: &str| Error::InvalidArgument(format!("kind `{}` requires field `{f}`", j.kind));
        match j.kind.as_str() {
            "dense" => {
                if m1 > 14 || m2 > 14 || m1 + m2 > 24 {
                    return Err(Error::InvalidArgument("dense multipliers are limited to levels summing to 24".into()));
                }
                let entries = j.entries.as_ref().ok_or_else(|| missing("entries"))?;
                Multiplier2D::dense_from_entries(m1, m2, entries)
            }
            "level" => {
                let matrix = j.matrix.clone().ok_or_else(|| missing("matrix"))?;
                let d = Multiplier2D::level(matrix)?;
                if d.max_first != m1 || d.max_second != m2 {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is {}x{}, expected {}x{}",
                        d.max_first + 1,
                        d.max_second + 1,
                        m1 + 1,
                        m2 + 1
                    )));
                }
                Ok(d)
            }
            "seeded" => {
                let seed = j.seed.ok_or_else(|| missing("seed"))?;
                let amplitude = j.amplitude.ok_or_else(|| missing("amplitude"))?;
                if !amplitude.is_finite() {
                    return Err(Error::InvalidArgument("amplitude must be finite".into()));
                }
                Ok(Multiplier2D::seeded(seed, amplitude, m1, m2))
            }
            other => Err(Error::InvalidArgument(format!("unknown multiplier kind `{other}`"))),
        }
    }
}

impl From<Multiplier2D> for MultiplierJson {
    fn from(d: Multiplier2D) -> Self {
        let mut j = MultiplierJson {
            kind: String::new(),
            max_level_first: d.max_first,
            max_level_second: d.max_second,
            entries: None,
            matrix: None,
            seed: None,
            amplitude: None,
        };
        match &d.backing {
            Backing2D::Dense(_) => {
                j.kind = "dense".into();
                j.entries = Some(d.dense_entries());
            }
            Backing2D::Level(m) => {
                j.kind = "level".into();
                j.matrix = Some(m.clone());
            }
            Backing2D::Seeded { seed, amplitude } => {
                j.kind = "seeded".into();
                j.seed = Some(*seed);
                j.amplitude = Some(*amplitude);
            }
        }
        j
    }
}

/// One-parameter multiplier `I -> d_I`.
#[derive(Debug, Clone, PartialEq)]
pub enum Multiplier1D {
    /// Indexed by iota, length `2^(max_level + 1)`.
    Dense(Vec<f64>),
    Level(Vec<f64>),
    Seeded { seed: u64, amplitude: f64, max_level: u32 },
}

impl Multiplier1D {
    pub fn dense_fn(max_level: u32, f: impl Fn(DyadicInterval) -> f64) -> Self {
        let mut v = vec![0.0; 1usize << (max_level + 1)];
        for l in 0..=max_level {
            for i in DyadicInterval::level_intervals(l) {
                v[i.iota() as usize] = f(i);
            }
        }
        Multiplier1D::Dense(v)
    }

    pub fn max_level(&self) -> u32 {
        match self {
            Multiplier1D::Dense(v) => level_of(v.len() as u64) - 1,
            Multiplier1D::Level(v) => v.len() as u32 - 1,
            Multiplier1D::Seeded { max_level, .. } => *max_level,
        }
    }

    #[inline]
    pub fn at(&self, level: u32, index: u64) -> f64 {
        let iota = (1u64 << level) + index;
        match self {
            Multiplier1D::Dense(v) => v[iota as usize],
            Multiplier1D::Level(v) => v[level as usize],
            Multiplier1D::Seeded { seed, amplitude, .. } => amplitude * hash::unit_symmetric(hash::hash3(*seed, iota, 0)),
        }
    }

    pub fn entry(&self, i: DyadicInterval) -> Result<f64> {
        if i.level > self.max_level() {
            return Err(Error::LevelOverflow { level: i.level, max: self.max_level() });
        }
        Ok(self.at(i.level, i.index))
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            Multiplier1D::Dense(v) => v.iter().skip(1).fold(0.0, |m, x| m.max(x.abs())),
            Multiplier1D::Level(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Multiplier1D::Seeded { amplitude, .. } => amplitude.abs(),
        }
    }
}

/// `E_{i,j} = 2^{-i-j} sum_{I in D_i, J in D_j} d_{I,J}`.
pub fn e_avg(d: &Multiplier2D, i: u32, j: u32) -> Result<f64> {
    d.check_levels(i, j)?;
    if let Backing2D::Level(m) = &d.backing {
        return Ok(m[i as usize][j as usize]);
    }
    let mut total = 0.0;
    for a in 0..1u64 << i {
        let mut row = 0.0;
        for b in 0..1u64 << j {
            row += d.at(i, a, j, b);
        }
        total += row;
    }
    Ok(total * exp2i(-((i + j) as i32)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LambdaMu {
    pub lambda: f64,
    pub mu: f64,
    pub lo_level: u32,
    pub hi_level: u32,
    /// Level pair `(i, j)` at which `lambda = E_{i,j}`.
    pub lambda_at: (u32, u32),
    pub mu_at: (u32, u32),
    pub window: u32,
    pub tol: f64,
    /// `E_{i,j}` for `i` in the top window, `j` in the bottom window.
    pub lambda_table: Vec<Vec<f64>>,
    /// `E_{i,j}` for `i` in the bottom window, `j` in the top window.
    pub mu_table: Vec<Vec<f64>>,
    pub converged: bool,
}

pub fn default_window(lo: u32, hi: u32) -> u32 {
    ((hi - lo + 1) / 3).max(1)
}

fn spread(table: &[Vec<f64>]) -> f64 {
    let it = table.iter().flatten();
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    hi - lo
}

/// Finite surrogate for the iterated limits: `lambda = E_{hi,lo}`, `mu = E_{lo,hi}`.
pub fn lambda_mu(d: &Multiplier2D, lo: u32, hi: u32, window: Option<u32>, tol: Option<f64>) -> Result<LambdaMu> {
    lambda_mu_mapped(d, lo, hi, window, tol, |i| i, |j| j)
}

/// As [`lambda_mu`] with the table at `E_{first(i), second(j)}`.
pub fn lambda_mu_mapped(
    d: &Multiplier2D,
    lo: u32,
    hi: u32,
    window: Option<u32>,
    tol: Option<f64>,
    first: impl Fn(u32) -> u32,
    second: impl Fn(u32) -> u32,
) -> Result<LambdaMu> {
    if lo >= hi {
        return Err(Error::InvalidArgument(format!("lo level {lo} must be below hi level {hi}")));
    }
    let w = window.unwrap_or_else(|| default_window(lo, hi));
    let tol = tol.unwrap_or(1e-3);
    if w == 0 || w > hi + 1 - lo {
        return Err(Error::InvalidArgument(format!("window {w} does not fit between levels {lo} and {hi}")));
    }
    let tops: Vec<u32> = (hi + 1 - w..=hi).collect();
    let bottoms: Vec<u32> = (lo..lo + w).collect();
    let e = |i: u32, j: u32| e_avg(d, first(i), second(j));
    let mut lambda_table = Vec::new();
    for &i in &tops {
        lambda_table.push(bottoms.iter().map(|&j| e(i, j)).collect::<Result<Vec<_>>>()?);
    }
    let mut mu_table = Vec::new();
    for &i in &bottoms {
        mu_table.push(tops.iter().map(|&j| e(i, j)).collect::<Result<Vec<_>>>()?);
    }
    let converged = spread(&lambda_table) < tol && spread(&mu_table) < tol;
    Ok(LambdaMu {
        lambda: lambda_table[w as usize - 1][0],
        mu: mu_table[0][w as usize - 1],
        lo_level: lo,
        hi_level: hi,
        lambda_at: (first(hi), second(lo)),
        mu_at: (first(lo), second(hi)),
        window: w,
        tol,
        lambda_table,
        mu_table,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VariationReport {
    pub t2s_semi_norm: f64,
    /// `d_{[0,1),[0,1)}`, `d_{[0,1),[0,1/2)}`, `d_{[0,1),[1/2,1)}`.
    pub roots: [f64; 3],
    pub t2_norm: f64,
    pub truncation_level: u32,
    /// Diagonal, superdiagonal, lower and upper sums.
    pub per_term_breakdown: [f64; 4],
}

fn max_over(li: u32, lj: u32, mut f: impl FnMut(u64, u64) -> f64) -> f64 {
    let mut m = 0.0f64;
    for a in 0..1u64 << li {
        for b in 0..1u64 << lj {
            m = m.max(f(a, b));
        }
    }
    m
}

/// Diagonal term at level `k`: `max |d_{I,J} - d_{I^w,J^x}|` over `I, J in D_k`.
pub fn diagonal_term(d: &Multiplier2D, k: u32) -> f64 {
    max_over(k, k, |a, b| {
        let v = d.at(k, a, k, b);
        let mut m = 0.0f64;
        for x in 0..2 {
            for y in 0..2 {
                m = m.max((v - d.at(k + 1, 2 * a + x, k + 1, 2 * b + y)).abs());
            }
        }
        m
    })
}

/// Superdiagonal term at level `k`: `I in D_k`, `J in D_{k+1}`.
pub fn superdiagonal_term(d: &Multiplier2D, k: u32) -> f64 {
    max_over(k, k + 1, |a, b| {
        let v = d.at(k, a, k + 1, b);
        let mut m = 0.0f64;
        for x in 0..2 {
            for y in 0..2 {
                m = m.max((v - d.at(k + 1, 2 * a + x, k + 2, 2 * b + y)).abs());
            }
        }
        m
    })
}

/// Lower term: `max |d_{I,J} - d_{I^w,J}|` over `I in D_i`, `J in D_j`.
pub fn lower_term(d: &Multiplier2D, i: u32, j: u32) -> f64 {
    max_over(i, j, |a, b| {
        let v = d.at(i, a, j, b);
        (v - d.at(i + 1, 2 * a, j, b)).abs().max((v - d.at(i + 1, 2 * a + 1, j, b)).abs())
    })
}

/// Upper term: `max |d_{I,J} - d_{I,J^x}|` over `I in D_i`, `J in D_j`.
pub fn upper_term(d: &Multiplier2D, i: u32, j: u32) -> f64 {
    max_over(i, j, |a, b| {
        let v = d.at(i, a, j, b);
        (v - d.at(i, a, j + 1, 2 * b)).abs().max((v - d.at(i, a, j + 1, 2 * b + 1)).abs())
    })
}

pub fn roots(d: &Multiplier2D) -> [f64; 3] {
    [d.at(0, 0, 0, 0), d.at(0, 0, 1, 0), d.at(0, 0, 1, 1)]
}

/// Bi-tree variation semi-norm and norm, truncated at `truncation`.
pub fn t2_variation(d: &Multiplier2D, truncation: u32) -> Result<VariationReport> {
    d.check_levels(truncation + 2, truncation + 2)?;
    let l = truncation;
    let diag: f64 = (0..=l).map(|k| (k + 1) as f64 * diagonal_term(d, k)).sum();
    let sup: f64 = (0..=l).map(|k| (k + 1) as f64 * superdiagonal_term(d, k)).sum();
    let lower: f64 = (0..=l).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|(i, j)| lower_term(d, i, j)).sum();
    let upper: f64 = (0..=l).flat_map(|j| (0..=j).map(move |i| (i, j))).map(|(i, j)| upper_term(d, i, j + 1)).sum();
    let t2s = diag + sup + lower + upper;
    let r = roots(d);
    Ok(VariationReport {
        t2s_semi_norm: t2s,
        roots: r,
        t2_norm: t2s + r.iter().map(|v| v.abs()).sum::<f64>(),
        truncation_level: l,
        per_term_breakdown: [diag, sup, lower, upper],
    })
}

/// Tree variation norm `sum |d_I - d_{I+}| + |d_I - d_{I-}| + |d_root|` over levels `0..=truncation`.
pub fn t_variation_1d(d: &Multiplier1D, truncation: u32) -> Result<f64> {
    if truncation + 1 > d.max_level() {
        return Err(Error::LevelOverflow { level: truncation + 1, max: d.max_level() });
    }
    let mut total = d.at(0, 0).abs();
    for l in 0..=truncation {
        for k in 0..1u64 << l {
            let v = d.at(l, k);
            total += (v - d.at(l + 1, 2 * k)).abs() + (v - d.at(l + 1, 2 * k + 1)).abs();
        }
    }
    Ok(total)
}

pub fn apply_multiplier(d: &Multiplier2D, z: &Coeffs2D) -> Result<Coeffs2D> {
    if let Some((a, b)) = z.actual_levels() {
        d.check_levels(a, b)?;
    }
    Ok(z.map_values(|i, j, a| d.at_iota(i, j) * a))
}

pub fn capon_apply(z: &Coeffs2D) -> Coeffs2D {
    z.filter(|i, j| level_of(i) >= level_of(j))
}

/// Keeps `(K, L)` with `iota(K) <= iota(I)` and `iota(L) <= iota(J)`.
pub fn project_leq(i: DyadicInterval, j: DyadicInterval, z: &Coeffs2D) -> Coeffs2D {
    let (a, b) = (i.iota(), j.iota());
    z.filter(|x, y| x <= a && y <= b)
}

/// Keeps `(K, L)` with `K` inside `k0` and `L` inside `l0`.
pub fn sub_restrict(k0: DyadicInterval, l0: DyadicInterval, z: &Coeffs2D) -> Coeffs2D {
    z.filter(|x, y| {
        let (k, l) = (DyadicInterval::from_iota(x).unwrap(), DyadicInterval::from_iota(y).unwrap());
        k0.contains(&k) && l0.contains(&l)
    })
}

fn same_size(i0: DyadicInterval, j0: DyadicInterval) -> Result<u32> {
    if i0.level != j0.level {
        return Err(Error::InvalidArgument(format!("scaling needs |I0| = |J0|, got levels {} and {}", i0.level, j0.level)));
    }
    Ok(i0.level)
}

/// Affine image of `i` inside `into`.
pub fn rescale_into(i: DyadicInterval, into: DyadicInterval) -> DyadicInterval {
    DyadicInterval { level: i.level + into.level, index: (into.index << i.level) + i.index }
}

/// Inverse of [`rescale_into`] for `i` inside `from`.
pub fn rescale_out(i: DyadicInterval, from: DyadicInterval) -> DyadicInterval {
    let l = i.level - from.level;
    DyadicInterval { level: l, index: i.index - (from.index << l) }
}

/// `h_I (x) k_J -> h_{rho(I)} (x) k_{tau(J)}`.
pub fn down_scale(i0: DyadicInterval, j0: DyadicInterval, z: &Coeffs2D) -> Result<Coeffs2D> {
    let l0 = same_size(i0, j0)?;
    let mut out = Coeffs2D::new(z.max_level_first() + l0, z.max_level_second() + l0);
    for (x, y, a) in z.iter() {
        let k = rescale_into(DyadicInterval::from_iota(x)?, i0);
        let l = rescale_into(DyadicInterval::from_iota(y)?, j0);
        out.add(k, l, a)?;
    }
    Ok(out)
}

/// Inverse scaling on the part of `z` supported in `I0 x J0`; the rest is dropped.
pub fn up_scale(i0: DyadicInterval, j0: DyadicInterval, z: &Coeffs2D) -> Result<Coeffs2D> {
    let l0 = same_size(i0, j0)?;
    let mut out = Coeffs2D::new(z.max_level_first().saturating_sub(l0), z.max_level_second().saturating_sub(l0));
    for (x, y, a) in z.iter() {
        let (k, l) = (DyadicInterval::from_iota(x)?, DyadicInterval::from_iota(y)?);
        if i0.contains(&k) && j0.contains(&l) {
            out.add(rescale_out(k, i0), rescale_out(l, j0), a)?;
        }
    }
    Ok(out)
}

/// `m_{1,k}` (on `D_k x D_k`) or `m_{2,k}` (on `D_k x D_{k+1}`) on a square grid.
pub fn m_field(d: &Multiplier2D, k: u32, which: u8, grid_depth: u32) -> Result<StepFunction2D> {
    let lj = match which {
        1 => k,
        2 => k + 1,
        _ => return Err(Error::InvalidArgument(format!("m-field index must be 1 or 2, got {which}"))),
    };
    if grid_depth < k + 1 {
        return Err(Error::GridTooCoarse { need: k + 1, got: grid_depth });
    }
    d.check_levels(k, lj)?;
    Ok(m_grid(d, k, lj, grid_depth, grid_depth))
}

fn m_grid(d: &Multiplier2D, li: u32, lj: u32, n1: u32, n2: u32) -> StepFunction2D {
    debug_assert_eq!(n1, n2);
    let side = 1u64 << n1;
    let mut f = StepFunction2D::zeros(n1);
    for r in 0..side {
        for c in 0..1u64 << n2 {
            f.set(r as usize, c as usize, d.at(li, r >> (n1 - li), lj, c >> (n2 - lj)));
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PointwiseIntReport {
    pub lambda: f64,
    pub int_m1: f64,
    pub mu: f64,
    pub int_m2: f64,
    pub gap_lambda: f64,
    pub gap_mu: f64,
}

/// Certifies that entries past level `k` copy their level-`k` ancestors
/// (lower part, including the diagonal) or their `(k, k+1)` ancestors (upper part).
pub fn certify_eventually_constant(d: &Multiplier2D, k: u32) -> Result<bool> {
    d.check_levels(k + 1, k + 1)?;
    match &d.backing {
        Backing2D::Seeded { .. } => {
            Err(Error::Unsupported("eventual level-constancy cannot be certified for seeded entries".into()))
        }
        Backing2D::Level(m) => {
            let ok = (k..=d.max_first).all(|i| {
                (k..=d.max_second).all(|j| {
                    let want = if i >= j { m[k as usize][k as usize] } else { m[k as usize][k as usize + 1] };
                    m[i as usize][j as usize] == want
                })
            });
            Ok(ok)
        }
        Backing2D::Dense(_) => {
            for li in k..=d.max_first {
                for lj in k..=d.max_second {
                    let lj_anc = if li >= lj { k } else { k + 1 };
                    for a in 0..1u64 << li {
                        for b in 0..1u64 << lj {
                            let want = d.at(k, a >> (li - k), lj_anc, b >> (lj - lj_anc));
                            if d.at(li, a, lj, b) != want {
                                return Ok(false);
                            }
                        }
                    }
                }
            }
            Ok(true)
        }
    }
}

/// `lambda = int m_1`, `mu = int m_2` for multipliers eventually level-constant past `k`.
pub fn pointwise_int_check(d: &Multiplier2D, k: u32, lo: u32, hi: u32) -> Result<PointwiseIntReport> {
    if !certify_eventually_constant(d, k)? {
        return Err(Error::InvalidArgument(format!("multiplier is not eventually level-constant past level {k}")));
    }
    let lm = lambda_mu(d, lo, hi, None, None)?;
    let int_m1 = m_field(d, k, 1, k + 1)?.integral();
    let int_m2 = m_field(d, k, 2, k + 1)?.integral();
    Ok(PointwiseIntReport {
        lambda: lm.lambda,
        int_m1,
        mu: lm.mu,
        int_m2,
        gap_lambda: (lm.lambda - int_m1).abs(),
        gap_mu: (lm.mu - int_m2).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RootProximity {
    pub lhs: f64,
    pub rhs: f64,
    pub lambda: f64,
    pub mu: f64,
    pub pass: bool,
}

/// `|lambda - d_rr| + |mu - (d_rL + d_rR)/2| <= ||D||_{T^2}` with lambda/mu at `(L+2, L)`.
pub fn root_proximity_check(d: &Multiplier2D, truncation: u32) -> Result<RootProximity> {
    let rep = t2_variation(d, truncation)?;
    let lm = lambda_mu(d, truncation, truncation + 2, None, None)?;
    let [rr, rl, rrr] = rep.roots;
    let lhs = (lm.lambda - rr).abs() + (lm.mu - 0.5 * (rl + rrr)).abs();
    Ok(RootProximity { lhs, rhs: rep.t2_norm, lambda: lm.lambda, mu: lm.mu, pass: lhs <= rep.t2_norm + 1e-12 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PwProximity {
    pub lhs1: f64,
    pub lhs1_std_error: f64,
    pub lhs2: f64,
    pub lhs2_std_error: f64,
    pub z_norm: f64,
    pub z_std_error: f64,
    pub t2s_semi_norm: f64,
    pub rhs_bound: f64,
    /// Level of the `m`-fields used.
    pub field_level: u32,
    pub pass: bool,
}

/// Compares `(D - m_1) C z` and `(D - m_2)(Id - C) z` against `4 ||D||_{T^2 S} ||z||`.
pub fn pw_proximity_check(
    d: &Multiplier2D,
    z: &Coeffs2D,
    spec: &ZSpec,
    opts: &NormOptions,
    truncation: Option<u32>,
) -> Result<PwProximity> {
    let trunc = truncation.unwrap_or_else(|| d.max_first.min(d.max_second).saturating_sub(2));
    let t2s = t2_variation(d, trunc)?.t2s_semi_norm;
    let zn = spaces::z_norm(z, spec, opts)?;
    let Some((a, b)) = z.actual_levels() else {
        return Ok(PwProximity {
            lhs1: 0.0,
            lhs1_std_error: 0.0,
            lhs2: 0.0,
            lhs2_std_error: 0.0,
            z_norm: 0.0,
            z_std_error: 0.0,
            t2s_semi_norm: t2s,
            rhs_bound: 0.0,
            field_level: 0,
            pass: true,
        });
    };
    let k = a.max(b);
    d.check_levels(k, k + 1)?;
    let n = k + 1;
    let lower = capon_apply(z);
    let upper = z.minus(&lower);
    let m1: Vec<f64> = m_grid(d, k, k, n, n).values.iter().map(|v| -v).collect();
    let m2: Vec<f64> = m_grid(d, k, k + 1, n, n).values.iter().map(|v| -v).collect();
    let dl = apply_multiplier(d, &lower)?;
    let du = apply_multiplier(d, &upper)?;
    let f1 = Field { layers: vec![&dl, &lower], weights: vec![None, Some(&m1)], n1: n, n2: n };
    let f2 = Field { layers: vec![&du, &upper], weights: vec![None, Some(&m2)], n1: n, n2: n };
    let l1 = spaces::estimate_field_norm(&f1, spec, opts)?;
    let l2 = spaces::estimate_field_norm(&f2, spec, opts)?;
    let rhs = 4.0 * t2s * zn.value;
    let slack = |se: f64| 3.0 * (se * se + (4.0 * t2s * zn.std_error).powi(2)).sqrt() + 1e-9;
    let pass = l1.value <= rhs + slack(l1.std_error) && l2.value <= rhs + slack(l2.std_error);
    Ok(PwProximity {
        lhs1: l1.value,
        lhs1_std_error: l1.std_error,
        lhs2: l2.value,
        lhs2_std_error: l2.std_error,
        z_norm: zn.value,
        z_std_error: zn.std_error,
        t2s_semi_norm: t2s,
        rhs_bound: rhs,
        field_level: k,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(level: u32, index: u64) -> DyadicInterval {
        DyadicInterval::new(level, index).unwrap()
    }

    fn single_root(max: u32) -> Multiplier2D {
        Multiplier2D::dense_fn(max, max, |i, j| if i.is_root() && j.is_root() { 1.0 } else { 0.0 })
    }

    #[test]
    fn entry_examples() {
        let id = Multiplier2D::identity(5, 5);
        assert_eq!(id.sup_norm(), 1.0);
        let c = Multiplier2D::capon(5, 5);
        assert_eq!(c.entry(iv(3, 1), iv(2, 0)).unwrap(), 1.0);
        assert_eq!(c.entry(iv(2, 1), iv(2, 0)).unwrap(), 1.0);
        assert_eq!(c.entry(iv(1, 1), iv(2, 0)).unwrap(), 0.0);
        assert!(c.entry(iv(6, 0), iv(0, 0)).is_err());
        let s = Multiplier2D::seeded(3, 0.5, 4, 4);
        assert_eq!(s.sup_norm(), 0.5);
        for (i, j, d) in s.to_dense(4, 4).unwrap().dense_entries() {
            assert!(d.abs() <= 0.5, "{i} {j} {d}");
        }
    }

    #[test]
    fn e_avg_examples() {
        let c = Multiplier2D::capon(4, 4).to_dense(4, 4).unwrap();
        for i in 0..=4 {
            for j in 0..=4 {
                assert_eq!(e_avg(&c, i, j).unwrap(), if i >= j { 1.0 } else { 0.0 });
                assert_eq!(e_avg(&Multiplier2D::identity(4, 4), i, j).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn e_avg_seeded_concentrates() {
        for seed in [1u64, 2, 3, 4, 5] {
            let d = Multiplier2D::seeded(seed, 1.0, 8, 8);
            let direct: f64 = (0..256u64)
                .flat_map(|a| (0..256u64).map(move |b| (a, b)))
                .map(|(a, b)| d.at(8, a, 8, b))
                .sum::<f64>()
                / 65536.0;
            let e = e_avg(&d, 8, 8).unwrap();
            assert!((e - direct).abs() < 1e-12);
            assert!(e.abs() <= 0.05, "seed {seed}: {e}");
        }
    }

    #[test]
    fn lambda_mu_examples() {
        let id = lambda_mu(&Multiplier2D::identity(9, 9), 2, 9, None, None).unwrap();
        assert_eq!((id.lambda, id.mu, id.converged), (1.0, 1.0, true));
        let c = lambda_mu(&Multiplier2D::capon(9, 9), 2, 9, None, None).unwrap();
        assert_eq!((c.lambda, c.mu, c.converged), (1.0, 0.0, true));
        let ic = Multiplier2D::identity(9, 9).lin_comb(1.0, &Multiplier2D::capon(9, 9), -1.0).unwrap();
        let r = lambda_mu(&ic, 2, 9, None, None).unwrap();
        assert_eq!((r.lambda, r.mu), (0.0, 1.0));
        assert!(lambda_mu(&Multiplier2D::identity(5, 5), 2, 9, None, None).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let d = Multiplier2D::level_fn(9, 9, |i, _| i as f64 * 0.1);
        let r = lambda_mu(&d, 2, 9, None, None).unwrap();
        assert!(!r.converged);
    }

    #[test]
    fn t2_examples() {
        let id = t2_variation(&Multiplier2D::identity(8, 8), 6).unwrap();
        assert_eq!((id.t2s_semi_norm, id.t2_norm), (0.0, 3.0));
        let c = t2_variation(&Multiplier2D::capon(8, 8).to_dense(8, 8).unwrap(), 6).unwrap();
        assert_eq!((c.t2s_semi_norm, c.t2_norm), (0.0, 1.0));
        let s = t2_variation(&single_root(4), 2).unwrap();
        assert_eq!(s.t2s_semi_norm, 2.0);
        assert_eq!(s.per_term_breakdown, [1.0, 0.0, 1.0, 0.0]);
        assert!(t2_variation(&Multiplier2D::identity(4, 4), 3).is_err());
    }

    #[test]
    fn t2_kernel_patterns() {
        // constant lambda below the diagonal, mu1/mu2 on the left/right upper parts
        let (lam, mu1, mu2) = (0.3, -1.2, 2.5);
        let d = Multiplier2D::dense_fn(6, 6, |i, j| {
            if i.level >= j.level {
                lam
            } else if j.left() < 0.5 {
                mu1
            } else {
                mu2
            }
        });
        let rep = t2_variation(&d, 4).unwrap();
        assert_eq!(rep.t2s_semi_norm, 0.0);
        assert_eq!(rep.roots, [lam, mu1, mu2]);
    }

    #[test]
    fn t1_examples() {
        assert_eq!(t_variation_1d(&Multiplier1D::Level(vec![1.0; 6]), 4).unwrap(), 1.0);
        let d = Multiplier1D::dense_fn(6, |i| exp2i(-(i.level as i32)));
        for l in 0..=5 {
            assert!((t_variation_1d(&d, l).unwrap() - (2.0 + l as f64)).abs() < 1e-12);
        }
        assert_eq!(t_variation_1d(&Multiplier1D::Level(vec![5.0; 4]), 2).unwrap(), 5.0);
    }

    #[test]
    fn capon_apply_examples() {
        let r = DyadicInterval::root();
        let z = Coeffs2D::single(r, r, 1.0);
        assert_eq!(capon_apply(&z), z);
        assert!(capon_apply(&Coeffs2D::single(r, iv(1, 0), 1.0)).is_empty());
        let mut w = Coeffs2D::new(3, 3);
        for (k, (a, b)) in [(1u64, 1u64), (2, 5), (9, 3), (4, 12)].into_iter().enumerate() {
            w.add_iota(a, b, k as f64 + 1.0).unwrap();
        }
        let ic = Multiplier2D::identity(3, 3).lin_comb(1.0, &Multiplier2D::capon(3, 3), -1.0).unwrap();
        let sum = apply_multiplier(&ic, &w).unwrap().plus(&capon_apply(&w));
        assert_eq!(sum, w);
    }

    #[test]
    fn canonical_operator_identities() {
        let mut z = Coeffs2D::new(2, 2);
        z.add(iv(0, 0), iv(0, 0), 1.0).unwrap();
        z.add(iv(2, 3), iv(1, 0), -2.0).unwrap();
        z.add(iv(1, 1), iv(2, 2), 0.5).unwrap();
        let (i0, j0) = (iv(2, 1), iv(2, 3));
        let down = down_scale(i0, j0, &z).unwrap();
        assert_eq!(up_scale(i0, j0, &down).unwrap(), z);
        assert_eq!(sub_restrict(i0, j0, &down), down);
        let p = project_leq(DyadicInterval::root(), DyadicInterval::root(), &z);
        assert_eq!(p.len(), 1);
        assert_eq!(p.get(iv(0, 0), iv(0, 0)), 1.0);
        assert!(down_scale(iv(1, 0), iv(2, 0), &z).is_err());
    }

    #[test]
    fn m_field_examples() {
        let c = Multiplier2D::capon(6, 6);
        for k in 0..4 {
            assert!(m_field(&c, k, 1, k + 2).unwrap().values.iter().all(|v| *v == 1.0));
            assert!(m_field(&c, k, 2, k + 2).unwrap().values.iter().all(|v| *v == 0.0));
            let id = Multiplier2D::identity(6, 6);
            assert!(m_field(&id, k, 2, k + 1).unwrap().values.iter().all(|v| *v == 1.0));
        }
        assert!(m_field(&c, 3, 1, 3).is_err());
    }

    #[test]
    fn pointwise_int_examples() {
        let c = pointwise_int_check(&Multiplier2D::capon(9, 9), 3, 3, 9).unwrap();
        assert_eq!((c.lambda, c.int_m1, c.mu, c.int_m2), (1.0, 1.0, 0.0, 0.0));
        let id = pointwise_int_check(&Multiplier2D::identity(9, 9), 3, 3, 9).unwrap();
        assert_eq!((id.gap_lambda, id.gap_mu), (0.0, 0.0));
        let s = Multiplier2D::seeded(1, 1.0, 6, 6);
        assert!(matches!(pointwise_int_check(&s, 3, 3, 6), Err(Error::Unsupported(_))));
    }

    #[test]
    fn root_proximity_examples() {
        let id = root_proximity_check(&Multiplier2D::identity(6, 6), 3).unwrap();
        assert_eq!((id.lhs, id.rhs, id.pass), (0.0, 3.0, true));
        let c = root_proximity_check(&Multiplier2D::capon(6, 6), 3).unwrap();
        assert_eq!((c.lhs, c.rhs, c.pass), (0.0, 1.0, true));
    }

    #[test]
    fn pw_proximity_examples() {
        let mut z = Coeffs2D::new(3, 3);
        z.add(iv(0, 0), iv(0, 0), 1.0).unwrap();
        z.add(iv(3, 2), iv(1, 1), -0.5).unwrap();
        z.add(iv(1, 0), iv(3, 5), 2.0).unwrap();
        let spec: ZSpec = "s00:L1:L1".parse().unwrap();
        let opts = NormOptions::default();
        let c = pw_proximity_check(&Multiplier2D::capon(6, 6), &z, &spec, &opts, None).unwrap();
        assert_eq!(c.lhs1, 0.0);
        let id = pw_proximity_check(&Multiplier2D::identity(6, 6), &z, &spec, &opts, None).unwrap();
        assert_eq!((id.lhs1, id.lhs2, id.rhs_bound), (0.0, 0.0, 0.0));
        let s = pw_proximity_check(&single_root(6), &z, &spec, &opts, None).unwrap();
        assert!(s.pass, "{s:?}");
    }

    #[test]
    fn multiplier_json_round_trip() {
        for d in [
            Multiplier2D::capon(3, 4),
            Multiplier2D::seeded(9, 0.7, 5, 5),
            Multiplier2D::seeded(2, 1.0, 2, 2).to_dense(2, 2).unwrap(),
        ] {
            let s = serde_json::to_string(&d).unwrap();
            let back: Multiplier2D = serde_json::from_str(&s).unwrap();
            assert_eq!(back, d);
        }
        let bad = r#"{"kind":"level","maxLevelFirst":1,"maxLevelSecond":1,"matrix":[[1.0]]}"#;
        assert!(serde_json::from_str::<Multiplier2D>(bad).is_err());
        let bad = r#"{"kind":"dense","maxLevelFirst":1,"maxLevelSecond":1,"entries":[[4,1,1.0]]}"#;
        assert!(serde_json::from_str::<Multiplier2D>(bad).is_err());
    }
}
