//! Randomized stabilization: sign selection by random splitting, the
//! one-parameter tree game, and the four-stage bi-parameter pipeline.
//!
//! Every sign choice is verified directly before it is kept; concentration
//! bounds only limit how often a draw has to be repeated.

use crate::dyadic::{exp2i, DyadicInterval};
use crate::error::{Error, Result};
use crate::faithful::{refine, restrict_multiplier, restrict_multiplier_1d, FaithfulSystem, Support};
use crate::multiplier::{
    e_avg, lambda_mu, lambda_mu_mapped, root_proximity_check, t2_variation, LambdaMu, Multiplier1D, Multiplier2D,
    RootProximity, VariationReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tolerances `eta_{i,j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum EtaSchedule {
    Flat { value: f64 },
    /// `c * r^(i + j)`.
    Geometric { c: f64, r: f64 },
    /// Rows are clamped to the last available index.
    Matrix { values: Vec<Vec<f64>> },
}

impl EtaSchedule {
    pub fn flat(value: f64) -> Self {
        EtaSchedule::Flat { value }
    }

    pub fn geometric(c: f64, r: f64) -> Self {
        EtaSchedule::Geometric { c, r }
    }

    pub fn eta(&self, i: u32, j: u32) -> f64 {
        match self {
            EtaSchedule::Flat { value } => *value,
            EtaSchedule::Geometric { c, r } => c * r.powi((i + j) as i32),
            EtaSchedule::Matrix { values } => {
                let row = &values[(i as usize).min(values.len() - 1)];
                row[(j as usize).min(row.len() - 1)]
            }
        }
    }

    /// All values over `0..=range` lie in `(0, 1)`.
    pub fn validate(&self, range: u32) -> Result<()> {
        if let EtaSchedule::Matrix { values } = self {
            if values.is_empty() || values.iter().any(Vec::is_empty) {
                return Err(Error::InvalidArgument("eta matrix must be non-empty".into()));
            }
        }
        for i in 0..=range {
            for j in 0..=range {
                let e = self.eta(i, j);
                if !(e > 0.0 && e < 1.0) {
                    return Err(Error::InvalidArgument(format!("eta({i},{j}) = {e} is outside (0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Tails along rows and columns stay below a third of the entry they start from.
    pub fn is_summable(&self, range: u32) -> bool {
        (0..=range).all(|i0| {
            (0..=range).all(|j0| {
                let e = self.eta(i0, j0);
                let row: f64 = (j0 + 1..=range).map(|j| self.eta(i0, j)).sum();
                let col: f64 = (i0 + 1..=range).map(|i| self.eta(i, j0)).sum();
                row < e / 3.0 && col < e / 3.0
            })
        })
    }

    pub fn min_over(&self, range: u32) -> f64 {
        (0..=range).flat_map(|i| (0..=range).map(move |j| (i, j))).map(|(i, j)| self.eta(i, j)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct StabilizeConfig {
    pub output_depth: u32,
    pub delta_balance: f64,
    pub frequency_budget: u32,
    pub seed: u64,
    /// Draws per sign choice before the target level is deepened.
    pub retry_limit: usize,
    /// Fresh reruns of the whole pipeline after a failed final check.
    pub pipeline_retries: usize,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self { output_depth: 2, delta_balance: 0.2, frequency_budget: 16, seed: 0, retry_limit: 64, pipeline_retries: 8 }
    }
}

impl StabilizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_depth < 1 {
            return Err(Error::InvalidArgument("output depth must be at least 1".into()));
        }
        if self.frequency_budget <= 2 * self.output_depth {
            return Err(Error::InvalidArgument(format!(
                "frequency budget {} must exceed twice the output depth {}",
                self.frequency_budget, self.output_depth
            )));
        }
        if !(self.delta_balance > 0.0) {
            return Err(Error::InvalidArgument("delta must be positive".into()));
        }
        if self.retry_limit == 0 {
            return Err(Error::InvalidArgument("retry limit must be positive".into()));
        }
        Ok(())
    }
}

/// Worst slack `eta - |difference|` per condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConditionReport {
    pub lower: f64,
    pub upper: f64,
    pub diagonal: f64,
    pub superdiagonal: f64,
    pub balancing: f64,
    pub pass: bool,
}

fn worst(acc: &mut f64, eta: f64, diff: f64) {
    *acc = acc.min(eta - diff.abs());
}

pub fn lower_slack(d: &Multiplier2D, eta: &EtaSchedule, depth: u32) -> f64 {
    let mut s = f64::INFINITY;
    for i in 0..=depth {
        for j in 0..=i {
            let e = eta.eta(i, j);
            for a in 0..1u64 << i {
                for b in 0..1u64 << j {
                    let v = d.at(i, a, j, b);
                    worst(&mut s, e, v - d.at(i + 1, 2 * a, j, b));
                    worst(&mut s, e, v - d.at(i + 1, 2 * a + 1, j, b));
                }
            }
        }
    }
    s
}

pub fn upper_slack(d: &Multiplier2D, eta: &EtaSchedule, depth: u32) -> f64 {
    let mut s = f64::INFINITY;
    for j in 1..=depth + 1 {
        for i in 0..j {
            let e = eta.eta(i, j);
            for a in 0..1u64 << i {
                for b in 0..1u64 << j {
                    let v = d.at(i, a, j, b);
                    worst(&mut s, e, v - d.at(i, a, j + 1, 2 * b));
                    worst(&mut s, e, v - d.at(i, a, j + 1, 2 * b + 1));
                }
            }
        }
    }
    s
}

/// Diagonal (`offset = 0`) or superdiagonal (`offset = 1`) slack.
pub fn corner_slack(d: &Multiplier2D, eta: &EtaSchedule, depth: u32, offset: u32) -> f64 {
    let mut s = f64::INFINITY;
    for k in 0..=depth {
        let (li, lj) = (k, k + offset);
        let e = eta.eta(li, lj);
        for a in 0..1u64 << li {
            for b in 0..1u64 << lj {
                let v = d.at(li, a, lj, b);
                for x in 0..2 {
                    for y in 0..2 {
                        worst(&mut s, e, v - d.at(li + 1, 2 * a + x, lj + 1, 2 * b + y));
                    }
                }
            }
        }
    }
    s
}

pub fn balancing_slack(d: &Multiplier2D, delta: f64) -> f64 {
    delta - (d.at(0, 0, 1, 0) - d.at(0, 0, 1, 1)).abs()
}

/// Evaluates every inequality of the five conditions up to `depth`.
pub fn check_conditions(d: &Multiplier2D, eta: &EtaSchedule, delta: f64, depth: u32) -> Result<ConditionReport> {
    if d.max_first() < depth + 1 {
        return Err(Error::LevelOverflow { level: depth + 1, max: d.max_first() });
    }
    if d.max_second() < depth + 2 {
        return Err(Error::LevelOverflow { level: depth + 2, max: d.max_second() });
    }
    let lower = lower_slack(d, eta, depth);
    let upper = upper_slack(d, eta, depth);
    let diagonal = corner_slack(d, eta, depth, 0);
    let superdiagonal = corner_slack(d, eta, depth, 1);
    let balancing = balancing_slack(d, delta);
    let pass = [lower, upper, diagonal, superdiagonal, balancing].iter().all(|s| *s >= 0.0);
    Ok(ConditionReport { lower, upper, diagonal, superdiagonal, balancing, pass })
}

/// One-parameter split of a set of level-`m` intervals toward level `n`.
///
/// For each family `f` and coarse interval `K`, `plus[f][K]` and `minus[f][K]`
/// are the level-`n` averages over `K^+` and `K^-`; `coarse[f]` is the
/// level-`m` average over the whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitProblem1D {
    pub coarse: Vec<f64>,
    pub plus: Vec<Vec<f64>>,
    pub minus: Vec<Vec<f64>>,
}

impl SplitProblem1D {
    pub fn from_fn(gamma: &[u64], m: u32, n: u32, families: usize, value: impl Fn(usize, u32, u64) -> f64) -> Self {
        assert!(n > m);
        let half = 1u64 << (n - m - 1);
        let mut coarse = Vec::with_capacity(families);
        let mut plus = Vec::with_capacity(families);
        let mut minus = Vec::with_capacity(families);
        for f in 0..families {
            coarse.push(gamma.iter().map(|&k| value(f, m, k)).sum::<f64>() / gamma.len() as f64);
            let avg = |start: u64| (start..start + half).map(|x| value(f, n, x)).sum::<f64>() / half as f64;
            plus.push(gamma.iter().map(|&k| avg(k << (n - m))).collect());
            minus.push(gamma.iter().map(|&k| avg((k << (n - m)) + half)).collect());
        }
        Self { coarse, plus, minus }
    }

    pub fn families(&self) -> usize {
        self.coarse.len()
    }

    /// Level-`n` average over the whole set.
    pub fn fine(&self, f: usize) -> f64 {
        let p = &self.plus[f];
        p.iter().zip(&self.minus[f]).map(|(a, b)| a + b).sum::<f64>() / (2 * p.len()) as f64
    }

    /// `(X_+, X_-)` for family `f`.
    pub fn evaluate(&self, f: usize, signs: &[i8]) -> (f64, f64) {
        let (mut xp, mut xm) = (0.0, 0.0);
        for ((s, p), q) in signs.iter().zip(&self.plus[f]).zip(&self.minus[f]) {
            if *s > 0 {
                xp += p;
                xm += q;
            } else {
                xp += q;
                xm += p;
            }
        }
        let n = signs.len() as f64;
        (xp / n, xm / n)
    }

    /// Largest `|X_w - coarse| - tol(f)` over families and both halves.
    pub fn excess(&self, signs: &[i8], tol: impl Fn(usize) -> f64) -> f64 {
        (0..self.families())
            .map(|f| {
                let (p, m) = self.evaluate(f, signs);
                (p - self.coarse[f]).abs().max((m - self.coarse[f]).abs()) - tol(f)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn gap(&self) -> f64 {
        (0..self.families()).map(|f| (self.coarse[f] - self.fine(f)).abs()).fold(0.0, f64::max)
    }
}

pub fn random_signs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i8> {
    (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
}

/// One unverified draw: signs and `(X_+, X_-)` per family.
pub fn sample_split_1d<R: Rng + ?Sized>(p: &SplitProblem1D, rng: &mut R) -> (Vec<i8>, Vec<(f64, f64)>) {
    let signs = random_signs(p.plus.first().map_or(0, Vec::len), rng);
    let x = (0..p.families()).map(|f| p.evaluate(f, &signs)).collect();
    (signs, x)
}

/// Outcome of a verified split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split1D {
    pub signs: Vec<i8>,
    /// `Gamma^+` and `Gamma^-` at level `m + 1`.
    pub plus_set: Vec<u64>,
    pub minus_set: Vec<u64>,
    pub attempts: usize,
}

/// `2^-m / |Gamma| * max d^2` per family, the variance bound of one half-average.
pub fn variance_bound_1d(m: u32, gamma_len: usize, max_entry: f64) -> f64 {
    let measure = gamma_len as f64 * exp2i(-(m as i32));
    exp2i(-(m as i32)) / measure * max_entry * max_entry
}

/// Splits `gamma` (level `m`) so that every family's half-averages at level `n`
/// stay within `delta + |coarse - fine|` of the coarse average.
#[allow(clippy::too_many_arguments)]
pub fn random_split_1d<R: Rng + ?Sized>(
    families: &[Multiplier1D],
    gamma: &[u64],
    m: u32,
    n: u32,
    delta: f64,
    retry_limit: usize,
    rng: &mut R,
) -> Result<Split1D> {
    if n <= m {
        return Err(Error::InvalidArgument(format!("target level {n} must exceed {m}")));
    }
    if gamma.is_empty() || families.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    for d in families {
        if d.max_level() < n {
            return Err(Error::LevelOverflow { level: n, max: d.max_level() });
        }
    }
    let max_entry = families.iter().map(Multiplier1D::sup_norm).fold(0.0, f64::max);
    let bound = variance_bound_1d(m, gamma.len(), max_entry) * families.len() as f64;
    let allowed = delta * delta / 4.0;
    if bound > allowed {
        return Err(Error::VarianceBudget { bound, allowed });
    }
    let p = SplitProblem1D::from_fn(gamma, m, n, families.len(), |f, l, x| families[f].at(l, x));
    let gaps: Vec<f64> = (0..p.families()).map(|f| (p.coarse[f] - p.fine(f)).abs()).collect();
    for attempt in 1..=retry_limit {
        let (signs, _) = sample_split_1d(&p, rng);
        if p.excess(&signs, |f| delta + gaps[f]) <= 0.0 {
            let sup = Support { indices: gamma.to_vec(), signs };
            return Ok(Split1D { plus_set: sup.level_set(1), minus_set: sup.level_set(-1), signs: sup.signs, attempts: attempt });
        }
    }
    Err(Error::RetryExhausted { stage: "random_split_1d".into(), attempts: retry_limit })
}

/// Two-parameter split of `Gamma x Delta` (levels `i`, `j`) toward `(k, l)`.
///
/// `quads[K][L][a][b]` is the level-`(k, l)` average over `K^a x L^b`
/// (`a, b = 0` for the left half).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitProblem2D {
    pub coarse: f64,
    pub quads: Vec<Vec<[[f64; 2]; 2]>>,
}

impl SplitProblem2D {
    #[allow(clippy::too_many_arguments)]
    pub fn from_fn(
        gamma: &[u64],
        delta: &[u64],
        (i, j): (u32, u32),
        (k, l): (u32, u32),
        value: impl Fn(u32, u64, u32, u64) -> f64,
    ) -> Self {
        assert!(k > i && l > j);
        let (hk, hl) = (1u64 << (k - i - 1), 1u64 << (l - j - 1));
        let mut coarse = 0.0;
        for &a in gamma {
            for &b in delta {
                coarse += value(i, a, j, b);
            }
        }
        coarse /= (gamma.len() * delta.len()) as f64;
        let norm = (hk * hl) as f64;
        let quads = gamma
            .iter()
            .map(|&a| {
                delta
                    .iter()
                    .map(|&b| {
                        let mut q = [[0.0; 2]; 2];
                        for (x, row) in q.iter_mut().enumerate() {
                            for (y, cell) in row.iter_mut().enumerate() {
                                let r0 = (a << (k - i)) + x as u64 * hk;
                                let c0 = (b << (l - j)) + y as u64 * hl;
                                let mut s = 0.0;
                                for r in r0..r0 + hk {
                                    for c in c0..c0 + hl {
                                        s += value(k, r, l, c);
                                    }
                                }
                                *cell = s / norm;
                            }
                        }
                        q
                    })
                    .collect()
            })
            .collect();
        Self { coarse, quads }
    }

    pub fn fine(&self) -> f64 {
        let n = (self.quads.len() * self.quads[0].len() * 4) as f64;
        self.quads.iter().flatten().flat_map(|q| q.iter().flatten()).sum::<f64>() / n
    }

    /// `X_{w,x}` indexed `[w][x]` with `0` for `+`.
    pub fn evaluate(&self, eps: &[i8], theta: &[i8]) -> [[f64; 2]; 2] {
        let mut x = [[0.0; 2]; 2];
        for (a, row) in self.quads.iter().enumerate() {
            for (b, q) in row.iter().enumerate() {
                for (w, xw) in x.iter_mut().enumerate() {
                    let qa = if (eps[a] > 0) == (w == 0) { 0 } else { 1 };
                    for (v, cell) in xw.iter_mut().enumerate() {
                        let qb = if (theta[b] > 0) == (v == 0) { 0 } else { 1 };
                        *cell += q[qa][qb];
                    }
                }
            }
        }
        let n = (self.quads.len() * self.quads[0].len()) as f64;
        x.iter_mut().flatten().for_each(|v| *v /= n);
        x
    }

    pub fn excess(&self, eps: &[i8], theta: &[i8], tol: f64) -> f64 {
        let x = self.evaluate(eps, theta);
        x.iter().flatten().map(|v| (v - self.coarse).abs() - tol).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `4 ||D||^2 (2^-i/|Gamma| + 2^-j/|Delta|)`.
pub fn variance_bound_2d(i: u32, gamma_len: usize, j: u32, delta_len: usize, sup: f64) -> f64 {
    let g = gamma_len as f64 * exp2i(-(i as i32));
    let dl = delta_len as f64 * exp2i(-(j as i32));
    4.0 * sup * sup * (exp2i(-(i as i32)) / g + exp2i(-(j as i32)) / dl)
}

pub fn sample_split_2d<R: Rng + ?Sized>(p: &SplitProblem2D, rng: &mut R) -> (Vec<i8>, Vec<i8>, [[f64; 2]; 2]) {
    let eps = random_signs(p.quads.len(), rng);
    let theta = random_signs(p.quads[0].len(), rng);
    let x = p.evaluate(&eps, &theta);
    (eps, theta, x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split2D {
    pub eps: Vec<i8>,
    pub theta: Vec<i8>,
    pub attempts: usize,
}

/// Joint signs on `Gamma` and `Delta` keeping all four quadrant averages at
/// `(k, l)` within `delta + |coarse - fine|` of the coarse average.
#[allow(clippy::too_many_arguments)]
pub fn random_split_2d<R: Rng + ?Sized>(
    d: &Multiplier2D,
    gamma: &[u64],
    delta_set: &[u64],
    levels: (u32, u32),
    target: (u32, u32),
    delta: f64,
    retry_limit: usize,
    rng: &mut R,
) -> Result<Split2D> {
    let ((i, j), (k, l)) = (levels, target);
    if k <= i || l <= j {
        return Err(Error::InvalidArgument(format!("target ({k},{l}) must exceed ({i},{j})")));
    }
    if gamma.is_empty() || delta_set.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    if d.max_first() < k || d.max_second() < l {
        return Err(Error::LevelOverflow { level: k.max(l), max: d.max_first().min(d.max_second()) });
    }
    let bound = variance_bound_2d(i, gamma.len(), j, delta_set.len(), d.sup_norm()) * 4.0;
    let allowed = delta * delta / 4.0;
    if bound > allowed {
        return Err(Error::VarianceBudget { bound, allowed });
    }
    let p = SplitProblem2D::from_fn(gamma, delta_set, levels, target, |a, x, b, y| d.at(a, x, b, y));
    let tol = delta + (p.coarse - p.fine()).abs();
    for attempt in 1..=retry_limit {
        let (eps, theta, _) = sample_split_2d(&p, rng);
        if p.excess(&eps, &theta, tol) <= 0.0 {
            return Ok(Split2D { eps, theta, attempts: attempt });
        }
    }
    Err(Error::RetryExhausted { stage: "random_split_2d".into(), attempts: retry_limit })
}

/// Level-by-level system construction with adjustable frequencies.
struct Builder {
    freqs: Vec<u32>,
    supports: Vec<Support>,
}

impl Builder {
    fn new(freqs: Vec<u32>) -> Self {
        let depth = freqs.len() as u32 - 1;
        let mut supports = vec![Support::default(); 1usize << (depth + 1)];
        supports[1].indices = (0..1u64 << freqs[0]).collect();
        Self { freqs, supports }
    }

    fn depth(&self) -> u32 {
        self.freqs.len() as u32 - 1
    }

    fn support(&self, i: DyadicInterval) -> &Support {
        &self.supports[i.iota() as usize]
    }

    fn indices(&self, i: DyadicInterval) -> &[u64] {
        &self.support(i).indices
    }

    /// Fixes the signs of every interval at `level` and derives the next level's supports.
    fn set_signs(&mut self, level: u32, signs: Vec<Vec<i8>>) {
        for (x, s) in signs.into_iter().enumerate() {
            let i = DyadicInterval { level, index: x as u64 };
            self.supports[i.iota() as usize].signs = s;
            if level < self.depth() {
                let (m, next) = (self.freqs[level as usize], self.freqs[level as usize + 1]);
                let sup = &self.supports[i.iota() as usize];
                let (p, q) = (refine(&sup.level_set(1), m + 1, next), refine(&sup.level_set(-1), m + 1, next));
                self.supports[i.plus().iota() as usize].indices = p;
                self.supports[i.minus().iota() as usize].indices = q;
            }
        }
    }

    fn set_random<R: Rng + ?Sized>(&mut self, level: u32, rng: &mut R) {
        let signs = DyadicInterval::level_intervals(level).map(|i| random_signs(self.indices(i).len(), rng)).collect();
        self.set_signs(level, signs);
    }

    fn set_constant(&mut self, level: u32) {
        let signs = DyadicInterval::level_intervals(level).map(|i| vec![1; self.indices(i).len()]).collect();
        self.set_signs(level, signs);
    }

    fn finish(self) -> FaithfulSystem {
        let sys = FaithfulSystem::from_parts_unchecked(self.freqs, self.supports);
        debug_assert!(sys.validate().is_empty(), "{:?}", sys.validate());
        sys
    }
}

/// Average of `d_{L, M}` over `L` in `rows` (level `a`) and `M` in `cols` (level `b`).
fn block_avg(d: &Multiplier2D, a: u32, rows: &[u64], b: u32, cols: &[u64]) -> f64 {
    let mut s = 0.0;
    for &x in rows {
        for &y in cols {
            s += d.at(a, x, b, y);
        }
    }
    s / (rows.len() * cols.len()) as f64
}

fn settle_error(stage: &str, level: u32, gap: f64, tol: f64, needed: u32, budget: u32) -> Error {
    if gap >= tol {
        Error::NonSettling { stage: stage.into(), level, gap }
    } else {
        Error::FrequencyBudgetExhausted { stage: stage.into(), needed, budget }
    }
}

/// Draws signs per interval until every family passes; `None` with the
/// largest coarse/fine gap when some interval never does.
fn verified_round<R: Rng + ?Sized>(
    problems: &[SplitProblem1D],
    tol: &[f64],
    retry_limit: usize,
    rng: &mut R,
) -> std::result::Result<Vec<Vec<i8>>, f64> {
    let mut out = Vec::with_capacity(problems.len());
    for p in problems {
        let len = p.plus.first().map_or(0, Vec::len);
        let found = (0..retry_limit).map(|_| random_signs(len, rng)).find(|s| p.excess(s, |f| tol[f]) <= 0.0);
        match found {
            Some(s) => out.push(s),
            None => return Err(p.gap()),
        }
    }
    Ok(out)
}

/// Stabilizes a one-parameter multiplier: `|d~_L - d~_{L^w}| <= eta[level L]`
/// for every level below `depth`. Frequencies start at `window.0` and are
/// deepened up to `window.1`.
pub fn one_param_stabilize(
    d: &Multiplier1D,
    eta: &[f64],
    depth: u32,
    window: (u32, u32),
    retry_limit: usize,
    seed: u64,
) -> Result<(FaithfulSystem, Multiplier1D)> {
    let (lo, hi) = window;
    if hi > d.max_level() {
        return Err(Error::LevelOverflow { level: hi, max: d.max_level() });
    }
    if lo + depth > hi {
        return Err(Error::FrequencyBudgetExhausted { stage: "one-parameter".into(), needed: lo + depth, budget: hi });
    }
    if eta.len() < depth as usize || eta.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument(format!("need {depth} positive tolerances")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new((lo..=lo + depth).collect());
    for lev in 0..depth {
        loop {
            let (m, n) = (b.freqs[lev as usize], b.freqs[lev as usize + 1]);
            let problems: Vec<SplitProblem1D> = DyadicInterval::level_intervals(lev)
                .map(|i| SplitProblem1D::from_fn(b.indices(i), m, n, 1, |_, l, x| d.at(l, x)))
                .collect();
            match verified_round(&problems, &[eta[lev as usize]], retry_limit, &mut rng) {
                Ok(signs) => {
                    b.set_signs(lev, signs);
                    break;
                }
                Err(gap) => {
                    b.freqs[lev as usize + 1..].iter_mut().for_each(|f| *f += 1);
                    if *b.freqs.last().unwrap() > hi {
                        return Err(settle_error("one-parameter", lev, gap, eta[lev as usize], *b.freqs.last().unwrap(), hi));
                    }
                }
            }
        }
    }
    b.set_random(depth, &mut rng);
    let h = b.finish();
    let dt = restrict_multiplier_1d(d, &h)?;
    let slack = tree_slack(&dt, eta, depth);
    if slack < 0.0 {
        return Err(Error::RetryExhausted { stage: "one-parameter".into(), attempts: retry_limit });
    }
    Ok((h, dt))
}

/// Worst `eta[level] - |d_L - d_{L^w}|` for levels below `depth`.
pub fn tree_slack(d: &Multiplier1D, eta: &[f64], depth: u32) -> f64 {
    let mut s = f64::INFINITY;
    for l in 0..depth {
        for k in 0..1u64 << l {
            let v = d.at(l, k);
            worst(&mut s, eta[l as usize], v - d.at(l + 1, 2 * k));
            worst(&mut s, eta[l as usize], v - d.at(l + 1, 2 * k + 1));
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Stage {
    Triangular,
    Superdiagonal,
    Diagonal,
    Balancing,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Triangular => "triangular",
            Stage::Superdiagonal => "superdiagonal",
            Stage::Diagonal => "diagonal",
            Stage::Balancing => "balancing",
        }
    }

    /// Slack of this stage's own condition.
    pub fn slack(&self, d: &Multiplier2D, eta: &EtaSchedule, delta: f64, depth: u32) -> f64 {
        match self {
            Stage::Triangular => lower_slack(d, eta, depth).min(upper_slack(d, eta, depth)),
            Stage::Superdiagonal => corner_slack(d, eta, depth, 1),
            Stage::Diagonal => corner_slack(d, eta, depth, 0),
            Stage::Balancing => balancing_slack(d, delta),
        }
    }
}

/// Interleaved triangular game: `n_0 < m_0 < n_1 < m_1 < ...`, `k~` at even
/// positions and `h~` at odd ones.
fn triangular<R: Rng + ?Sized>(
    d: &Multiplier2D,
    eta: &EtaSchedule,
    cfg: &StabilizeConfig,
    rng: &mut R,
) -> Result<(FaithfulSystem, FaithfulSystem)> {
    let k = cfg.output_depth;
    let l = k + 2;
    let budget = cfg.frequency_budget.min(d.max_first()).min(d.max_second());
    let eta_min = eta.min_over(l);
    let start = (1.0 / eta_min).log2().ceil().max(0.0) as u32 + 1;
    let mut pos: Vec<u32> = (0..2 * (l + 1)).map(|p| start + p).collect();
    if *pos.last().unwrap() > budget {
        return Err(Error::FrequencyBudgetExhausted { stage: "triangular".into(), needed: *pos.last().unwrap(), budget });
    }
    let n_of = |pos: &[u32], i: u32| pos[2 * i as usize];
    let m_of = |pos: &[u32], i: u32| pos[2 * i as usize + 1];
    let mut hb = Builder::new((0..=l).map(|i| m_of(&pos, i)).collect());
    let mut kb = Builder::new((0..=l).map(|i| n_of(&pos, i)).collect());
    let sync = |pos: &[u32], hb: &mut Builder, kb: &mut Builder| {
        hb.freqs = (0..=l).map(|i| m_of(pos, i)).collect();
        kb.freqs = (0..=l).map(|i| n_of(pos, i)).collect();
    };
    for lev in 0..=l {
        // k~ signs at level lev against the upper condition
        if (1..=k + 1).contains(&lev) {
            let target_pos = 2 * (lev as usize + 1);
            loop {
                let (n, t) = (n_of(&pos, lev), pos[target_pos]);
                let fams: Vec<(u32, DyadicInterval)> =
                    (0..lev).flat_map(|i| DyadicInterval::level_intervals(i).map(move |x| (i, x))).collect();
                let tol: Vec<f64> = fams.iter().map(|(i, _)| eta.eta(*i, lev)).collect();
                let problems: Vec<SplitProblem1D> = DyadicInterval::level_intervals(lev)
                    .map(|j| {
                        SplitProblem1D::from_fn(kb.indices(j), n, t, fams.len(), |f, b, y| {
                            let (i, x) = fams[f];
                            let rows = hb.indices(x);
                            rows.iter().map(|&r| d.at(m_of(&pos, i), r, b, y)).sum::<f64>() / rows.len() as f64
                        })
                    })
                    .collect();
                match verified_round(&problems, &tol, cfg.retry_limit, rng) {
                    Ok(signs) => {
                        kb.set_signs(lev, signs);
                        break;
                    }
                    Err(gap) => {
                        pos[target_pos..].iter_mut().for_each(|p| *p += 1);
                        let last = *pos.last().unwrap();
                        if last > budget {
                            return Err(settle_error("triangular", lev, gap, tol.iter().copied().fold(1.0, f64::min), last, budget));
                        }
                        sync(&pos, &mut hb, &mut kb);
                    }
                }
            }
        } else {
            kb.set_random(lev, rng);
        }
        // h~ signs at level lev against the lower condition
        if lev <= k {
            let target_pos = 2 * (lev as usize + 1) + 1;
            loop {
                let (m, t) = (m_of(&pos, lev), pos[target_pos]);
                let fams: Vec<(u32, DyadicInterval)> =
                    (0..=lev).flat_map(|j| DyadicInterval::level_intervals(j).map(move |y| (j, y))).collect();
                let tol: Vec<f64> = fams.iter().map(|(j, _)| eta.eta(lev, *j)).collect();
                let problems: Vec<SplitProblem1D> = DyadicInterval::level_intervals(lev)
                    .map(|i| {
                        SplitProblem1D::from_fn(hb.indices(i), m, t, fams.len(), |f, a, x| {
                            let (j, y) = fams[f];
                            let cols = kb.indices(y);
                            cols.iter().map(|&c| d.at(a, x, n_of(&pos, j), c)).sum::<f64>() / cols.len() as f64
                        })
                    })
                    .collect();
                match verified_round(&problems, &tol, cfg.retry_limit, rng) {
                    Ok(signs) => {
                        hb.set_signs(lev, signs);
                        break;
                    }
                    Err(gap) => {
                        pos[target_pos..].iter_mut().for_each(|p| *p += 1);
                        let last = *pos.last().unwrap();
                        if last > budget {
                            return Err(settle_error("triangular", lev, gap, tol.iter().copied().fold(1.0, f64::min), last, budget));
                        }
                        sync(&pos, &mut hb, &mut kb);
                    }
                }
            }
        } else {
            hb.set_random(lev, rng);
        }
    }
    Ok((hb.finish(), kb.finish()))
}

/// Frequencies for a constructing stage of depth `l` inside `available` levels.
fn spread(l: u32, available: u32) -> Vec<u32> {
    (0..=l).map(|i| (i as u64 * available as u64 / l as u64) as u32).collect()
}

/// Diagonal (`offset = 0`) or superdiagonal (`offset = 1`) stage by joint splits,
/// one level pair at a time.
fn corner_stage<R: Rng + ?Sized>(
    d: &Multiplier2D,
    eta: &EtaSchedule,
    cfg: &StabilizeConfig,
    offset: u32,
    rng: &mut R,
) -> Result<(FaithfulSystem, FaithfulSystem)> {
    let (k, l) = (cfg.output_depth, cfg.output_depth + 2);
    let stage = if offset == 0 { Stage::Diagonal } else { Stage::Superdiagonal };
    let fh = spread(l, d.max_first().min(cfg.frequency_budget));
    let fk = spread(l, d.max_second().min(cfg.frequency_budget));
    if fh.windows(2).any(|w| w[0] >= w[1]) || fk.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::FrequencyBudgetExhausted { stage: stage.name().into(), needed: l, budget: d.max_first() });
    }
    for s in 0..=k {
        let (mi, mj) = (fh[(s + 1) as usize], fk[(s + offset + 1) as usize]);
        if mi + mj > crate::faithful::SEEDED_AVERAGING_CAP && d.is_seeded() {
            return Err(Error::Unsupported(format!("{} stage needs averages at levels ({mi},{mj})", stage.name())));
        }
    }
    let mut hb = Builder::new(fh.clone());
    let mut kb = Builder::new(fk.clone());
    if offset == 1 {
        kb.set_random(0, rng);
    }
    for s in 0..=k {
        let (li, lj) = (s, s + offset);
        let e = eta.eta(li, lj);
        let blocks: Vec<(usize, usize, SplitProblem2D)> = DyadicInterval::level_intervals(li)
            .flat_map(|i| DyadicInterval::level_intervals(lj).map(move |j| (i, j)))
            .map(|(i, j)| {
                let p = SplitProblem2D::from_fn(
                    hb.indices(i),
                    kb.indices(j),
                    (fh[li as usize], fk[lj as usize]),
                    (fh[li as usize + 1], fk[lj as usize + 1]),
                    |a, x, b, y| d.at(a, x, b, y),
                );
                (i.index as usize, j.index as usize, p)
            })
            .collect();
        let mut accepted = None;
        for _ in 0..cfg.retry_limit {
            let eps: Vec<Vec<i8>> =
                DyadicInterval::level_intervals(li).map(|i| random_signs(hb.indices(i).len(), rng)).collect();
            let theta: Vec<Vec<i8>> =
                DyadicInterval::level_intervals(lj).map(|j| random_signs(kb.indices(j).len(), rng)).collect();
            if blocks.iter().all(|(a, b, p)| p.excess(&eps[*a], &theta[*b], e) <= 0.0) {
                accepted = Some((eps, theta));
                break;
            }
        }
        let Some((eps, theta)) = accepted else {
            return Err(Error::RetryExhausted { stage: stage.name().into(), attempts: cfg.retry_limit });
        };
        hb.set_signs(li, eps);
        kb.set_signs(lj, theta);
    }
    for lev in k + 1..=l {
        hb.set_random(lev, rng);
    }
    for lev in k + 1 + offset..=l {
        kb.set_random(lev, rng);
    }
    Ok((hb.finish(), kb.finish()))
}

/// Trivial `h~`, `k~` shifted to start at the smallest `n_0` with
/// `2^-n_0 < delta^2 / (8 ||D||^2)` and random root signs.
fn balancing_stage<R: Rng + ?Sized>(
    d: &Multiplier2D,
    cfg: &StabilizeConfig,
    rng: &mut R,
) -> Result<(FaithfulSystem, FaithfulSystem)> {
    let l = cfg.output_depth + 2;
    let delta = cfg.delta_balance;
    let sup = d.sup_norm().max(f64::MIN_POSITIVE);
    let n0 = ((8.0 * sup * sup / (delta * delta)).log2().floor() + 1.0).max(0.0) as u32;
    let budget = cfg.frequency_budget.min(d.max_second());
    if n0 + l > budget {
        return Err(Error::FrequencyBudgetExhausted { stage: "balancing".into(), needed: n0 + l, budget });
    }
    if d.max_first() < l {
        return Err(Error::LevelOverflow { level: l, max: d.max_first() });
    }
    let h = FaithfulSystem::trivial(l);
    for _ in 0..cfg.retry_limit {
        let mut kb = Builder::new((n0..=n0 + l).collect());
        kb.set_random(0, rng);
        let (left, right) = (kb.indices(DyadicInterval::root().plus()), kb.indices(DyadicInterval::root().minus()));
        let gap = block_avg(d, 0, &[0], n0 + 1, left) - block_avg(d, 0, &[0], n0 + 1, right);
        if gap.abs() < delta {
            for lev in 1..=l {
                kb.set_constant(lev);
            }
            return Ok((h, kb.finish()));
        }
    }
    Err(Error::RetryExhausted { stage: "balancing".into(), attempts: cfg.retry_limit })
}

/// Systems establishing one condition. Returns trivial systems when the
/// condition already holds on `d`.
pub fn stabilize_stage<R: Rng + ?Sized>(
    d: &Multiplier2D,
    stage: Stage,
    eta: &EtaSchedule,
    cfg: &StabilizeConfig,
    rng: &mut R,
) -> Result<(FaithfulSystem, FaithfulSystem)> {
    cfg.validate()?;
    eta.validate(cfg.output_depth + 2)?;
    let l = cfg.output_depth + 2;
    let (k, delta) = (cfg.output_depth, cfg.delta_balance);
    if d.max_first() > k && d.max_second() >= l && d.max_first() >= l && stage.slack(d, eta, delta, k) >= 0.0 {
        return Ok((FaithfulSystem::trivial(l), FaithfulSystem::trivial(l)));
    }
    match stage {
        Stage::Triangular => triangular(d, eta, cfg, rng),
        Stage::Superdiagonal => corner_stage(d, eta, cfg, 1, rng),
        Stage::Diagonal => corner_stage(d, eta, cfg, 0, rng),
        Stage::Balancing => balancing_stage(d, cfg, rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StabilizeResult {
    pub h_tilde: FaithfulSystem,
    pub k_tilde: FaithfulSystem,
    pub d_tilde: Multiplier2D,
    pub report: ConditionReport,
    pub lambda_mu_in: LambdaMu,
    pub lambda_mu_out: LambdaMu,
    pub retries_used: usize,
    /// `max |E_{i,j}(D~) - E_{m_i,n_j}(D)|` over the output levels.
    pub transport_error: f64,
    /// Variation of `D~ - (lambda C + mu (Id - C))` with `lambda`, `mu` taken from the output.
    pub residual: VariationReport,
    pub proximity_bound: f64,
    pub proximity_pass: bool,
    pub root_proximity: RootProximity,
}

/// `sum_{i,j <= K} (i + j + 4) eta_{i,j} + delta`.
pub fn proximity_bound(eta: &EtaSchedule, depth: u32, delta: f64) -> f64 {
    let mut s = delta;
    for i in 0..=depth {
        for j in 0..=depth {
            s += (i + j + 4) as f64 * eta.eta(i, j);
        }
    }
    s
}

fn is_retryable(e: &Error) -> bool {
    matches!(e, Error::RetryExhausted { .. } | Error::FrequencyBudgetExhausted { .. })
}

/// Runs the four stages, composes their systems and verifies the outcome.
pub fn stabilize_full(d: &Multiplier2D, eta: &EtaSchedule, cfg: &StabilizeConfig) -> Result<StabilizeResult> {
    cfg.validate()?;
    let (k, l, delta) = (cfg.output_depth, cfg.output_depth + 2, cfg.delta_balance);
    eta.validate(l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_err = None;
    for attempt in 0..=cfg.pipeline_retries {
        match pipeline_once(d, eta, cfg, &mut rng) {
            Ok((h, kk, dt)) => {
                let report = check_conditions(&dt, eta, delta, k)?;
                if !report.pass {
                    last_err = Some(Error::RetryExhausted { stage: "final check".into(), attempts: attempt + 1 });
                    continue;
                }
                let mut transport = 0.0f64;
                for i in 0..=l {
                    for j in 0..=l {
                        let a = e_avg(&dt, i, j)?;
                        let b = e_avg(d, h.frequency(i), kk.frequency(j))?;
                        transport = transport.max((a - b).abs());
                    }
                }
                let lambda_mu_out = lambda_mu(&dt, k, l, None, None)?;
                let lambda_mu_in = lambda_mu_mapped(d, k, l, None, None, |i| h.frequency(i), |j| kk.frequency(j))?;
                let r = dt.residual(lambda_mu_out.lambda, lambda_mu_out.mu)?;
                let residual = t2_variation(&r, k)?;
                let bound = proximity_bound(eta, k, delta);
                let root_proximity = root_proximity_check(&dt, k)?;
                return Ok(StabilizeResult {
                    h_tilde: h,
                    k_tilde: kk,
                    d_tilde: dt,
                    report,
                    lambda_mu_in,
                    lambda_mu_out,
                    retries_used: attempt,
                    transport_error: transport,
                    proximity_pass: residual.t2_norm <= bound,
                    residual,
                    proximity_bound: bound,
                    root_proximity,
                });
            }
            Err(e) if is_retryable(&e) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::RetryExhausted { stage: "pipeline".into(), attempts: cfg.pipeline_retries + 1 }))
}

fn pipeline_once<R: Rng + ?Sized>(
    d: &Multiplier2D,
    eta: &EtaSchedule,
    cfg: &StabilizeConfig,
    rng: &mut R,
) -> Result<(FaithfulSystem, FaithfulSystem, Multiplier2D)> {
    let (mut h, mut k) = triangular(d, eta, cfg, rng)?;
    let mut current = restrict_multiplier(d, &h, &k)?;
    for stage in [Stage::Superdiagonal, Stage::Diagonal, Stage::Balancing] {
        let (hs, ks) = stabilize_stage(&current, stage, eta, cfg, rng)?;
        if !(hs.is_trivial() && ks.is_trivial()) {
            h = hs.compose(&h)?;
            k = ks.compose(&k)?;
            current = restrict_multiplier(d, &h, &k)?;
        }
    }
    Ok((h, k, current))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> StabilizeConfig {
        StabilizeConfig { seed, ..StabilizeConfig::default() }
    }

    #[test]
    fn eta_schedules() {
        assert!(EtaSchedule::geometric(0.5, 0.125).is_summable(6));
        assert!(!EtaSchedule::geometric(0.5, 0.3).is_summable(6));
        assert!(!EtaSchedule::flat(0.25).is_summable(3));
        assert!(EtaSchedule::flat(1.5).validate(2).is_err());
        let m = EtaSchedule::Matrix { values: vec![vec![0.1, 0.2], vec![0.3, 0.4]] };
        assert_eq!(m.eta(5, 0), 0.3);
        let s = serde_json::to_string(&EtaSchedule::flat(0.25)).unwrap();
        assert_eq!(s, r#"{"kind":"flat","value":0.25}"#);
    }

    #[test]
    fn condition_examples() {
        let eta = EtaSchedule::flat(0.25);
        assert!(check_conditions(&Multiplier2D::identity(6, 6), &eta, 0.1, 3).unwrap().pass);
        let c = check_conditions(&Multiplier2D::capon(6, 6), &EtaSchedule::flat(0.01), 0.0, 3).unwrap();
        assert!(c.pass, "{c:?}");
        let single = Multiplier2D::dense_fn(4, 4, |i, j| if i.is_root() && j.is_root() { 1.0 } else { 0.0 });
        let r = check_conditions(&single, &EtaSchedule::Matrix { values: vec![vec![0.5]] }, 1.0, 1).unwrap();
        assert_eq!((r.diagonal, r.lower, r.pass), (-0.5, -0.5, false));
        assert!(check_conditions(&Multiplier2D::identity(3, 3), &eta, 0.1, 2).is_err());
    }

    #[test]
    fn constant_family_splits_exactly() {
        let d = Multiplier1D::Level(vec![0.7; 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gamma: Vec<u64> = (0..32).collect();
        let s = random_split_1d(&[d], &gamma, 5, 8, 0.8, 4, &mut rng).unwrap();
        assert_eq!(s.attempts, 1);
        assert_eq!(s.plus_set.len(), 32);
    }

    #[test]
    fn variance_budget_is_enforced() {
        let d = Multiplier1D::Seeded { seed: 1, amplitude: 1.0, max_level: 10 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_split_1d(&[d], &[0, 1], 1, 6, 0.1, 4, &mut rng);
        assert!(matches!(r, Err(Error::VarianceBudget { .. })));
    }

    #[test]
    fn split_2d_identity() {
        let d = Multiplier2D::identity(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma: Vec<u64> = (0..16).collect();
        let s = random_split_2d(&d, &gamma, &gamma, (4, 4), (6, 6), 3.0, 3, &mut rng).unwrap();
        let p = SplitProblem2D::from_fn(&gamma, &gamma, (4, 4), (6, 6), |a, x, b, y| d.at(a, x, b, y));
        assert_eq!(p.evaluate(&s.eps, &s.theta), [[1.0; 2]; 2]);
    }

    #[test]
    fn one_param_level_homogeneous() {
        let f: Vec<f64> = (0..=14).map(|l| 1.0 + exp2i(-(l as i32))).collect();
        let d = Multiplier1D::Level(f.clone());
        let (h, dt) = one_param_stabilize(&d, &[0.01; 3], 3, (8, 14), 8, 0).unwrap();
        for l in 0..=3 {
            assert_eq!(dt.at(l, 0), f[h.frequency(l) as usize]);
        }
    }

    #[test]
    fn one_param_seeded() {
        let ok = (0..10u64)
            .filter(|&s| {
                let d = Multiplier1D::Seeded { seed: s, amplitude: 1.0, max_level: 20 };
                one_param_stabilize(&d, &[0.25; 3], 3, (8, 20), 64, s).is_ok()
            })
            .count();
        assert!(ok >= 9, "{ok}");
    }

    #[test]
    fn stages_on_identity_and_capon() {
        let eta = EtaSchedule::flat(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [Multiplier2D::identity(8, 8), Multiplier2D::capon(8, 8)] {
            for st in [Stage::Triangular, Stage::Superdiagonal, Stage::Diagonal, Stage::Balancing] {
                let (h, k) = stabilize_stage(&d, st, &eta, &cfg(0), &mut rng).unwrap();
                assert!(h.is_trivial() && k.is_trivial());
            }
        }
    }

    #[test]
    fn balancing_on_seeded() {
        let eta = EtaSchedule::flat(0.25);
        let ok = (0..10u64)
            .filter(|&s| {
                let d = Multiplier2D::seeded(s, 1.0, 16, 16);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let Ok((h, k)) = stabilize_stage(&d, Stage::Balancing, &eta, &cfg(s), &mut rng) else {
                    return false;
                };
                let dt = restrict_multiplier(&d, &h, &k).unwrap();
                balancing_slack(&dt, 0.2) > 0.0
            })
            .count();
        assert!(ok >= 9, "{ok}");
    }

    #[test]
    fn full_pipeline_kernel_patterns() {
        let eta = EtaSchedule::flat(0.25);
        let d = Multiplier2D::capon_pattern(16, 16, 0.4, -0.3);
        let r = stabilize_full(&d, &eta, &cfg(3)).unwrap();
        assert!(r.report.pass);
        assert_eq!(r.residual.t2s_semi_norm, 0.0);
        assert!((r.lambda_mu_out.lambda - 0.4).abs() < 1e-12 && (r.lambda_mu_out.mu + 0.3).abs() < 1e-12);
        let id = stabilize_full(&Multiplier2D::identity(16, 16), &eta, &cfg(3)).unwrap();
        assert_eq!((id.lambda_mu_out.lambda, id.lambda_mu_out.mu), (1.0, 1.0));
    }

    #[test]
    fn full_pipeline_seeded_is_deterministic() {
        let eta = EtaSchedule::flat(0.25);
        let d = Multiplier2D::seeded(11, 1.0, 16, 16);
        let a = stabilize_full(&d, &eta, &cfg(5)).unwrap();
        assert!(a.report.pass);
        assert!(a.transport_error <= 1e-10);
        let b = stabilize_full(&d, &eta, &cfg(5)).unwrap();
        assert_eq!(a, b);
    }
}
