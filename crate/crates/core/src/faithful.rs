//! Faithful Haar systems relative to frequencies.
//!
//! A system of depth `K` assigns to each `I` with `level(I) <= K` a signed
//! collection `A_I` of intervals at level `m_{level(I)}`, so that
//! `h~_I = sum_{L in A_I} eps_L h_L`.

use crate::dyadic::{distribution, exp2i, haar_synthesis, level_of, DyadicInterval, StepFunction1D};
use crate::error::{Error, Result};
use crate::multiplier::{Backing2D, Multiplier1D, Multiplier2D};
use crate::spaces::Coeffs2D;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Largest total number of support intervals a system may carry.
pub const SUPPORT_CAP: u64 = 1 << 24;

/// Sorted level-`m_i` indices and their signs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Support {
    pub indices: Vec<u64>,
    pub signs: Vec<i8>,
}

impl Support {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, i8)> + '_ {
        self.indices.iter().copied().zip(self.signs.iter().copied())
    }

    /// `{h~ = value}` as sorted indices one level below the support.
    pub fn level_set(&self, value: i8) -> Vec<u64> {
        self.iter().map(|(k, s)| if s == value { 2 * k } else { 2 * k + 1 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemJson", into = "SystemJson")]
pub struct FaithfulSystem {
    depth: u32,
    frequencies: Vec<u32>,
    /// Indexed by iota; entry 0 is unused.
    supports: Vec<Support>,
}

/// Every level-`to` index inside the level-`from` intervals of `set`.
pub(crate) fn refine(set: &[u64], from: u32, to: u32) -> Vec<u64> {
    let shift = to - from;
    let mut out = Vec::with_capacity(set.len() << shift);
    for &k in set {
        out.extend(k << shift..(k + 1) << shift);
    }
    out
}

fn check_frequencies(frequencies: &[u32]) -> Result<()> {
    if frequencies.is_empty() {
        return Err(Error::InvalidSystem("no frequencies".into()));
    }
    if frequencies.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSystem(format!("frequencies {frequencies:?} are not strictly increasing")));
    }
    let total: u64 = frequencies.iter().map(|&m| 1u64 << m.min(40)).sum();
    if total > SUPPORT_CAP {
        return Err(Error::InvalidSystem(format!("{total} support intervals exceed the cap {SUPPORT_CAP}")));
    }
    Ok(())
}

impl FaithfulSystem {
    /// `h~_I = h_I`, `m_i = i`.
    pub fn trivial(depth: u32) -> Self {
        let frequencies: Vec<u32> = (0..=depth).collect();
        Self::build(&frequencies, |_, a| vec![1; a.len()]).expect("trivial system")
    }

    /// Builds a system level by level: `A_root` is all of `D_{m_0}` and the
    /// supports below `I` are `{sign_fn(I) = +-1}` refined to the next frequency.
    pub fn build(frequencies: &[u32], mut sign_fn: impl FnMut(DyadicInterval, &[u64]) -> Vec<i8>) -> Result<Self> {
        check_frequencies(frequencies)?;
        let depth = frequencies.len() as u32 - 1;
        let mut supports = vec![Support::default(); 1usize << (depth + 1)];
        let mut pending: Vec<Vec<u64>> = vec![Vec::new(); 1usize << (depth + 1)];
        pending[1] = (0..1u64 << frequencies[0]).collect();
        for level in 0..=depth {
            for i in DyadicInterval::level_intervals(level) {
                let indices = std::mem::take(&mut pending[i.iota() as usize]);
                let signs = sign_fn(i, &indices);
                if signs.len() != indices.len() || signs.iter().any(|s| s.abs() != 1) {
                    return Err(Error::InvalidSystem(format!("bad sign vector for {i}")));
                }
                let sup = Support { indices, signs };
                if level < depth {
                    let (m, next) = (frequencies[level as usize], frequencies[level as usize + 1]);
                    pending[i.plus().iota() as usize] = refine(&sup.level_set(1), m + 1, next);
                    pending[i.minus().iota() as usize] = refine(&sup.level_set(-1), m + 1, next);
                }
                supports[i.iota() as usize] = sup;
            }
        }
        Ok(Self { depth, frequencies: frequencies.to_vec(), supports })
    }

    /// Uniformly random signs at the given frequencies.
    pub fn random<R: Rng + ?Sized>(frequencies: &[u32], rng: &mut R) -> Result<Self> {
        Self::build(frequencies, |_, a| a.iter().map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
    }

    /// Takes raw parts and rejects them unless [`FaithfulSystem::validate`] is empty.
    pub fn from_parts(frequencies: Vec<u32>, supports: Vec<Support>) -> Result<Self> {
        check_frequencies(&frequencies)?;
        let depth = frequencies.len() as u32 - 1;
        let sys = Self { depth, frequencies, supports };
        let v = sys.validate();
        if v.is_empty() {
            Ok(sys)
        } else {
            Err(Error::InvalidSystem(v.join("; ")))
        }
    }

    /// Same as [`FaithfulSystem::from_parts`] without validation.
    pub fn from_parts_unchecked(frequencies: Vec<u32>, supports: Vec<Support>) -> Self {
        let depth = frequencies.len().saturating_sub(1) as u32;
        Self { depth, frequencies, supports }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn frequencies(&self) -> &[u32] {
        &self.frequencies
    }

    pub fn frequency(&self, level: u32) -> u32 {
        self.frequencies[level as usize]
    }

    pub fn max_frequency(&self) -> u32 {
        *self.frequencies.last().unwrap()
    }

    pub fn support(&self, i: DyadicInterval) -> &Support {
        &self.supports[i.iota() as usize]
    }

    pub fn support_mut(&mut self, i: DyadicInterval) -> &mut Support {
        &mut self.supports[i.iota() as usize]
    }

    pub fn is_trivial(&self) -> bool {
        self.frequencies.iter().enumerate().all(|(i, &m)| m == i as u32)
            && self.supports.iter().skip(1).all(|s| s.signs.iter().all(|&e| e == 1))
    }

    /// Violations of the defining clauses; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.frequencies.len() != self.depth as usize + 1 {
            v.push(format!("{} frequencies for depth {}", self.frequencies.len(), self.depth));
            return v;
        }
        if let Err(e) = check_frequencies(&self.frequencies) {
            v.push(e.to_string());
            return v;
        }
        if self.supports.len() != 1usize << (self.depth + 1) {
            v.push(format!("{} support entries, expected {}", self.supports.len(), (1usize << (self.depth + 1)) - 1));
            return v;
        }
        for level in 0..=self.depth {
            let m = self.frequency(level);
            for i in DyadicInterval::level_intervals(level) {
                let s = self.support(i);
                if s.signs.len() != s.indices.len() {
                    v.push(format!("{i}: {} signs for {} intervals", s.signs.len(), s.indices.len()));
                }
                if s.signs.iter().any(|e| e.abs() != 1) {
                    v.push(format!("{i}: signs must be +1 or -1"));
                }
                if s.indices.windows(2).any(|w| w[0] >= w[1]) {
                    v.push(format!("{i}: support is not sorted and disjoint"));
                }
                if s.indices.last().is_some_and(|&k| k >> m != 0) {
                    v.push(format!("{i}: support leaves level {m}"));
                }
            }
        }
        if !v.is_empty() {
            return v;
        }
        let root = self.support(DyadicInterval::root());
        if root.indices.len() as u64 != 1u64 << self.frequency(0) {
            v.push("support of the root system function is not [0,1)".into());
        }
        for level in 0..self.depth {
            let (m, next) = (self.frequency(level), self.frequency(level + 1));
            for i in DyadicInterval::level_intervals(level) {
                let s = self.support(i);
                for (child, value) in [(i.plus(), 1), (i.minus(), -1)] {
                    if self.support(child).indices != refine(&s.level_set(value), m + 1, next) {
                        v.push(format!("{child}: support differs from {{h~_I = {value}}} for I = {i}"));
                    }
                }
            }
        }
        v
    }

    /// `|Gamma_I|` as the number of support intervals times their length.
    pub fn gamma_measure(&self, i: DyadicInterval) -> f64 {
        self.support(i).len() as f64 * exp2i(-(self.frequency(i.level) as i32))
    }

    /// `h~_I` sampled at depth `max frequency + 1`.
    pub fn function(&self, i: DyadicInterval) -> StepFunction1D {
        let depth = self.max_frequency() + 1;
        let mut coeffs = vec![0.0; 1usize << depth];
        let m = self.frequency(i.level);
        for (k, s) in self.support(i).iter() {
            coeffs[((1u64 << m) + k) as usize] = s as f64;
        }
        StepFunction1D { depth, values: haar_synthesis(&coeffs, depth) }
    }

    /// For every level-`m_level` interval: the index of its owner in `D_level` and its sign.
    pub fn owners(&self, level: u32) -> Vec<(u32, i8)> {
        let mut out = vec![(0u32, 0i8); 1usize << self.frequency(level)];
        for i in DyadicInterval::level_intervals(level) {
            for (k, s) in self.support(i).iter() {
                out[k as usize] = (i.index as u32, s);
            }
        }
        out
    }

    /// `self * inner`: substitutes `inner` into `self`.
    pub fn compose(&self, inner: &FaithfulSystem) -> Result<Self> {
        if self.max_frequency() > inner.depth {
            return Err(Error::DepthMismatch(self.max_frequency(), inner.depth));
        }
        let frequencies: Vec<u32> = self.frequencies.iter().map(|&m| inner.frequency(m)).collect();
        check_frequencies(&frequencies)?;
        let mut supports = vec![Support::default(); self.supports.len()];
        for level in 0..=self.depth {
            let m = self.frequency(level);
            for i in DyadicInterval::level_intervals(level) {
                let mut pairs: Vec<(u64, i8)> = Vec::new();
                for (j, e) in self.support(i).iter() {
                    let inner_sup = inner.support(DyadicInterval { level: m, index: j });
                    pairs.extend(inner_sup.iter().map(|(l, f)| (l, e * f)));
                }
                pairs.sort_unstable();
                supports[i.iota() as usize] =
                    Support { indices: pairs.iter().map(|p| p.0).collect(), signs: pairs.iter().map(|p| p.1).collect() };
            }
        }
        Ok(Self { depth: self.depth, frequencies, supports })
    }

    /// `distribution(sum a_I h_I) == distribution(sum a_I h~_I)` exactly.
    /// `coeffs[iota]` is the coefficient of `I`; entry 0 is the constant term.
    pub fn distribution_preserved(&self, coeffs: &[f64]) -> Result<bool> {
        if coeffs.is_empty() || coeffs.len() > 1usize << (self.depth + 1) {
            return Err(Error::InvalidArgument(format!("{} coefficients do not fit depth {}", coeffs.len(), self.depth)));
        }
        let plain_depth = self.depth + 1;
        let mut plain = vec![0.0; 1usize << plain_depth];
        plain[..coeffs.len()].copy_from_slice(coeffs);
        let plain = StepFunction1D { depth: plain_depth, values: haar_synthesis(&plain, plain_depth) };
        let depth = self.max_frequency() + 1;
        let mut tilde = vec![0.0; 1usize << depth];
        tilde[0] = coeffs[0];
        for (iota, &a) in coeffs.iter().enumerate().skip(1) {
            let i = DyadicInterval::from_iota(iota as u64)?;
            let m = self.frequency(i.level);
            for (k, s) in self.support(i).iter() {
                tilde[((1u64 << m) + k) as usize] = a * s as f64;
            }
        }
        let tilde = StepFunction1D { depth, values: haar_synthesis(&tilde, depth) };
        Ok(distribution(&plain) == distribution(&tilde))
    }
}

/// `H~ * H` for product pairs, coordinate by coordinate.
pub fn compose_pair(outer: (&FaithfulSystem, &FaithfulSystem), inner: (&FaithfulSystem, &FaithfulSystem)) -> Result<(FaithfulSystem, FaithfulSystem)> {
    Ok((outer.0.compose(inner.0)?, outer.1.compose(inner.1)?))
}

/// Expansion of `sum a_{I,J} h~_I (x) k~_J` in the plain tensor basis.
pub fn operator_b(h: &FaithfulSystem, k: &FaithfulSystem, z: &Coeffs2D) -> Result<Coeffs2D> {
    if let Some((a, b)) = z.actual_levels() {
        if a > h.depth {
            return Err(Error::LevelOverflow { level: a, max: h.depth });
        }
        if b > k.depth {
            return Err(Error::LevelOverflow { level: b, max: k.depth });
        }
    }
    let mut out = Coeffs2D::new(h.max_frequency(), k.max_frequency());
    for (x, y, a) in z.iter() {
        let (i, j) = (DyadicInterval::from_iota(x)?, DyadicInterval::from_iota(y)?);
        let (m, n) = (h.frequency(i.level), k.frequency(j.level));
        for (l, e) in h.support(i).iter() {
            for (mm, t) in k.support(j).iter() {
                out.set_iota((1u64 << m) + l, (1u64 << n) + mm, a * (e * t) as f64)?;
            }
        }
    }
    Ok(out)
}

/// `(<h~_I (x) k~_J, w> / (|I||J|))_{I,J}`.
pub fn operator_a(h: &FaithfulSystem, k: &FaithfulSystem, w: &Coeffs2D) -> Result<Coeffs2D> {
    if let Some((a, b)) = w.actual_levels() {
        if a > h.max_frequency() {
            return Err(Error::LevelOverflow { level: a, max: h.max_frequency() });
        }
        if b > k.max_frequency() {
            return Err(Error::LevelOverflow { level: b, max: k.max_frequency() });
        }
    }
    let level_at = |sys: &FaithfulSystem, lv: u32| sys.frequencies.iter().position(|&m| m == lv).map(|p| p as u32);
    let mut own_h: HashMap<u32, Vec<(u32, i8)>> = HashMap::new();
    let mut own_k: HashMap<u32, Vec<(u32, i8)>> = HashMap::new();
    let mut out = Coeffs2D::new(h.depth, k.depth);
    for (x, y, v) in w.iter() {
        let (lx, ly) = (level_of(x), level_of(y));
        let (Some(i), Some(j)) = (level_at(h, lx), level_at(k, ly)) else {
            continue;
        };
        let (oi, e) = own_h.entry(i).or_insert_with(|| h.owners(i))[(x - (1u64 << lx)) as usize];
        let (oj, t) = own_k.entry(j).or_insert_with(|| k.owners(j))[(y - (1u64 << ly)) as usize];
        let weight = exp2i(i as i32 - lx as i32 + j as i32 - ly as i32);
        out.add_iota((1u64 << i) + oi as u64, (1u64 << j) + oj as u64, (e * t) as f64 * v * weight)?;
    }
    Ok(out)
}

/// Largest `m + n` for which seeded entries are averaged.
pub const SEEDED_AVERAGING_CAP: u32 = 26;

/// `d~_{I,J}`: the plain average of `d_{L,M}` over `A_I x B_J`.
pub fn restrict_multiplier(d: &Multiplier2D, h: &FaithfulSystem, k: &FaithfulSystem) -> Result<Multiplier2D> {
    if h.max_frequency() > d.max_first() {
        return Err(Error::LevelOverflow { level: h.max_frequency(), max: d.max_first() });
    }
    if k.max_frequency() > d.max_second() {
        return Err(Error::LevelOverflow { level: k.max_frequency(), max: d.max_second() });
    }
    if d.is_seeded() && h.max_frequency() + k.max_frequency() > SEEDED_AVERAGING_CAP {
        return Err(Error::Unsupported(format!(
            "seeded entries are averaged only up to m + n = {SEEDED_AVERAGING_CAP}"
        )));
    }
    let (dh, dk) = (h.depth, k.depth);
    if let Backing2D::Level(m) = d.backing() {
        return Multiplier2D::level_fn(dh, dk, |i, j| m[h.frequency(i) as usize][k.frequency(j) as usize]).to_dense(dh, dk);
    }
    let stride = 1usize << (dk + 1);
    let mut data = vec![0.0; (1usize << (dh + 1)) * stride];
    let own_k: Vec<Vec<(u32, i8)>> = (0..=dk).map(|j| k.owners(j)).collect();
    for i in 0..=dh {
        let own_h = h.owners(i);
        let m = h.frequency(i);
        for j in 0..=dk {
            let n = k.frequency(j);
            let mut acc = vec![0.0; 1usize << (i + j)];
            for (a, &(oi, _)) in own_h.iter().enumerate() {
                let row = &mut acc[(oi as usize) << j..((oi as usize) + 1) << j];
                for (b, &(oj, _)) in own_k[j as usize].iter().enumerate() {
                    row[oj as usize] += d.at(m, a as u64, n, b as u64);
                }
            }
            let scale = exp2i(i as i32 - m as i32 + j as i32 - n as i32);
            for ii in 0..1usize << i {
                for jj in 0..1usize << j {
                    data[((1usize << i) + ii) * stride + (1usize << j) + jj] = acc[(ii << j) + jj] * scale;
                }
            }
        }
    }
    let entries: Vec<(u64, u64, f64)> = (1..1usize << (dh + 1))
        .flat_map(|x| (1..stride).map(move |y| (x, y)))
        .map(|(x, y)| (x as u64, y as u64, data[x * stride + y]))
        .collect();
    Multiplier2D::dense_from_entries(dh, dk, &entries)
}

/// One-parameter restriction `d~_I = average of d_L over A_I`.
pub fn restrict_multiplier_1d(d: &Multiplier1D, h: &FaithfulSystem) -> Result<Multiplier1D> {
    if h.max_frequency() > d.max_level() {
        return Err(Error::LevelOverflow { level: h.max_frequency(), max: d.max_level() });
    }
    Ok(Multiplier1D::dense_fn(h.depth, |i| {
        let m = h.frequency(i.level);
        let s = h.support(i);
        s.indices.iter().map(|&l| d.at(m, l)).sum::<f64>() / s.len() as f64
    }))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntervalJson {
    iota: u64,
    support: Vec<(u32, u64)>,
    signs: Vec<i8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemJson {
    depth: u32,
    frequencies: Vec<u32>,
    intervals: Vec<IntervalJson>,
}

impl TryFrom<SystemJson> for FaithfulSystem {
    type Error = Error;

    fn try_from(j: SystemJson) -> Result<Self> {
        if j.frequencies.len() != j.depth as usize + 1 {
            return Err(Error::InvalidSystem(format!("{} frequencies for depth {}", j.frequencies.len(), j.depth)));
        }
        check_frequencies(&j.frequencies)?;
        let mut supports = vec![Support::default(); 1usize << (j.depth + 1)];
        let mut seen = vec![false; supports.len()];
        for iv in j.intervals {
            if iv.iota == 0 || iv.iota >= supports.len() as u64 {
                return Err(Error::InvalidSystem(format!("iota {} outside depth {}", iv.iota, j.depth)));
            }
            let m = j.frequencies[level_of(iv.iota) as usize];
            if let Some(&(l, _)) = iv.support.iter().find(|(l, _)| *l != m) {
                return Err(Error::InvalidSystem(format!("iota {}: support at level {l}, expected {m}", iv.iota)));
            }
            seen[iv.iota as usize] = true;
            supports[iv.iota as usize] = Support { indices: iv.support.iter().map(|p| p.1).collect(), signs: iv.signs };
        }
        if let Some(missing) = (1..seen.len()).find(|&x| !seen[x]) {
            return Err(Error::InvalidSystem(format!("no entry for iota {missing}")));
        }
        FaithfulSystem::from_parts(j.frequencies, supports)
    }
}

impl From<FaithfulSystem> for SystemJson {
    fn from(s: FaithfulSystem) -> Self {
        let intervals = (1..s.supports.len())
            .map(|x| {
                let m = s.frequencies[level_of(x as u64) as usize];
                let sup = &s.supports[x];
                IntervalJson {
                    iota: x as u64,
                    support: sup.indices.iter().map(|&k| (m, k)).collect(),
                    signs: sup.signs.clone(),
                }
            })
            .collect();
        SystemJson { depth: s.depth, frequencies: s.frequencies, intervals }
    }
}
