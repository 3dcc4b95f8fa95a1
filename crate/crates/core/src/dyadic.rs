//! Dyadic intervals, the iota order, and step functions on dyadic grids.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// The interval `[index * 2^-level, (index + 1) * 2^-level)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicInterval {
    pub level: u32,
    pub index: u64,
}

pub const MAX_LEVEL: u32 = 62;

impl DyadicInterval {
    pub fn new(level: u32, index: u64) -> Result<Self> {
        if level > MAX_LEVEL || index >= 1u64 << level {
            return Err(Error::InvalidInterval { level, index });
        }
        Ok(Self { level, index })
    }

    pub const fn root() -> Self {
        Self { level: 0, index: 0 }
    }

    /// `2^level + index`; maps level `n` onto `2^n .. 2^(n+1)`.
    pub fn iota(&self) -> u64 {
        (1u64 << self.level) + self.index
    }

    pub fn from_iota(iota: u64) -> Result<Self> {
        if iota == 0 {
            return Err(Error::InvalidArgument("iota starts at 1".into()));
        }
        let level = 63 - iota.leading_zeros();
        Self::new(level, iota - (1u64 << level))
    }

    pub fn is_root(&self) -> bool {
        self.level == 0
    }

    /// Left half.
    pub fn plus(&self) -> Self {
        Self { level: self.level + 1, index: 2 * self.index }
    }

    /// Right half.
    pub fn minus(&self) -> Self {
        Self { level: self.level + 1, index: 2 * self.index + 1 }
    }

    pub fn children(&self) -> (Self, Self) {
        (self.plus(), self.minus())
    }

    /// Child on which `h_I` takes the value `sign`.
    pub fn child(&self, sign: i8) -> Self {
        if sign > 0 {
            self.plus()
        } else {
            self.minus()
        }
    }

    pub fn parent(&self) -> Result<Self> {
        if self.level == 0 {
            return Err(Error::RootHasNoParent);
        }
        Ok(Self { level: self.level - 1, index: self.index / 2 })
    }

    /// The ancestor (or self) at `level`, which must not exceed `self.level`.
    pub fn ancestor(&self, level: u32) -> Self {
        debug_assert!(level <= self.level);
        Self { level, index: self.index >> (self.level - level) }
    }

    pub fn measure(&self) -> f64 {
        exp2i(-(self.level as i32))
    }

    pub fn left(&self) -> f64 {
        self.index as f64 * self.measure()
    }

    pub fn right(&self) -> f64 {
        (self.index + 1) as f64 * self.measure()
    }

    pub fn contains(&self, other: &Self) -> bool {
        other.level >= self.level && other.ancestor(self.level) == *self
    }

    /// Index range of the level-`level` subintervals, `level >= self.level`.
    pub fn descendants(&self, level: u32) -> std::ops::Range<u64> {
        let shift = level - self.level;
        (self.index << shift)..((self.index + 1) << shift)
    }

    /// Value of `h_I` on the grid cell `cell` of depth `depth > level`.
    pub fn haar_value(&self, depth: u32, cell: u64) -> i8 {
        let shift = depth - self.level - 1;
        let sub = cell >> shift;
        if sub >> 1 != self.index {
            0
        } else if sub & 1 == 0 {
            1
        } else {
            -1
        }
    }

    pub fn level_intervals(level: u32) -> impl Iterator<Item = Self> {
        (0..1u64 << level).map(move |index| Self { level, index })
    }
}

impl fmt::Display for DyadicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}/{}, {}/{})", self.index, 1u64 << self.level, self.index + 1, 1u64 << self.level)
    }
}

/// Exact power of two for moderate exponents.
pub fn exp2i(e: i32) -> f64 {
    2f64.powi(e)
}

/// Level of an iota value.
pub fn level_of(iota: u64) -> u32 {
    63 - iota.leading_zeros()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction1D {
    pub depth: u32,
    pub values: Vec<f64>,
}

impl StepFunction1D {
    pub fn new(depth: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != 1usize << depth {
            return Err(Error::InvalidArgument(format!(
                "expected {} values for depth {depth}, got {}",
                1usize << depth,
                values.len()
            )));
        }
        Ok(Self { depth, values })
    }

    pub fn constant(depth: u32, c: f64) -> Self {
        Self { depth, values: vec![c; 1 << depth] }
    }

    pub fn indicator(depth: u32, interval: DyadicInterval) -> Result<Self> {
        if interval.level > depth {
            return Err(Error::GridTooCoarse { need: interval.level, got: depth });
        }
        let mut values = vec![0.0; 1 << depth];
        for c in interval.descendants(depth) {
            values[c as usize] = 1.0;
        }
        Ok(Self { depth, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { depth: self.depth, values: self.values.iter().map(|v| v * c).collect() }
    }

    fn zip(&self, other: &Self, op: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.depth != other.depth {
            return Err(Error::DepthMismatch(self.depth, other.depth));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| op(*a, *b)).collect();
        Ok(Self { depth: self.depth, values })
    }

    /// Each cell duplicated `2^(depth - self.depth)` times.
    pub fn refine(&self, depth: u32) -> Result<Self> {
        if depth < self.depth {
            return Err(Error::GridTooCoarse { need: self.depth, got: depth });
        }
        let rep = 1usize << (depth - self.depth);
        let values = self.values.iter().flat_map(|v| std::iter::repeat_n(*v, rep)).collect();
        Ok(Self { depth, values })
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * exp2i(-(self.depth as i32))
    }
}

/// Row `r` indexes s-cells, column `c` indexes t-cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction2D {
    pub depth: u32,
    pub values: Vec<f64>,
}

impl StepFunction2D {
    pub fn new(depth: u32, values: Vec<f64>) -> Result<Self> {
        let side = 1usize << depth;
        if values.len() != side * side {
            return Err(Error::InvalidArgument(format!(
                "expected a {side}x{side} array, got {} values",
                values.len()
            )));
        }
        Ok(Self { depth, values })
    }

    pub fn zeros(depth: u32) -> Self {
        let side = 1usize << depth;
        Self { depth, values: vec![0.0; side * side] }
    }

    pub fn side(&self) -> usize {
        1 << self.depth
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.side() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let side = self.side();
        self.values[r * side + c] = v;
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * exp2i(-2 * self.depth as i32)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.depth != other.depth {
            return Err(Error::DepthMismatch(self.depth, other.depth));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self { depth: self.depth, values })
    }
}

/// `h_I` sampled on the level-`depth` grid.
pub fn haar_step(interval: DyadicInterval, depth: u32) -> Result<StepFunction1D> {
    if interval.level + 1 > depth {
        return Err(Error::GridTooCoarse { need: interval.level + 1, got: depth });
    }
    let mut values = vec![0.0; 1 << depth];
    for c in interval.plus().descendants(depth) {
        values[c as usize] = 1.0;
    }
    for c in interval.minus().descendants(depth) {
        values[c as usize] = -1.0;
    }
    Ok(StepFunction1D { depth, values })
}

/// Distinct values in increasing order with their exact measures.
pub fn distribution(f: &StepFunction1D) -> Vec<(f64, f64)> {
    let mut vals: Vec<f64> = f.values.iter().map(|v| if *v == 0.0 { 0.0 } else { *v }).collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    let cell = exp2i(-(f.depth as i32));
    let mut out: Vec<(f64, u64)> = Vec::new();
    for v in vals {
        match out.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => out.push((v, 1)),
        }
    }
    out.into_iter().map(|(v, n)| (v, n as f64 * cell)).collect()
}

/// Unnormalised inverse Haar transform. `coeffs[iota]` holds the coefficient
/// of `h_I` for `iota in 1..2^depth`; `coeffs[0]` is the constant term.
pub fn haar_synthesis(coeffs: &[f64], depth: u32) -> Vec<f64> {
    let n = 1usize << depth;
    assert_eq!(coeffs.len(), n);
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    cur[0] = coeffs[0];
    for level in 0..depth {
        let width = 1usize << level;
        for k in 0..width {
            let c = coeffs[width + k];
            next[2 * k] = cur[k] + c;
            next[2 * k + 1] = cur[k] - c;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Inverse of [`haar_synthesis`].
pub fn haar_analysis(values: &[f64], depth: u32) -> Vec<f64> {
    let n = 1usize << depth;
    assert_eq!(values.len(), n);
    let mut coeffs = vec![0.0; n];
    let mut cur = values.to_vec();
    for level in (0..depth).rev() {
        let width = 1usize << level;
        for k in 0..width {
            let (a, b) = (cur[2 * k], cur[2 * k + 1]);
            coeffs[width + k] = (a - b) / 2.0;
            cur[k] = (a + b) / 2.0;
        }
    }
    coeffs[0] = cur[0];
    coeffs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(level: u32, index: u64) -> DyadicInterval {
        DyadicInterval::new(level, index).unwrap()
    }

    #[test]
    fn iota_examples() {
        assert_eq!(iv(0, 0).iota(), 1);
        assert_eq!(iv(1, 1).iota(), 3);
        assert_eq!(iv(2, 3).iota(), 7);
        assert_eq!(DyadicInterval::from_iota(7).unwrap(), iv(2, 3));
    }

    #[test]
    fn children_and_parent() {
        let root = DyadicInterval::root();
        assert_eq!(root.children(), (iv(1, 0), iv(1, 1)));
        assert_eq!(root.parent(), Err(Error::RootHasNoParent));
        let q = iv(2, 1);
        assert_eq!(q.children(), (iv(3, 2), iv(3, 3)));
        assert_eq!(q.parent().unwrap(), iv(1, 0));
        assert_eq!(iv(1, 0).parent().unwrap(), root);
        assert_eq!(iv(1, 1).parent().unwrap(), root);
    }

    #[test]
    fn invalid_index_rejected() {
        assert!(DyadicInterval::new(2, 4).is_err());
        assert!(DyadicInterval::from_iota(0).is_err());
    }

    #[test]
    fn haar_step_examples() {
        let root = DyadicInterval::root();
        assert_eq!(haar_step(root, 1).unwrap().values, vec![1.0, -1.0]);
        assert_eq!(haar_step(root, 2).unwrap().values, vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(haar_step(iv(1, 1), 2).unwrap().values, vec![0.0, 0.0, 1.0, -1.0]);
        assert_eq!(haar_step(iv(1, 1), 1), Err(Error::GridTooCoarse { need: 2, got: 1 }));
    }

    #[test]
    fn distribution_examples() {
        let h = haar_step(DyadicInterval::root(), 1).unwrap();
        assert_eq!(distribution(&h), vec![(-1.0, 0.5), (1.0, 0.5)]);
        assert_eq!(distribution(&StepFunction1D::constant(3, 1.0)), vec![(1.0, 1.0)]);
        let f = haar_step(DyadicInterval::root(), 2)
            .unwrap()
            .add(&haar_step(iv(1, 0), 2).unwrap())
            .unwrap();
        // cells: 1+1, 1-1, -1, -1
        assert_eq!(f.values, vec![2.0, 0.0, -1.0, -1.0]);
        assert_eq!(distribution(&f), vec![(-1.0, 0.5), (0.0, 0.25), (2.0, 0.25)]);
    }

    #[test]
    fn mixing_depths_is_an_error() {
        let a = StepFunction1D::constant(2, 1.0);
        let b = StepFunction1D::constant(3, 1.0);
        assert_eq!(a.add(&b), Err(Error::DepthMismatch(2, 3)));
    }

    #[test]
    fn haar_value_matches_step() {
        for iota in 1..32u64 {
            let i = DyadicInterval::from_iota(iota).unwrap();
            let h = haar_step(i, 6).unwrap();
            for c in 0..64u64 {
                assert_eq!(h.values[c as usize], i.haar_value(6, c) as f64);
            }
        }
    }

    #[test]
    fn synthesis_round_trip() {
        let depth = 4;
        let coeffs: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let v = haar_synthesis(&coeffs, depth);
        let mut direct = vec![coeffs[0]; 16];
        for (iota, c) in coeffs.iter().enumerate().skip(1) {
            let h = haar_step(DyadicInterval::from_iota(iota as u64).unwrap(), depth).unwrap();
            for (d, hv) in direct.iter_mut().zip(&h.values) {
                *d += c * hv;
            }
        }
        for (a, b) in v.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = haar_analysis(&v, depth);
        for (a, b) in back.iter().zip(&coeffs) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
