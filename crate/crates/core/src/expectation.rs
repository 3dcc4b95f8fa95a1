//! Pointwise sign expectations `g(s,t) = E | sum sigma_I sigma_J c_{I,J}(s,t) h_I(s) k_J(t) |`.
//!
//! A field is a weighted sum of coefficient layers: the coefficient of
//! `h_I(s) k_J(t)` at a cell is `sum_l w_l(cell) * layer_l[I,J]`. Plain norms
//! use one unweighted layer.

use crate::hash;
use crate::spaces::{synthesize_2d, Coeffs2D, Method, NormOptions, SignRegime};
use crate::error::{Error, Result};

pub(crate) struct Field<'a> {
    pub layers: Vec<&'a Coeffs2D>,
    pub weights: Vec<Option<&'a [f64]>>,
    pub n1: u32,
    pub n2: u32,
}

pub(crate) enum Expectation {
    Exact(Vec<f64>),
    Sampled { mean: Vec<f64>, batches: Vec<Vec<f64>>, samples: usize },
}

const BATCHES: usize = 10;

pub(crate) fn expected_abs(field: &Field<'_>, regime: SignRegime, opts: &NormOptions) -> Result<Expectation> {
    if regime.is_deterministic() {
        return Ok(Expectation::Exact(deterministic(field)));
    }
    let exact = match opts.method {
        Method::Exact => true,
        Method::MonteCarlo => false,
        Method::Auto => sign_variables_per_cell(field, regime) <= opts.exact_threshold,
    };
    if exact {
        Ok(Expectation::Exact(exact_expectation(field, regime)))
    } else {
        sampled(field, regime, opts)
    }
}

fn combine(field: &Field<'_>, grids: &[Vec<f64>], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (g, w) in grids.iter().zip(&field.weights) {
        match w {
            None => out.iter_mut().zip(g).for_each(|(o, v)| *o += v),
            Some(w) => out.iter_mut().zip(g).zip(w.iter()).for_each(|((o, v), w)| *o += v * w),
        }
    }
}

fn deterministic(field: &Field<'_>) -> Vec<f64> {
    let grids: Vec<Vec<f64>> =
        field.layers.iter().map(|z| synthesize_2d(z, field.n1, field.n2, |_, _, a| a)).collect();
    let mut out = vec![0.0; 1usize << (field.n1 + field.n2)];
    combine(field, &grids, &mut out);
    out.iter_mut().for_each(|v| *v = v.abs());
    out
}

fn present(field: &Field<'_>, n: u32, first: bool) -> Vec<bool> {
    let mut p = vec![false; 1usize << n];
    for z in &field.layers {
        for (i, j, _) in z.iter() {
            p[if first { i } else { j } as usize] = true;
        }
    }
    p
}

fn max_path_count(present: &[bool], n: u32) -> u32 {
    (0..1u64 << n)
        .map(|cell| (0..n).filter(|&l| present[((1u64 << l) + (cell >> (n - l))) as usize]).count() as u32)
        .max()
        .unwrap_or(0)
}

/// Largest number of independent sign variables that influence any single cell.
pub(crate) fn sign_variables_per_cell(field: &Field<'_>, regime: SignRegime) -> u32 {
    let mut s = 0;
    if regime.first_independent {
        s += max_path_count(&present(field, field.n1, true), field.n1);
    }
    if regime.second_independent {
        s += max_path_count(&present(field, field.n2, false), field.n2);
    }
    s
}

/// Per-cell coefficient matrix: rows are the active first-coordinate
/// intervals on the cell's path, columns the `n2` second-coordinate levels.
struct Cell<'a> {
    rows: usize,
    cols: usize,
    m: &'a [f64],
}

fn for_each_cell(field: &Field<'_>, mut f: impl FnMut(usize, &Cell<'_>)) {
    let (n1, n2) = (field.n1, field.n2);
    let c_len = 1usize << n2;
    let layers = field.layers.len();
    let present1 = present(field, n1, true);
    let mut rowvals: Vec<Vec<f64>> = vec![vec![0.0; c_len]; n1 as usize * layers];
    let mut m = vec![0.0; n1 as usize * n2 as usize];
    let mut active: Vec<(usize, u64, f64)> = Vec::with_capacity(n1 as usize);
    for r in 0..1u64 << n1 {
        active.clear();
        for l in 0..n1 {
            let iota = (1u64 << l) + (r >> (n1 - l));
            if present1[iota as usize] {
                let h = if (r >> (n1 - l - 1)) & 1 == 0 { 1.0 } else { -1.0 };
                let slot = active.len();
                for (k, z) in field.layers.iter().enumerate() {
                    let buf = &mut rowvals[slot * layers + k];
                    for (j, a) in z.row(iota) {
                        buf[j as usize] = a;
                    }
                }
                active.push((slot, iota, h));
            }
        }
        let rows = active.len();
        for c in 0..c_len {
            let cell = r as usize * c_len + c;
            let mut any = false;
            for &(slot, _, h) in &active {
                for l2 in 0..n2 {
                    let iota_j = (1usize << l2) + (c >> (n2 - l2));
                    let kv = if (c >> (n2 - l2 - 1)) & 1 == 0 { 1.0 } else { -1.0 };
                    let mut v = 0.0;
                    for k in 0..layers {
                        let a = rowvals[slot * layers + k][iota_j];
                        if a != 0.0 {
                            v += match field.weights[k] {
                                None => a,
                                Some(w) => a * w[cell],
                            };
                        }
                    }
                    let val = v * h * kv;
                    any |= val != 0.0;
                    m[slot * n2 as usize + l2 as usize] = val;
                }
            }
            if any {
                f(cell, &Cell { rows, cols: n2 as usize, m: &m[..rows * n2 as usize] });
            }
        }
        for &(slot, iota, _) in &active {
            for (k, z) in field.layers.iter().enumerate() {
                let buf = &mut rowvals[slot * layers + k];
                for (j, _) in z.row(iota) {
                    buf[j as usize] = 0.0;
                }
            }
        }
    }
}

/// `E | sum eps_i x_i |` over independent Rademacher signs, by enumeration.
pub fn rademacher_abs_mean(x: &[f64]) -> f64 {
    let x: Vec<f64> = x.iter().copied().filter(|v| *v != 0.0).collect();
    match x.len() {
        0 => 0.0,
        1 => x[0].abs(),
        n => {
            let mut signs = vec![1.0; n];
            let mut s: f64 = x.iter().sum();
            let mut acc = s.abs();
            let total = 1u64 << (n - 1);
            for k in 1..total {
                let b = k.trailing_zeros() as usize + 1;
                s -= 2.0 * signs[b] * x[b];
                signs[b] = -signs[b];
                acc += s.abs();
            }
            acc / total as f64
        }
    }
}

fn cell_expectation(cell: &Cell<'_>, regime: SignRegime, scratch: &mut Vec<f64>) -> f64 {
    let (rows, cols, m) = (cell.rows, cell.cols, cell.m);
    match (regime.first_independent, regime.second_independent) {
        (false, false) => m.iter().sum::<f64>().abs(),
        (true, false) => {
            scratch.clear();
            scratch.extend((0..rows).map(|p| m[p * cols..(p + 1) * cols].iter().sum::<f64>()));
            rademacher_abs_mean(scratch)
        }
        (false, true) => {
            scratch.clear();
            scratch.extend((0..cols).map(|q| (0..rows).map(|p| m[p * cols + q]).sum::<f64>()));
            rademacher_abs_mean(scratch)
        }
        (true, true) => {
            let live: Vec<usize> = (0..rows).filter(|&p| m[p * cols..(p + 1) * cols].iter().any(|v| *v != 0.0)).collect();
            if live.is_empty() {
                return 0.0;
            }
            let mut signs = vec![1.0; live.len()];
            let mut b: Vec<f64> = (0..cols).map(|q| live.iter().map(|&p| m[p * cols + q]).sum()).collect();
            let mut acc = rademacher_abs_mean(&b);
            let total = 1u64 << (live.len() - 1);
            for k in 1..total {
                let t = k.trailing_zeros() as usize + 1;
                let p = live[t];
                for q in 0..cols {
                    b[q] -= 2.0 * signs[t] * m[p * cols + q];
                }
                signs[t] = -signs[t];
                acc += rademacher_abs_mean(&b);
            }
            acc / total as f64
        }
    }
}

fn exact_expectation(field: &Field<'_>, regime: SignRegime) -> Vec<f64> {
    let mut g = vec![0.0; 1usize << (field.n1 + field.n2)];
    let mut scratch = Vec::new();
    for_each_cell(field, |cell, m| g[cell] = cell_expectation(m, regime, &mut scratch));
    g
}

/// Pointwise (partial) square function of the field.
pub(crate) fn square_function(field: &Field<'_>, regime: SignRegime) -> Vec<f64> {
    let mut g = vec![0.0; 1usize << (field.n1 + field.n2)];
    for_each_cell(field, |cell, c| {
        let (rows, cols, m) = (c.rows, c.cols, c.m);
        let s: f64 = match (regime.first_independent, regime.second_independent) {
            (true, true) => m.iter().map(|v| v * v).sum(),
            (false, true) => (0..cols).map(|q| (0..rows).map(|p| m[p * cols + q]).sum::<f64>().powi(2)).sum(),
            (true, false) => (0..rows).map(|p| m[p * cols..(p + 1) * cols].iter().sum::<f64>().powi(2)).sum(),
            (false, false) => m.iter().sum::<f64>().powi(2),
        };
        g[cell] = s.sqrt();
    });
    g
}

fn sampled(field: &Field<'_>, regime: SignRegime, opts: &NormOptions) -> Result<Expectation> {
    if opts.samples == 0 {
        return Err(Error::ZeroSamples);
    }
    let cells = 1usize << (field.n1 + field.n2);
    let nb = BATCHES.min(opts.samples);
    let mut batches = vec![vec![0.0; cells]; nb];
    let mut grids: Vec<Vec<f64>> = Vec::with_capacity(field.layers.len());
    let mut out = vec![0.0; cells];
    let (base, extra) = (opts.samples / nb, opts.samples % nb);
    let mut sample = 0u64;
    for (b, acc) in batches.iter_mut().enumerate() {
        let size = base + usize::from(b < extra);
        for _ in 0..size {
            grids.clear();
            for z in &field.layers {
                grids.push(synthesize_2d(z, field.n1, field.n2, |i, j, a| {
                    let s1 = if regime.first_independent { hash::sign(opts.seed, sample, i, 0) } else { 1.0 };
                    let s2 = if regime.second_independent { hash::sign(opts.seed, sample, j, 1) } else { 1.0 };
                    a * s1 * s2
                }));
            }
            combine(field, &grids, &mut out);
            acc.iter_mut().zip(&out).for_each(|(a, v)| *a += v.abs());
            sample += 1;
        }
        let inv = 1.0 / size as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    let mut mean = vec![0.0; cells];
    for (b, batch) in batches.iter().enumerate() {
        let w = (base + usize::from(b < extra)) as f64 / opts.samples as f64;
        mean.iter_mut().zip(batch).for_each(|(m, v)| *m += w * v);
    }
    Ok(Expectation::Sampled { mean, batches, samples: opts.samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rademacher_small_cases() {
        assert_eq!(rademacher_abs_mean(&[]), 0.0);
        assert_eq!(rademacher_abs_mean(&[-3.0]), 3.0);
        assert_eq!(rademacher_abs_mean(&[1.0, 1.0]), 1.0);
        assert_eq!(rademacher_abs_mean(&[1.0, 1.0, 1.0]), 1.5);
        // |1 +- 2 +- 4| over four patterns: 7, 3, 5, 1
        assert_eq!(rademacher_abs_mean(&[1.0, 2.0, 4.0]), 4.0);
    }
}
