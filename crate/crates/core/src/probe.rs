//! Test vectors on which the Capon projection grows, and the end-to-end
//! factorization check.

use crate::dyadic::{exp2i, DyadicInterval};
use crate::error::{Error, Result};
use crate::multiplier::{apply_multiplier, capon_apply, LambdaMu, VariationReport};
use crate::multiplier::Multiplier2D;
use crate::spaces::{z_norm, Coeffs2D, NormOptions, ZSpec};
use crate::stabilizer::{proximity_bound, stabilize_full, ConditionReport, EtaSchedule, StabilizeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFamily {
    /// `f (x) g` with `f = sum_{k<=n} |I_k|^-1 h_{I_k}` and `g = sum_l a_l r_l`.
    L1Row,
    /// `g (x) f`.
    L1Col,
    /// `sum_{k=1}^n (h_{I_2k} - h_{I_2k-1}) (x) r_2k`.
    LinfRow,
}

impl ProbeFamily {
    /// Smallest admissible grid depth for size `n`.
    pub fn min_grid_depth(&self, n: u32) -> u32 {
        match self {
            ProbeFamily::L1Row | ProbeFamily::L1Col => n + 2,
            ProbeFamily::LinfRow => 2 * n + 2,
        }
    }
}

impl fmt::Display for ProbeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeFamily::L1Row => "l1-row",
            ProbeFamily::L1Col => "l1-col",
            ProbeFamily::LinfRow => "linf-row",
        })
    }
}

impl FromStr for ProbeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1-row" => Ok(ProbeFamily::L1Row),
            "l1-col" => Ok(ProbeFamily::L1Col),
            "linf-row" => Ok(ProbeFamily::LinfRow),
            other => Err(Error::InvalidArgument(format!("unknown probe family `{other}`"))),
        }
    }
}

/// `I_k = [0, 2^-k)`.
fn corner(k: u32) -> DyadicInterval {
    DyadicInterval { level: k, index: 0 }
}

/// Exact coefficients of the probe vector. `coeffs` defaults to all ones.
pub fn build_probe(family: ProbeFamily, n: u32, coeffs: Option<&[f64]>, grid_depth: Option<u32>) -> Result<Coeffs2D> {
    if let Some(g) = grid_depth {
        let need = family.min_grid_depth(n);
        if g < need {
            return Err(Error::GridTooCoarse { need, got: g });
        }
    }
    let terms = match family {
        ProbeFamily::LinfRow => n as usize,
        _ => n as usize + 1,
    };
    let a: Vec<f64> = match coeffs {
        Some(c) if c.len() != terms => {
            return Err(Error::InvalidArgument(format!("{family} of size {n} takes {terms} coefficients, got {}", c.len())))
        }
        Some(c) => c.to_vec(),
        None => vec![1.0; terms],
    };
    match family {
        ProbeFamily::L1Row | ProbeFamily::L1Col => {
            let mut z = Coeffs2D::new(n, n);
            for k in 0..=n {
                let fk = exp2i(k as i32);
                for (l, al) in a.iter().enumerate() {
                    for j in DyadicInterval::level_intervals(l as u32) {
                        if family == ProbeFamily::L1Row {
                            z.add(corner(k), j, fk * al)?;
                        } else {
                            z.add(j, corner(k), fk * al)?;
                        }
                    }
                }
            }
            Ok(z)
        }
        ProbeFamily::LinfRow => {
            let mut z = Coeffs2D::new(2 * n, 2 * n);
            for k in 1..=n {
                let ak = a[k as usize - 1];
                for j in DyadicInterval::level_intervals(2 * k) {
                    z.add(corner(2 * k), j, ak)?;
                    z.add(corner(2 * k - 1), j, -ak)?;
                }
            }
            Ok(z)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeRow {
    pub n: u32,
    pub capon_norm: f64,
    pub capon_std_error: f64,
    pub z_norm: f64,
    pub z_std_error: f64,
    pub ratio: f64,
    pub ratio_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeReport {
    pub family: ProbeFamily,
    pub space: ZSpec,
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of `log ratio` against `log n`.
    pub growth_fit: Option<f64>,
}

/// `r * sqrt((sa/a)^2 + (sb/b)^2)` for `r = a / b`.
pub fn ratio_std_error(a: f64, sa: f64, b: f64, sb: f64) -> f64 {
    if a == 0.0 {
        return sb.max(sa) / b;
    }
    let r = a / b;
    r.abs() * ((sa / a).powi(2) + (sb / b).powi(2)).sqrt()
}

pub fn growth_fit(rows: &[ProbeRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.n > 0 && r.ratio > 0.0).map(|r| ((r.n as f64).ln(), r.ratio.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `||C z||` and `||z||` for each size in `sizes`.
pub fn probe_capon(
    family: ProbeFamily,
    sizes: impl IntoIterator<Item = u32>,
    coeffs: Option<&[f64]>,
    spec: &ZSpec,
    opts: &NormOptions,
) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    for n in sizes {
        let z = build_probe(family, n, coeffs, opts.grid_depth)?;
        let local = NormOptions { grid_depth: None, ..*opts };
        let c = z_norm(&capon_apply(&z), spec, &local)?;
        let w = z_norm(&z, spec, &local)?;
        rows.push(ProbeRow {
            n,
            capon_norm: c.value,
            capon_std_error: c.std_error,
            z_norm: w.value,
            z_std_error: w.std_error,
            ratio: c.value / w.value,
            ratio_std_error: ratio_std_error(c.value, c.std_error, w.value, w.std_error),
        });
    }
    let growth_fit = growth_fit(&rows);
    Ok(ProbeReport { family, space: *spec, rows, growth_fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FactorReport {
    pub h_frequencies: Vec<u32>,
    pub k_frequencies: Vec<u32>,
    pub conditions: ConditionReport,
    pub lambda_mu: LambdaMu,
    pub retries_used: usize,
    pub transport_error: f64,
    /// Variation of `R = D~ - (lambda C + mu (Id - C))`.
    pub residual: VariationReport,
    /// `sum_{i,j <= K} (i + j + 4) eta_{i,j}`.
    pub semi_norm_bound: f64,
    /// `|R_{root,left} - R_{root,right}|`.
    pub balancing_residue: f64,
    pub delta: f64,
    /// `||R z|| / ||z||` for each random trial.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub pass: bool,
}

/// Random vector with 1 to 8 terms up to the given levels.
pub fn random_vector<R: Rng + ?Sized>(max_first: u32, max_second: u32, rng: &mut R) -> Coeffs2D {
    let mut z = Coeffs2D::new(max_first, max_second);
    let terms = rng.gen_range(1..=8);
    for _ in 0..terms {
        let li = rng.gen_range(0..=max_first);
        let lj = rng.gen_range(0..=max_second);
        let i = DyadicInterval { level: li, index: rng.gen_range(0..1u64 << li) };
        let j = DyadicInterval { level: lj, index: rng.gen_range(0..1u64 << lj) };
        z.add(i, j, rng.gen_range(-1.0..1.0)).expect("levels in range");
    }
    z
}

/// Stabilizes `d`, forms the residual and measures it on `trials` random vectors.
pub fn check_factorization(
    d: &Multiplier2D,
    spec: &ZSpec,
    eta: &EtaSchedule,
    cfg: &StabilizeConfig,
    trials: usize,
    opts: &NormOptions,
) -> Result<FactorReport> {
    let res = stabilize_full(d, eta, cfg)?;
    let k = cfg.output_depth;
    let lm = res.lambda_mu_out.clone();
    let r = res.d_tilde.residual(lm.lambda, lm.mu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut ratios = Vec::with_capacity(trials);
    for _ in 0..trials {
        let z = random_vector(r.max_first(), r.max_second(), &mut rng);
        let zn = z_norm(&z, spec, opts)?;
        if zn.value == 0.0 {
            continue;
        }
        let rz = apply_multiplier(&r, &z)?;
        ratios.push(z_norm(&rz, spec, opts)?.value / zn.value);
    }
    let semi_norm_bound = proximity_bound(eta, k, 0.0);
    let balancing_residue = (r.at(0, 0, 1, 0) - r.at(0, 0, 1, 1)).abs();
    let pass = res.report.pass
        && res.residual.t2s_semi_norm <= semi_norm_bound
        && balancing_residue <= cfg.delta_balance
        && res.transport_error <= 1e-10;
    Ok(FactorReport {
        h_frequencies: res.h_tilde.frequencies().to_vec(),
        k_frequencies: res.k_tilde.frequencies().to_vec(),
        conditions: res.report,
        lambda_mu: lm,
        retries_used: res.retries_used,
        transport_error: res.transport_error,
        residual: res.residual,
        semi_norm_bound,
        balancing_residue,
        delta: cfg.delta_balance,
        max_ratio: ratios.iter().copied().fold(0.0, f64::max),
        ratios,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::haar_synthesis;

    #[test]
    fn l1_row_examples() {
        let r = DyadicInterval::root();
        assert_eq!(build_probe(ProbeFamily::L1Row, 0, None, None).unwrap(), Coeffs2D::single(r, r, 1.0));
        // f = |I_{n+1}|^-1 chi_{I_{n+1}} - chi_[0,1)
        for n in 0..6u32 {
            let depth = n + 2;
            let mut c = vec![0.0; 1 << depth];
            for k in 0..=n {
                c[1usize << k] = exp2i(k as i32);
            }
            let f = haar_synthesis(&c, depth);
            let cells = 1usize << (depth - n - 1);
            for (x, v) in f.iter().enumerate() {
                let want = if x < cells { exp2i((n + 1) as i32) - 1.0 } else { -1.0 };
                assert_eq!(*v, want, "n={n} x={x}");
            }
        }
        assert!(build_probe(ProbeFamily::L1Row, 3, None, Some(4)).is_err());
        assert!(build_probe(ProbeFamily::L1Row, 2, Some(&[1.0]), None).is_err());
    }

    #[test]
    fn linf_row_count() {
        let z = build_probe(ProbeFamily::LinfRow, 1, None, None).unwrap();
        assert_eq!(z.len(), 8);
        assert_eq!(z.get(corner(2), DyadicInterval { level: 2, index: 3 }), 1.0);
        assert_eq!(z.get(corner(1), DyadicInterval { level: 2, index: 0 }), -1.0);
    }

    #[test]
    fn swapped_family_is_transpose() {
        let a = build_probe(ProbeFamily::L1Row, 3, None, None).unwrap();
        let b = build_probe(ProbeFamily::L1Col, 3, None, None).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y, v) in a.iter() {
            assert_eq!(b.get_iota(y, x), v);
        }
    }

    #[test]
    fn l2_ratio_is_at_most_one() {
        let spec: ZSpec = "s00:L2:L2".parse().unwrap();
        let rep = probe_capon(ProbeFamily::L1Row, 1..=5, None, &spec, &NormOptions::default()).unwrap();
        assert!(rep.rows.iter().all(|r| r.ratio <= 1.0 + 1e-12));
    }

    #[test]
    fn growth_fit_of_power_law() {
        let rows: Vec<ProbeRow> = (1..=6)
            .map(|n| ProbeRow {
                n,
                capon_norm: 0.0,
                capon_std_error: 0.0,
                z_norm: 0.0,
                z_std_error: 0.0,
                ratio: (n as f64).sqrt(),
                ratio_std_error: 0.0,
            })
            .collect();
        assert!((growth_fit(&rows).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn factorization_on_identity() {
        let spec: ZSpec = "s00:L1:L1".parse().unwrap();
        let cfg = StabilizeConfig::default();
        let rep = check_factorization(
            &Multiplier2D::identity(16, 16),
            &spec,
            &EtaSchedule::flat(0.25),
            &cfg,
            5,
            &NormOptions::default(),
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.ratios.iter().all(|r| *r == 0.0));
    }
}
