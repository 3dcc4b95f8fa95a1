//! Small oracle suite behind `haarstab selftest`.

use haarstab::faithful::{operator_a, operator_b, restrict_multiplier};
use haarstab::multiplier::lambda_mu;
use haarstab::probe::{build_probe, ProbeFamily};
use haarstab::spaces::{z_norm, Method};
use haarstab::{Coeffs2D, DyadicInterval, FaithfulSystem, Multiplier2D, NormOptions, ZSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn frequencies(rng: &mut ChaCha8Rng, depth: u32, cap: u32) -> Vec<u32> {
    loop {
        let mut m = rng.gen_range(0..=1u32);
        let mut out = vec![m];
        for _ in 0..depth {
            m += rng.gen_range(1..=2);
            out.push(m);
        }
        if m <= cap {
            return out;
        }
    }
}

fn vector(rng: &mut ChaCha8Rng, depth: u32) -> Coeffs2D {
    let mut z = Coeffs2D::new(depth, depth);
    for _ in 0..rng.gen_range(1..=6) {
        let (li, lj) = (rng.gen_range(0..=depth), rng.gen_range(0..=depth));
        let i = DyadicInterval { level: li, index: rng.gen_range(0..1u64 << li) };
        let j = DyadicInterval { level: lj, index: rng.gen_range(0..1u64 << lj) };
        z.add(i, j, rng.gen_range(-1.0..1.0)).expect("in range");
    }
    z
}

fn iota_bijection() -> Check {
    let bad = (1..1u64 << 11)
        .filter(|&n| DyadicInterval::from_iota(n).map(|i| i.iota() != n).unwrap_or(true))
        .count();
    Check { name: "iota-bijection", pass: bad == 0, detail: format!("{bad} mismatches below level 11") }
}

fn a_after_b(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let h = FaithfulSystem::random(&frequencies(rng, 2, 7), rng).expect("valid");
        let k = FaithfulSystem::random(&frequencies(rng, 2, 7), rng).expect("valid");
        let z = vector(rng, 2);
        let back = operator_b(&h, &k, &z).and_then(|w| operator_a(&h, &k, &w)).expect("levels fit");
        worst = worst.max(back.max_abs_diff(&z));
    }
    Check { name: "a-after-b", pass: worst <= 1e-12, detail: format!("max deviation {worst:.3e}") }
}

fn distribution(rng: &mut ChaCha8Rng) -> Check {
    let mut bad = 0;
    for _ in 0..20 {
        let h = FaithfulSystem::random(&frequencies(rng, 3, 8), rng).expect("valid");
        let coeffs: Vec<f64> = (0..16).map(|_| rng.gen_range(-4i32..=4) as f64).collect();
        if !h.distribution_preserved(&coeffs).expect("fits") {
            bad += 1;
        }
    }
    Check { name: "distribution", pass: bad == 0, detail: format!("{bad} of 20 differ") }
}

fn restriction(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let h = FaithfulSystem::random(&frequencies(rng, 2, 6), rng).expect("valid");
        let k = FaithfulSystem::random(&frequencies(rng, 2, 6), rng).expect("valid");
        let d = Multiplier2D::seeded(rng.gen(), 1.0, 6, 6).to_dense(6, 6).expect("dense");
        let r = restrict_multiplier(&d, &h, &k).expect("fits");
        for x in 1..8u64 {
            for y in 1..8u64 {
                let z = Coeffs2D::single(
                    DyadicInterval::from_iota(x).expect("iota"),
                    DyadicInterval::from_iota(y).expect("iota"),
                    1.0,
                );
                let w = operator_b(&h, &k, &z).expect("fits");
                let dw = haarstab::multiplier::apply_multiplier(&d, &w).expect("fits");
                let back = operator_a(&h, &k, &dw).expect("fits");
                worst = worst.max((back.get_iota(x, y) - r.at_iota(x, y)).abs());
            }
        }
    }
    Check { name: "restriction", pass: worst <= 1e-10, detail: format!("max deviation {worst:.3e}") }
}

fn capon_pattern() -> Check {
    let lm = lambda_mu(&Multiplier2D::capon(10, 10), 2, 9, None, None).expect("levels fit");
    Check {
        name: "capon-lambda-mu",
        pass: lm.lambda == 1.0 && lm.mu == 0.0 && lm.converged,
        detail: format!("lambda {} mu {}", lm.lambda, lm.mu),
    }
}

fn parseval(rng: &mut ChaCha8Rng) -> Check {
    let spec: ZSpec = "s00:L2:L2".parse().expect("spec");
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let z = vector(rng, 4);
        let want: f64 = z
            .iter()
            .map(|(x, y, a)| {
                let (i, j) = (DyadicInterval::from_iota(x).expect("iota"), DyadicInterval::from_iota(y).expect("iota"));
                a * a * i.measure() * j.measure()
            })
            .sum::<f64>()
            .sqrt();
        let got = z_norm(&z, &spec, &NormOptions::default().with_method(Method::Exact)).expect("norm").value;
        worst = worst.max((got - want).abs());
    }
    Check { name: "parseval", pass: worst <= 1e-10, detail: format!("max deviation {worst:.3e}") }
}

fn probe_identity() -> Check {
    let z = build_probe(ProbeFamily::L1Row, 0, None, None).expect("probe");
    let r = DyadicInterval::root();
    Check { name: "probe-n0", pass: z == Coeffs2D::single(r, r, 1.0), detail: format!("{} terms", z.len()) }
}

pub fn run() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let checks = vec![
        iota_bijection(),
        a_after_b(&mut rng),
        distribution(&mut rng),
        restriction(&mut rng),
        capon_pattern(),
        parseval(&mut rng),
        probe_identity(),
    ];
    let pass = checks.iter().all(|c| c.pass);
    Report { checks, pass }
}
