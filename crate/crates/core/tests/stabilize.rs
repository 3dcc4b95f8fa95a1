use haarstab::faithful::restrict_multiplier;
use haarstab::multiplier::{e_avg, lambda_mu};
use haarstab::stabilizer::{check_conditions, stabilize_full, EtaSchedule, StabilizeConfig};
use haarstab::{Error, Multiplier2D};

fn cfg(seed: u64) -> StabilizeConfig {
    StabilizeConfig { seed, ..Default::default() }
}

#[test]
fn output_is_the_restriction_to_the_returned_systems() {
    let eta = EtaSchedule::flat(0.25);
    let d = Multiplier2D::seeded(21, 1.0, 16, 16);
    let res = stabilize_full(&d, &eta, &cfg(21)).unwrap();
    assert!(res.h_tilde.validate().is_empty() && res.k_tilde.validate().is_empty());
    let again = restrict_multiplier(&d, &res.h_tilde, &res.k_tilde).unwrap();
    for x in 1..32u64 {
        for y in 1..32u64 {
            assert!((again.at_iota(x, y) - res.d_tilde.at_iota(x, y)).abs() <= 1e-12);
        }
    }
    let rep = check_conditions(&res.d_tilde, &eta, 0.2, 2).unwrap();
    assert!(rep.pass && rep == res.report);
    let lm = lambda_mu(&res.d_tilde, 2, 4, None, None).unwrap();
    assert_eq!(lm, res.lambda_mu_out);
    let (i, j) = res.lambda_mu_in.lambda_at;
    assert!((e_avg(&d, i, j).unwrap() - lm.lambda).abs() <= 1e-10);
    assert!(res.root_proximity.pass);
}

#[test]
fn bad_inputs_are_rejected() {
    let d = Multiplier2D::identity(16, 16);
    let bad_eta = EtaSchedule::flat(1.5);
    assert!(matches!(stabilize_full(&d, &bad_eta, &cfg(0)), Err(Error::InvalidArgument(_))));
    let tight = StabilizeConfig { frequency_budget: 4, ..cfg(0) };
    assert!(stabilize_full(&d, &EtaSchedule::flat(0.25), &tight).is_err());
}

#[test]
fn json_result_round_trips() {
    let d = Multiplier2D::seeded(3, 1.0, 16, 16);
    let res = stabilize_full(&d, &EtaSchedule::flat(0.25), &cfg(3)).unwrap();
    let text = serde_json::to_string(&res).unwrap();
    let back: haarstab::stabilizer::StabilizeResult = serde_json::from_str(&text).unwrap();
    assert_eq!(back, res);
}
