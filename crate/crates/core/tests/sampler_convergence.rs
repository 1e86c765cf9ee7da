//! Order-of-convergence and paper-parameter checks for the ODE solvers,
//! measured against the exact mixture oracle.

use cdm_core::denoiser::Denoiser;
use cdm_core::gmm::{GaussianMixture, MixtureComponent, OracleDenoiser};
use cdm_core::rng::seed_rng;
use cdm_core::samplers::{
    euler_ode_sample, heun_ode_sample, stochastic_heun_sample, SamplerParams,
};

fn two_comp() -> GaussianMixture {
    GaussianMixture::new(vec![
        MixtureComponent {
            weight: 0.4,
            mean: vec![-1.0],
            var: 0.25,
        },
        MixtureComponent {
            weight: 0.6,
            mean: vec![1.5],
            var: 0.16,
        },
    ])
    .unwrap()
}

/// Sharply concentrated mixture: component spread well below the mode
/// separation, matching the kind of per-frame conditional targets the
/// few-step sampler is used on. The coarse churned sampler is accurate in
/// this regime, while broad targets pick up a variance bias from the large
/// per-step noise-level jumps.
fn sharp_two_comp() -> GaussianMixture {
    GaussianMixture::new(vec![
        MixtureComponent {
            weight: 0.4,
            mean: vec![-1.0],
            var: 0.0225,
        },
        MixtureComponent {
            weight: 0.6,
            mean: vec![1.5],
            var: 0.0225,
        },
    ])
    .unwrap()
}

/// Power-law grid from sigma_hi to sigma_lo, without the terminal zero (the
/// zero step ends on the singular level; order is measured on the smooth
/// part).
fn level_grid(n_steps: usize) -> Vec<f64> {
    let params = SamplerParams {
        n_steps,
        ..SamplerParams::default()
    };
    let mut grid = params.time_grid();
    grid.pop();
    grid
}

fn mean_error(
    solver: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    starts: &[Vec<f64>],
    reference: &[Vec<f64>],
    grid: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (s, r) in starts.iter().zip(reference) {
        let x = solver(s, grid);
        total += (x[0] - r[0]).abs();
    }
    total / starts.len() as f64
}

fn regression_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[test]
fn euler_is_first_order_and_heun_second_order() {
    let gmm = two_comp();
    let oracle = OracleDenoiser::new(gmm.clone());
    let cond = oracle.no_cond();
    let mut rng = seed_rng(7);
    let starts = gmm.marginal_at(15.0).unwrap().sample(64, &mut rng);
    let ref_grid = level_grid(2048);
    let reference: Vec<Vec<f64>> = starts
        .iter()
        .map(|s| heun_ode_sample(&oracle, s, &ref_grid, &cond).unwrap())
        .collect();

    let steps = [8usize, 16, 32, 64, 128];
    let ln_steps: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();

    let euler_errs: Vec<f64> = steps
        .iter()
        .map(|&n| {
            mean_error(
                |s, g| euler_ode_sample(&oracle, s, g, &cond).unwrap(),
                &starts,
                &reference,
                &level_grid(n),
            )
            .ln()
        })
        .collect();
    let heun_errs: Vec<f64> = steps
        .iter()
        .map(|&n| {
            mean_error(
                |s, g| heun_ode_sample(&oracle, s, g, &cond).unwrap(),
                &starts,
                &reference,
                &level_grid(n),
            )
            .ln()
        })
        .collect();

    let euler_slope = -regression_slope(&ln_steps, &euler_errs);
    let heun_slope = -regression_slope(&ln_steps, &heun_errs);
    assert!(
        (euler_slope - 1.0).abs() <= 0.3,
        "euler slope {euler_slope}"
    );
    assert!((heun_slope - 2.0).abs() <= 0.3, "heun slope {heun_slope}");

    // halving the step count roughly doubles the euler error (first order)
    let e64 = euler_errs[3].exp();
    let e32 = euler_errs[2].exp();
    let ratio = e32 / e64;
    assert!(
        (1.4..=3.0).contains(&ratio),
        "halving steps changed euler error by {ratio}"
    );

    // and multiplies the heun error by roughly four (second order)
    let h64 = heun_errs[3].exp();
    let h32 = heun_errs[2].exp();
    let hratio = h32 / h64;
    assert!(
        (3.0..=6.0).contains(&hratio),
        "halving steps changed heun error by {hratio}"
    );
}

#[test]
fn euler_and_heun_agree_at_high_resolution() {
    let gmm = sharp_two_comp();
    let oracle = OracleDenoiser::new(gmm.clone());
    let cond = oracle.no_cond();
    let mut rng = seed_rng(8);
    let starts = gmm.marginal_at(15.0).unwrap().sample(64, &mut rng);
    let grid = level_grid(1024);
    let mut total = 0.0;
    for s in &starts {
        let a = euler_ode_sample(&oracle, s, &grid, &cond).unwrap();
        let b = heun_ode_sample(&oracle, s, &grid, &cond).unwrap();
        total += (a[0] - b[0]) * (a[0] - b[0]);
    }
    let l2 = (total / starts.len() as f64).sqrt();
    assert!(l2 < 1e-3, "euler/heun gap at 1024 steps: {l2}");
}

#[test]
fn paper_parameter_sampling_matches_target_moments() {
    // the published operating point: 18 steps, churn 11 gated on
    // [0.05, 15], noise inflation 1.003
    let gmm = sharp_two_comp();
    let oracle = OracleDenoiser::new(gmm.clone());
    let cond = oracle.no_cond();
    let params = SamplerParams {
        prior_center: cdm_core::samplers::PriorCenter::Zero,
        ..SamplerParams::default()
    };
    assert_eq!(params.n_steps, 18);

    let n = 10_000;
    let mut rng = seed_rng(9);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let x = stochastic_heun_sample(&oracle, &cond, &params, &mut rng).unwrap();
        sum += x[0];
        sum_sq += x[0] * x[0];
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    let want_mean = gmm.mean()[0];
    let want_var = gmm.covariance()[0];
    assert!(
        (mean - want_mean).abs() <= 0.05 * want_var.sqrt().max(want_mean.abs()),
        "mean {mean} vs {want_mean}"
    );
    assert!(
        (var - want_var).abs() <= 0.05 * want_var,
        "var {var} vs {want_var}"
    );

    // churn factor along the grid: the capped value inside the gate, zero
    // outside
    let grid = params.time_grid();
    let want_gamma = (11.0 / 18.0f64).min(std::f64::consts::SQRT_2 - 1.0);
    assert!((want_gamma - 0.41421356).abs() < 1e-7);
    for &sigma in &grid[..grid.len() - 1] {
        let gamma = params.churn_gamma(sigma);
        if (0.05..=15.0).contains(&sigma) {
            assert_eq!(gamma, want_gamma, "sigma={sigma}");
        } else {
            assert_eq!(gamma, 0.0, "sigma={sigma}");
        }
    }
    assert_eq!(params.churn_gamma(20.0), 0.0);
}
