//! Property tests of the algebraic invariants.

use cdm_core::drift::energy_distance;
use cdm_core::samplers::SamplerParams;
use cdm_core::schedule::NoiseSchedule;
use cdm_core::tts::length_regulate;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tweedie_round_trip(
        xs in prop::collection::vec(-50.0..50.0f64, 1..8),
        hs in prop::collection::vec(-50.0..50.0f64, 1..8),
        t in 0.01..15.0f64,
    ) {
        let n = xs.len().min(hs.len());
        let (xs, hs) = (&xs[..n], &hs[..n]);
        let s = NoiseSchedule::default();
        let score = s.score_from_denoiser(hs, xs, t).unwrap();
        let back = s.denoiser_from_score(&score, xs, t).unwrap();
        for (h, b) in hs.iter().zip(&back) {
            let rel = (h - b).abs() / h.abs().max(1.0);
            prop_assert!(rel < 1e-12, "h={h} back={b} t={t}");
        }
    }

    #[test]
    fn time_grid_is_strictly_decreasing(
        n_steps in 1usize..64,
        rho in 1.0..10.0f64,
        lo_exp in -3.0..-0.5f64,
        hi in 1.0..30.0f64,
    ) {
        let params = SamplerParams {
            n_steps,
            rho,
            sigma_lo: 10f64.powf(lo_exp),
            sigma_hi: hi,
            ..SamplerParams::default()
        };
        prop_assume!(params.validate().is_ok());
        let grid = params.time_grid();
        prop_assert_eq!(grid.len(), n_steps + 1);
        prop_assert_eq!(*grid.last().unwrap(), 0.0);
        for w in grid.windows(2) {
            prop_assert!(w[1] < w[0], "grid {:?}", grid);
        }
    }

    #[test]
    fn energy_distance_symmetric_nonnegative_zero_on_self(
        a in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2..3), 2..20),
        b in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2..3), 2..20),
    ) {
        prop_assume!(a.iter().all(|x| x.len() == 2) && b.iter().all(|x| x.len() == 2));
        let dab = energy_distance(&a, &b);
        let dba = energy_distance(&b, &a);
        prop_assert!((dab - dba).abs() < 1e-10);
        prop_assert!(dab >= -1e-12);
        prop_assert_eq!(energy_distance(&a, &a), 0.0);
    }

    #[test]
    fn length_regulation_preserves_frame_count(
        durations in prop::collection::vec(1u32..7, 1..12),
    ) {
        let token_mu: Vec<Vec<f64>> = (0..durations.len())
            .map(|i| vec![i as f64, -(i as f64)])
            .collect();
        let frames = length_regulate(&token_mu, &durations).unwrap();
        let want: u32 = durations.iter().sum();
        prop_assert_eq!(frames.len(), want as usize);
        // first frame of each token run equals that token's vector
        let mut off = 0usize;
        for (i, &d) in durations.iter().enumerate() {
            prop_assert_eq!(&frames[off], &token_mu[i]);
            off += d as usize;
        }
    }
}
