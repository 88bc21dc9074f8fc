use mmalign::aligner::{optimize_state, AlignConfig};
use mmalign::oracle::{generate_scene, make_predictions, witness_state, PerturbSpec, SceneSpec};
use mmalign::windowing::build_window_index;
use proptest::prelude::*;
use proptest::test_runner::FileFailurePersistence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 6,
        failure_persistence: Some(Box::new(FileFailurePersistence::WithSource("regressions"))),
        ..ProptestConfig::default()
    })]

    /// Small steps from a perturbed noiseless optimum only descend in stage 1.
    #[test]
    fn stage_one_descends_with_small_steps(seed in 0u64..1000) {
        let scene = generate_scene(&SceneSpec {
            frames: 6,
            height: 12,
            width: 16,
            focal_range: (14.0, 18.0),
            seed,
            ..SceneSpec::default()
        })
        .unwrap();
        let index = build_window_index(6, 4, 2).unwrap();
        let (groups, truths) = make_predictions(&scene, &index, &PerturbSpec { seed, ..PerturbSpec::default() });
        let mut state = witness_state(&scene, &truths, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in state.params.iter_mut() {
            *p += rng.random_range(-0.02..0.02);
        }
        state.normalize_quaternions();

        let config = AlignConfig {
            alpha: [1.0, 0.5, 0.1, 1.0],
            iters_total: 61,
            align_start: 60,
            lr_pose: 1e-5,
            lr_focal: 1e-5,
            lr_group: 1e-5,
            lr_disparity: 1e-6,
            warmup_iters: 0,
            ..AlignConfig::default()
        };
        let out = optimize_state(&groups, &config, state).unwrap();
        let objective: Vec<f64> = out.trace.iter().filter(|r| r.stage == 1).map(|r| r.l_p + r.l_s).collect();
        prop_assert_eq!(objective.len(), 60);
        for (k, w) in objective.windows(2).enumerate().skip(5) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "iteration {}: {} -> {}", k + 1, w[0], w[1]);
        }
        prop_assert!(objective[59] < objective[0]);
    }
}
