use obsplace_core::harness::experiment::{bilevel_problem, upper_config};
use obsplace_core::harness::{
    build_model, build_training_set, error_metrics, ExperimentConfig, TrainingPreset,
};
use obsplace_core::upper::{
    classify_and_binarize, optimize_placement, upper_cost, PenaltyMode, PlacementVector,
};
use proptest::prelude::*;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        m: 6,
        n: 4,
        upper_max_iter: 20,
        ..ExperimentConfig::default()
    }
}

#[test]
fn place_then_binarize_on_a_small_grid() {
    let cfg = small();
    let model = build_model(&cfg).unwrap();
    let set = build_training_set(TrainingPreset::CommonU, 2, 3, 1e-3, &model).unwrap();
    let prob = bilevel_problem(&cfg, &model, &set).unwrap();
    let ucfg = upper_config(&cfg, 1e-7, 0.0);
    let init = PlacementVector::ones(prob.n_sensors(), prob.n_windows());
    let res = optimize_placement(&prob, &ucfg, &init).unwrap();
    assert!(res.j_end <= res.j0);
    assert!(res
        .placement
        .flat()
        .iter()
        .all(|&x| (0.0..=1.0).contains(&x)));
    let bin = classify_and_binarize(
        &res.placement,
        |p: &PlacementVector<f64>| {
            let sols = prob.solve_lower(p, Some(&res.solutions))?;
            upper_cost(&prob, p, &sols, &ucfg, PenaltyMode::Sparsity)
        },
        true,
    )
    .unwrap();
    assert!(bin.placement.flat().iter().all(|&x| x == 0.0 || x == 1.0));
    let sols = prob.solve_lower(&bin.placement, None).unwrap();
    let (abs, rel) = error_metrics(&model, &sols, &set).unwrap();
    assert!(abs >= 0.0 && (0.0..1.5).contains(&rel));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn relative_error_is_scaled_absolute_error(seed in 0u64..1000, sd in 0.0f64..0.05) {
        let cfg = small();
        let model = build_model(&cfg).unwrap();
        let set = build_training_set(TrainingPreset::CommonU, 3, seed, sd, &model).unwrap();
        let prob = bilevel_problem(&cfg, &model, &set).unwrap();
        let wv = PlacementVector::ones(prob.n_sensors(), prob.n_windows());
        let sols = prob.solve_lower(&wv, None).unwrap();
        let (abs, rel) = error_metrics(&model, &sols, &set).unwrap();
        let total: f64 = set.iter().map(|p| model.inner_space_time(&p.y_dag, &p.y_dag).sqrt()).sum();
        prop_assert!(rel >= 0.0);
        prop_assert!((rel - abs * 3.0 / total).abs() <= 1e-12 * rel.max(1e-300));
    }
}
