//! Central-difference gradient checks for both levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::training::{build_training_set, TrainingPreset};
use crate::error::Result;
use crate::lower::{lower_cost, lower_gradient, DAProblem};
use crate::mesh::{CandidateSet, SpatialGrid, TimeGrid};
use crate::pde::{Model, Nonlinearity, SpatialField};
use crate::upper::{
    adjoints_at, upper_cost, upper_gradient, BilevelProblem, PenaltyMode, PlacementVector,
    UpperConfig,
};

fn unit_model(m: usize, n: usize) -> Result<Model<f64>> {
    Ok(Model::new(
        SpatialGrid::new(m, &CandidateSet::AllNodes)?,
        TimeGrid::new(n)?,
        Nonlinearity::default(),
    ))
}

/// Max-norm relative error of the lower gradient against central differences
/// at a random control and random feasible placement.
pub fn lower_gradient_check(m: usize, n: usize, delta: f64, seed: u64) -> Result<f64> {
    let model = unit_model(m, n)?;
    let pair = build_training_set(TrainingPreset::Single, 1, seed, 0.01, &model)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..model.grid.n_candidates())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let sigma: Vec<f64> = (0..model.time.n_windows())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let mut u = SpatialField::zeros(model.n_nodes());
    for &k in model.grid.interior() {
        u.values_mut()[k] = rng.random_range(-1.0..1.0);
    }
    let prob = DAProblem::new(
        &model,
        &pair.u_b,
        &pair.obs,
        Some(&pair.forcing),
        1e-2,
        0.1,
        &w,
        &sigma,
    )?;
    let g = lower_gradient(&prob, &u)?;
    let h2 = model.grid.h().powi(2);
    let mut err = 0.0f64;
    let mut scale = 0.0f64;
    for &k in model.grid.interior() {
        let shifted = |s: f64| {
            let mut v = u.clone();
            v.values_mut()[k] += s;
            lower_cost(&prob, &v)
        };
        let fd = (shifted(delta)? - shifted(-delta)?) / (2.0 * delta);
        let an = h2 * g.values()[k];
        err = err.max((fd - an).abs());
        scale = scale.max(an.abs());
    }
    Ok(err / scale)
}

/// Max-norm relative error of the upper gradient against re-assimilation differences.
pub fn upper_gradient_check(
    m: usize,
    n: usize,
    mode: PenaltyMode,
    delta: f64,
    seed: u64,
) -> Result<f64> {
    let model = unit_model(m, n)?;
    let training = build_training_set(TrainingPreset::Single, 1, seed, 0.05, &model)?;
    let mut prob = BilevelProblem::new(&model, &training, 1e-2, 0.1)?;
    prob.lower.tol = 1e-10;
    prob.lower.max_iter = 500;
    let cfg = UpperConfig {
        beta: 0.1,
        beta_w: 1e-3,
        beta_sigma: 2e-3,
        eps_penalty: 0.25,
        ..UpperConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wv = PlacementVector::new(
        (0..prob.n_sensors())
            .map(|_| rng.random_range(0.3..0.9))
            .collect(),
        (0..prob.n_windows())
            .map(|_| rng.random_range(0.3..0.9))
            .collect(),
    )?;
    let sols = prob.solve_lower(&wv, None)?;
    let adj = adjoints_at(&prob, &wv, &sols, &cfg)?;
    let g = upper_gradient(&prob, &wv, &sols, &adj, &cfg, mode)?;
    let flat = wv.flat();
    let mut err = 0.0f64;
    let mut scale = 0.0f64;
    for (i, &gi) in g.iter().enumerate() {
        let at = |s: f64| -> Result<f64> {
            let mut v = flat.clone();
            v[i] += s;
            let p = PlacementVector::from_flat(&v, prob.n_sensors());
            let sol = prob.solve_lower(&p, Some(&sols))?;
            upper_cost(&prob, &p, &sol, &cfg, mode)
        };
        let fd = (at(delta)? - at(-delta)?) / (2.0 * delta);
        err = err.max((fd - gi).abs());
        scale = scale.max(gi.abs());
    }
    Ok(err / scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_are_small_on_tiny_grids() {
        assert!(lower_gradient_check(6, 4, 1e-5, 1).unwrap() <= 1e-6);
        assert!(upper_gradient_check(5, 3, PenaltyMode::Linear, 1e-3, 2).unwrap() <= 1e-4);
    }
}
