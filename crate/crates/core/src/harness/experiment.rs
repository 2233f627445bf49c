//! Sweeps over penalty weights and noise levels, and the per-row report.

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::training::{build_training_set, TrainingPreset};
use crate::error::{Error, Result};
use crate::lower::{LowerOptions, LowerSolution};
use crate::mesh::{CandidateSet, SpatialGrid, TimeGrid};
use crate::pde::{Model, Nonlinearity};
use crate::upper::{
    classify_and_binarize, optimize_placement, sigma_band, upper_cost, w_band, BandCounts,
    BilevelProblem, PenaltyMode, PlacementVector, TrainingPair, UpperConfig,
};

/// Builds the discretized model described by a config.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Model<f64>> {
    let candidates = match cfg.candidates.as_str() {
        "all" => CandidateSet::AllNodes,
        _ => CandidateSet::Points(cfg.points.clone()),
    };
    let mut model = Model::new(
        SpatialGrid::new(cfg.m, &candidates)?,
        TimeGrid::new(cfg.n)?,
        Nonlinearity::regularized_abs(cfg.nonlinearity_eps)?,
    );
    model.diffusion = cfg.diffusion;
    Ok(model)
}

pub fn upper_config(cfg: &ExperimentConfig, beta_w: f64, beta_sigma: f64) -> UpperConfig<f64> {
    UpperConfig {
        beta: cfg.beta,
        beta_w,
        beta_sigma,
        eps_penalty: cfg.eps_penalty,
        eps_active_max: cfg.eps_active_max,
        tol: cfg.upper_tol,
        max_iter: cfg.upper_max_iter,
        gamma: cfg.gamma,
        adjoint_rtol: cfg.adjoint_rtol,
        adjoint_max_apps: cfg.adjoint_max_apps,
        ..UpperConfig::default()
    }
}

pub fn bilevel_problem<'a>(
    cfg: &ExperimentConfig,
    model: &'a Model<f64>,
    training: &'a [TrainingPair<f64>],
) -> Result<BilevelProblem<'a, f64>> {
    let mut prob = BilevelProblem::new(model, training, cfg.theta, cfg.alpha)?;
    prob.lower = LowerOptions {
        tol: cfg.lower_tol,
        max_iter: cfg.lower_max_iter,
        ..LowerOptions::default()
    };
    Ok(prob)
}

/// `(1/N) Σ_j ‖y†_j - y_j‖` and `Σ_j ‖y†_j - y_j‖ / Σ_j ‖y†_j‖` in the discrete `L²(Q)` norm.
pub fn error_metrics(
    model: &Model<f64>,
    sols: &[LowerSolution<f64>],
    training: &[TrainingPair<f64>],
) -> Result<(f64, f64)> {
    if sols.len() != training.len() || sols.is_empty() {
        return Err(Error::Shape(format!(
            "{} solutions for {} training pairs",
            sols.len(),
            training.len()
        )));
    }
    let mut diff_sum = 0.0;
    let mut ref_sum = 0.0;
    for (sol, pair) in sols.iter().zip(training) {
        let mut d = pair.y_dag.clone();
        for (a, &b) in d.values_mut().iter_mut().zip(sol.y.values()) {
            *a -= b;
        }
        diff_sum += model.inner_space_time(&d, &d).sqrt();
        ref_sum += model.inner_space_time(&pair.y_dag, &pair.y_dag).sqrt();
    }
    let abs = diff_sum / sols.len() as f64;
    let rel = if ref_sum > 0.0 {
        diff_sum / ref_sum
    } else {
        0.0
    };
    Ok((abs, rel))
}

/// Outcome of one converged sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    /// Continuous placement after both stages.
    pub placement: PlacementVector<f64>,
    pub binary: PlacementVector<f64>,
    pub w_bands: BandCounts,
    pub sigma_bands: BandCounts,
    pub zeros_w: usize,
    pub ones_w: usize,
    pub zeros_sigma: usize,
    pub ones_sigma: usize,
    pub w_l1: f64,
    pub sigma_l1: f64,
    pub j0: f64,
    pub j_end: f64,
    pub iter: usize,
    /// Mean lower-level BFGS iterations per assimilation.
    pub iter_da: f64,
    pub pde_solves: usize,
    pub elliptic_solves: usize,
    pub error_abs: f64,
    pub error_rel: f64,
    pub complementarity: f64,
    pub ambiguous: usize,
    pub thresholded: bool,
    pub converged: [bool; 2],
    /// Upper cost after every accepted step, per stage.
    pub cost_trace: [Vec<f64>; 2],
    /// Smallest and largest placement entry over every iterate.
    pub iterate_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub beta_w: f64,
    pub beta_sigma: f64,
    pub noise_sd: f64,
    pub result: std::result::Result<RowResult, String>,
}

impl ReportRow {
    /// The swept penalty weight of this row.
    pub fn sweep_value(&self, parameter: &str) -> f64 {
        if parameter == "beta_sigma" {
            self.beta_sigma
        } else {
            self.beta_w
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub candidate_coords: Vec<[f64; 2]>,
    pub windows: Vec<(f64, f64)>,
}

fn count_binary(v: &[f64]) -> (usize, usize) {
    let zeros = v.iter().filter(|&&x| x == 0.0).count();
    (zeros, v.len() - zeros)
}

fn run_row(
    cfg: &ExperimentConfig,
    model: &Model<f64>,
    training: &[TrainingPair<f64>],
    beta_w: f64,
    beta_sigma: f64,
) -> Result<RowResult> {
    let prob = bilevel_problem(cfg, model, training)?;
    let ucfg = upper_config(cfg, beta_w, beta_sigma);
    let init = PlacementVector::new(
        vec![cfg.initial_weight; prob.n_sensors()],
        vec![cfg.initial_weight; prob.n_windows()],
    )?;
    let res = optimize_placement(&prob, &ucfg, &init)?;
    let mut extra_pde = 0;
    let bin = classify_and_binarize(
        &res.placement,
        |p: &PlacementVector<f64>| {
            let sols = prob.solve_lower(p, Some(&res.solutions))?;
            upper_cost(&prob, p, &sols, &ucfg, PenaltyMode::Sparsity)
        },
        cfg.threshold_fallback,
    )?;
    extra_pde += bin.evaluations;
    let final_sols = prob.solve_lower(&bin.placement, Some(&res.solutions))?;
    let (error_abs, error_rel) = error_metrics(model, &final_sols, training)?;
    let (zeros_w, ones_w) = count_binary(&bin.placement.w);
    let (zeros_sigma, ones_sigma) = count_binary(&bin.placement.sigma);
    let mut trace: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for r in &res.history {
        trace[r.stage - 1].push(r.cost);
    }
    let range = res
        .history
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
            (a.min(r.range.0), b.max(r.range.1))
        });
    let pde_per_eval: usize = final_sols
        .iter()
        .map(|s| s.forward_solves + s.adjoint_solves)
        .sum();
    Ok(RowResult {
        w_bands: BandCounts::of(res.placement.w.iter().map(|&x| w_band(x))),
        sigma_bands: BandCounts::of(res.placement.sigma.iter().map(|&x| sigma_band(x))),
        w_l1: res.placement.w_l1(),
        sigma_l1: res.placement.sigma_l1(),
        zeros_w,
        ones_w,
        zeros_sigma,
        ones_sigma,
        j0: res.j0,
        j_end: res.j_end,
        iter: res.outer_iterations(),
        iter_da: res.counts.lower_iterations as f64 / res.counts.lower_runs.max(1) as f64,
        pde_solves: res.counts.pde + extra_pde * pde_per_eval,
        elliptic_solves: res.counts.elliptic,
        error_abs,
        error_rel,
        complementarity: res.kkt.complementarity,
        ambiguous: bin.ambiguous.len(),
        thresholded: bin.thresholded,
        converged: [res.stages[0].converged, res.stages[1].converged],
        cost_trace: trace,
        iterate_range: range,
        placement: res.placement,
        binary: bin.placement,
    })
}

/// Runs every sweep value for every noise level; failing rows are recorded, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let preset = TrainingPreset::parse(&cfg.preset, cfg.jump)?;
    let sets: Vec<Vec<TrainingPair<f64>>> = cfg
        .noise_sd
        .iter()
        .map(|&sd| build_training_set(preset, cfg.n_pairs, cfg.seed, sd, &model))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, f64)> = (0..cfg.noise_sd.len())
        .flat_map(|i| cfg.sweep.iter().map(move |&v| (i, v)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, v)| {
            let (beta_w, beta_sigma) = if cfg.sweep_parameter == "beta_sigma" {
                (cfg.beta_w, v)
            } else {
                (v, cfg.beta_sigma)
            };
            let result =
                run_row(cfg, &model, &sets[i], beta_w, beta_sigma).map_err(|e| e.to_string());
            ReportRow {
                beta_w,
                beta_sigma,
                noise_sd: cfg.noise_sd[i],
                result,
            }
        })
        .collect();
    Ok(RunReport {
        config: cfg.clone(),
        rows,
        candidate_coords: model
            .grid
            .candidates()
            .iter()
            .map(|&k| model.grid.coords(k))
            .collect(),
        windows: model.time.windows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::training::TrainingPreset;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            m: 6,
            n: 4,
            sweep: vec![1e-4, 5e-2],
            upper_max_iter: 15,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn error_metrics_identity() {
        let cfg = tiny();
        let model = build_model(&cfg).unwrap();
        let set = build_training_set(TrainingPreset::CommonU, 3, 1, 0.01, &model).unwrap();
        let prob = bilevel_problem(&cfg, &model, &set).unwrap();
        let wv = PlacementVector::ones(prob.n_sensors(), prob.n_windows());
        let sols = prob.solve_lower(&wv, None).unwrap();
        let (abs, rel) = error_metrics(&model, &sols, &set).unwrap();
        let total: f64 = set
            .iter()
            .map(|p| model.inner_space_time(&p.y_dag, &p.y_dag).sqrt())
            .sum();
        assert!(rel >= 0.0);
        assert!((rel - abs * 3.0 / total).abs() <= 1e-14 * rel.max(1e-300));
        let exact: Vec<LowerSolution<f64>> = sols
            .into_iter()
            .zip(&set)
            .map(|(s, p)| LowerSolution {
                y: p.y_dag.clone(),
                ..s
            })
            .collect();
        assert_eq!(error_metrics(&model, &exact, &set).unwrap(), (0.0, 0.0));
        assert!(error_metrics(&model, &exact[..1], &set).is_err());
    }

    #[test]
    fn tiny_sweep_produces_consistent_rows() {
        let report = run_experiment(&tiny()).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            let r = row.result.as_ref().unwrap();
            assert_eq!(r.w_bands.total(), 36);
            assert_eq!(r.sigma_bands.total(), 6);
            assert_eq!(r.zeros_w + r.ones_w, 36);
            assert!(r.binary.flat().iter().all(|&x| x == 0.0 || x == 1.0));
        }
        let big = report.rows[1].result.as_ref().unwrap();
        assert_eq!(big.ones_w, 0);
    }
}
