use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use obsplace_core::harness::diagnostics::{lower_gradient_check, upper_gradient_check};
use obsplace_core::harness::{
    build_model, build_training_set, load_config, run_experiment, write_report, ExperimentConfig,
    RunReport, TrainingPreset,
};
use obsplace_core::lower::{assimilate, DAProblem, LowerOptions};
use obsplace_core::pde::solve_forward;
use obsplace_core::sparsity::PenaltyFamily;
use obsplace_core::upper::PenaltyMode;
use obsplace_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "obsplace",
    version,
    about = "Optimal sensor placement for parabolic data assimilation"
)]
struct Cli {
    /// TOML config; keys missing from it come from the experiment preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set m=10 --set sweep=[1e-4,1e-3]`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the state equation for every training pair.
    Forward,
    /// Reconstruct every training pair's initial state with all sensors and windows on.
    Assimilate,
    /// Optimize one placement at the config's `beta_w` and `beta_sigma`.
    Place,
    /// Run a preset experiment sweep and write its tables and plot data.
    Experiment {
        /// 1a, 1b, 2, 3 or 4.
        id: String,
    },
    /// Compare both gradients with central differences.
    CheckGradients {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the cubic bridge coefficients of the sparsity penalty.
    Coeffs {
        #[arg(long, num_args = 1.., default_values_t = [0.5, 0.25, 0.125, 0.0625])]
        eps: Vec<f64>,
    },
}

fn config(cli: &Cli, experiment: Option<&str>) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let base = match experiment {
        Some(id) if cli.config.is_none() => ExperimentConfig::preset(id)?,
        Some(id) if base.experiment != id => base.with_overrides(&[format!("experiment={id}")])?,
        _ => base,
    };
    base.with_overrides(&cli.overrides)
}

fn print_report(report: &RunReport) {
    let param = &report.config.sweep_parameter;
    println!(
        "{param:>12} {:>8} {:>8} {:>11} {:>11} {:>5} {:>7} {:>9} {:>11}",
        "ones_w", "ones_s", "J0", "J_end", "iter", "iterDA", "pde", "error_rel"
    );
    for row in &report.rows {
        let v = row.sweep_value(param);
        match &row.result {
            Ok(r) => println!(
                "{v:>12} {:>8} {:>8} {:>11.4e} {:>11.4e} {:>5} {:>7.1} {:>9} {:>11.4e}",
                r.ones_w, r.ones_sigma, r.j0, r.j_end, r.iter, r.iter_da, r.pde_solves, r.error_rel
            ),
            Err(e) => println!("{v:>12} failed: {e}"),
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Forward => {
            let cfg = config(cli, None)?;
            let model = build_model(&cfg)?;
            let preset = TrainingPreset::parse(&cfg.preset, cfg.jump)?;
            for (j, pair) in build_training_set(preset, cfg.n_pairs, cfg.seed, 0.0, &model)?
                .iter()
                .enumerate()
            {
                let fwd = solve_forward(&model, &pair.u_dag, Some(&pair.forcing))?;
                let last = fwd.y.level(model.n_levels() - 1);
                let peak = last.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                println!(
                    "pair {j}: newton<= {} |y(T)|_inf = {peak:.6e} |y|_L2(Q) = {:.6e}",
                    fwd.max_newton_iterations(),
                    model.inner_space_time(&fwd.y, &fwd.y).sqrt()
                );
            }
        }
        Command::Assimilate => {
            let cfg = config(cli, None)?;
            let model = build_model(&cfg)?;
            let preset = TrainingPreset::parse(&cfg.preset, cfg.jump)?;
            let sd = cfg.noise_sd.first().copied().unwrap_or(0.0);
            let w = vec![1.0; model.grid.n_candidates()];
            let sigma = vec![1.0; model.time.n_windows()];
            let opts = LowerOptions {
                tol: cfg.lower_tol,
                max_iter: cfg.lower_max_iter,
                ..LowerOptions::default()
            };
            for (j, pair) in build_training_set(preset, cfg.n_pairs, cfg.seed, sd, &model)?
                .iter()
                .enumerate()
            {
                let prob = DAProblem::new(
                    &model,
                    &pair.u_b,
                    &pair.obs,
                    Some(&pair.forcing),
                    cfg.theta,
                    cfg.alpha,
                    &w,
                    &sigma,
                )?;
                let sol = assimilate(&prob, &pair.u_b, &opts)?;
                let mut diff = pair.u_dag.clone();
                for (a, &b) in diff.values_mut().iter_mut().zip(sol.u.values()) {
                    *a -= b;
                }
                let rel = (model.inner_space(diff.values(), diff.values())
                    / model.inner_space(pair.u_dag.values(), pair.u_dag.values()))
                .sqrt();
                println!(
                    "pair {j}: cost {:.6e} |grad| {:.3e} iterations {} relative initial-state error {rel:.4e}",
                    sol.cost, sol.grad_norm, sol.iterations
                );
            }
        }
        Command::Place => {
            let cfg = config(cli, None)?;
            let value = if cfg.sweep_parameter == "beta_sigma" {
                cfg.beta_sigma
            } else {
                cfg.beta_w
            };
            let cfg = ExperimentConfig {
                sweep: vec![value],
                noise_sd: cfg.noise_sd.iter().take(1).copied().collect(),
                ..cfg
            };
            let report = run_experiment(&cfg)?;
            print_report(&report);
            for p in write_report(&report, &cli.out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Experiment { id } => {
            let cfg = config(cli, Some(id))?;
            let report = run_experiment(&cfg)?;
            print_report(&report);
            for p in write_report(&report, &cli.out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::CheckGradients { seed } => {
            let lower = lower_gradient_check(10, 12, 1e-5, *seed)?;
            println!("lower gradient, 10x10 n=12: relative error {lower:.3e}");
            for mode in [PenaltyMode::Linear, PenaltyMode::Sparsity] {
                let upper = upper_gradient_check(6, 4, mode, 1e-3, *seed)?;
                println!("upper gradient ({mode:?}), 6x6 n=4: relative error {upper:.3e}");
            }
        }
        Command::Coeffs { eps } => {
            println!(
                "{:>10} {:>22} {:>22} {:>22} {:>22} {:>10}",
                "eps", "a", "b", "c", "d", "residual"
            );
            for &e in eps {
                let fam = PenaltyFamily::new(e)?;
                let [a, b, c, d] = fam.coefficients();
                println!(
                    "{e:>10} {a:>22.15e} {b:>22.15e} {c:>22.15e} {d:>22.15e} {:>10.2e}",
                    fam.residual()
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
