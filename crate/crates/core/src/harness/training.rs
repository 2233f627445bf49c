//! Training sets: reference initial states, their trajectories and noisy observations.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::lower::make_observations;
use crate::pde::{solve_forward, Model, SpaceTimeField, SpatialField};
use crate::scalar::Scalar;
use crate::upper::TrainingPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingPreset {
    /// One pair with `u† = sin(2πx) sin(2πy)`.
    Single,
    /// Nine shifted copies of the single state, optionally with a jump.
    NineVariant { jump: bool },
    /// `N` pairs sharing `u†` with scaled forcings and independent noise.
    CommonU,
}

impl TrainingPreset {
    pub fn parse(name: &str, jump: bool) -> Result<Self> {
        match name {
            "single" => Ok(Self::Single),
            "nine-variant" => Ok(Self::NineVariant { jump }),
            "common-u" => Ok(Self::CommonU),
            other => Err(Error::Parameter(format!(
                "unknown training preset `{other}`"
            ))),
        }
    }
}

/// Offsets of the nine variants: the 3×3 lattice `{-0.1, 0, 0.1}²`.
pub const VARIANT_OFFSETS: [f64; 3] = [-0.1, 0.0, 0.1];

pub const JUMP_HEIGHT: f64 = 0.1;

/// `sin(2πx) sin(2πy)`.
pub fn reference_state(x: f64, y: f64) -> f64 {
    (2.0 * PI * x).sin() * (2.0 * PI * y).sin()
}

/// `(1 - t) sin(πx)`.
pub fn reference_forcing(x: f64, _y: f64, t: f64) -> f64 {
    (1.0 - t) * (PI * x).sin()
}

fn lit<T: Scalar>(v: f64) -> T {
    T::lit(v)
}

fn f64_of<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Builds the pairs with a zero background state. Pair `j` draws its noise from `seed + j`.
pub fn build_training_set<T: Scalar>(
    preset: TrainingPreset,
    n_pairs: usize,
    seed: u64,
    sd: T,
    model: &Model<T>,
) -> Result<Vec<TrainingPair<T>>> {
    let expected = match preset {
        TrainingPreset::Single => Some(1),
        TrainingPreset::NineVariant { .. } => Some(9),
        TrainingPreset::CommonU => None,
    };
    if let Some(e) = expected {
        if n_pairs != e {
            return Err(Error::Parameter(format!(
                "preset needs N = {e}, got {n_pairs}"
            )));
        }
    }
    if n_pairs == 0 {
        return Err(Error::Parameter(
            "training set needs at least one pair".into(),
        ));
    }
    (0..n_pairs)
        .map(|j| {
            let (u_dag, amplitude) = match preset {
                TrainingPreset::Single => (
                    SpatialField::from_fn(&model.grid, |x, y| {
                        lit(reference_state(f64_of(x), f64_of(y)))
                    }),
                    1.0,
                ),
                TrainingPreset::NineVariant { jump } => {
                    let a = VARIANT_OFFSETS[j % 3];
                    let b = VARIANT_OFFSETS[j / 3];
                    let u = SpatialField::from_fn(&model.grid, |x, y| {
                        let (x, y) = (f64_of(x), f64_of(y));
                        let step = if jump && x > 0.5 { JUMP_HEIGHT } else { 0.0 };
                        lit(reference_state(x - a, y - b) + step)
                    });
                    (u, 1.0)
                }
                TrainingPreset::CommonU => (
                    SpatialField::from_fn(&model.grid, |x, y| {
                        lit(reference_state(f64_of(x), f64_of(y)))
                    }),
                    1.0 + 0.5 * j as f64,
                ),
            };
            let forcing = SpaceTimeField::from_fn(&model.grid, &model.time, |x, y, t| {
                lit(amplitude * reference_forcing(f64_of(x), f64_of(y), f64_of(t)))
            });
            make_pair(model, u_dag, forcing, sd, seed.wrapping_add(j as u64))
        })
        .collect()
}

/// Solves for `y†` and draws the observations of one pair.
pub fn make_pair<T: Scalar>(
    model: &Model<T>,
    u_dag: SpatialField<T>,
    forcing: SpaceTimeField<T>,
    sd: T,
    seed: u64,
) -> Result<TrainingPair<T>> {
    let y_dag = solve_forward(model, &u_dag, Some(&forcing))?.y;
    let obs = make_observations(&y_dag, model, sd, seed)?;
    Ok(TrainingPair {
        u_b: SpatialField::zeros(model.n_nodes()),
        u_dag,
        y_dag,
        obs,
        forcing,
    })
}
