//! Upper level: placement cost, the coupled bilevel adjoint, the placement
//! gradient, and the two-stage projected BFGS optimizer with ε-active sets.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gmres, DenseMatrix};
use crate::lower::{assimilate, DAProblem, LowerOptions, LowerSolution, ObservationSeries};
use crate::mesh::TimeGrid;
use crate::pde::{
    solve_adjoint_backward, solve_linearized_forward, Coupling, EllipticSolver, Model, NodalSource,
    SensorSeries, SpaceTimeField, SpatialField,
};
use crate::scalar::{dot, norm2, Scalar};
use crate::sparsity::PenaltyFamily;

/// Relaxed sensor weights `w` and time-window weights `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementVector<T> {
    pub w: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Scalar> PlacementVector<T> {
    pub fn new(w: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        let p = Self { w, sigma };
        if let Some(i) = p
            .flat()
            .iter()
            .position(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::Parameter(format!(
                "placement entry {i} outside [0, 1]"
            )));
        }
        Ok(p)
    }

    pub fn ones(n_sensors: usize, n_windows: usize) -> Self {
        Self {
            w: vec![T::one(); n_sensors],
            sigma: vec![T::one(); n_windows],
        }
    }

    pub fn zeros(n_sensors: usize, n_windows: usize) -> Self {
        Self {
            w: vec![T::zero(); n_sensors],
            sigma: vec![T::zero(); n_windows],
        }
    }

    pub fn n_sensors(&self) -> usize {
        self.w.len()
    }

    pub fn n_windows(&self) -> usize {
        self.sigma.len()
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[w, σ]` concatenated.
    pub fn flat(&self) -> Vec<T> {
        self.w.iter().chain(&self.sigma).copied().collect()
    }

    pub fn from_flat(v: &[T], n_sensors: usize) -> Self {
        Self {
            w: v[..n_sensors].to_vec(),
            sigma: v[n_sensors..].to_vec(),
        }
    }

    pub fn w_l1(&self) -> T {
        self.w.iter().copied().sum()
    }

    pub fn sigma_l1(&self) -> T {
        self.sigma.iter().copied().sum()
    }
}

/// Componentwise clamp to `[0, 1]`.
pub fn project<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter().map(|&x| x.max(T::zero()).min(T::one())).collect()
}

/// Pointwise training loss `ℓ(a, target)` and its derivative in `a`.
pub trait PointLoss<T>: Send + Sync {
    fn value(&self, a: T, target: T) -> T;
    fn derivative(&self, a: T, target: T) -> T;
}

/// `(a - target)²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredLoss;

impl<T: Scalar> PointLoss<T> for SquaredLoss {
    fn value(&self, a: T, target: T) -> T {
        (a - target) * (a - target)
    }

    fn derivative(&self, a: T, target: T) -> T {
        T::lit(2.0) * (a - target)
    }
}

/// Reference initial state, its trajectory, the observations and the data of one assimilation.
#[derive(Debug, Clone)]
pub struct TrainingPair<T> {
    pub u_dag: SpatialField<T>,
    pub y_dag: SpaceTimeField<T>,
    pub obs: ObservationSeries<T>,
    pub u_b: SpatialField<T>,
    pub forcing: SpaceTimeField<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyMode {
    Linear,
    Sparsity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperConfig<T> {
    pub beta: T,
    pub beta_w: T,
    pub beta_sigma: T,
    pub eps_penalty: T,
    /// Cap on the active-set tolerance `ε_k = min(eps_active_max, ‖W - P(W - g)‖)`.
    pub eps_active_max: T,
    pub tol: T,
    pub max_iter: usize,
    pub gamma: T,
    pub max_trials: usize,
    pub adjoint_rtol: T,
    pub adjoint_max_apps: usize,
}

impl<T: Scalar> Default for UpperConfig<T> {
    fn default() -> Self {
        Self {
            beta: T::lit(0.09),
            beta_w: T::lit(1e-3),
            beta_sigma: T::zero(),
            eps_penalty: T::lit(0.5),
            eps_active_max: T::lit(0.1),
            tol: T::lit(1e-6),
            max_iter: 60,
            gamma: T::lit(1e-4),
            max_trials: 40,
            adjoint_rtol: T::lit(1e-8),
            adjoint_max_apps: 200,
        }
    }
}

impl<T: Scalar> UpperConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("beta", self.beta),
            ("beta_w", self.beta_w),
            ("beta_sigma", self.beta_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= T::zero()) {
                return Err(Error::Parameter(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.gamma > T::zero() && self.gamma < T::one()) {
            return Err(Error::Parameter(format!(
                "γ̂ must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.tol > T::zero()) || !(self.adjoint_rtol > T::zero()) {
            return Err(Error::Parameter("tolerances must be positive".into()));
        }
        if !(self.eps_active_max >= T::zero()) {
            return Err(Error::Parameter(
                "active-set cap must be non-negative".into(),
            ));
        }
        PenaltyFamily::new(self.eps_penalty)?;
        Ok(())
    }

    pub fn penalty_family(&self) -> Result<PenaltyFamily<T>> {
        PenaltyFamily::new(self.eps_penalty)
    }
}

/// Training set, model and lower-level settings shared by every upper-level evaluation.
#[derive(Clone, Copy)]
pub struct BilevelProblem<'a, T> {
    pub model: &'a Model<T>,
    pub training: &'a [TrainingPair<T>],
    pub theta: T,
    pub alpha: T,
    pub lower: LowerOptions<T>,
    pub loss: &'a dyn PointLoss<T>,
}

impl<'a, T: Scalar> BilevelProblem<'a, T> {
    pub fn new(
        model: &'a Model<T>,
        training: &'a [TrainingPair<T>],
        theta: T,
        alpha: T,
    ) -> Result<Self> {
        if training.is_empty() {
            return Err(Error::Parameter("training set is empty".into()));
        }
        let (nn, nl) = (model.n_nodes(), model.n_levels());
        for (j, p) in training.iter().enumerate() {
            let ok = p.u_dag.len() == nn
                && p.u_b.len() == nn
                && p.y_dag.n_nodes() == nn
                && p.y_dag.n_levels() == nl
                && p.forcing.n_nodes() == nn
                && p.forcing.n_levels() == nl;
            if !ok {
                return Err(Error::Shape(format!(
                    "training pair {j} does not match the grid"
                )));
            }
        }
        EllipticSolver::new(&model.grid, theta, alpha)?;
        Ok(Self {
            model,
            training,
            theta,
            alpha,
            lower: LowerOptions::default(),
            loss: &SquaredLoss,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.model.grid.n_candidates()
    }

    pub fn n_windows(&self) -> usize {
        self.model.time.n_windows()
    }

    pub fn da_problem(
        &self,
        j: usize,
        placement: &'a PlacementVector<T>,
    ) -> Result<DAProblem<'a, T>> {
        let pair = &self.training[j];
        DAProblem::new(
            self.model,
            &pair.u_b,
            &pair.obs,
            Some(&pair.forcing),
            self.theta,
            self.alpha,
            &placement.w,
            &placement.sigma,
        )
    }

    fn check_placement(&self, placement: &PlacementVector<T>) -> Result<()> {
        if placement.n_sensors() != self.n_sensors() || placement.n_windows() != self.n_windows() {
            return Err(Error::Shape(format!(
                "placement is {} + {}, expected {} + {}",
                placement.n_sensors(),
                placement.n_windows(),
                self.n_sensors(),
                self.n_windows()
            )));
        }
        Ok(())
    }

    /// Assimilates every pair at `placement`, warm-starting from `warm` when given.
    pub fn solve_lower(
        &self,
        placement: &PlacementVector<T>,
        warm: Option<&[LowerSolution<T>]>,
    ) -> Result<Vec<LowerSolution<T>>> {
        self.check_placement(placement)?;
        if let Some(w) = warm {
            if w.len() != self.training.len() {
                return Err(Error::Shape("warm start count".into()));
            }
        }
        (0..self.training.len())
            .into_par_iter()
            .map(|j| {
                let pair = &self.training[j];
                let prob = DAProblem::new(
                    self.model,
                    &pair.u_b,
                    &pair.obs,
                    Some(&pair.forcing),
                    self.theta,
                    self.alpha,
                    &placement.w,
                    &placement.sigma,
                )?;
                let start = warm.map_or(&pair.u_b, |w| &w[j].u);
                assimilate(&prob, start, &self.lower)
            })
            .collect()
    }

    /// `Σ_j [τh² Σ_{s≥1} ℓ(y_j, y†_j) + β h² Σ ℓ(u_j, u†_j)]`.
    pub fn training_loss(&self, sols: &[LowerSolution<T>], beta: T) -> Result<T> {
        if sols.len() != self.training.len() {
            return Err(Error::Shape(format!(
                "{} lower solutions for {} training pairs",
                sols.len(),
                self.training.len()
            )));
        }
        let h = self.model.grid.h();
        let tau = self.model.time.step();
        let mut total = T::zero();
        for (sol, pair) in sols.iter().zip(self.training) {
            let mut ly = T::zero();
            for s in 1..self.model.n_levels() {
                ly = ly
                    + sol
                        .y
                        .level(s)
                        .iter()
                        .zip(pair.y_dag.level(s))
                        .map(|(&a, &b)| self.loss.value(a, b))
                        .sum::<T>();
            }
            let lu: T = sol
                .u
                .values()
                .iter()
                .zip(pair.u_dag.values())
                .map(|(&a, &b)| self.loss.value(a, b))
                .sum();
            total = total + h * h * (tau * ly + beta * lu);
        }
        Ok(total)
    }
}

/// `β_w Σ w + β_σ Σ σ`, or the same with `Φ_ε` in sparsity mode.
pub fn penalty<T: Scalar>(
    placement: &PlacementVector<T>,
    cfg: &UpperConfig<T>,
    mode: PenaltyMode,
) -> Result<T> {
    Ok(match mode {
        PenaltyMode::Linear => {
            cfg.beta_w * placement.w_l1() + cfg.beta_sigma * placement.sigma_l1()
        }
        PenaltyMode::Sparsity => {
            let fam = cfg.penalty_family()?;
            cfg.beta_w * fam.sum(&placement.w)? + cfg.beta_sigma * fam.sum(&placement.sigma)?
        }
    })
}

pub fn upper_cost<T: Scalar>(
    prob: &BilevelProblem<'_, T>,
    placement: &PlacementVector<T>,
    sols: &[LowerSolution<T>],
    cfg: &UpperConfig<T>,
    mode: PenaltyMode,
) -> Result<T> {
    prob.check_placement(placement)?;
    Ok(prob.training_loss(sols, cfg.beta)? + penalty(placement, cfg, mode)?)
}

/// Solution `(η, ζ, τ)` of the coupled adjoint system for one training pair.
#[derive(Debug, Clone)]
pub struct BilevelAdjoint<T> {
    pub eta: SpaceTimeField<T>,
    pub zeta: SpaceTimeField<T>,
    pub tau: SpatialField<T>,
    /// `‖τ - Φ(τ)‖ / ‖Φ(0)‖` for the affine fixed-point map `Φ`.
    pub residual: T,
    pub applications: usize,
    pub forward_solves: usize,
    pub backward_solves: usize,
    pub elliptic_solves: usize,
}

struct AdjointMap<'a, T> {
    prob: &'a BilevelProblem<'a, T>,
    sol: &'a LowerSolution<T>,
    pair: &'a TrainingPair<T>,
    placement: &'a PlacementVector<T>,
    elliptic: EllipticSolver<T>,
    beta: T,
    c: Vec<T>,
}

impl<T: Scalar> AdjointMap<'_, T> {
    /// `Φ(τ)`: `ζ` forward from `-τ`, `η` backward, then the elliptic update. Sources are dropped
    /// when `affine` is false, which leaves the linear part `T_lin`.
    fn apply(
        &self,
        tau: &[T],
        affine: bool,
    ) -> Result<(Vec<T>, SpaceTimeField<T>, SpaceTimeField<T>)> {
        let model = self.prob.model;
        let start = SpatialField::from_values(tau.iter().map(|&v| -v).collect());
        let zeta = solve_linearized_forward(model, &self.sol.forward, &start)?;
        let sensors = model.grid.candidates();
        let mut nodal = SensorSeries::zeros(sensors.len(), model.n_levels());
        for s in 1..model.n_levels() {
            for (k, &node) in sensors.iter().enumerate() {
                nodal.set(k, s, self.placement.w[k] * self.c[s] * zeta.at(node, s));
            }
        }
        let volumetric = affine.then(|| {
            let mut v = model.zero_space_time();
            for s in 1..model.n_levels() {
                for ((out, &y), &yd) in v
                    .level_mut(s)
                    .iter_mut()
                    .zip(self.sol.y.level(s))
                    .zip(self.pair.y_dag.level(s))
                {
                    *out = -self.prob.loss.derivative(y, yd);
                }
            }
            v
        });
        let eta = solve_adjoint_backward(
            model,
            &self.sol.forward,
            Some(NodalSource {
                sensors,
                values: &nodal,
            }),
            volumetric.as_ref(),
            Some(Coupling {
                p: &self.sol.p,
                zeta: &zeta,
            }),
        )?;
        let mut rhs = eta.level(0).to_vec();
        if affine {
            for ((r, &u), &ud) in rhs
                .iter_mut()
                .zip(self.sol.u.values())
                .zip(self.pair.u_dag.values())
            {
                *r = *r - self.beta * self.prob.loss.derivative(u, ud);
            }
        }
        let next = self
            .elliptic
            .solve(&SpatialField::from_values(rhs))?
            .into_values();
        Ok((next, zeta, eta))
    }
}

/// Solves the coupled system by GMRES on `(I - T_lin) τ = Φ(0)` in `τ`-space.
pub fn solve_bilevel_adjoint<T: Scalar>(
    prob: &BilevelProblem<'_, T>,
    j: usize,
    sol: &LowerSolution<T>,
    placement: &PlacementVector<T>,
    cfg: &UpperConfig<T>,
) -> Result<BilevelAdjoint<T>> {
    prob.check_placement(placement)?;
    let pair = prob.training.get(j).ok_or(Error::Bounds {
        index: j,
        len: prob.training.len(),
    })?;
    let map = AdjointMap {
        prob,
        sol,
        pair,
        placement,
        elliptic: EllipticSolver::new(&prob.model.grid, prob.theta, prob.alpha)?,
        beta: cfg.beta,
        c: prob.model.time.level_weights(&placement.sigma),
    };
    let (r, _, _) = map.apply(&vec![T::zero(); prob.model.n_nodes()], true)?;
    let out = gmres(
        |v: &[T]| {
            let (t, _, _) = map.apply(v, false)?;
            Ok(v.iter().zip(&t).map(|(&a, &b)| a - b).collect())
        },
        &r,
        cfg.adjoint_rtol,
        cfg.adjoint_max_apps,
    )?;
    if !out.converged {
        return Err(Error::AdjointSolver {
            applications: out.applications,
            residual: out.relative_residual.to_f64().unwrap_or(f64::NAN),
        });
    }
    let (phi, zeta, eta) = map.apply(&out.x, true)?;
    let rnorm = norm2(&r);
    let diff: Vec<T> = out.x.iter().zip(&phi).map(|(&a, &b)| a - b).collect();
    let residual = if rnorm > T::zero() {
        norm2(&diff) / rnorm
    } else {
        norm2(&diff)
    };
    let solves = out.applications + 2;
    Ok(BilevelAdjoint {
        eta,
        zeta,
        tau: SpatialField::from_values(out.x),
        residual,
        applications: out.applications,
        forward_solves: solves,
        backward_solves: solves,
        elliptic_solves: solves,
    })
}

/// Derivatives of `B(w, σ) = Σ_k Σ_s w_k c_s(σ) M_ks` in `w` and in `σ`, `c_s = Σ_i σ_i ρ_i(t_s)`.
pub fn bilinear_sensitivities<T: Scalar>(
    m: &SensorSeries<T>,
    w: &[T],
    sigma: &[T],
    time: &TimeGrid<T>,
) -> (Vec<T>, Vec<T>) {
    let c = time.level_weights(sigma);
    let nw = time.n_windows();
    let mut gw = vec![T::zero(); w.len()];
    let mut gs = vec![T::zero(); nw];
    for s in 0..m.n_levels() {
        let row = m.level(s);
        let mut wm = T::zero();
        for (k, (&mk, &wk)) in row.iter().zip(w).enumerate() {
            gw[k] = gw[k] + c[s] * mk;
            wm = wm + wk * mk;
        }
        for (i, g) in gs.iter_mut().enumerate() {
            *g = *g + time.rho_at_level(s, i) * wm;
        }
    }
    (gw, gs)
}

/// Placement gradient `[∂F/∂w, ∂F/∂σ]`.
pub fn upper_gradient<T: Scalar>(
    prob: &BilevelProblem<'_, T>,
    placement: &PlacementVector<T>,
    sols: &[LowerSolution<T>],
    adjoints: &[BilevelAdjoint<T>],
    cfg: &UpperConfig<T>,
    mode: PenaltyMode,
) -> Result<Vec<T>> {
    prob.check_placement(placement)?;
    if sols.len() != prob.training.len() || adjoints.len() != sols.len() {
        return Err(Error::Shape(
            "one lower solution and adjoint per training pair".into(),
        ));
    }
    let model = prob.model;
    let tau = model.time.step();
    let sensors = model.grid.candidates();
    let mut gw = vec![T::zero(); placement.n_sensors()];
    let mut gs = vec![T::zero(); placement.n_windows()];
    for ((sol, adj), pair) in sols.iter().zip(adjoints).zip(prob.training) {
        let mut m = SensorSeries::zeros(sensors.len(), model.n_levels());
        for s in 1..model.n_levels() {
            for (k, &node) in sensors.iter().enumerate() {
                let misfit = sol.y.at(node, s) - pair.obs.get(k, s);
                m.set(k, s, tau * adj.zeta.at(node, s) * misfit);
            }
        }
        let (a, b) = bilinear_sensitivities(&m, &placement.w, &placement.sigma, &model.time);
        gw.iter_mut().zip(&a).for_each(|(g, &v)| *g = *g - v);
        gs.iter_mut().zip(&b).for_each(|(g, &v)| *g = *g - v);
    }
    match mode {
        PenaltyMode::Linear => {
            gw.iter_mut().for_each(|g| *g = *g + cfg.beta_w);
            gs.iter_mut().for_each(|g| *g = *g + cfg.beta_sigma);
        }
        PenaltyMode::Sparsity => {
            let fam = cfg.penalty_family()?;
            for (g, &x) in gw.iter_mut().zip(&placement.w) {
                *g = *g + cfg.beta_w * fam.derivative(x)?;
            }
            for (g, &x) in gs.iter_mut().zip(&placement.sigma) {
                *g = *g + cfg.beta_sigma * fam.derivative(x)?;
            }
        }
    }
    gw.extend(gs);
    Ok(gw)
}

/// ε-active indices: `true` where `W_i ≤ ε` or `W_i ≥ 1 - ε`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub active: Vec<bool>,
}

impl ActiveSet {
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn n_inactive(&self) -> usize {
        self.active.len() - self.n_active()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    pub fn inactive_indices(&self) -> Vec<usize> {
        (0..self.active.len())
            .filter(|&i| !self.active[i])
            .collect()
    }
}

pub fn epsilon_active_set<T: Scalar>(w: &[T], eps: T) -> ActiveSet {
    ActiveSet {
        active: w.iter().map(|&x| x <= eps || x >= T::one() - eps).collect(),
    }
}

/// Inverse BFGS update restricted to the inactive indices.
///
/// Indices that just left the active set have a zero row in `b`; they restart
/// from a unit diagonal. A failed curvature test returns the restricted identity.
pub fn reduced_bfgs_update<T: Scalar>(
    b: &DenseMatrix<T>,
    w_old: &[T],
    w_new: &[T],
    g_old: &[T],
    g_new: &[T],
    set: &ActiveSet,
) -> DenseMatrix<T> {
    let n = b.dim();
    let free = &set.active;
    let mut c = DenseMatrix::zeros(n);
    for i in (0..n).filter(|&i| !free[i]) {
        for j in (0..n).filter(|&j| !free[j]) {
            c[(i, j)] = b[(i, j)];
        }
        if b[(i, i)] == T::zero() {
            c[(i, i)] = T::one();
        }
    }
    let s: Vec<T> = (0..n)
        .map(|i| {
            if free[i] {
                T::zero()
            } else {
                w_new[i] - w_old[i]
            }
        })
        .collect();
    let y: Vec<T> = (0..n)
        .map(|i| {
            if free[i] {
                T::zero()
            } else {
                g_new[i] - g_old[i]
            }
        })
        .collect();
    let sy = dot(&s, &y);
    if !(sy > T::lit(1e-12) * norm2(&s) * norm2(&y)) {
        let mut id = DenseMatrix::zeros(n);
        for i in (0..n).filter(|&i| !free[i]) {
            id[(i, i)] = T::one();
        }
        return id;
    }
    let rho = T::one() / sy;
    let v = c.matvec(&y);
    let coef = rho * rho * dot(&y, &v) + rho;
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = c[(i, j)] - rho * (s[i] * v[j] + v[i] * s[j]) + coef * s[i] * s[j];
        }
    }
    c
}

/// `d = -R_A g - R_I B R_I g`.
pub fn search_direction<T: Scalar>(b: &DenseMatrix<T>, g: &[T], set: &ActiveSet) -> Vec<T> {
    let gi: Vec<T> = g
        .iter()
        .zip(&set.active)
        .map(|(&v, &a)| if a { T::zero() } else { v })
        .collect();
    let bg = b.matvec(&gi);
    (0..g.len())
        .map(|i| if set.active[i] { -g[i] } else { -bg[i] })
        .collect()
}

/// Result of the projected Armijo search.
#[derive(Debug, Clone)]
pub enum LineSearch<T, E> {
    Accepted {
        step: T,
        point: Vec<T>,
        value: T,
        extra: E,
        trials: usize,
    },
    /// `P(W + αd) = W`: nothing to gain along `d`.
    ZeroStep,
}

/// Tries `α = 1/(2^i ‖∇F(W₀)‖)` until `F(P(W+αd)) - F(W) ≤ -(γ̂/α)‖P(W+αd) - W‖²`.
pub fn armijo_project<T, E, F>(
    mut f: F,
    w: &[T],
    f_w: T,
    d: &[T],
    grad_norm0: T,
    gamma: T,
    max_trials: usize,
) -> Result<LineSearch<T, E>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, E)>,
{
    let scale = if grad_norm0 > T::zero() {
        grad_norm0
    } else {
        T::one()
    };
    let mut step = T::one() / scale;
    for trial in 1..=max_trials {
        let x: Vec<T> = w.iter().zip(d).map(|(&a, &b)| a + step * b).collect();
        let p = project(&x);
        let moved: T = p.iter().zip(w).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if moved == T::zero() {
            return Ok(LineSearch::ZeroStep);
        }
        let (value, extra) = f(&p)?;
        if value - f_w <= -(gamma / step) * moved {
            return Ok(LineSearch::Accepted {
                step,
                point: p,
                value,
                extra,
                trials: trial,
            });
        }
        step = step * T::lit(0.5);
    }
    Err(Error::LineSearchStalled {
        trials: max_trials,
        last_iterate: w.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
    })
}

/// Box-constraint multipliers at a placement.
#[derive(Debug, Clone, PartialEq)]
pub struct KKTMultipliers<T> {
    pub lambda_a: Vec<T>,
    pub lambda_b: Vec<T>,
    /// `max_i max(|λ^a_i W_i|, |λ^b_i (1 - W_i)|)`.
    pub complementarity: T,
}

pub fn kkt_extract<T: Scalar>(w: &[T], grad: &[T]) -> KKTMultipliers<T> {
    let lambda_a: Vec<T> = grad.iter().map(|&g| g.max(T::zero())).collect();
    let lambda_b: Vec<T> = grad.iter().map(|&g| g.min(T::zero()).abs()).collect();
    let complementarity = w
        .iter()
        .zip(lambda_a.iter().zip(&lambda_b))
        .map(|(&x, (&a, &b))| (a * x).abs().max((b * (T::one() - x)).abs()))
        .fold(T::zero(), T::max);
    KKTMultipliers {
        lambda_a,
        lambda_b,
        complementarity,
    }
}

/// One outer iteration of the placement optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord<T> {
    pub stage: usize,
    pub iteration: usize,
    pub cost: T,
    pub w_l1: T,
    pub sigma_l1: T,
    pub projected_gradient: T,
    pub n_active: usize,
    /// Smallest and largest entry of the iterate.
    pub range: (T, T),
    /// Accepted step length, zero on the final record of a stage.
    pub step: T,
    /// Lower-level BFGS iterations summed over the training pairs.
    pub da_iterations: usize,
    pub pde_solves: usize,
    pub elliptic_solves: usize,
}

/// Solve counts accumulated by the optimizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveCounts {
    pub pde: usize,
    pub elliptic: usize,
    pub lower_runs: usize,
    pub lower_iterations: usize,
}

impl SolveCounts {
    fn add_lower<T>(&mut self, sols: &[LowerSolution<T>]) {
        for s in sols {
            self.pde += s.forward_solves + s.adjoint_solves;
            self.lower_runs += 1;
            self.lower_iterations += s.iterations;
        }
    }

    fn add_adjoints<T>(&mut self, adj: &[BilevelAdjoint<T>]) {
        for a in adj {
            self.pde += a.forward_solves + a.backward_solves;
            self.elliptic += a.elliptic_solves;
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub stalled: bool,
}

#[derive(Debug, Clone)]
pub struct PlacementResult<T> {
    pub placement: PlacementVector<T>,
    pub stage1: PlacementVector<T>,
    pub kkt: KKTMultipliers<T>,
    pub gradient: Vec<T>,
    pub history: Vec<IterationRecord<T>>,
    pub stages: [StageOutcome; 2],
    pub solutions: Vec<LowerSolution<T>>,
    /// Linear-mode cost at the initial placement.
    pub j0: T,
    /// Sparsity-mode cost at the final placement.
    pub j_end: T,
    pub counts: SolveCounts,
}

impl<T> PlacementResult<T> {
    pub fn outer_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

/// Bilevel adjoints of every training pair, solved in parallel.
pub fn adjoints_at<T: Scalar>(
    prob: &BilevelProblem<'_, T>,
    placement: &PlacementVector<T>,
    sols: &[LowerSolution<T>],
    cfg: &UpperConfig<T>,
) -> Result<Vec<BilevelAdjoint<T>>> {
    (0..sols.len())
        .into_par_iter()
        .map(|j| solve_bilevel_adjoint(prob, j, &sols[j], placement, cfg))
        .collect()
}

struct StageState<T> {
    placement: PlacementVector<T>,
    sols: Vec<LowerSolution<T>>,
    gradient: Vec<T>,
}

fn run_stage<T: Scalar>(
    prob: &BilevelProblem<'_, T>,
    cfg: &UpperConfig<T>,
    mode: PenaltyMode,
    stage: usize,
    mut st: StageState<T>,
    counts: &mut SolveCounts,
    history: &mut Vec<IterationRecord<T>>,
) -> Result<(StageState<T>, StageOutcome)> {
    let ns = prob.n_sensors();
    let n = st.placement.len();
    let mut f = upper_cost(prob, &st.placement, &st.sols, cfg, mode)?;
    let mut b = DenseMatrix::identity(n);
    let mut prev: Option<(Vec<T>, Vec<T>)> = None;
    let mut g0 = None;
    let mut outcome = StageOutcome {
        converged: false,
        iterations: 0,
        stalled: false,
    };
    let mut da_iterations: usize = st.sols.iter().map(|s| s.iterations).sum();
    for iter in 0..=cfg.max_iter {
        let adj = adjoints_at(prob, &st.placement, &st.sols, cfg)?;
        counts.add_adjoints(&adj);
        let g = upper_gradient(prob, &st.placement, &st.sols, &adj, cfg, mode)?;
        let x = st.placement.flat();
        let trial: Vec<T> = x.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let pg = norm2(
            &x.iter()
                .zip(project(&trial))
                .map(|(&a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        let g0n = *g0.get_or_insert(norm2(&g));
        st.gradient = g.clone();
        let eps_k = cfg.eps_active_max.min(pg);
        let set = epsilon_active_set(&x, eps_k);
        let mut record = IterationRecord {
            stage,
            iteration: iter,
            cost: f,
            w_l1: st.placement.w_l1(),
            sigma_l1: st.placement.sigma_l1(),
            projected_gradient: pg,
            n_active: set.n_active(),
            range: st
                .placement
                .flat()
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(a, b), &x| {
                    (a.min(x), b.max(x))
                }),
            step: T::zero(),
            da_iterations,
            pde_solves: counts.pde,
            elliptic_solves: counts.elliptic,
        };
        if pg <= cfg.tol {
            outcome.converged = true;
            history.push(record);
            break;
        }
        if iter == cfg.max_iter {
            history.push(record);
            break;
        }
        if let Some((x_old, g_old)) = &prev {
            b = reduced_bfgs_update(&b, x_old, &x, g_old, &g, &set);
        }
        let d = search_direction(&b, &g, &set);
        let ls = armijo_project(
            |p: &[T]| {
                let cand = PlacementVector::from_flat(p, ns);
                let sols = prob.solve_lower(&cand, Some(&st.sols))?;
                let val = upper_cost(prob, &cand, &sols, cfg, mode)?;
                Ok((val, sols))
            },
            &x,
            f,
            &d,
            g0n,
            cfg.gamma,
            cfg.max_trials,
        );
        match ls {
            Ok(LineSearch::Accepted {
                step,
                point,
                value,
                extra,
                ..
            }) => {
                counts.add_lower(&extra);
                da_iterations = extra.iter().map(|s| s.iterations).sum();
                record.step = step;
                history.push(record);
                st.placement = PlacementVector::from_flat(&point, ns);
                st.sols = extra;
                f = value;
                prev = Some((x, g));
                outcome.iterations += 1;
            }
            Ok(LineSearch::ZeroStep) => {
                outcome.converged = true;
                history.push(record);
                break;
            }
            Err(Error::LineSearchStalled { .. }) => {
                outcome.stalled = true;
                history.push(record);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((st, outcome))
}

/// Two-stage projected BFGS: linear penalty from `initial`, then the sparsity penalty.
pub fn optimize_placement<T: Scalar>(
    prob: &BilevelProblem<'_, T>,
    cfg: &UpperConfig<T>,
    initial: &PlacementVector<T>,
) -> Result<PlacementResult<T>> {
    cfg.validate()?;
    prob.check_placement(initial)?;
    let initial = PlacementVector::new(initial.w.clone(), initial.sigma.clone())?;
    let mut counts = SolveCounts::default();
    let mut history = Vec::new();
    let sols = prob.solve_lower(&initial, None)?;
    counts.add_lower(&sols);
    let j0 = upper_cost(prob, &initial, &sols, cfg, PenaltyMode::Linear)?;
    let st = StageState {
        placement: initial,
        sols,
        gradient: Vec::new(),
    };
    let (st, o1) = run_stage(
        prob,
        cfg,
        PenaltyMode::Linear,
        1,
        st,
        &mut counts,
        &mut history,
    )?;
    let stage1 = st.placement.clone();
    let (st, o2) = run_stage(
        prob,
        cfg,
        PenaltyMode::Sparsity,
        2,
        st,
        &mut counts,
        &mut history,
    )?;
    let j_end = upper_cost(prob, &st.placement, &st.sols, cfg, PenaltyMode::Sparsity)?;
    let kkt = kkt_extract(&st.placement.flat(), &st.gradient);
    Ok(PlacementResult {
        placement: st.placement,
        stage1,
        kkt,
        gradient: st.gradient,
        history,
        stages: [o1, o2],
        solutions: st.sols,
        j0,
        j_end,
        counts,
    })
}

/// Interval class of a placement entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Band {
    Zero,
    Low,
    Middle,
    High,
    One,
}

impl Band {
    /// Plot label: 0 for `[0, low]`, 2 for the middle band, 3 for the upper band, 1 for exactly one.
    pub fn label(self) -> u8 {
        match self {
            Band::Zero | Band::Low => 0,
            Band::Middle => 2,
            Band::High => 3,
            Band::One => 1,
        }
    }
}

/// Sensor bands `(0, 0.2]`, `(0.2, 0.8]`, `(0.8, 1)`.
pub fn w_band<T: Scalar>(x: T) -> Band {
    if x <= T::zero() {
        Band::Zero
    } else if x >= T::one() {
        Band::One
    } else if x <= T::lit(0.2) {
        Band::Low
    } else if x <= T::lit(0.8) {
        Band::Middle
    } else {
        Band::High
    }
}

/// Time-window bands `(0, 0.25)`, `[0.25, 0.75)`, `[0.75, 1)`.
pub fn sigma_band<T: Scalar>(x: T) -> Band {
    if x <= T::zero() {
        Band::Zero
    } else if x >= T::one() {
        Band::One
    } else if x < T::lit(0.25) {
        Band::Low
    } else if x < T::lit(0.75) {
        Band::Middle
    } else {
        Band::High
    }
}

/// Entry counts per band.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BandCounts {
    pub zero: usize,
    pub low: usize,
    pub middle: usize,
    pub high: usize,
    pub one: usize,
}

impl BandCounts {
    pub fn of(bands: impl IntoIterator<Item = Band>) -> Self {
        let mut c = Self::default();
        for b in bands {
            match b {
                Band::Zero => c.zero += 1,
                Band::Low => c.low += 1,
                Band::Middle => c.middle += 1,
                Band::High => c.high += 1,
                Band::One => c.one += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.zero + self.low + self.middle + self.high + self.one
    }
}

/// Largest number of middle-band entries resolved by exhaustive search.
pub const EXHAUSTIVE_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Binarized<T> {
    pub placement: PlacementVector<T>,
    /// Flat indices that were in a middle band.
    pub ambiguous: Vec<usize>,
    pub thresholded: bool,
    pub evaluations: usize,
}

/// Rounds the outer bands and resolves middle-band entries by exhaustive search over
/// their binary completions (lowest cost wins, first mask on ties). With `threshold`
/// set, too many middle entries are rounded at 0.5 instead of failing.
pub fn classify_and_binarize<T, F>(
    placement: &PlacementVector<T>,
    mut cost: F,
    threshold: bool,
) -> Result<Binarized<T>>
where
    T: Scalar,
    F: FnMut(&PlacementVector<T>) -> Result<T>,
{
    let ns = placement.n_sensors();
    let flat = placement.flat();
    let bands: Vec<Band> = flat
        .iter()
        .enumerate()
        .map(|(i, &x)| if i < ns { w_band(x) } else { sigma_band(x) })
        .collect();
    let mut base: Vec<T> = bands
        .iter()
        .map(|b| match b {
            Band::High | Band::One => T::one(),
            _ => T::zero(),
        })
        .collect();
    let ambiguous: Vec<usize> = (0..flat.len())
        .filter(|&i| bands[i] == Band::Middle)
        .collect();
    if ambiguous.len() > EXHAUSTIVE_LIMIT {
        if !threshold {
            return Err(Error::TooAmbiguous {
                count: ambiguous.len(),
                limit: EXHAUSTIVE_LIMIT,
            });
        }
        for &i in &ambiguous {
            base[i] = if flat[i] >= T::lit(0.5) {
                T::one()
            } else {
                T::zero()
            };
        }
        return Ok(Binarized {
            placement: PlacementVector::from_flat(&base, ns),
            ambiguous,
            thresholded: true,
            evaluations: 0,
        });
    }
    let mut best: Option<(T, Vec<T>)> = None;
    let mut evaluations = 0;
    if ambiguous.is_empty() {
        best = Some((T::zero(), base));
    } else {
        for mask in 0u32..(1u32 << ambiguous.len()) {
            let mut cand = base.clone();
            for (bit, &i) in ambiguous.iter().enumerate() {
                cand[i] = if mask >> bit & 1 == 1 {
                    T::one()
                } else {
                    T::zero()
                };
            }
            let v = cost(&PlacementVector::from_flat(&cand, ns))?;
            evaluations += 1;
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, cand));
            }
        }
    }
    let (_, chosen) = best.expect("at least one completion");
    Ok(Binarized {
        placement: PlacementVector::from_flat(&chosen, ns),
        ambiguous,
        thresholded: false,
        evaluations,
    })
}
