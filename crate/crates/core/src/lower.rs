//! Lower-level variational data assimilation: recover the initial state from
//! windowed point observations by minimizing a regularized misfit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pde::{
    solve_adjoint_backward, solve_forward, ForwardSolution, Model, NodalSource, SensorSeries,
    SpaceTimeField, SpatialField,
};
use crate::scalar::{axpy, dot, Scalar};

/// Observed values at every candidate sensor and time level, with noise metadata.
///
/// Level 0 is stored for indexing convenience but never enters the cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries<T> {
    pub values: SensorSeries<T>,
    pub sd: T,
    pub seed: Option<u64>,
}

impl<T: Scalar> ObservationSeries<T> {
    pub fn n_sensors(&self) -> usize {
        self.values.n_sensors()
    }

    pub fn n_levels(&self) -> usize {
        self.values.n_levels()
    }

    pub fn get(&self, k: usize, s: usize) -> T {
        self.values.get(k, s)
    }
}

/// Samples a trajectory at the candidate nodes.
pub fn observe<T: Scalar>(y: &SpaceTimeField<T>, model: &Model<T>) -> ObservationSeries<T> {
    let sensors = model.grid.candidates();
    let mut values = SensorSeries::zeros(sensors.len(), y.n_levels());
    for s in 0..y.n_levels() {
        for (k, &node) in sensors.iter().enumerate() {
            values.set(k, s, y.at(node, s));
        }
    }
    ObservationSeries {
        values,
        sd: T::zero(),
        seed: None,
    }
}

/// `observe(y_true)` plus i.i.d. `N(0, sd²)` noise drawn from a seeded ChaCha8 stream.
pub fn make_observations<T: Scalar>(
    y_true: &SpaceTimeField<T>,
    model: &Model<T>,
    sd: T,
    seed: u64,
) -> Result<ObservationSeries<T>> {
    if !(sd >= T::zero()) {
        return Err(Error::Parameter(format!(
            "noise SD must be non-negative, got {sd}"
        )));
    }
    let mut obs = observe(y_true, model);
    obs.sd = sd;
    obs.seed = Some(seed);
    if sd > T::zero() {
        let sd64 = sd.to_f64().unwrap_or(0.0);
        let normal = Normal::new(0.0, sd64).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in obs.values.values_mut() {
            *v = *v + T::lit(normal.sample(&mut rng));
        }
    }
    Ok(obs)
}

/// One assimilation problem with the placement borrowed from the upper level.
#[derive(Debug, Clone, Copy)]
pub struct DAProblem<'a, T> {
    pub model: &'a Model<T>,
    pub u_b: &'a SpatialField<T>,
    pub obs: &'a ObservationSeries<T>,
    pub forcing: Option<&'a SpaceTimeField<T>>,
    pub theta: T,
    pub alpha: T,
    pub w: &'a [T],
    pub sigma: &'a [T],
}

impl<'a, T: Scalar> DAProblem<'a, T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a Model<T>,
        u_b: &'a SpatialField<T>,
        obs: &'a ObservationSeries<T>,
        forcing: Option<&'a SpaceTimeField<T>>,
        theta: T,
        alpha: T,
        w: &'a [T],
        sigma: &'a [T],
    ) -> Result<Self> {
        let p = Self {
            model,
            u_b,
            obs,
            forcing,
            theta,
            alpha,
            w,
            sigma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > T::zero()) || !(self.alpha > T::zero()) {
            return Err(Error::Parameter(format!(
                "assimilation needs ϑ > 0 and α > 0, got ϑ={}, α={}",
                self.theta, self.alpha
            )));
        }
        let nc = self.model.grid.n_candidates();
        let nw = self.model.time.n_windows();
        if self.w.len() != nc {
            return Err(Error::Shape(format!(
                "w has {} entries, expected {nc}",
                self.w.len()
            )));
        }
        if self.sigma.len() != nw {
            return Err(Error::Shape(format!(
                "σ has {} entries, expected {nw}",
                self.sigma.len()
            )));
        }
        let unit = |v: &T| *v >= T::zero() && *v <= T::one();
        if !self.w.iter().chain(self.sigma).all(unit) {
            return Err(Error::Parameter(
                "placement weights must lie in [0, 1]".into(),
            ));
        }
        if self.obs.n_sensors() != nc || self.obs.n_levels() != self.model.n_levels() {
            return Err(Error::Shape(format!(
                "observations are {} × {}, expected {nc} × {}",
                self.obs.n_sensors(),
                self.obs.n_levels(),
                self.model.n_levels()
            )));
        }
        if self.u_b.len() != self.model.n_nodes() {
            return Err(Error::Shape("background state size".into()));
        }
        Ok(())
    }

    /// Misfit weights `w_k c_s (y - z)` at every sensor and level.
    pub fn weighted_misfit(&self, y: &SpaceTimeField<T>) -> SensorSeries<T> {
        let c = self.model.time.level_weights(self.sigma);
        let sensors = self.model.grid.candidates();
        let mut out = SensorSeries::zeros(sensors.len(), self.model.n_levels());
        for s in 1..self.model.n_levels() {
            for (k, &node) in sensors.iter().enumerate() {
                let r = y.at(node, s) - self.obs.get(k, s);
                out.set(k, s, self.w[k] * c[s] * r);
            }
        }
        out
    }

    /// `½ Σ_s τ Σ_k w_k c_s (y - z)²`.
    pub fn observation_term(&self, y: &SpaceTimeField<T>) -> T {
        let c = self.model.time.level_weights(self.sigma);
        let sensors = self.model.grid.candidates();
        let tau = self.model.time.step();
        let mut acc = T::zero();
        for s in 1..self.model.n_levels() {
            let mut lvl = T::zero();
            for (k, &node) in sensors.iter().enumerate() {
                let r = y.at(node, s) - self.obs.get(k, s);
                lvl = lvl + self.w[k] * r * r;
            }
            acc = acc + c[s] * lvl;
        }
        T::lit(0.5) * tau * acc
    }

    /// `½α‖v‖² + (ϑ/2)‖∇_h v‖²` with `v = u - u_b`.
    pub fn regularization(&self, u: &SpatialField<T>) -> T {
        let v = self.deviation(u);
        let lap = self.model.grid.neg_laplacian(&v);
        T::lit(0.5)
            * (self.alpha * self.model.inner_space(&v, &v)
                + self.theta * self.model.inner_space(&v, &lap))
    }

    fn deviation(&self, u: &SpatialField<T>) -> Vec<T> {
        let mut v = vec![T::zero(); self.model.n_nodes()];
        for &k in self.model.grid.interior() {
            v[k] = u.values()[k] - self.u_b.values()[k];
        }
        v
    }

    fn check_control(&self, u: &SpatialField<T>) -> Result<()> {
        if u.len() != self.model.n_nodes() {
            return Err(Error::Shape(format!(
                "control has {} values, grid has {} nodes",
                u.len(),
                self.model.n_nodes()
            )));
        }
        Ok(())
    }
}

/// Cost, gradient field and the solves that produced them.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub cost: T,
    pub gradient: SpatialField<T>,
    pub forward: ForwardSolution<T>,
    pub adjoint: SpaceTimeField<T>,
}

pub fn lower_cost<T: Scalar>(prob: &DAProblem<'_, T>, u: &SpatialField<T>) -> Result<T> {
    prob.validate()?;
    prob.check_control(u)?;
    let fwd = solve_forward(prob.model, u, prob.forcing)?;
    Ok(prob.observation_term(&fwd.y) + prob.regularization(u))
}

/// `L²` gradient `α(u - u_b) - ϑΔ_h(u - u_b) + p(0)`.
pub fn lower_gradient<T: Scalar>(
    prob: &DAProblem<'_, T>,
    u: &SpatialField<T>,
) -> Result<SpatialField<T>> {
    Ok(evaluate(prob, u)?.gradient)
}

pub fn evaluate<T: Scalar>(prob: &DAProblem<'_, T>, u: &SpatialField<T>) -> Result<Evaluation<T>> {
    prob.validate()?;
    prob.check_control(u)?;
    let forward = solve_forward(prob.model, u, prob.forcing)?;
    let cost = prob.observation_term(&forward.y) + prob.regularization(u);
    let (gradient, adjoint) = gradient_from(prob, u, &forward)?;
    Ok(Evaluation {
        cost,
        gradient,
        forward,
        adjoint,
    })
}

fn gradient_from<T: Scalar>(
    prob: &DAProblem<'_, T>,
    u: &SpatialField<T>,
    fwd: &ForwardSolution<T>,
) -> Result<(SpatialField<T>, SpaceTimeField<T>)> {
    let misfit = prob.weighted_misfit(&fwd.y);
    let src = NodalSource {
        sensors: prob.model.grid.candidates(),
        values: &misfit,
    };
    let p = solve_adjoint_backward(prob.model, fwd, Some(src), None, None)?;
    let v = prob.deviation(u);
    let lap = prob.model.grid.neg_laplacian(&v);
    let p0 = p.level(0);
    let mut g = vec![T::zero(); prob.model.n_nodes()];
    for &k in prob.model.grid.interior() {
        g[k] = prob.alpha * v[k] + prob.theta * lap[k] + p0[k];
    }
    Ok((SpatialField::from_values(g), p))
}

/// BFGS settings for [`assimilate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerOptions<T> {
    /// Stop once the `L²` gradient norm falls to this value.
    pub tol: T,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: T,
    pub max_halvings: usize,
}

impl<T: Scalar> Default for LowerOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-6),
            max_iter: 100,
            c1: T::lit(1e-4),
            max_halvings: 40,
        }
    }
}

/// Minimizer of the assimilation problem together with its state and adjoint.
#[derive(Debug, Clone)]
pub struct LowerSolution<T> {
    pub u: SpatialField<T>,
    pub y: SpaceTimeField<T>,
    pub p: SpaceTimeField<T>,
    pub forward: ForwardSolution<T>,
    pub cost: T,
    pub grad_norm: T,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial point.
    pub cost_history: Vec<T>,
    pub forward_solves: usize,
    pub adjoint_solves: usize,
}

/// BFGS in the discrete `L²` inner product with Armijo backtracking.
pub fn assimilate<T: Scalar>(
    prob: &DAProblem<'_, T>,
    u_init: &SpatialField<T>,
    opts: &LowerOptions<T>,
) -> Result<LowerSolution<T>> {
    prob.validate()?;
    prob.check_control(u_init)?;
    let model = prob.model;
    let ip = |a: &[T], b: &[T]| model.inner_space(a, b);

    let mut u = SpatialField::from_values(prob.deviation(u_init));
    for (x, &b) in u.values_mut().iter_mut().zip(prob.u_b.values()) {
        *x = *x + b;
    }
    // boundary values of u_b are irrelevant; keep the control homogeneous
    for k in 0..model.n_nodes() {
        if model.grid.is_boundary(k) {
            u.values_mut()[k] = T::zero();
        }
    }
    let mut ev = evaluate(prob, &u)?;
    let (mut fwd_count, mut adj_count) = (1, 1);
    let mut history = vec![ev.cost];
    let mut pairs: Vec<(Vec<T>, Vec<T>, T)> = Vec::new();
    let mut iterations = 0;
    let mut gnorm = ip(ev.gradient.values(), ev.gradient.values()).sqrt();

    while gnorm > opts.tol && iterations < opts.max_iter {
        let g = ev.gradient.values().to_vec();
        let mut d = two_loop(&g, &pairs, &ip);
        let mut slope = ip(&g, &d);
        if !(slope < T::zero()) {
            pairs.clear();
            d = g.iter().map(|&v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial = u.values().to_vec();
            axpy(step, &d, &mut trial);
            let trial = SpatialField::from_values(trial);
            let fwd = solve_forward(model, &trial, prob.forcing)?;
            fwd_count += 1;
            let cost = prob.observation_term(&fwd.y) + prob.regularization(&trial);
            if cost <= ev.cost + opts.c1 * step * slope {
                accepted = Some((trial, fwd, cost));
                break;
            }
            step = step * T::lit(0.5);
        }
        let Some((trial, fwd, cost)) = accepted else {
            return Err(Error::LineSearchStalled {
                trials: opts.max_halvings + 1,
                last_iterate: u
                    .values()
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect(),
            });
        };
        let (grad, p) = gradient_from(prob, &trial, &fwd)?;
        adj_count += 1;
        let s: Vec<T> = trial
            .values()
            .iter()
            .zip(u.values())
            .map(|(&a, &b)| a - b)
            .collect();
        let yv: Vec<T> = grad.values().iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = ip(&s, &yv);
        if sy > T::lit(1e-12) * ip(&s, &s).sqrt() * ip(&yv, &yv).sqrt() {
            pairs.push((s, yv, T::one() / sy));
        }
        u = trial;
        ev = Evaluation {
            cost,
            gradient: grad,
            forward: fwd,
            adjoint: p,
        };
        gnorm = ip(ev.gradient.values(), ev.gradient.values()).sqrt();
        history.push(cost);
        iterations += 1;
    }

    Ok(LowerSolution {
        y: ev.forward.y.clone(),
        u,
        p: ev.adjoint,
        forward: ev.forward,
        cost: ev.cost,
        grad_norm: gnorm,
        iterations,
        cost_history: history,
        forward_solves: fwd_count,
        adjoint_solves: adj_count,
    })
}

/// `-H g` for the BFGS inverse Hessian built from `(s, y, 1/⟨s,y⟩)` pairs.
fn two_loop<T: Scalar>(
    g: &[T],
    pairs: &[(Vec<T>, Vec<T>, T)],
    ip: &impl Fn(&[T], &[T]) -> T,
) -> Vec<T> {
    let mut q: Vec<T> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = *rho * ip(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * ip(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    debug_assert!(dot(&q, &q).is_finite());
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{CandidateSet, SpatialGrid, TimeGrid};
    use crate::pde::Nonlinearity;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn model(m: usize, n: usize) -> Model<f64> {
        Model::new(
            SpatialGrid::new(m, &CandidateSet::AllNodes).unwrap(),
            TimeGrid::new(n).unwrap(),
            Nonlinearity::default(),
        )
    }

    fn truth(model: &Model<f64>) -> SpatialField<f64> {
        SpatialField::from_fn(&model.grid, |x, y| {
            (PI * x).sin() * (PI * y).sin() + 0.5 * (2.0 * PI * x).sin() * (PI * y).sin()
        })
    }

    fn forcing(model: &Model<f64>) -> SpaceTimeField<f64> {
        SpaceTimeField::from_fn(&model.grid, &model.time, |x, _, t| {
            (1.0 - t) * (PI * x).sin()
        })
    }

    fn random_control(model: &Model<f64>, seed: u64) -> SpatialField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpatialField::from_values(
            (0..model.n_nodes())
                .map(|k| {
                    if model.grid.is_boundary(k) {
                        0.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect(),
        )
    }

    struct Setup {
        model: Model<f64>,
        u_b: SpatialField<f64>,
        obs: ObservationSeries<f64>,
        f: SpaceTimeField<f64>,
        w: Vec<f64>,
        sigma: Vec<f64>,
    }

    impl Setup {
        fn new(m: usize, n: usize, seed: u64) -> Self {
            let model = model(m, n);
            let f = forcing(&model);
            let y = solve_forward(&model, &truth(&model), Some(&f)).unwrap().y;
            let obs = make_observations(&y, &model, 0.01, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let w = (0..model.grid.n_candidates())
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let sigma = (0..model.time.n_windows())
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            Self {
                u_b: SpatialField::zeros(model.n_nodes()),
                model,
                obs,
                f,
                w,
                sigma,
            }
        }

        fn problem(&self, theta: f64, alpha: f64) -> DAProblem<'_, f64> {
            DAProblem::new(
                &self.model,
                &self.u_b,
                &self.obs,
                Some(&self.f),
                theta,
                alpha,
                &self.w,
                &self.sigma,
            )
            .unwrap()
        }
    }

    #[test]
    fn observe_samples_candidates() {
        let m = model(5, 3);
        let zero = m.zero_space_time();
        assert!(observe(&zero, &m).values.values().iter().all(|&v| v == 0.0));
        let y = SpaceTimeField::from_fn(&m.grid, &m.time, |x, y, t| x + 10.0 * y + 100.0 * t);
        let obs = observe(&y, &m);
        for s in 0..m.n_levels() {
            for (k, &node) in m.grid.candidates().iter().enumerate() {
                assert_eq!(obs.get(k, s), y.at(node, s));
            }
        }
    }

    #[test]
    fn noise_is_seeded() {
        let m = model(6, 4);
        let y = SpaceTimeField::from_fn(&m.grid, &m.time, |x, _, _| x);
        let a = make_observations(&y, &m, 0.01, 7).unwrap();
        let b = make_observations(&y, &m, 0.01, 7).unwrap();
        let c = make_observations(&y, &m, 0.01, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
        assert_eq!(
            make_observations(&y, &m, 0.0, 7).unwrap().values,
            observe(&y, &m).values
        );
        assert!(matches!(
            make_observations(&y, &m, -1.0, 7),
            Err(Error::Parameter(_))
        ));
        let big = make_observations(&y, &m, 1.0, 3).unwrap();
        let clean = observe(&y, &m);
        let diffs: Vec<f64> = big
            .values
            .values()
            .iter()
            .zip(clean.values.values())
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
        assert!(mean.abs() < 0.15 && (var - 1.0).abs() < 0.2, "{mean} {var}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let st = Setup::new(10, 12, 3);
        let prob = st.problem(1e-2, 0.1);
        let u = random_control(&st.model, 11);
        let g = lower_gradient(&prob, &u).unwrap();
        let h2 = st.model.grid.h().powi(2);
        let delta = 1e-5;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for &k in st.model.grid.interior() {
            let mut up = u.clone();
            up.values_mut()[k] += delta;
            let mut dn = u.clone();
            dn.values_mut()[k] -= delta;
            let fd =
                (lower_cost(&prob, &up).unwrap() - lower_cost(&prob, &dn).unwrap()) / (2.0 * delta);
            let an = h2 * g.values()[k];
            num = num.max((fd - an).abs());
            den = den.max(an.abs());
        }
        assert!(num / den <= 1e-6, "relative error {}", num / den);
    }

    #[test]
    fn directional_derivative_second_order() {
        let st = Setup::new(8, 6, 5);
        let prob = st.problem(1e-2, 0.1);
        let u = random_control(&st.model, 1);
        let dir = random_control(&st.model, 2);
        let g = lower_gradient(&prob, &u).unwrap();
        let exact = st.model.inner_space(g.values(), dir.values());
        let err = |d: f64| {
            let shift = |s: f64| {
                let v: Vec<f64> = u
                    .values()
                    .iter()
                    .zip(dir.values())
                    .map(|(a, b)| a + s * b)
                    .collect();
                lower_cost(&prob, &SpatialField::from_values(v)).unwrap()
            };
            ((shift(d) - shift(-d)) / (2.0 * d) - exact).abs()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e2 < e1 / 3.0, "{e1} {e2}");
    }

    #[test]
    fn zero_placement_cost_is_regularization() {
        let mut st = Setup::new(6, 4, 9);
        st.w.iter_mut().for_each(|w| *w = 0.0);
        let prob = st.problem(1e-2, 0.1);
        assert_eq!(lower_cost(&prob, &st.u_b).unwrap(), 0.0);
        let u = random_control(&st.model, 4);
        let v = u.values();
        let lap = st.model.grid.neg_laplacian(v);
        let expect = 0.05 * st.model.inner_space(v, v) + 0.005 * st.model.inner_space(v, &lap);
        assert!((lower_cost(&prob, &u).unwrap() - expect).abs() < 1e-14);
        let g = lower_gradient(&prob, &st.u_b).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_placement_returns_background() {
        let mut st = Setup::new(8, 5, 2);
        st.w.iter_mut().for_each(|w| *w = 0.0);
        st.u_b = SpatialField::from_fn(&st.model.grid, |x, y| x * y * (1.0 - x));
        let prob = st.problem(1e-2, 0.1);
        let sol = assimilate(
            &prob,
            &random_control(&st.model, 8),
            &LowerOptions {
                tol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        let dev = sol
            .u
            .values()
            .iter()
            .zip(st.u_b.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-10, "{dev}");
        assert!(sol.iterations <= 60, "{}", sol.iterations);
        let from_bg = assimilate(&prob, &st.u_b, &LowerOptions::default()).unwrap();
        assert_eq!(from_bg.iterations, 0);
        assert_eq!(from_bg.u, st.u_b);
    }

    #[test]
    fn observation_term_linear_in_w() {
        let st = Setup::new(6, 4, 4);
        let y = solve_forward(&st.model, &random_control(&st.model, 3), Some(&st.f))
            .unwrap()
            .y;
        let w2: Vec<f64> = st.w.iter().map(|w| w * 0.5).collect();
        let a = st.problem(1e-2, 0.1).observation_term(&y);
        let half = DAProblem {
            w: &w2,
            ..st.problem(1e-2, 0.1)
        };
        assert!((a - 2.0 * half.observation_term(&y)).abs() <= 1e-15 * a.abs());
    }

    #[test]
    fn cost_is_coercive() {
        let st = Setup::new(6, 4, 6);
        let prob = st.problem(2e-2, 0.1);
        for seed in 0..5 {
            let u = random_control(&st.model, seed);
            let v = u.values();
            let lap = st.model.grid.neg_laplacian(v);
            let h1 = st.model.inner_space(v, v) + st.model.inner_space(v, &lap);
            assert!(lower_cost(&prob, &u).unwrap() >= 0.5 * 2e-2 * h1);
        }
    }

    #[test]
    fn bfgs_descends_monotonically() {
        let st = Setup::new(10, 12, 12);
        let prob = st.problem(1e-2, 0.1);
        let sol = assimilate(&prob, &st.u_b, &LowerOptions::default()).unwrap();
        assert!(sol.grad_norm <= 1e-6);
        for pair in sol.cost_history.windows(2) {
            assert!(pair[1] < pair[0]);
        }
        let check = solve_forward(&st.model, &sol.u, Some(&st.f)).unwrap();
        assert_eq!(check.y, sol.y);
        assert!(sol.forward_solves > sol.iterations);
    }

    #[test]
    fn clean_full_observation_reconstructs() {
        let model = model(10, 12);
        let f = forcing(&model);
        let u_true = truth(&model);
        let y = solve_forward(&model, &u_true, Some(&f)).unwrap().y;
        let obs = observe(&y, &model);
        let u_b = SpatialField::zeros(model.n_nodes());
        let w = vec![1.0; model.grid.n_candidates()];
        let sigma = vec![1.0; model.time.n_windows()];
        let prob = DAProblem::new(&model, &u_b, &obs, Some(&f), 1e-5, 1e-4, &w, &sigma).unwrap();
        let sol = assimilate(
            &prob,
            &u_b,
            &LowerOptions {
                max_iter: 200,
                ..Default::default()
            },
        )
        .unwrap();
        let diff: Vec<f64> = sol
            .u
            .values()
            .iter()
            .zip(u_true.values())
            .map(|(a, b)| a - b)
            .collect();
        let rel = (model.inner_space(&diff, &diff)
            / model.inner_space(u_true.values(), u_true.values()))
        .sqrt();
        assert!(rel < 0.1, "relative error {rel}");
    }

    #[test]
    fn rejects_bad_problem_data() {
        let st = Setup::new(5, 3, 1);
        let short = vec![0.5; 3];
        assert!(matches!(
            DAProblem::new(&st.model, &st.u_b, &st.obs, None, 1e-2, 0.1, &short, &st.sigma),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            DAProblem::new(&st.model, &st.u_b, &st.obs, None, 0.0, 0.1, &st.w, &st.sigma),
            Err(Error::Parameter(_))
        ));
        let big = vec![1.5; st.w.len()];
        assert!(
            DAProblem::new(&st.model, &st.u_b, &st.obs, None, 1e-2, 0.1, &big, &st.sigma).is_err()
        );
    }
}
