//! Implicit Euler / five-point finite differences for
//! `∂y/∂t - Δy + g(y) = f` with homogeneous Dirichlet data, together with the
//! exact discrete linearization and its transpose.
//!
//! Each step solves `M(y^s) = (I + τA_h) y^s + τ g(y^s) = y^{s-1} + τ f^s` by
//! Newton's method. The Jacobian `J_s = I + τA_h + τ g'(y^s)` at the converged
//! state is factored once and reused by the tangent and adjoint sweeps, so the
//! backward sweep is the exact transpose of the tangent sweep.
//!
//! Adjoint fields are stored in "density" form: a cost derivative `∂C/∂y^s` enters
//! divided by `h²`, and the backward value at level `s - 1` solves
//! `J_s q^{s-1} = q^s + τ r^s` with `q^{n_steps} = 0`. Point sources at a sensor node
//! therefore carry the Dirac weight `1 / h²`.

use crate::error::{Error, Result};
use crate::linalg::{BandedCholesky, BandedSym};
use crate::mesh::{SpatialGrid, TimeGrid};
use crate::scalar::{norm_inf, Scalar};

/// Scalar field on every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField<T> {
    values: Vec<T>,
}

impl<T: Scalar> SpatialField<T> {
    pub fn zeros(n_nodes: usize) -> Self {
        Self {
            values: vec![T::zero(); n_nodes],
        }
    }

    pub fn from_values(values: Vec<T>) -> Self {
        Self { values }
    }

    /// Samples `f` on the grid with zero boundary values.
    pub fn from_fn(grid: &SpatialGrid<T>, f: impl Fn(T, T) -> T) -> Self {
        Self {
            values: grid.sample_dirichlet(f),
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// Scalar field on grid nodes × time levels, level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField<T> {
    n_nodes: usize,
    n_levels: usize,
    values: Vec<T>,
}

impl<T: Scalar> SpaceTimeField<T> {
    pub fn zeros(n_nodes: usize, n_levels: usize) -> Self {
        Self {
            n_nodes,
            n_levels,
            values: vec![T::zero(); n_nodes * n_levels],
        }
    }

    /// Samples `f(x, y, t)` at every node and level; boundary nodes are zero.
    pub fn from_fn(grid: &SpatialGrid<T>, time: &TimeGrid<T>, f: impl Fn(T, T, T) -> T) -> Self {
        let mut out = Self::zeros(grid.n_nodes(), time.n_levels());
        for s in 0..time.n_levels() {
            let t = time.time(s);
            out.level_mut(s)
                .copy_from_slice(&grid.sample_dirichlet(|x, y| f(x, y, t)));
        }
        out
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn level(&self, s: usize) -> &[T] {
        &self.values[s * self.n_nodes..(s + 1) * self.n_nodes]
    }

    pub fn level_mut(&mut self, s: usize) -> &mut [T] {
        &mut self.values[s * self.n_nodes..(s + 1) * self.n_nodes]
    }

    pub fn at(&self, node: usize, s: usize) -> T {
        self.values[s * self.n_nodes + node]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    fn check_shape(&self, n_nodes: usize, n_levels: usize, what: &str) -> Result<()> {
        if self.n_nodes != n_nodes || self.n_levels != n_levels {
            return Err(Error::Shape(format!(
                "{what}: expected {n_nodes} nodes × {n_levels} levels, got {} × {}",
                self.n_nodes, self.n_levels
            )));
        }
        Ok(())
    }
}

/// Per-(sensor, level) scalars, level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries<T> {
    n_sensors: usize,
    n_levels: usize,
    values: Vec<T>,
}

impl<T: Scalar> SensorSeries<T> {
    pub fn zeros(n_sensors: usize, n_levels: usize) -> Self {
        Self {
            n_sensors,
            n_levels,
            values: vec![T::zero(); n_sensors * n_levels],
        }
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    #[inline]
    pub fn get(&self, k: usize, s: usize) -> T {
        self.values[s * self.n_sensors + k]
    }

    #[inline]
    pub fn set(&mut self, k: usize, s: usize, v: T) {
        self.values[s * self.n_sensors + k] = v;
    }

    pub fn level(&self, s: usize) -> &[T] {
        &self.values[s * self.n_sensors..(s + 1) * self.n_sensors]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}

/// Reaction term `g` of the state equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nonlinearity<T> {
    /// Regularized absolute value `g(y) = y / sqrt(y² + ε²)`.
    RegularizedAbs { eps: T },
    /// `g ≡ 0`, the linear heat equation.
    Zero,
}

impl<T: Scalar> Default for Nonlinearity<T> {
    fn default() -> Self {
        Nonlinearity::RegularizedAbs { eps: T::lit(0.1) }
    }
}

impl<T: Scalar> Nonlinearity<T> {
    pub fn regularized_abs(eps: T) -> Result<Self> {
        if !(eps > T::zero()) {
            return Err(Error::Parameter(format!(
                "nonlinearity width must be positive, got {eps}"
            )));
        }
        Ok(Nonlinearity::RegularizedAbs { eps })
    }

    /// `(g, g', g'')` at `y`.
    #[inline]
    pub fn value_derivs(&self, y: T) -> (T, T, T) {
        match *self {
            Nonlinearity::RegularizedAbs { eps } => {
                let e2 = eps * eps;
                let r2 = y * y + e2;
                let r = r2.sqrt();
                let r3 = r2 * r;
                (y / r, e2 / r3, -T::lit(3.0) * e2 * y / (r3 * r2))
            }
            Nonlinearity::Zero => (T::zero(), T::zero(), T::zero()),
        }
    }
}

pub fn g_value_derivs<T: Scalar>(nl: &Nonlinearity<T>, y: T) -> (T, T, T) {
    nl.value_derivs(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings<T> {
    pub max_iter: usize,
    pub tol: T,
}

impl<T: Scalar> Default for NewtonSettings<T> {
    fn default() -> Self {
        Self {
            max_iter: 25,
            tol: T::newton_tol(),
        }
    }
}

/// Everything needed to march the state equation.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub grid: SpatialGrid<T>,
    pub time: TimeGrid<T>,
    pub nonlinearity: Nonlinearity<T>,
    /// Isotropic diffusion coefficient, `A = -a Δ`.
    pub diffusion: T,
    pub newton: NewtonSettings<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(grid: SpatialGrid<T>, time: TimeGrid<T>, nonlinearity: Nonlinearity<T>) -> Self {
        Self {
            grid,
            time,
            nonlinearity,
            diffusion: T::one(),
            newton: NewtonSettings::default(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn n_levels(&self) -> usize {
        self.time.n_levels()
    }

    pub fn zero_space_time(&self) -> SpaceTimeField<T> {
        SpaceTimeField::zeros(self.n_nodes(), self.n_levels())
    }

    /// Discrete `L²(Ω)` inner product (weight `h²`).
    pub fn inner_space(&self, a: &[T], b: &[T]) -> T {
        let h = self.grid.h();
        h * h * crate::scalar::dot(a, b)
    }

    /// Discrete `L²(Q)` inner product: weight `τ h²`, rectangle rule without `t = 0`.
    pub fn inner_space_time(&self, a: &SpaceTimeField<T>, b: &SpaceTimeField<T>) -> T {
        let h = self.grid.h();
        let w = self.time.step() * h * h;
        (1..self.n_levels())
            .map(|s| crate::scalar::dot(a.level(s), b.level(s)))
            .sum::<T>()
            * w
    }

    fn gather(&self, full: &[T]) -> Vec<T> {
        self.grid.interior().iter().map(|&k| full[k]).collect()
    }

    fn scatter(&self, inner: &[T], full: &mut [T]) {
        for (&k, &v) in self.grid.interior().iter().zip(inner) {
            full[k] = v;
        }
    }

    /// `(I + τA_h) v` on interior unknowns.
    fn apply_base(&self, v: &[T]) -> Vec<T> {
        let g = &self.grid;
        let row = g.interior_row();
        let n = v.len();
        let tau = self.time.step();
        let c = tau * self.diffusion / (g.h() * g.h());
        let mut out = Vec::with_capacity(n);
        for idx in 0..n {
            let (i, j) = (idx % row, idx / row);
            let mut nb = T::zero();
            if i > 0 {
                nb = nb + v[idx - 1];
            }
            if i + 1 < row {
                nb = nb + v[idx + 1];
            }
            if j > 0 {
                nb = nb + v[idx - row];
            }
            if j + 1 < row {
                nb = nb + v[idx + row];
            }
            out.push(v[idx] + c * (T::lit(4.0) * v[idx] - nb));
        }
        out
    }

    /// Assembles `I + τA_h + τ diag(g'(y))` on interior unknowns.
    fn step_matrix(&self, y: &[T]) -> BandedSym<T> {
        let g = &self.grid;
        let row = g.interior_row();
        let n = y.len();
        let tau = self.time.step();
        let c = tau * self.diffusion / (g.h() * g.h());
        let mut a = BandedSym::zeros(n, row.max(1));
        for idx in 0..n {
            let (_, gp, _) = self.nonlinearity.value_derivs(y[idx]);
            assert!(gp >= T::zero(), "nonlinearity lost monotonicity");
            a.set(idx, idx, T::one() + T::lit(4.0) * c + tau * gp);
            if idx % row > 0 {
                a.set(idx, idx - 1, -c);
            }
            if idx >= row {
                a.set(idx, idx - row, -c);
            }
        }
        a
    }
}

/// State trajectory with the step Jacobians factored at the converged states.
#[derive(Debug, Clone)]
pub struct ForwardSolution<T> {
    pub y: SpaceTimeField<T>,
    jacobians: Vec<BandedCholesky<T>>,
    pub newton_iterations: Vec<usize>,
}

impl<T: Scalar> ForwardSolution<T> {
    /// Largest Newton iteration count over all steps.
    pub fn max_newton_iterations(&self) -> usize {
        self.newton_iterations.iter().copied().max().unwrap_or(0)
    }
}

/// Marches the semilinear equation from `u0` (boundary values are ignored and held at zero).
pub fn solve_forward<T: Scalar>(
    model: &Model<T>,
    u0: &SpatialField<T>,
    forcing: Option<&SpaceTimeField<T>>,
) -> Result<ForwardSolution<T>> {
    let (nn, nl) = (model.n_nodes(), model.n_levels());
    if u0.len() != nn {
        return Err(Error::Shape(format!(
            "initial condition has {} values, grid has {nn} nodes",
            u0.len()
        )));
    }
    if let Some(f) = forcing {
        f.check_shape(nn, nl, "forcing")?;
    }
    let tau = model.time.step();
    let settings = model.newton;
    let mut y = model.zero_space_time();
    let mut prev = model.gather(u0.values());
    model.scatter(&prev, y.level_mut(0));
    let mut jacobians = Vec::with_capacity(nl - 1);
    let mut iterations = Vec::with_capacity(nl - 1);

    for s in 1..nl {
        let mut rhs = prev.clone();
        if let Some(f) = forcing {
            let fs = model.gather(f.level(s));
            for (r, &v) in rhs.iter_mut().zip(&fs) {
                *r = *r + tau * v;
            }
        }
        let mut cur = prev.clone();
        let mut it = 0;
        loop {
            let mut res = model.apply_base(&cur);
            for ((r, &c), &b) in res.iter_mut().zip(&cur).zip(&rhs) {
                *r = *r + tau * model.nonlinearity.value_derivs(c).0 - b;
            }
            let rnorm = norm_inf(&res);
            if rnorm <= settings.tol {
                break;
            }
            if it == settings.max_iter {
                return Err(Error::NewtonNonconvergence {
                    step: s,
                    residual: rnorm.to_f64().unwrap_or(f64::NAN),
                });
            }
            let jac = model.step_matrix(&cur).cholesky()?;
            jac.solve_in_place(&mut res);
            for (c, d) in cur.iter_mut().zip(&res) {
                *c = *c - *d;
            }
            it += 1;
        }
        jacobians.push(model.step_matrix(&cur).cholesky()?);
        iterations.push(it);
        model.scatter(&cur, y.level_mut(s));
        prev = cur;
    }
    Ok(ForwardSolution {
        y,
        jacobians,
        newton_iterations: iterations,
    })
}

/// Tangent sweep `J_s η^s = η^{s-1}`, `η^0 = h0`.
pub fn solve_linearized_forward<T: Scalar>(
    model: &Model<T>,
    fwd: &ForwardSolution<T>,
    h0: &SpatialField<T>,
) -> Result<SpaceTimeField<T>> {
    if h0.len() != model.n_nodes() {
        return Err(Error::Shape("tangent initial value size".into()));
    }
    if fwd.jacobians.len() + 1 != model.n_levels() {
        return Err(Error::Shape(
            "forward solution from another time grid".into(),
        ));
    }
    let mut out = model.zero_space_time();
    let mut cur = model.gather(h0.values());
    model.scatter(&cur, out.level_mut(0));
    for (s, jac) in fwd.jacobians.iter().enumerate() {
        jac.solve_in_place(&mut cur);
        model.scatter(&cur, out.level_mut(s + 1));
    }
    Ok(out)
}

/// Point sources attached to the sensor candidates, as rates per unit time.
#[derive(Debug, Clone, Copy)]
pub struct NodalSource<'a, T> {
    pub sensors: &'a [usize],
    pub values: &'a SensorSeries<T>,
}

/// Second-order coupling `-g''(y^s) p^{s-1} ζ^s` added to the backward sources.
#[derive(Debug, Clone, Copy)]
pub struct Coupling<'a, T> {
    pub p: &'a SpaceTimeField<T>,
    pub zeta: &'a SpaceTimeField<T>,
}

/// Transposed sweep `J_s q^{s-1} = q^s + τ r^s`, `q^{n_steps} = 0`.
///
/// `r^s` collects the volumetric source, the nodal sources scaled by `1/h²`,
/// and the optional coupling term.
pub fn solve_adjoint_backward<T: Scalar>(
    model: &Model<T>,
    fwd: &ForwardSolution<T>,
    nodal: Option<NodalSource<'_, T>>,
    volumetric: Option<&SpaceTimeField<T>>,
    coupling: Option<Coupling<'_, T>>,
) -> Result<SpaceTimeField<T>> {
    let (nn, nl) = (model.n_nodes(), model.n_levels());
    if fwd.jacobians.len() + 1 != nl {
        return Err(Error::Shape(
            "forward solution from another time grid".into(),
        ));
    }
    if let Some(v) = volumetric {
        v.check_shape(nn, nl, "volumetric source")?;
    }
    if let Some(src) = &nodal {
        if src.values.n_sensors() != src.sensors.len() || src.values.n_levels() != nl {
            return Err(Error::Shape(format!(
                "nodal source is {} × {}, expected {} × {nl}",
                src.values.n_sensors(),
                src.values.n_levels(),
                src.sensors.len()
            )));
        }
    }
    if let Some(c) = &coupling {
        c.p.check_shape(nn, nl, "coupling adjoint")?;
        c.zeta.check_shape(nn, nl, "coupling tangent")?;
    }
    let tau = model.time.step();
    let h = model.grid.h();
    let dirac = T::one() / (h * h);
    let mut out = model.zero_space_time();
    let mut cur = vec![T::zero(); model.grid.n_interior()];
    let mut rate = vec![T::zero(); nn];
    for s in (1..nl).rev() {
        rate.iter_mut().for_each(|r| *r = T::zero());
        if let Some(v) = volumetric {
            rate.copy_from_slice(v.level(s));
        }
        if let Some(src) = &nodal {
            for (k, &node) in src.sensors.iter().enumerate() {
                rate[node] = rate[node] + src.values.get(k, s) * dirac;
            }
        }
        let mut rhs = cur;
        for (r, &node) in rhs.iter_mut().zip(model.grid.interior()) {
            let mut src = rate[node];
            if let Some(c) = &coupling {
                let (_, _, gpp) = model.nonlinearity.value_derivs(fwd.y.at(node, s));
                src = src - gpp * c.p.at(node, s - 1) * c.zeta.at(node, s);
            }
            *r = *r + tau * src;
        }
        fwd.jacobians[s - 1].solve_in_place(&mut rhs);
        model.scatter(&rhs, out.level_mut(s - 1));
        cur = rhs;
    }
    Ok(out)
}

/// Factored `α I - ϑ Δ_h` with homogeneous Dirichlet data.
#[derive(Debug, Clone)]
pub struct EllipticSolver<T> {
    grid: SpatialGrid<T>,
    theta: T,
    alpha: T,
    factor: Option<BandedCholesky<T>>,
}

impl<T: Scalar> EllipticSolver<T> {
    pub fn new(grid: &SpatialGrid<T>, theta: T, alpha: T) -> Result<Self> {
        if !(theta > T::zero()) || !(alpha > T::zero()) {
            return Err(Error::Parameter(format!(
                "elliptic operator needs ϑ > 0 and α > 0, got ϑ={theta}, α={alpha}"
            )));
        }
        let n = grid.n_interior();
        let factor = if n == 0 {
            None
        } else {
            let row = grid.interior_row();
            let c = theta / (grid.h() * grid.h());
            let mut a = BandedSym::zeros(n, row);
            for idx in 0..n {
                a.set(idx, idx, alpha + T::lit(4.0) * c);
                if idx % row > 0 {
                    a.set(idx, idx - 1, -c);
                }
                if idx >= row {
                    a.set(idx, idx - row, -c);
                }
            }
            Some(a.cholesky()?)
        };
        Ok(Self {
            grid: grid.clone(),
            theta,
            alpha,
            factor,
        })
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    /// `α v - ϑ Δ_h v` at interior nodes.
    pub fn apply(&self, v: &SpatialField<T>) -> SpatialField<T> {
        let lap = self.grid.neg_laplacian(v.values());
        let mut out = vec![T::zero(); self.grid.n_nodes()];
        for &k in self.grid.interior() {
            out[k] = self.alpha * v.values()[k] + self.theta * lap[k];
        }
        SpatialField::from_values(out)
    }

    pub fn solve(&self, rhs: &SpatialField<T>) -> Result<SpatialField<T>> {
        if rhs.len() != self.grid.n_nodes() {
            return Err(Error::Shape("elliptic right-hand side size".into()));
        }
        let mut out = vec![T::zero(); self.grid.n_nodes()];
        if let Some(f) = &self.factor {
            let mut b: Vec<T> = self
                .grid
                .interior()
                .iter()
                .map(|&k| rhs.values()[k])
                .collect();
            f.solve_in_place(&mut b);
            for (&k, &v) in self.grid.interior().iter().zip(&b) {
                out[k] = v;
            }
        }
        Ok(SpatialField::from_values(out))
    }
}

/// One-shot `-ϑ Δ_h v + α v = rhs`.
pub fn solve_elliptic<T: Scalar>(
    grid: &SpatialGrid<T>,
    rhs: &SpatialField<T>,
    theta: T,
    alpha: T,
) -> Result<SpatialField<T>> {
    EllipticSolver::new(grid, theta, alpha)?.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::CandidateSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn model(m: usize, n: usize) -> Model<f64> {
        Model::new(
            SpatialGrid::new(m, &CandidateSet::AllNodes).unwrap(),
            TimeGrid::new(n).unwrap(),
            Nonlinearity::default(),
        )
    }

    fn random_field(model: &Model<f64>, rng: &mut ChaCha8Rng) -> SpatialField<f64> {
        SpatialField::from_values(
            model
                .grid
                .sample_dirichlet(|_, _| 0.0)
                .iter()
                .enumerate()
                .map(|(k, _)| {
                    if model.grid.is_boundary(k) {
                        0.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn nonlinearity_values() {
        let nl = Nonlinearity::<f64>::default();
        let (g, _, _) = nl.value_derivs(0.1);
        assert!((g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((nl.value_derivs(1e8).0 - 1.0).abs() < 1e-15);
        for &y in &[-0.7, -0.05, 0.0, 0.03, 0.4] {
            let e = 1e-6;
            let (g, d1, d2) = nl.value_derivs(y);
            let fd1 = (nl.value_derivs(y + e).0 - nl.value_derivs(y - e).0) / (2.0 * e);
            let fd2 = (nl.value_derivs(y + e).1 - nl.value_derivs(y - e).1) / (2.0 * e);
            assert!((fd1 - d1).abs() < 1e-6 * (1.0 + d1.abs()));
            assert!((fd2 - d2).abs() < 1e-5 * (1.0 + d2.abs()));
            assert!(d1 >= 0.0 && g.abs() <= 1.0);
        }
        assert!(Nonlinearity::<f64>::regularized_abs(0.0).is_err());
    }

    #[test]
    fn nonlinearity_at_zero_is_one_over_eps() {
        let (g, gp, gpp) = Nonlinearity::<f64>::default().value_derivs(0.0);
        assert_eq!(g, 0.0);
        assert!((gp - 10.0).abs() < 1e-12);
        assert_eq!(gpp, 0.0);
    }

    #[test]
    fn zero_data_stays_zero() {
        let md = model(8, 5);
        let fwd = solve_forward(&md, &SpatialField::zeros(64), None).unwrap();
        assert!(fwd.y.values().iter().all(|&v| v == 0.0));
        assert_eq!(fwd.max_newton_iterations(), 0);
    }

    #[test]
    fn linear_mode_decays_at_implicit_euler_rate() {
        let mut md = model(12, 6);
        md.nonlinearity = Nonlinearity::Zero;
        let h = md.grid.h();
        // sin(πx) sin(πy) is a discrete eigenfunction with λ_h = (8/h²) sin²(πh/2)
        let lam = 8.0 / (h * h) * (PI * h / 2.0).sin().powi(2);
        let u = SpatialField::from_fn(&md.grid, |x, y| (PI * x).sin() * (PI * y).sin());
        let fwd = solve_forward(&md, &u, None).unwrap();
        let rate = 1.0 / (1.0 + md.time.step() * lam);
        for s in 1..md.n_levels() {
            for &k in md.grid.interior() {
                let r = fwd.y.at(k, s) / u.values()[k];
                assert!((r - rate.powi(s as i32)).abs() < 1e-10, "s={s}");
            }
        }
        // the linear equation is its own linearization
        let eta = solve_linearized_forward(&md, &fwd, &u).unwrap();
        for (a, b) in eta.values().iter().zip(fwd.y.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn newton_converges_fast_on_reference_problem() {
        let md = model(20, 12);
        let u = SpatialField::from_fn(&md.grid, |x, y| (2.0 * PI * x).sin() * (2.0 * PI * y).sin());
        let f = SpaceTimeField::from_fn(&md.grid, &md.time, |x, _, t| (1.0 - t) * (PI * x).sin());
        let fwd = solve_forward(&md, &u, Some(&f)).unwrap();
        assert!(
            fwd.max_newton_iterations() <= 8,
            "{:?}",
            fwd.newton_iterations
        );
        // sup norm shrinks from the initial amplitude
        let sup = |s: usize| norm_inf(fwd.y.level(s));
        assert!(sup(1) < sup(0));
        for &k in md.grid.interior() {
            assert!(fwd.y.at(k, 0) == u.values()[k]);
        }
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let md = model(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_field(&md, &mut rng);
        let dir = random_field(&md, &mut rng);
        let base = solve_forward(&md, &u, None).unwrap();
        let eta = solve_linearized_forward(&md, &base, &dir).unwrap();
        let mut errs = Vec::new();
        for &d in &[1e-3, 1e-4, 1e-5, 1e-6] {
            let up: Vec<f64> = u
                .values()
                .iter()
                .zip(dir.values())
                .map(|(a, b)| a + d * b)
                .collect();
            let pert = solve_forward(&md, &SpatialField::from_values(up), None).unwrap();
            let err = pert
                .y
                .values()
                .iter()
                .zip(base.y.values())
                .zip(eta.values())
                .map(|((p, b), e)| ((p - b) / d - e).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        // first-order convergence in δ until roundoff takes over
        assert!(errs[1] < 0.2 * errs[0], "{errs:?}");
        assert!(errs[2] < 0.2 * errs[1], "{errs:?}");
    }

    #[test]
    fn tangent_of_zero_direction_is_zero() {
        let md = model(6, 3);
        let fwd = solve_forward(&md, &SpatialField::from_fn(&md.grid, |x, _| x), None).unwrap();
        let eta = solve_linearized_forward(&md, &fwd, &SpatialField::zeros(36)).unwrap();
        assert!(eta.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_is_transpose_of_tangent() {
        let md = model(10, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_field(&md, &mut rng);
        let fwd = solve_forward(&md, &u, None).unwrap();
        for _ in 0..5 {
            let v = random_field(&md, &mut rng);
            let mut q = md.zero_space_time();
            for s in 1..md.n_levels() {
                let lvl = random_field(&md, &mut rng);
                q.level_mut(s).copy_from_slice(lvl.values());
            }
            let mv = solve_linearized_forward(&md, &fwd, &v).unwrap();
            let lhs = md.inner_space_time(&mv, &q);
            let adj = solve_adjoint_backward(&md, &fwd, None, Some(&q), None).unwrap();
            let rhs = md.inner_space(v.values(), adj.level(0));
            let scale =
                md.inner_space(v.values(), v.values()).sqrt() * md.inner_space_time(&q, &q).sqrt();
            assert!((lhs - rhs).abs() <= 1e-12 * scale, "{lhs} {rhs}");
        }
    }

    #[test]
    fn adjoint_point_source_is_transposed_propagator_column() {
        // 5×5 grid: 9 interior unknowns; assemble the dense tangent propagator column by column
        let md = model(5, 3);
        let u = SpatialField::from_fn(&md.grid, |x, y| (PI * x).sin() * (PI * y).sin());
        let fwd = solve_forward(&md, &u, None).unwrap();
        let sensor = 12; // centre node
        let step = 2;
        let n = md.grid.n_interior();
        // propagator P: h0 (interior) -> η^step at the sensor node
        let mut row = vec![0.0; n];
        for (c, &node) in md.grid.interior().iter().enumerate() {
            let mut e = SpatialField::zeros(md.n_nodes());
            e.values_mut()[node] = 1.0;
            let eta = solve_linearized_forward(&md, &fwd, &e).unwrap();
            row[c] = eta.at(sensor, step);
        }
        let mut src = SensorSeries::zeros(1, md.n_levels());
        src.set(0, step, 1.0);
        let sensors = [sensor];
        let adj = solve_adjoint_backward(
            &md,
            &fwd,
            Some(NodalSource {
                sensors: &sensors,
                values: &src,
            }),
            None,
            None,
        )
        .unwrap();
        let h2 = md.grid.h().powi(2);
        let tau = md.time.step();
        for (c, &node) in md.grid.interior().iter().enumerate() {
            // Pᵀ (τ e_k / h²)
            let expect = tau * row[c] / h2;
            assert!(
                (adj.at(node, 0) - expect).abs() < 1e-13,
                "{} {}",
                adj.at(node, 0),
                expect
            );
        }
    }

    #[test]
    fn adjoint_of_zero_sources_is_zero() {
        let md = model(6, 3);
        let fwd = solve_forward(&md, &SpatialField::from_fn(&md.grid, |x, _| x), None).unwrap();
        let q = solve_adjoint_backward(&md, &fwd, None, None, None).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_rejects_mismatched_source() {
        let md = model(6, 3);
        let fwd = solve_forward(&md, &SpatialField::zeros(36), None).unwrap();
        let bad = SpaceTimeField::zeros(36, 2);
        assert!(matches!(
            solve_adjoint_backward(&md, &fwd, None, Some(&bad), None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn elliptic_examples() {
        let grid = SpatialGrid::<f64>::new(16, &CandidateSet::AllNodes).unwrap();
        let zero = solve_elliptic(&grid, &SpatialField::zeros(256), 0.3, 0.1).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));

        let h = grid.h();
        let lam = 2.0 * (4.0 / (h * h)) * (PI * h).sin().powi(2) / 2.0
            + 2.0 * (4.0 / (h * h)) * (PI * h).sin().powi(2) / 2.0;
        // eigenfunction sin(2πx) sin(2πy): λ_h = (4/h²)(sin²(πh) + sin²(πh))
        let lam_exact = (4.0 / (h * h)) * 2.0 * (PI * h).sin().powi(2);
        assert!((lam - lam_exact).abs() < 1e-9);
        let rhs = SpatialField::from_fn(&grid, |x, y| (2.0 * PI * x).sin() * (2.0 * PI * y).sin());
        let (theta, alpha) = (0.01, 0.1);
        let v = solve_elliptic(&grid, &rhs, theta, alpha).unwrap();
        for &k in grid.interior() {
            let e = rhs.values()[k] / (theta * lam_exact + alpha);
            assert!((v.values()[k] - e).abs() < 1e-12);
        }

        let tiny = solve_elliptic(&grid, &rhs, 1e-8, 0.5).unwrap();
        for &k in grid.interior() {
            assert!((tiny.values()[k] - rhs.values()[k] / 0.5).abs() < 1e-4);
        }

        assert!(matches!(
            solve_elliptic(&grid, &rhs, 0.0, 1.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            solve_elliptic(&grid, &rhs, 1.0, -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn forward_runs_in_single_precision() {
        let md = Model::new(
            SpatialGrid::<f32>::new(8, &CandidateSet::AllNodes).unwrap(),
            TimeGrid::new(4).unwrap(),
            Nonlinearity::default(),
        );
        let u = SpatialField::from_fn(&md.grid, |x, y| (x * 3.0).sin() * (y * 3.0).sin());
        let fwd = solve_forward(&md, &u, None).unwrap();
        assert!(fwd.y.values().iter().all(|v| v.is_finite()));
    }
}
