//! Uniform space-time discretization of the unit square and `[0, 1]`.
//!
//! Nodes are numbered `i + m * j` with coordinates `(i h, j h)`, `h = 1 / (m - 1)`.
//! Observation windows split `[0, 1]` into `n + 2` equal pieces while the PDE
//! marches with step `1 / (n + 1)`; the two partitions are independent.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How sensor candidates are chosen on the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateSet<T> {
    /// Every grid node, boundary included.
    AllNodes,
    /// Arbitrary points, each snapped to its nearest node.
    Points(Vec<[T; 2]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid<T> {
    m: usize,
    h: T,
    candidates: Vec<usize>,
    interior: Vec<usize>,
    interior_of: Vec<Option<usize>>,
}

impl<T: Scalar> SpatialGrid<T> {
    pub fn new(m: usize, candidates: &CandidateSet<T>) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidDimension(format!(
                "grid needs at least 2 nodes per dimension, got {m}"
            )));
        }
        let h = T::one() / T::of(m - 1);
        let mut interior = Vec::new();
        let mut interior_of = vec![None; m * m];
        for j in 1..m.saturating_sub(1) {
            for i in 1..m - 1 {
                interior_of[i + m * j] = Some(interior.len());
                interior.push(i + m * j);
            }
        }
        let mut grid = Self {
            m,
            h,
            candidates: Vec::new(),
            interior,
            interior_of,
        };
        grid.candidates = match candidates {
            CandidateSet::AllNodes => (0..m * m).collect(),
            CandidateSet::Points(points) => {
                let mut ids: Vec<usize> = Vec::with_capacity(points.len());
                for (pi, p) in points.iter().enumerate() {
                    let node = grid.nearest_node(*p)?;
                    if ids.contains(&node) {
                        return Err(Error::DuplicateSensor { point: pi, node });
                    }
                    ids.push(node);
                }
                ids
            }
        };
        Ok(grid)
    }

    /// Nodes per dimension.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Grid spacing.
    pub fn h(&self) -> T {
        self.h
    }

    pub fn n_nodes(&self) -> usize {
        self.m * self.m
    }

    /// Number of sensor candidates `n_s`.
    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    /// Interior node ids in interior-unknown order.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    /// Position of `node` in the interior ordering, `None` on the boundary.
    pub fn interior_index(&self, node: usize) -> Option<usize> {
        self.interior_of[node]
    }

    /// Row length of the interior ordering, i.e. the half bandwidth of 5-point operators.
    pub fn interior_row(&self) -> usize {
        self.m.saturating_sub(2)
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.interior_of[node].is_none()
    }

    pub fn coords(&self, node: usize) -> [T; 2] {
        let (i, j) = (node % self.m, node / self.m);
        [T::of(i) * self.h, T::of(j) * self.h]
    }

    /// Node closest to `p` in the Euclidean metric; ties go to the lowest index.
    pub fn nearest_node(&self, p: [T; 2]) -> Result<usize> {
        let inside = |v: T| v >= T::zero() && v <= T::one();
        if !(inside(p[0]) && inside(p[1])) {
            return Err(Error::OutOfDomain {
                x: p[0].to_f64().unwrap_or(f64::NAN),
                y: p[1].to_f64().unwrap_or(f64::NAN),
            });
        }
        let mut best = (0, T::infinity());
        for node in 0..self.n_nodes() {
            let c = self.coords(node);
            let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
            if d < best.1 {
                best = (node, d);
            }
        }
        Ok(best.0)
    }

    /// Samples `f` at every node; boundary nodes are set to zero.
    pub fn sample_dirichlet(&self, f: impl Fn(T, T) -> T) -> Vec<T> {
        (0..self.n_nodes())
            .map(|node| {
                if self.is_boundary(node) {
                    T::zero()
                } else {
                    let [x, y] = self.coords(node);
                    f(x, y)
                }
            })
            .collect()
    }

    /// `-Δ_h v` at interior nodes (five-point stencil, homogeneous Dirichlet data).
    pub fn neg_laplacian(&self, v: &[T]) -> Vec<T> {
        let m = self.m;
        let inv_h2 = T::one() / (self.h * self.h);
        let mut out = vec![T::zero(); self.n_nodes()];
        for &node in &self.interior {
            let s = v[node - 1] + v[node + 1] + v[node - m] + v[node + m];
            out[node] = (T::lit(4.0) * v[node] - s) * inv_h2;
        }
        out
    }
}

pub fn build_spatial_grid<T: Scalar>(
    m: usize,
    candidates: &CandidateSet<T>,
) -> Result<SpatialGrid<T>> {
    SpatialGrid::new(m, candidates)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    n: usize,
    step: T,
    /// `rho[s * n_windows + i] = ρ_i(t_s)` for every time level `s`.
    rho: Vec<T>,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidDimension(format!(
                "time grid needs n >= 1, got {n}"
            )));
        }
        let mut tg = Self {
            n,
            step: T::one() / T::of(n + 1),
            rho: Vec::new(),
        };
        let nw = tg.n_windows();
        let mut rho = Vec::with_capacity((tg.n_steps() + 1) * nw);
        for s in 0..=tg.n_steps() {
            let t = tg.time(s);
            for i in 0..nw {
                rho.push(tg.bump(i, t));
            }
        }
        tg.rho = rho;
        Ok(tg)
    }

    /// Interior step count `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Time step `τ = 1 / (n + 1)`.
    pub fn step(&self) -> T {
        self.step
    }

    /// Number of implicit Euler steps; time levels run `0 ..= n_steps`.
    pub fn n_steps(&self) -> usize {
        self.n + 1
    }

    pub fn n_levels(&self) -> usize {
        self.n + 2
    }

    /// Number of observation windows `n_T = n + 2`.
    pub fn n_windows(&self) -> usize {
        self.n + 2
    }

    pub fn time(&self, level: usize) -> T {
        T::of(level) / T::of(self.n + 1)
    }

    pub fn window(&self, i: usize) -> (T, T) {
        let nw = T::of(self.n_windows());
        (T::of(i) / nw, T::of(i + 1) / nw)
    }

    pub fn windows(&self) -> Vec<(T, T)> {
        (0..self.n_windows()).map(|i| self.window(i)).collect()
    }

    fn bump(&self, i: usize, t: T) -> T {
        let (a, b) = self.window(i);
        if t <= a || t >= b {
            return T::zero();
        }
        let s = (t - a) / (b - a);
        T::lit(64.0) * (s * (T::one() - s)).powi(3)
    }

    pub fn mollifier(&self, i: usize) -> Result<Mollifier<'_, T>> {
        if i >= self.n_windows() {
            return Err(Error::Bounds {
                index: i,
                len: self.n_windows(),
            });
        }
        Ok(Mollifier {
            grid: self,
            index: i,
        })
    }

    /// Cached `ρ_i(t_s)`.
    #[inline]
    pub fn rho_at_level(&self, level: usize, i: usize) -> T {
        self.rho[level * self.n_windows() + i]
    }

    /// Combined time weights `c_s = Σ_i σ_i ρ_i(t_s)` for every level.
    pub fn level_weights(&self, sigma: &[T]) -> Vec<T> {
        let nw = self.n_windows();
        (0..self.n_levels())
            .map(|s| {
                self.rho[s * nw..(s + 1) * nw]
                    .iter()
                    .zip(sigma)
                    .map(|(&r, &sg)| r * sg)
                    .sum()
            })
            .collect()
    }
}

pub fn build_time_grid<T: Scalar>(n: usize) -> Result<TimeGrid<T>> {
    TimeGrid::new(n)
}

/// C² bump `64 s³ (1 - s)³` supported on one observation window.
#[derive(Debug, Clone, Copy)]
pub struct Mollifier<'a, T> {
    grid: &'a TimeGrid<T>,
    index: usize,
}

impl<T: Scalar> Mollifier<'_, T> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn value(&self, t: T) -> T {
        self.grid.bump(self.index, t)
    }

    /// Analytic first and second time derivatives.
    pub fn derivatives(&self, t: T) -> (T, T) {
        let (a, b) = self.grid.window(self.index);
        if t <= a || t >= b {
            return (T::zero(), T::zero());
        }
        let len = b - a;
        let s = (t - a) / len;
        let q = T::one() - s;
        let c = T::lit(64.0);
        let d1 = c * T::lit(3.0) * s * s * q * q * (q - s) / len;
        let d2 = c * T::lit(6.0) * s * q * (q * q - T::lit(3.0) * s * q + s * s) / (len * len);
        (d1, d2)
    }
}

pub fn mollifier_value<T: Scalar>(tg: &TimeGrid<T>, i: usize, t: T) -> Result<T> {
    Ok(tg.mollifier(i)?.value(t))
}

pub fn nearest_node<T: Scalar>(grid: &SpatialGrid<T>, p: [T; 2]) -> Result<usize> {
    grid.nearest_node(p)
}
