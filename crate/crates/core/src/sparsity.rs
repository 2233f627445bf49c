//! Concave `ℓ⁰` surrogate `Φ_ε(x) = Σ φ_ε(x_i)`: linear `x/ε` up to `ε/2`, a
//! cubic bridge `π_ε` on `(ε/2, 2ε)`, and `1` from `2ε` on. The bridge coefficients
//! solve the 4×4 Hermite system that glues value and slope at both breakpoints.

use num_traits::Num;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The coefficient system for `π(x) = a x³ + b x² + c x + e`, in any field.
pub fn bridge_system<F: Num + Clone>(eps: F) -> ([[F; 4]; 4], [F; 4]) {
    let one = F::one();
    let two = one.clone() + one.clone();
    let three = two.clone() + one.clone();
    let four = two.clone() + two.clone();
    let eight = four.clone() + four.clone();
    let twelve = eight.clone() + four.clone();
    let e1 = eps.clone();
    let e2 = e1.clone() * e1.clone();
    let e3 = e2.clone() * e1.clone();
    let zero = F::zero();
    let a = [
        [
            e3.clone() / eight.clone(),
            e2.clone() / four.clone(),
            e1.clone() / two.clone(),
            one.clone(),
        ],
        [
            eight * e3,
            four.clone() * e2.clone(),
            two.clone() * e1.clone(),
            one.clone(),
        ],
        [
            three * e2.clone() / four.clone(),
            e1.clone(),
            one.clone(),
            zero.clone(),
        ],
        [twelve * e2, four * e1.clone(), one.clone(), zero.clone()],
    ];
    let b = [one.clone() / two, one.clone(), one / e1, zero];
    (a, b)
}

/// Gaussian elimination with partial pivoting on a 4×4 system.
pub fn solve4<F>(mut a: [[F; 4]; 4], mut b: [F; 4]) -> Option<[F; 4]>
where
    F: Num + PartialOrd + Clone,
{
    let abs = |v: &F| {
        if *v < F::zero() {
            F::zero() - v.clone()
        } else {
            v.clone()
        }
    };
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| {
                abs(&a[i][col])
                    .partial_cmp(&abs(&a[j][col]))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("nonempty range");
        if a[piv][col].is_zero() {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..4 {
            let f = a[row][col].clone() / a[col][col].clone();
            for k in col..4 {
                let v = a[col][k].clone();
                a[row][k] = a[row][k].clone() - f.clone() * v;
            }
            let v = b[col].clone();
            b[row] = b[row].clone() - f * v;
        }
    }
    let mut x: [F; 4] = std::array::from_fn(|_| F::zero());
    for row in (0..4).rev() {
        let mut s = b[row].clone();
        for k in (row + 1)..4 {
            s = s - a[row][k].clone() * x[k].clone();
        }
        x[row] = s / a[row][row].clone();
    }
    Some(x)
}

/// Coefficients `(a, b, c, e)` of the cubic bridge for `0 < ε ≤ 1/2`.
pub fn pi_coefficients<T: Scalar>(eps: T) -> Result<[T; 4]> {
    Ok(PenaltyFamily::new(eps)?.coefficients())
}

/// One member `φ_ε` of the penalty family, with its bridge coefficients cached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyFamily<T> {
    eps: T,
    coeffs: [T; 4],
    residual: T,
}

impl<T: Scalar> PenaltyFamily<T> {
    pub fn new(eps: T) -> Result<Self> {
        if !(eps > T::zero() && eps <= T::lit(0.5)) {
            return Err(Error::Parameter(format!(
                "penalty ε must lie in (0, 1/2], got {eps}"
            )));
        }
        let (a, b) = bridge_system(eps);
        let coeffs =
            solve4(a, b).ok_or_else(|| Error::LinearSolver("singular bridge system".into()))?;
        let residual = system_residual(eps, &coeffs);
        let scale = T::one() / eps;
        if residual > T::lit(1e-12) * scale.max(T::one()) {
            return Err(Error::LinearSolver(format!(
                "bridge system residual {residual} too large for ε = {eps}"
            )));
        }
        Ok(Self {
            eps,
            coeffs,
            residual,
        })
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn coefficients(&self) -> [T; 4] {
        self.coeffs
    }

    /// Max-norm residual of the coefficient solve.
    pub fn residual(&self) -> T {
        self.residual
    }

    pub fn bridge(&self, x: T) -> T {
        let [a, b, c, e] = self.coeffs;
        ((a * x + b) * x + c) * x + e
    }

    pub fn bridge_derivative(&self, x: T) -> T {
        let [a, b, c, _] = self.coeffs;
        (T::lit(3.0) * a * x + T::lit(2.0) * b) * x + c
    }

    fn check(x: T) -> Result<()> {
        if x >= T::zero() && x <= T::one() {
            Ok(())
        } else {
            Err(Error::Domain {
                value: x.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    pub fn value(&self, x: T) -> Result<T> {
        Self::check(x)?;
        let half = self.eps * T::lit(0.5);
        Ok(if x <= half {
            x / self.eps
        } else if x < T::lit(2.0) * self.eps {
            self.bridge(x)
        } else {
            T::one()
        })
    }

    pub fn derivative(&self, x: T) -> Result<T> {
        Self::check(x)?;
        let half = self.eps * T::lit(0.5);
        Ok(if x <= half {
            T::one() / self.eps
        } else if x < T::lit(2.0) * self.eps {
            self.bridge_derivative(x)
        } else {
            T::zero()
        })
    }

    /// `Φ_ε(v) = Σ_i φ_ε(v_i)`.
    pub fn sum(&self, v: &[T]) -> Result<T> {
        v.iter()
            .try_fold(T::zero(), |acc, &x| Ok(acc + self.value(x)?))
    }

    /// Componentwise `φ'_ε`.
    pub fn gradient(&self, v: &[T]) -> Result<Vec<T>> {
        v.iter().map(|&x| self.derivative(x)).collect()
    }
}

fn system_residual<T: Scalar>(eps: T, x: &[T; 4]) -> T {
    let (a, b) = bridge_system(eps);
    a.iter()
        .zip(&b)
        .map(|(row, &rhs)| {
            let lhs: T = row.iter().zip(x).map(|(&r, &c)| r * c).sum();
            (lhs - rhs).abs()
        })
        .fold(T::zero(), T::max)
}

pub fn phi_value<T: Scalar>(fam: &PenaltyFamily<T>, x: T) -> Result<T> {
    fam.value(x)
}

pub fn phi_derivative<T: Scalar>(fam: &PenaltyFamily<T>, x: T) -> Result<T> {
    fam.derivative(x)
}

#[allow(non_snake_case)]
pub fn Phi_sum<T: Scalar>(fam: &PenaltyFamily<T>, v: &[T]) -> Result<T> {
    fam.sum(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    const EPSILONS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];

    #[test]
    fn exact_rational_coefficients_satisfy_system() {
        for den in [2i64, 4, 8, 16] {
            let eps = Ratio::new(1, den);
            let (a, b) = bridge_system(eps);
            let x = solve4(a, b).unwrap();
            for (row, rhs) in a.iter().zip(&b) {
                let lhs: Ratio<i64> = row.iter().zip(&x).map(|(r, c)| r * c).sum();
                assert_eq!(&lhs, rhs);
            }
            // floating point solve agrees with the exact one
            let fam = PenaltyFamily::new(1.0 / den as f64).unwrap();
            for (f, r) in fam.coefficients().iter().zip(&x) {
                let exact = *r.numer() as f64 / *r.denom() as f64;
                assert!(
                    (f - exact).abs() <= 1e-12 * exact.abs().max(1.0),
                    "{f} {exact}"
                );
            }
        }
    }

    #[test]
    fn residual_and_row_values() {
        for &eps in &EPSILONS {
            let fam = PenaltyFamily::new(eps).unwrap();
            assert!(fam.residual() <= 1e-12);
            assert!((fam.bridge(eps / 2.0) - 0.5).abs() < 1e-12);
            assert!((fam.bridge(2.0 * eps) - 1.0).abs() < 1e-12);
            assert!((fam.bridge_derivative(eps / 2.0) - 1.0 / eps).abs() < 1e-10);
            assert!(fam.bridge_derivative(2.0 * eps).abs() < 1e-10);
        }
        let fam = PenaltyFamily::new(0.5f64).unwrap();
        assert!((fam.bridge(0.25) - 0.5).abs() < 1e-14);
        assert!((fam.bridge(1.0) - 1.0).abs() < 1e-14);
        let fam = PenaltyFamily::new(0.125f64).unwrap();
        assert!(fam.bridge_derivative(0.25).abs() < 1e-12);
    }

    #[test]
    fn branches_glue_c1() {
        for &eps in &EPSILONS {
            let fam = PenaltyFamily::new(eps).unwrap();
            for &bp in &[eps / 2.0, 2.0 * eps] {
                let left_v = if bp <= eps / 2.0 {
                    bp / eps
                } else {
                    fam.bridge(bp)
                };
                let right_v = if bp <= eps / 2.0 { fam.bridge(bp) } else { 1.0 };
                let left_d = if bp <= eps / 2.0 {
                    1.0 / eps
                } else {
                    fam.bridge_derivative(bp)
                };
                let right_d = if bp <= eps / 2.0 {
                    fam.bridge_derivative(bp)
                } else {
                    0.0
                };
                assert!((left_v - right_v).abs() <= 1e-10);
                assert!((left_d - right_d).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn values_and_derivatives() {
        let fam = PenaltyFamily::new(0.125f64).unwrap();
        assert_eq!(fam.value(0.0).unwrap(), 0.0);
        assert_eq!(fam.value(1.0).unwrap(), 1.0);
        assert_eq!(fam.derivative(0.5).unwrap(), 0.0);
        assert!((fam.value(0.0625).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(fam.derivative(0.0625).unwrap(), 8.0);
        for k in 1..50 {
            let x = 0.0625 + (0.25 - 0.0625) * k as f64 / 50.0;
            let d = 1e-6;
            let fd = (fam.value(x + d).unwrap() - fam.value(x - d).unwrap()) / (2.0 * d);
            assert!((fd - fam.derivative(x).unwrap()).abs() < 1e-8);
        }
        assert!(matches!(fam.value(1.5), Err(Error::Domain { .. })));
        assert!(matches!(fam.derivative(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(matches!(
            PenaltyFamily::new(0.0f64),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            PenaltyFamily::new(0.6f64),
            Err(Error::Parameter(_))
        ));
        assert!(pi_coefficients(0.5f64).is_ok());
    }

    #[test]
    fn monotone_on_unit_interval() {
        for &eps in &EPSILONS {
            let fam = PenaltyFamily::new(eps).unwrap();
            let mut prev = fam.value(0.0).unwrap();
            for k in 1..=10_000 {
                let v = fam.value(k as f64 / 10_000.0).unwrap();
                assert!(v >= prev - 1e-15, "ε={eps} k={k}");
                assert!((0.0..=1.0 + 1e-15).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn phi_sum_examples() {
        let fam = PenaltyFamily::new(0.5f64).unwrap();
        assert_eq!(Phi_sum(&fam, &[0.0; 10]).unwrap(), 0.0);
        assert_eq!(Phi_sum(&fam, &[1.0; 400]).unwrap(), 400.0);
        assert!(Phi_sum(&fam, &[0.2, 1.2]).is_err());
    }

    #[test]
    fn single_precision_family() {
        let fam = PenaltyFamily::<f32>::new(0.25).unwrap();
        assert!((fam.value(0.5f32).unwrap() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn binary_vectors_count_ones(bits in proptest::collection::vec(any::<bool>(), 0..500), e in 0usize..4) {
            let fam = PenaltyFamily::new(EPSILONS[e]).unwrap();
            let v: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let ones = bits.iter().filter(|&&b| b).count() as f64;
            prop_assert_eq!(fam.sum(&v).unwrap(), ones);
        }
    }
}
