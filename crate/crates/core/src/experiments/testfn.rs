//! Bounded test functions and their expectations under Gaussian laws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_spd, dot, norm2, Matrix};
use crate::special::trapezoid;

/// Builtin test functions; all satisfy `‖f‖∞ ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunctionKind {
    /// `f ≡ 1`.
    One,
    /// `tanh(vᵀx)`.
    Tanh,
    /// `cos(vᵀx)`.
    Cos,
    /// `1 / (1 + ‖x‖²)`.
    Rational,
}

impl TestFunctionKind {
    pub const NAMES: [&'static str; 4] = ["one", "tanh", "cos", "rational"];

    /// Parses a builtin name; anything else (including unbounded choices
    /// such as the identity) is a validation error.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "one" => Ok(Self::One),
            "tanh" => Ok(Self::Tanh),
            "cos" => Ok(Self::Cos),
            "rational" => Ok(Self::Rational),
            other => Err(Error::Validation(format!(
                "test_function `{other}` is not a builtin bounded function (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::One => "one",
            Self::Tanh => "tanh",
            Self::Cos => "cos",
            Self::Rational => "rational",
        }
    }
}

/// A builtin test function with its unit direction `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    kind: TestFunctionKind,
    v: Vec<f64>,
}

impl TestFunction {
    /// `direction` is normalised to unit length.
    pub fn new(kind: TestFunctionKind, direction: &[f64]) -> Result<Self> {
        let n = norm2(direction);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Validation("test-function direction must be a non-zero finite vector".into()));
        }
        Ok(TestFunction {
            kind,
            v: direction.iter().map(|x| x / n).collect(),
        })
    }

    /// Direction `e₁` in dimension `d_x`.
    pub fn along_first_axis(kind: TestFunctionKind, d_x: usize) -> Self {
        let mut v = vec![0.0; d_x.max(1)];
        v[0] = 1.0;
        TestFunction { kind, v }
    }

    pub fn kind(&self) -> TestFunctionKind {
        self.kind
    }

    pub fn direction(&self) -> &[f64] {
        &self.v
    }

    pub fn sup_norm(&self) -> f64 {
        1.0
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.kind {
            TestFunctionKind::One => 1.0,
            TestFunctionKind::Tanh => dot(&self.v, x).tanh(),
            TestFunctionKind::Cos => dot(&self.v, x).cos(),
            TestFunctionKind::Rational => 1.0 / (1.0 + dot(x, x)),
        }
    }

    /// `E f(X)` for `X ~ N(mean, cov)`.
    ///
    /// `tanh` reduces to a 1-d integral over the projection `vᵀX`, `cos` is
    /// closed form, and the rational function uses
    /// `1/(1+s) = ∫₀^∞ e^{−t(1+s)} dt` with the Gaussian Laplace transform
    /// `E e^{−t‖X‖²} = |I + 2tΣ|^{−1/2} exp(−t μᵀ(I + 2tΣ)⁻¹μ)`.
    pub fn gaussian_expectation(&self, mean: &[f64], cov: &Matrix) -> Result<f64> {
        if self.v.len() != mean.len() || cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "test-function expectation",
                expected: self.v.len(),
                got: mean.len(),
            });
        }
        let m = dot(&self.v, mean);
        let s2 = dot(&self.v, &cov.matvec(&self.v)?).max(0.0);
        match self.kind {
            TestFunctionKind::One => Ok(1.0),
            TestFunctionKind::Cos => Ok(m.cos() * (-0.5 * s2).exp()),
            TestFunctionKind::Tanh => {
                if s2 == 0.0 {
                    return Ok(m.tanh());
                }
                let s = s2.sqrt();
                let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
                Ok(trapezoid(-12.0, 12.0, 4001, |u| (m + s * u).tanh() * phi(u)))
            }
            TestFunctionKind::Rational => rational_expectation(mean, cov),
        }
    }
}

fn rational_expectation(mean: &[f64], cov: &Matrix) -> Result<f64> {
    let d = mean.len();
    let laplace = |t: f64| -> Result<f64> {
        let mut a = Matrix::identity(d).add(&cov.scale(2.0 * t))?;
        a.symmetrize();
        let f = chol_spd(&a)?;
        let q = f.mahalanobis_sq(mean)?;
        Ok((-0.5 * f.log_det() - t * q).exp())
    };
    // t = eˢ; the integrand is O(eˢ) as s → −∞ and O(exp(−eˢ)) as s → ∞.
    let (lo, hi, n) = (-40.0, 6.0, 4601);
    let h = (hi - lo) / (n - 1) as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let t = (lo + h * i as f64).exp();
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        sum += w * t * (-t).exp() * laplace(t)?;
    }
    Ok(sum * h)
}
