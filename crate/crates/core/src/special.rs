//! Special functions and small statistical helpers.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma as statrs_ln_gamma;

use crate::error::{Error, Result};

pub fn ln_gamma(x: f64) -> f64 {
    statrs_ln_gamma(x)
}

pub fn gamma(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

/// Log density of the standard Student-t distribution with `dof` degrees of freedom.
pub fn student_t_logpdf(t: f64, dof: f64) -> f64 {
    let half = 0.5 * (dof + 1.0);
    ln_gamma(half) - ln_gamma(0.5 * dof) - 0.5 * (dof * std::f64::consts::PI).ln()
        - half * (t * t / dof).ln_1p()
}

pub fn student_t_pdf(t: f64, dof: f64) -> f64 {
    student_t_logpdf(t, dof).exp()
}

/// Two-sided 95% Student-t critical value with `dof` degrees of freedom.
pub fn t_critical_975(dof: f64) -> Result<f64> {
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    Ok(t.inverse_cdf(0.975))
}

pub fn chi_square_cdf(x: f64, dof: f64) -> Result<f64> {
    let d = ChiSquared::new(dof).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    Ok(d.cdf(x))
}

/// Asymptotic Kolmogorov survival function `P(K > λ)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    // The alternating series converges slowly near 0 where the answer is ~1.
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    // Stephens' small-sample correction of the asymptotic distribution.
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
    }
}

/// Ordinary least squares fit `y = a + b x` with a 95% half-width on `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_halfwidth: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::InvalidSpec(format!(
            "line fit needs >= 3 paired points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidSpec("line fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    Ok(LineFit {
        slope,
        intercept,
        slope_halfwidth: t_critical_975(nf - 2.0)? * se,
    })
}

/// Trapezoid rule on a uniform grid over `[lo, hi]` with `n` points.
pub fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for i in 1..n - 1 {
        s += f(lo + h * i as f64);
    }
    s * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_density_at_zero() {
        // t_2(0) = 1 / (2 sqrt 2)
        assert!((student_t_pdf(0.0, 2.0) - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-14);
        // integrates to one
        let s = trapezoid(-2000.0, 2000.0, 400_001, |t| student_t_pdf(t, 3.0));
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gamma_half() {
        assert!((gamma(0.5) - std::f64::consts::PI.sqrt()).abs() < 1e-13);
        assert!((ln_gamma(32.0) - (1..32).map(|k| (k as f64).ln()).sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn kolmogorov_reference_points() {
        // Standard table values of the Kolmogorov distribution.
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn line_fit_exact() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14);
        assert!((f.intercept - 1.0).abs() < 1e-14);
        assert!(f.slope_halfwidth < 1e-12);
    }
}
