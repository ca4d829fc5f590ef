use crate::error::{Error, Result};

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every coordinate.
pub fn central_differences<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = finite(f(&theta)?, i)?;
        theta[i] = orig - h;
        let fm = finite(f(&theta)?, i)?;
        theta[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

fn finite(v: f64, coord: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "objective returned {v} while perturbing coordinate {coord}"
        )))
    }
}

/// `|a − g| / max(|a|, |g|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of `f`.
pub fn finite_difference_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "finite_difference_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let numeric = central_differences(f, params, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one() {
        let err = finite_difference_check(|p| Ok(p[0] * p[0]), &[1.0], &[2.0], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(|_| Ok(3.0), &[0.5, -1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_propagates() {
        let r = central_differences(|p| Ok(if p[0] > 1.0 { f64::NAN } else { 0.0 }), &[1.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
