use crate::error::{Error, Result};

use super::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn scalar_of(t: Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got output shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks every component of the analytic gradient of `f` at `x`.
///
/// `f` returns `(value, gradient)`; `value` must hold exactly one element.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(Tensor, Tensor)>,
{
    let report = grad_check_report(
        |x| f(x).map(|(v, _)| v),
        |x| f(x).map(|(_, g)| g),
        x,
        h,
        None,
    )?;
    Ok(report.max_rel_error)
}

/// Central-difference check of `gradient` against `value`, optionally on a
/// subset of flat coordinates.
pub fn grad_check_report<V, G>(
    value: V,
    gradient: G,
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    V: Fn(&Tensor) -> Result<Tensor>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("step {h} outside [1e-7, 1e-3]")));
    }
    // Validates scalar output before doing any work.
    scalar_of(value(x)?)?;
    let analytic = gradient(x)?;
    if analytic.numel() != x.numel() {
        return Err(Error::shape(format!(
            "gradient has {} components for input of {}",
            analytic.numel(),
            x.numel()
        )));
    }

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = scalar_of(value(&probe)?)?;
        probe.data_mut()[i] = orig - h;
        let minus = scalar_of(value(&probe)?)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let c = Tensor::from_vec(vec![0.5, -2.0, 3.25, 1.0]);
        let f = |x: &Tensor| Ok((Tensor::scalar(c.dot(x)), c.clone()));
        let x = Tensor::from_vec(vec![1.0, 2.0, -3.0, 0.1]);
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-10);
    }

    #[test]
    fn sum_of_squares() {
        let f = |x: &Tensor| Ok((Tensor::scalar(x.dot(x)), x.scale(2.0)));
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-8);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let f = |x: &Tensor| Ok((x.clone(), x.clone()));
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(grad_check(f, &x, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let f = |x: &Tensor| Ok((Tensor::scalar(x.sum()), Tensor::ones(x.shape())));
        let x = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(f, &x, 1e-2).is_err());
        assert!(grad_check(f, &x, 1e-9).is_err());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &Tensor| Ok((Tensor::scalar(x.dot(x)), x.scale(3.0)));
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() > 0.1);
    }
}
