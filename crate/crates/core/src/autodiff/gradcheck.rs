use super::{Tape, Tensor, TensorError, Var};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between tape gradients and central differences
/// over every coordinate of every parameter.
///
/// `f` records a scalar on the given tape from leaves holding `params`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    finite_diff_check_at(f, params, step, &coords)
}

/// As [`finite_diff_check`], restricted to `(parameter, element)` pairs.
pub fn finite_diff_check_at<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let analytic = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let grads = loss.backward()?;
        leaves
            .iter()
            .zip(params)
            .map(|(v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect::<Vec<_>>()
    };
    let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&tape, &leaves)?;
        loss.value().item().ok_or(TensorError::NonScalarLoss { shape: loss.shape() })
    };
    let mut worst: f64 = 0.0;
    for &(p, i) in coords {
        let x0 = params[p].data()[i];
        let mut probe = params.to_vec();
        probe[p] = params[p].with_element(i, x0 + step);
        let up = eval(&probe)?;
        probe[p] = params[p].with_element(i, x0 - step);
        let down = eval(&probe)?;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[p].data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = finite_diff_check(|_, v| Ok(v[0].scale(2.5).sum()), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic_function() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = finite_diff_check(|_, v| Ok(v[0].square().sum()), &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
