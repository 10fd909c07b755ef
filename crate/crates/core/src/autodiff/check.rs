use super::{AutogradError, Graph, Tensor, Var};

/// Compares backward gradients with central differences on every entry of `x`.
///
/// Returns the largest relative error, using `max(|analytic|, |numeric|, 1e-8)`
/// as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, AutogradError>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var, AutogradError>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// [`grad_check`] restricted to the given flat indices of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<f64, AutogradError>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var, AutogradError>,
{
    let analytic = {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let loss = f(&mut g, xv)?;
        g.backward(loss)?;
        g.grad(xv).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |t: Tensor<f64>| -> Result<f64, AutogradError> {
        let mut g = Graph::new();
        let xv = g.variable(t);
        let out = f(&mut g, xv)?;
        if g.value(out).len() != 1 {
            return Err(AutogradError::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok(g.value(out)[0])
    };
    let mut worst: f64 = 0.0;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
