use super::{AutodiffError, Graph, Tensor, Var};

/// Central-difference check of a scalar function of one tensor.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`. The
/// function is rebuilt on a fresh graph for every evaluation, with the input
/// as a trainable leaf for the analytic pass and as a constant otherwise.
pub fn grad_check<F, E>(f: F, point: &Tensor, h: f64) -> Result<f64, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F, E>(f: F, points: &[Tensor], h: f64) -> Result<f64, E>
where
    F: Fn(&Graph, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..points[t].len() {
            let orig = points[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
