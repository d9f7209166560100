use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error
/// `|analytic - fd| / max(1, |analytic|)` over every parameter entry.
///
/// `f` builds the scalar from the given parameter handles on the tape it is
/// handed; it is evaluated once with gradients and twice per entry without.
pub fn grad_check<F>(params: &[Tensor], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::Contract("parameters must be finite".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.value(out).data()[0];
        if v.is_nan() {
            return Err(Error::Numeric("function returned NaN during grad check".into()));
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
