use std::collections::BTreeMap;

use crate::tensor::{Array, Graph, TensorError, Var};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative errors below this magnitude of gradient are measured against the floor.
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub param: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares the autodiff gradient of `params[name]` with central finite
/// differences of step `step`.
///
/// `loss` rebuilds the scalar loss on a fresh graph from the given parameter
/// values; it must register parameters through [`Graph::param`].
pub fn grad_check<E, F>(
    params: &BTreeMap<String, Array>,
    name: &str,
    step: f64,
    loss: F,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, &BTreeMap<String, Array>) -> Result<Var, E>,
{
    let base = params
        .get(name)
        .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
    if !(step > 0.0) {
        return Err(TensorError::StepUnderflow { step, value: 0.0 }.into());
    }

    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .param(name)
        .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
        .clone();

    let eval = |values: &BTreeMap<String, Array>| -> Result<f64, E> {
        let mut g = Graph::new();
        let out = loss(&mut g, values)?;
        Ok(g.value(out).item()?)
    };

    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for i in 0..base.len() {
        let x = base.data()[i];
        if x + step == x || x - step == x {
            return Err(TensorError::StepUnderflow { step, value: x }.into());
        }
        probe.get_mut(name).unwrap().data_mut()[i] = x + step;
        let up = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = x - step;
        let down = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = x;

        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        param: name.to_string(),
        entries: base.len(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(g: &mut Graph, p: &BTreeMap<String, Array>) -> Result<Var, TensorError> {
        let w = g.param("w", &p["w"]);
        let c = g.constant(Array::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let d = g.sub(w, c)?;
        let sq = g.mul(d, d)?;
        g.sum(sq)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Array::from_vec(&[3], vec![1.0, 2.0, -3.0]).unwrap());
        let r = grad_check(&p, "w", DEFAULT_FD_STEP, quadratic).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Array::zeros(&[3]));
        let err = grad_check(&p, "w", 0.0, quadratic).unwrap_err();
        assert!(matches!(err, TensorError::StepUnderflow { .. }));
        p.insert("w".to_string(), Array::full(&[3], 1e12));
        let err = grad_check(&p, "w", 1e-5, quadratic).unwrap_err();
        assert!(matches!(err, TensorError::StepUnderflow { .. }));
    }
}
