use crate::error::{shape_err, Error, Result};

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, element by element.
///
/// Returns `max |a − n| / max(1, |a|, |n|)` over every input element, with
/// the comparison carried out in `f64`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], epsilon: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("grad_check epsilon {epsilon} outside [1e-5, 1e-2]")));
    }
    let eval = |xs: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(shape_err!("grad_check needs a scalar function, got shape {:?}", g.shape(out)));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = T::from_f64(orig.as_f64() + epsilon);
            let (gp, _, op) = eval(&probe)?;
            let fp = gp.value(op).data()[0].as_f64();
            probe[i].data_mut()[j] = T::from_f64(orig.as_f64() - epsilon);
            let (gm, _, om) = eval(&probe)?;
            let fm = gm.value(om).data()[0].as_f64();
            probe[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
