//! Instance feature extraction: one 3×3 convolution from video object
//! features `V^R` to instance-mask features `F_ins`.

use crate::detector::{apply_conv, Level};
use crate::error::{shape_err, Result};
use crate::numerics::{Bound, Graph, Parameters, Scalar, Tensor, Var};

pub fn init_params<T: Scalar>(p: &mut Parameters<T>, c: usize, c_prime: usize) -> Result<()> {
    p.dirac("ifem.w", c_prime, c, 3)?;
    p.zeros("ifem.b", &[c_prime])
}

pub fn is_ifem_param(name: &str) -> bool {
    name.starts_with("ifem.")
}

/// `v_r: [C,H,W]` or `[N,C,H,W]`.
pub fn extract_var<T: Scalar>(g: &mut Graph<T>, b: &Bound, v_r: Var) -> Result<Var> {
    apply_conv(g, b, "ifem", v_r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatureMap {
    pub tensor: Tensor,
    pub source_level: Level,
}

pub fn extract(v_r: &Tensor, params: &Parameters, level: Level) -> Result<InstanceFeatureMap> {
    let w = params.get("ifem.w")?;
    if v_r.rank() != 3 || v_r.shape()[0] != w.shape()[1] {
        return Err(shape_err!("IFEM expects [{}, H, W], got {:?}", w.shape()[1], v_r.shape()));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let x = g.constant(v_r.clone());
    let y = extract_var(&mut g, &b, x)?;
    Ok(InstanceFeatureMap { tensor: g.value(y).clone(), source_level: level })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_and_identity_kernels() {
        let mut p = Parameters::new(0);
        p.zeros("ifem.w", &[4, 4, 3, 3]).unwrap();
        p.zeros("ifem.b", &[4]).unwrap();
        let x = rand_t(&[4, 5, 6], 1);
        let y = extract(&x, &p, Level::P5).unwrap();
        assert!(y.tensor.data().iter().all(|&v| v == 0.0));
        let w = p.get_mut("ifem.w").unwrap();
        for c in 0..4 {
            w.data_mut()[((c * 4 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        assert_eq!(extract(&x, &p, Level::P5).unwrap().tensor, x);
        assert!(extract(&rand_t(&[3, 5, 6], 1), &p, Level::P5).is_err());
    }

    #[test]
    fn linear_at_zero_bias_and_shape_preserving() {
        let mut p = Parameters::new(3);
        init_params(&mut p, 4, 6).unwrap();
        let x = rand_t(&[4, 3, 7], 2);
        let a = extract(&x.map(|v| 2.5 * v), &p, Level::P3).unwrap().tensor;
        let b = extract(&x, &p, Level::P3).unwrap().tensor.map(|v| 2.5 * v);
        assert_eq!(a.shape(), &[6, 3, 7]);
        assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn gradients() {
        for seed in 0..5 {
            let mut p = Parameters::<f64>::new(seed);
            init_params(&mut p, 2, 3).unwrap();
            let inputs = vec![rand_t(&[2, 4, 4], seed).cast(), p.get("ifem.w").unwrap().clone(), rand_t(&[3], seed + 9).cast()];
            let err = grad_check(
                |g, v| {
                    let b = Bound::from_vars([("ifem.w", v[1]), ("ifem.b", v[2])]);
                    let y = extract_var(g, &b, v[0])?;
                    let y2 = g.mul(y, y)?;
                    g.sum(y2)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
