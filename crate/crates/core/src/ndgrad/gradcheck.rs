//! Central-difference verification of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::graph::{Graph, NodeId};
use crate::ndgrad::tensor::ParameterSet;

/// A deterministic scalar computation over a parameter set. The closure
/// must build the loss on the supplied graph; dropout must be disabled
/// (the graph is always in eval mode here).
pub type LossFn<'a> = dyn Fn(&mut Graph, &ParameterSet) -> Result<NodeId> + 'a;

/// Options for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// At most this many coordinates are probed per tensor, randomly
    /// subsampled when a tensor is larger.
    pub max_coords_per_tensor: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-6,
            max_coords_per_tensor: 200,
            seed: 0,
        }
    }
}

/// Compare analytic gradients against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` and return the maximum relative error
/// `|a - n| / max(1, |a|, |n|)` over all probed coordinates.
pub fn grad_check(f: &LossFn, params: &ParameterSet, cfg: GradCheckConfig) -> Result<f64> {
    let mut g = Graph::eval();
    g.insert_params(params);
    let loss = f(&mut g, params)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("grad_check loss".to_string()));
    }
    g.backward(loss)?;
    let analytic = g.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_err: f64 = 0.0;

    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_tensor {
            (0..n).collect()
        } else {
            // Sample without replacement via a partial shuffle.
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..cfg.max_coords_per_tensor {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            idx.truncate(cfg.max_coords_per_tensor);
            idx
        };

        let ag = &analytic[name];
        for &c in &coords {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut p2 = params.clone();
                p2.get_mut(name).unwrap().data_mut()[c] += delta;
                let mut g2 = Graph::eval();
                g2.insert_params(&p2);
                let l = f(&mut g2, &p2)?;
                Ok(g2.value(l).item())
            };
            let fp = eval_at(cfg.h)?;
            let fm = eval_at(-cfg.h)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("grad_check at {name}[{c}]")));
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = ag.data()[c];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::tensor::Tensor;

    #[test]
    fn constant_function_has_zero_gradients_both_ways() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::vector(&[1.0, 2.0])).unwrap();
        let f = |g: &mut Graph, _p: &ParameterSet| -> Result<NodeId> {
            Ok(g.leaf(Tensor::scalar(3.5)))
        };
        let err = grad_check(&f, &params, GradCheckConfig::default()).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_layer_plus_bce_passes() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::xavier(4, 3, &mut rng)).unwrap();
        params
            .insert("b", Tensor::uniform(&[3], 0.1, &mut rng))
            .unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = [1.0, 0.0, 1.0];
        let f = move |g: &mut Graph, _p: &ParameterSet| -> Result<NodeId> {
            let xv = g.leaf(Tensor::vector(&x));
            let w = g.param("w")?;
            let b = g.param("b")?;
            let z0 = g.vecmat(xv, w)?;
            let z = g.add(z0, b)?;
            let p = g.sigmoid(z)?;
            g.bce_loss(p, &y)
        };
        let err = grad_check(&f, &params, GradCheckConfig::default()).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
