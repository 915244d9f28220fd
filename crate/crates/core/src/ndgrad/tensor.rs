//! Dense row-major f64 tensors and named parameter collections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional double-precision array, row-major.
///
/// A scalar has an empty shape. Values are plain data; gradient tracking
/// happens on the [`Graph`](super::Graph) that records operations over
/// tensors, not on the tensor itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::invalid("tensor", "ragged rows".to_string()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Number of rows when viewed as 2-D (`[rows, cols]`).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as 2-D.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Uniform init on [-bound, bound].
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Xavier/Glorot uniform init for a 2-D weight `[fan_in, fan_out]`.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(&[fan_in, fan_out], bound, rng)
    }

    /// Normal(0, std) init, via Box-Muller so only `rand::Rng` is needed.
    pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(r * th.cos() * std);
            if data.len() < n {
                data.push(r * th.sin() * std);
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Named collection of trainable tensors with deterministic (lexicographic)
/// iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(
                "parameter_set",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Absorb all tensors of `other` under `prefix/`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParameterSet) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(format!("{prefix}/{name}"), t)?;
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter name, shapes matching the parameters.
pub type GradientMap = BTreeMap<String, Tensor>;

/// Sum `b` into `a` element-wise; missing entries are inserted.
pub fn accumulate_grads(a: &mut GradientMap, b: &GradientMap) {
    for (name, g) in b {
        match a.get_mut(name) {
            Some(acc) => {
                for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => {
                a.insert(name.clone(), g.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tensor_shape_product_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(4.0);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn parameter_set_orders_names_lexicographically() {
        let mut p = ParameterSet::new();
        p.insert("b/w", Tensor::scalar(1.0)).unwrap();
        p.insert("a/w", Tensor::scalar(2.0)).unwrap();
        p.insert("a/b", Tensor::scalar(3.0)).unwrap();
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, vec!["a/b", "a/w", "b/w"]);
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn normal_init_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::normal(&[3, 3], 0.02, &mut r1);
        let b = Tensor::normal(&[3, 3], 0.02, &mut r2);
        assert_eq!(a, b);
    }
}
