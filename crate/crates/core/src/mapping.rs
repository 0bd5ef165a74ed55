//! The mapping network `f: Z → W`, a stack of fully-connected layers with
//! leaky ReLU activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::latent::{LatentW, LatentZ};
use crate::nn::{join, leaky_relu, leaky_relu_grad, Dense, ParamRef, Parameters};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAPPING_LR_MUL: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetwork<T> {
    pub layers: Vec<Dense<T>>,
    pub final_activation: bool,
    pub z_dim: usize,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MappingTrace<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T: Real> MappingNetwork<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        depth: usize,
        z_dim: usize,
        w_dim: usize,
        lr_mul: f64,
        final_activation: bool,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let inputs = if i == 0 { z_dim } else { w_dim };
                let mut layer = Dense::init(inputs, w_dim, 2f64.sqrt(), rng);
                layer.lr_mul = lr_mul;
                layer
            })
            .collect();
        Self {
            layers,
            final_activation,
            z_dim,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn cast<U: Real>(&self) -> MappingNetwork<U> {
        MappingNetwork {
            layers: self.layers.iter().map(Dense::cast).collect(),
            final_activation: self.final_activation,
            z_dim: self.z_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            final_activation: self.final_activation,
            z_dim: self.z_dim,
        }
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_activation
    }

    pub fn forward(&self, z: &[T]) -> Result<MappingTrace<T>> {
        if z.len() != self.z_dim {
            return Err(Error::DimensionMismatch {
                expected: self.z_dim,
                actual: z.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = z.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(&x)?;
            let next = if self.activated(i) {
                a.iter().map(|&v| leaky_relu(v)).collect()
            } else {
                a.clone()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(a);
        }
        Ok(MappingTrace {
            inputs,
            pre,
            output: x,
        })
    }

    pub fn map(&self, z: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(z)?.output)
    }

    /// Accumulates parameter gradients and returns `∂loss/∂z`.
    pub fn backward(&self, trace: &MappingTrace<T>, gw: &[T], grads: &mut MappingNetwork<T>) -> Vec<T> {
        let mut g = gw.to_vec();
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                g = g
                    .iter()
                    .zip(&trace.pre[i])
                    .map(|(&gv, &a)| leaky_relu_grad(a, gv))
                    .collect();
            }
            g = self.layers[i].backward(&trace.inputs[i], &g, Some(&mut grads.layers[i]));
        }
        g
    }
}

impl<T: Real> Parameters<T> for MappingNetwork<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("dense{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        for layer in &mut self.layers {
            layer.visit_mut(out);
        }
    }
}

/// Fresh mapping parameters: weights `N(0, 1)`, biases zero.
pub fn init_mapper(seed: u64, depth: usize, width: usize) -> MappingNetwork<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MappingNetwork::init(&mut rng, depth, width, width, MAPPING_LR_MUL, true)
}

/// `f(z)` evaluated in `f64`.
pub fn map_latent<T: Real>(params: &MappingNetwork<T>, z: &LatentZ) -> Result<LatentW> {
    let zt: Vec<T> = z.0.iter().map(|&v| T::from_f64(v)).collect();
    Ok(LatentW(params.map(&zt)?.into_iter().map(Real::re).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_z;

    #[test]
    fn depth_zero_is_identity() {
        let m = init_mapper(1, 0, 6);
        let z = &sample_z(3, 1, 6)[0];
        assert_eq!(map_latent(&m, z).unwrap().0, z.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = init_mapper(1, 3, 6);
        for t in m.param_tensors_mut() {
            t.fill(0.0);
        }
        let z = &sample_z(3, 1, 6)[0];
        assert!(map_latent(&m, z).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_positive_input() {
        let mut m = init_mapper(1, 1, 3);
        let inv = 1.0 / m.layers[0].scale;
        m.layers[0].weight = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { inv } else { 0.0 });
        let z = LatentZ(vec![0.2, 0.5, 0.7]);
        let w = map_latent(&m, &z).unwrap();
        for (a, b) in w.0.iter().zip(&z.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_unit_weights() {
        let a = init_mapper(5, 8, 64);
        assert_eq!(a, init_mapper(5, 8, 64));
        let mut weights = Vec::new();
        for layer in &a.layers {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
            assert_eq!(layer.lr_mul, MAPPING_LR_MUL);
            assert!((layer.scale - (2.0 / 64.0f64).sqrt()).abs() < 1e-15);
            weights.extend_from_slice(layer.weight.data());
        }
        assert!(weights.len() >= 4096);
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let std = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0).abs() < 0.1, "std {std}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = init_mapper(1, 2, 4);
        assert!(map_latent(&m, &LatentZ(vec![1.0; 3])).is_err());
    }
}
