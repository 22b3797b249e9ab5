//! Neural building blocks shared by the physical-layer and semantic
//! networks: linear layers, a pre-norm Transformer encoder stack, sinusoidal
//! position embedding, a straight-through binary quantizer, and a small
//! strided-conv encoder / nearest-neighbor-upsampling decoder pair.
//!
//! Blocks are stateless descriptions: parameters live in a [`ParamStore`]
//! under the block's name prefix and are looked up through a [`Binding`]
//! at forward time.

mod conv;
mod transformer;

pub use conv::{ConvDecoder, ConvEncoder};
pub use transformer::{position_embed, TransformerStack};

use crate::error::Result;
use crate::numcore::{Binding, Graph, ParamStore, Tensor, Var};
use crate::rng::RngStream;

/// Fan-in-scaled uniform weight init, biases zero.
pub fn init_linear_weight(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.range(-bound, bound)).collect();
    Tensor::from_real(&[rows, cols], data)
}

/// Phases initialized uniform over (-pi, pi).
pub fn init_phases(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.range(-std::f64::consts::PI, std::f64::consts::PI))
        .collect();
    Tensor::from_real(shape, data)
}

/// Fully connected layer `x W + b` acting on [rows × in_dim] sequences.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        store.insert(
            format!("{}.w", self.name),
            init_linear_weight(self.in_dim, self.out_dim, rng),
        );
        store.insert(
            format!("{}.b", self.name),
            Tensor::zeros(&[self.out_dim], crate::numcore::Dtype::Real),
        );
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
        let w = bind.var(&format!("{}.w", self.name));
        let b = bind.var(&format!("{}.b", self.name));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Forward a flat vector [in_dim] as a single-row sequence, returning
    /// a flat [out_dim] vector.
    pub fn forward_vec(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
        let row = g.reshape(x, &[1, self.in_dim])?;
        let y = self.forward(g, bind, row)?;
        g.reshape(y, &[self.out_dim])
    }
}

/// Hard binary quantizer producing exactly {0,1}, with straight-through
/// gradients; dequantization maps {0,1} to {-1,+1}.
#[derive(Debug, Clone, Copy)]
pub struct BinaryQuantizer {
    pub bits: usize,
}

impl BinaryQuantizer {
    pub fn new(bits: usize) -> Self {
        BinaryQuantizer { bits }
    }

    /// c in (0,1)^B -> bits in {0,1}^B.
    pub fn quantize(&self, g: &mut Graph, c: Var) -> Result<Var> {
        g.quantize_ste(c)
    }

    /// bits {0,1} -> {-1,+1}.
    pub fn dequantize(&self, g: &mut Graph, bits: Var) -> Result<Var> {
        g.affine(bits, 2.0, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Dtype;

    #[test]
    fn quantizer_thresholds_at_half() {
        let mut g = Graph::new();
        let q = BinaryQuantizer::new(4);
        let c = g.constant(Tensor::from_real(&[4], vec![0.7, 0.3, 0.5, 0.499]));
        let bits = q.quantize(&mut g, c).unwrap();
        assert_eq!(g.value(bits).data, vec![1.0, 0.0, 1.0, 0.0]);
        let d = q.dequantize(&mut g, bits).unwrap();
        assert_eq!(g.value(d).data, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn ste_gradient_equals_affine_replacement() {
        // Same weighted loss through (quantize -> dequantize) and through the
        // smooth surrogate 2c-1: backward gradients must be identical.
        let mut rng = RngStream::derive(5, "ste");
        let c0: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let q = BinaryQuantizer::new(8);

        let mut g1 = Graph::new();
        let c1 = g1.leaf(Tensor::from_real(&[8], c0.clone()));
        let wv1 = g1.constant(Tensor::from_real(&[8], w.clone()));
        let bits = q.quantize(&mut g1, c1).unwrap();
        let deq = q.dequantize(&mut g1, bits).unwrap();
        let m1 = g1.mul(deq, wv1).unwrap();
        let l1 = g1.sum_all(m1).unwrap();
        let grads1 = g1.backward(l1).unwrap();

        let mut g2 = Graph::new();
        let c2 = g2.leaf(Tensor::from_real(&[8], c0.clone()));
        let wv2 = g2.constant(Tensor::from_real(&[8], w.clone()));
        let sur = g2.affine(c2, 2.0, -1.0).unwrap();
        let m2 = g2.mul(sur, wv2).unwrap();
        let l2 = g2.sum_all(m2).unwrap();
        let grads2 = g2.backward(l2).unwrap();

        assert_eq!(grads1.get(c1).unwrap(), grads2.get(c2).unwrap());

        // Forward outputs differ from the surrogate by at most 1 per entry.
        let mut g3 = Graph::new();
        let c3 = g3.constant(Tensor::from_real(&[8], c0.clone()));
        let bits = q.quantize(&mut g3, c3).unwrap();
        let deq = q.dequantize(&mut g3, bits).unwrap();
        for (b, c) in g3.value(deq).data.iter().zip(&c0) {
            assert!((b - (2.0 * c - 1.0)).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn linear_shapes_and_zero_bias() {
        let mut rng = RngStream::derive(1, "lin");
        let mut store = ParamStore::new();
        let lin = Linear::new("t", 3, 5);
        lin.register(&mut store, &mut rng);
        assert_eq!(store.get("t.w").unwrap().shape, vec![3, 5]);
        assert!(store.get("t.b").unwrap().data.iter().all(|&x| x == 0.0));

        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| true);
        let x = g.constant(Tensor::zeros(&[4, 3], Dtype::Real));
        let y = lin.forward(&mut g, &bind, x).unwrap();
        assert_eq!(g.value(y).shape, vec![4, 5]);
    }
}
