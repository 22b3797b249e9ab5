//! Pre-norm Transformer encoder stack with sinusoidal position embedding.

use super::init_linear_weight;
use crate::error::Result;
use crate::numcore::{Binding, Dtype, Graph, ParamStore, Tensor, Var};
use crate::rng::RngStream;

/// Standard sinusoidal position table: PE(pos, 2i) = sin(pos/10000^{2i/d}),
/// PE(pos, 2i+1) = cos of the same argument. Deterministic in (len, d_model).
pub fn position_embed(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model {
            let exponent = 2.0 * ((i / 2) as f64) / d_model as f64;
            let arg = pos as f64 / 10000f64.powf(exponent);
            data[pos * d_model + i] = if i % 2 == 0 { arg.sin() } else { arg.cos() };
        }
    }
    Tensor::from_real(&[len, d_model], data)
}

/// Stack of identical pre-norm encoder layers:
/// x <- x + MHSA(LN(x)); x <- x + MLP(LN(x)).
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub prefix: String,
    pub d_model: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl TransformerStack {
    pub fn new(
        prefix: impl Into<String>,
        d_model: usize,
        layers: usize,
        n_heads: usize,
        d_ff: usize,
    ) -> Self {
        assert!(
            d_model % n_heads == 0,
            "d_model {d_model} must be divisible by n_heads {n_heads}"
        );
        TransformerStack {
            prefix: prefix.into(),
            d_model,
            layers,
            n_heads,
            d_ff,
        }
    }

    fn pname(&self, layer: usize, part: &str) -> String {
        format!("{}.l{layer}.{part}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        let d = self.d_model;
        for l in 0..self.layers {
            for gate in ["ln1", "ln2"] {
                store.insert(
                    self.pname(l, &format!("{gate}.g")),
                    Tensor::from_real(&[d], vec![1.0; d]),
                );
                store.insert(
                    self.pname(l, &format!("{gate}.b")),
                    Tensor::zeros(&[d], Dtype::Real),
                );
            }
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(self.pname(l, w), init_linear_weight(d, d, rng));
                store.insert(
                    self.pname(l, &format!("b{}", &w[1..])),
                    Tensor::zeros(&[d], Dtype::Real),
                );
            }
            store.insert(self.pname(l, "w1"), init_linear_weight(d, self.d_ff, rng));
            store.insert(self.pname(l, "b1"), Tensor::zeros(&[self.d_ff], Dtype::Real));
            store.insert(self.pname(l, "w2"), init_linear_weight(self.d_ff, d, rng));
            store.insert(self.pname(l, "b2"), Tensor::zeros(&[d], Dtype::Real));
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
        self.forward_inner(g, bind, x, &mut None)
    }

    /// Forward pass that also returns the per-layer, per-head attention
    /// matrices (detached), in layer-major order.
    pub fn forward_attn(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: Var,
    ) -> Result<(Var, Vec<Tensor>)> {
        let mut attn = Some(Vec::new());
        let out = self.forward_inner(g, bind, x, &mut attn)?;
        Ok((out, attn.unwrap()))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        bind: &Binding,
        mut x: Var,
        attn_out: &mut Option<Vec<Tensor>>,
    ) -> Result<Var> {
        let d = self.d_model;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.layers {
            let p = |part: &str| bind.var(&self.pname(l, part));
            // Attention sublayer.
            let h = g.layer_norm(x, p("ln1.g"), p("ln1.b"), 1e-5)?;
            let q = g.matmul(h, p("wq"))?;
            let q = g.add_bias(q, p("bq"))?;
            let k = g.matmul(h, p("wk"))?;
            let k = g.add_bias(k, p("bk"))?;
            let v = g.matmul(h, p("wv"))?;
            let v = g.add_bias(v, p("bv"))?;
            let mut heads = Vec::with_capacity(self.n_heads);
            for i in 0..self.n_heads {
                let qi = g.slice_cols(q, i * dh, dh)?;
                let ki = g.slice_cols(k, i * dh, dh)?;
                let vi = g.slice_cols(v, i * dh, dh)?;
                let kt = g.transpose(ki)?;
                let scores = g.matmul(qi, kt)?;
                let scores = g.scale(scores, scale)?;
                let a = g.softmax(scores, 1)?;
                if let Some(list) = attn_out.as_mut() {
                    list.push(g.detach(a));
                }
                heads.push(g.matmul(a, vi)?);
            }
            let cat = g.concat(&heads, 1)?;
            let o = g.matmul(cat, p("wo"))?;
            let o = g.add_bias(o, p("bo"))?;
            x = g.add(x, o)?;
            // MLP sublayer.
            let h2 = g.layer_norm(x, p("ln2.g"), p("ln2.b"), 1e-5)?;
            let m = g.matmul(h2, p("w1"))?;
            let m = g.add_bias(m, p("b1"))?;
            let m = g.relu(m)?;
            let m = g.matmul(m, p("w2"))?;
            let m = g.add_bias(m, p("b2"))?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed_stack(store: &mut ParamStore, stack: &TransformerStack) {
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            if n.starts_with(&stack.prefix) && !n.contains("ln") {
                let t = store.get_mut(&n).unwrap();
                t.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    #[test]
    fn position_embed_row_zero_alternates() {
        let pe = position_embed(5, 8);
        // sin 0 = 0, cos 0 = 1 along the whole first row.
        for i in 0..8 {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.data[i], want);
        }
        // Determinism: same shape gives the identical table.
        assert_eq!(position_embed(5, 8).data, pe.data);
    }

    #[test]
    fn zeroed_sublayers_are_identity() {
        let mut rng = RngStream::derive(3, "tf");
        let stack = TransformerStack::new("t", 16, 2, 4, 32);
        let mut store = ParamStore::new();
        stack.register(&mut store, &mut rng);
        zeroed_stack(&mut store, &stack);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let xdata: Vec<f64> = (0..5 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(Tensor::from_real(&[5, 16], xdata.clone()));
        let y = stack.forward(&mut g, &bind, x).unwrap();
        for (a, b) in g.value(y).data.iter().zip(&xdata) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = RngStream::derive(4, "tf2");
        let stack = TransformerStack::new("t", 16, 2, 4, 32);
        let mut store = ParamStore::new();
        stack.register(&mut store, &mut rng);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let xdata: Vec<f64> = (0..6 * 16).map(|_| rng.normal()).collect();
        let x = g.constant(Tensor::from_real(&[6, 16], xdata));
        let (_, attn) = stack.forward_attn(&mut g, &bind, x).unwrap();
        assert_eq!(attn.len(), 2 * 4);
        for a in &attn {
            assert_eq!(a.shape, vec![6, 6]);
            for i in 0..6 {
                let row: f64 = a.data[i * 6..(i + 1) * 6].iter().sum();
                assert!((row - 1.0).abs() < 1e-9, "row sum {row}");
            }
        }
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        // Without position embedding the encoder is equivariant: permuting
        // input rows permutes output rows identically.
        let mut rng = RngStream::derive(5, "tf3");
        let stack = TransformerStack::new("t", 16, 2, 4, 32);
        let mut store = ParamStore::new();
        stack.register(&mut store, &mut rng);

        let rows = 6;
        let xdata: Vec<f64> = (0..rows * 16).map(|_| rng.normal()).collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pdata = vec![0.0; rows * 16];
        for (dst, &src) in perm.iter().enumerate() {
            pdata[dst * 16..(dst + 1) * 16].copy_from_slice(&xdata[src * 16..(src + 1) * 16]);
        }

        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, &|_| false);
            let x = g.constant(Tensor::from_real(&[rows, 16], data));
            let y = stack.forward(&mut g, &bind, x).unwrap();
            g.value(y).data.clone()
        };
        let base = run(xdata);
        let permuted = run(pdata);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..16 {
                assert!(
                    (permuted[dst * 16 + j] - base[src * 16 + j]).abs() < 1e-10,
                    "row {dst} col {j}"
                );
            }
        }
    }

    #[test]
    fn stack_passes_gradient_check() {
        let mut rng = RngStream::derive(6, "tf4");
        let stack = TransformerStack::new("t", 8, 1, 2, 16);
        let mut store = ParamStore::new();
        stack.register(&mut store, &mut rng);
        // Perturb biases so nothing is at the ReLU kink.
        let names: Vec<String> = store.names().cloned().collect();
        for n in &names {
            let t = store.get_mut(n).unwrap();
            for x in t.data.iter_mut() {
                *x += 0.01 * rng.normal();
            }
        }
        let xdata: Vec<f64> = (0..4 * 8).map(|_| rng.normal()).collect();
        let x0 = Tensor::from_real(&[4, 8], xdata);
        crate::numcore::gradcheck::assert_grads_match(
            &|g, v| {
                let bind = store.bind(g, &|_| false);
                let y = stack.forward(g, &bind, v[0])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            &[x0],
            1e-4,
            Some(16),
            6,
        );
    }
}
