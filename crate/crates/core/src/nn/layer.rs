use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

/// Affine map followed by an elementwise activation. Weights are stored
/// row-major as `out × in` in the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let weight = store.add(&format!("{name}.weight"), &[out_dim, in_dim], w, true);
        let bias = store.add(&format!("{name}.bias"), &[out_dim], vec![0.0; out_dim], true);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.weight);
        let b = store.value(self.bias);
        let mut out = b.to_vec();
        for (o, row) in out.iter_mut().zip(w.chunks_exact(self.in_dim)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        if self.activation == Activation::Relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }
}

/// Cached intermediates of one [`Mlp::forward`] call.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    weights: Vec<ParamId>,
    /// `activations[0]` is the input; `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape holds the input at least")
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Builds layers `dims[0] → dims[1] → …`; hidden layers use ReLU, the last
    /// layer uses `output_activation`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        output_activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    output_activation
                } else {
                    Activation::Relu
                };
                DenseLayer::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Output only, without recording a tape.
    pub fn infer(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.apply(store, &x);
        }
        Ok(x)
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let next = layer.apply(store, activations.last().unwrap());
            activations.push(next);
        }
        let tape = Tape {
            version: store.version(),
            weights: self.layers.iter().map(|l| l.weight).collect(),
            activations,
        };
        Ok((tape.output().to_vec(), tape))
    }

    /// Accumulates parameter gradients into `store` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, store: &mut ParamStore, tape: &Tape, output_grad: &[f64]) -> Result<Vec<f64>> {
        if tape.version != store.version() {
            return Err(Error::StaleTape(format!(
                "recorded at parameter version {}, store is at {}",
                tape.version,
                store.version()
            )));
        }
        if tape.weights.len() != self.layers.len()
            || tape.weights.iter().zip(&self.layers).any(|(w, l)| *w != l.weight)
        {
            return Err(Error::StaleTape("tape was recorded by a different network".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::dim("output gradient", self.output_dim(), output_grad.len()));
        }
        let mut delta = output_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.activations[i];
            let output = &tape.activations[i + 1];
            if layer.activation == Activation::Relu {
                for (d, &y) in delta.iter_mut().zip(output) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            {
                let gb = store.grad_mut(layer.bias);
                for (g, &d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            {
                let gw = store.grad_mut(layer.weight);
                for (row, &d) in gw.chunks_exact_mut(layer.in_dim).zip(&delta) {
                    if d != 0.0 {
                        for (g, &x) in row.iter_mut().zip(input) {
                            *g += d * x;
                        }
                    }
                }
            }
            let w = store.value(layer.weight);
            let mut prev = vec![0.0; layer.in_dim];
            for (row, &d) in w.chunks_exact(layer.in_dim).zip(&delta) {
                if d != 0.0 {
                    for (p, &wv) in prev.iter_mut().zip(row) {
                        *p += d * wv;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), input.len()));
        }
        Ok(())
    }
}
