use rand::Rng as _;

use super::array::Array;
use super::ops::{activate, affine_batch, Activation};
use super::params::ParamStore;
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: String,
    pub b: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fully connected network: affine layers with `hidden_act` between them and
/// a linear output layer. Parameters live in an external [`ParamStore`]
/// under `<prefix>/<tag><index>/{w,b}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden_act: Activation,
}

impl Mlp {
    /// Registers parameters for `sizes = [in, h1, .., out]`, initialized
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        tag: &str,
        sizes: &[usize],
        hidden_act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("{prefix}/{tag}: bad layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-a..a)).collect();
            let layer = Layer { w: format!("{prefix}/{tag}{i}/w"), b: format!("{prefix}/{tag}{i}/b"), fan_in, fan_out };
            store.insert(&layer.w, Array::matrix(fan_out, fan_in, w))?;
            store.insert(&layer.b, Array::vector(b))?;
            layers.push(layer);
        }
        Ok(Self { layers, hidden_act })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    /// Sets the output layer's weights and bias to zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) -> Result<()> {
        let last = self.layers.last().unwrap();
        store.get_mut(&last.w)?.value.data_mut().fill(0.0);
        store.get_mut(&last.b)?.value.data_mut().fill(0.0);
        Ok(())
    }

    /// Tape-free forward pass over a batch `x: B x in`.
    pub fn forward(&self, store: &ParamStore, x: &Array) -> Result<Array> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = affine_batch(&h, store.value(&l.w)?, store.value(&l.b)?)?;
            if i + 1 < self.layers.len() {
                h = activate(&h, self.hidden_act);
            }
        }
        Ok(h)
    }

    /// Recorded forward pass. With `frozen` the weights enter the tape as
    /// constants, so no gradient reaches `store`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = if frozen {
                (tape.constant(store.value(&l.w)?.clone()), tape.constant(store.value(&l.b)?.clone()))
            } else {
                (tape.param(store, &l.w)?, tape.param(store, &l.b)?)
            };
            h = tape.affine(h, w, Some(b))?;
            if i + 1 < self.layers.len() {
                h = match self.hidden_act {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                    Activation::Sigmoid => tape.sigmoid(h),
                    Activation::Softmax => tape.softmax(h)?,
                };
            }
        }
        Ok(h)
    }
}
