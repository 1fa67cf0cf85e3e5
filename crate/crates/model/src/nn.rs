//! Parameter handles for the small layers shared by the tokenizer and the network.

use maskmotion_core::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use maskmotion_core::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Gaussian weights with std `gain / sqrt(fan_in)`, zero bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = if gain == 0.0 {
            store.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out), true)
        } else {
            store.add_normal(format!("{name}.w"), fan_in, fan_out, gain / (fan_in as f64).sqrt(), rng)
        };
        let b = store.add_zeros(format!("{name}.b"), 1, fan_out);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        tape.linear(x, vars[self.w.0], Some(vars[self.b.0]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add_filled(format!("{name}.g"), 1, width, T::one());
        let beta = store.add_zeros(format!("{name}.b"), 1, width);
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        tape.layer_norm(x, vars[self.gamma.0], vars[self.beta.0])
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        out_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, out_gain, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        let h = self.fc1.forward(tape, vars, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, vars, h)
    }
}
