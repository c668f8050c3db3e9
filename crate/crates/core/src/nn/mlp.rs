//! Plain multi-layer perceptrons (the M_1..M_4 heads).

use rand::Rng;

use super::{kaiming_uniform, zeros, BoundParams, ParameterStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

/// Layer widths (input first, output last) plus activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    /// ReLU hidden layers, linear output.
    pub fn new(widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "MLP needs at least input and output widths");
        MlpSpec {
            widths,
            hidden: Activation::Relu,
            output: Activation::None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(name: impl Into<String>, spec: MlpSpec) -> Self {
        Mlp {
            name: name.into(),
            spec,
        }
    }

    fn layer_names(&self, i: usize) -> (String, String) {
        (
            format!("{}.{}.w", self.name, i),
            format!("{}.{}.b", self.name, i),
        )
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) {
        for i in 0..self.spec.widths.len() - 1 {
            let (w, b) = self.layer_names(i);
            let (fan_in, fan_out) = (self.spec.widths[i], self.spec.widths[i + 1]);
            store.insert(w, kaiming_uniform(rng, fan_in, &[fan_in, fan_out]));
            store.insert(b, zeros(&[fan_out]));
        }
    }

    /// x: [N, input_dim] -> [N, output_dim].
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &BoundParams, x: Var) -> Var {
        assert_eq!(
            tape.shape(x)[1],
            self.spec.input_dim(),
            "mlp {}: input width mismatch",
            self.name
        );
        let layers = self.spec.widths.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let (w, b) = self.layer_names(i);
            h = tape.linear(h, bound.get(&w), bound.get(&b));
            let act = if i + 1 == layers {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.apply(tape, h);
        }
        h
    }
}
