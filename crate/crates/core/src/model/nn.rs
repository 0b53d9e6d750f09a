//! Linear layers and SiLU MLPs on top of the tape.

use rand::Rng;

use crate::autodiff::{Binder, ParameterStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    /// `[in, hidden.., out]`
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            prefix: prefix.into(),
            dims,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.prefix)
    }

    pub fn bias(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) {
        for l in 0..self.num_layers() {
            store.init_normal(self.weight(l), self.dims[l], self.dims[l + 1], 1.0, rng);
            store.init_zeros(self.bias(l), 1, self.dims[l + 1]);
        }
    }

    /// SiLU between layers, linear output.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binder, x: Var) -> Var {
        let mut h = x;
        for l in 0..self.num_layers() {
            let w = bind.get(tape, &self.weight(l));
            let b = bind.get(tape, &self.bias(l));
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
            if l + 1 < self.num_layers() {
                h = tape.silu(h);
            }
        }
        h
    }
}

pub fn linear(tape: &mut Tape, bind: &mut Binder, prefix: &str, x: Var) -> Var {
    let w = bind.get(tape, &format!("{prefix}.w"));
    let b = bind.get(tape, &format!("{prefix}.b"));
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) {
    store.init_normal(format!("{prefix}.w"), d_in, d_out, 1.0, rng);
    store.init_zeros(format!("{prefix}.b"), 1, d_out);
}

/// Layer norm with learned gain and shift (`{prefix}.g`, `{prefix}.b`).
pub fn layer_norm(tape: &mut Tape, bind: &mut Binder, prefix: &str, x: Var) -> Var {
    let g = bind.get(tape, &format!("{prefix}.g"));
    let b = bind.get(tape, &format!("{prefix}.b"));
    let h = tape.layer_norm(x, 1e-5);
    let h = tape.mul_row(h, g);
    tape.add_row(h, b)
}

pub fn init_layer_norm(store: &mut ParameterStore, prefix: &str, width: usize) {
    store.init_ones(format!("{prefix}.g"), 1, width);
    store.init_zeros(format!("{prefix}.b"), 1, width);
}
