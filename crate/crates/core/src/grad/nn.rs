use crate::error::Result;
use crate::grad::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Fully connected layer `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Layer whose weights and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }

    /// Same computation with the parameters held constant.
    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.frozen(store, self.weight);
        let b = g.frozen(store, self.bias);
        g.affine(x, w, b)
    }
}

/// Multi-layer perceptron with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`. With `zero_last` the output layer
    /// starts at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeroed(store, &lname, sizes[i], sizes[i + 1])
                } else {
                    Linear::new(store, &lname, sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(g, store, x, false)
    }

    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(g, store, x, true)
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, mut x: Var, frozen: bool) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = if frozen {
                layer.forward_frozen(g, store, x)?
            } else {
                layer.forward(g, store, x)?
            };
            if i < last {
                x = self.activation.apply(g, x)?;
            }
        }
        Ok(x)
    }
}
