//! Named parameter collections and the small layer library built on them.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An ordered set of named tensors. A parameter's id is its position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor<S>) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, id: usize) -> &Tensor<S> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor in `g`; trainable sets become gradient-tracked
    /// parameters, the rest plain constants.
    pub fn bind(&self, g: &Graph<S>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable { g.param(i, t) } else { g.constant(t) })
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn copy_from(&mut self, other: &ParamSet<S>) {
        self.tensors.clone_from(&other.tensors);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

pub(crate) fn glorot<S: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| S::from_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("glorot shape")
}

/// Activation applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Elu,
    Tanh,
    Sigmoid,
}

pub fn activate<S: Scalar>(g: &Graph<S>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Elu => g.elu(x),
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// `x·W + b` over rows of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.push(&alloc::format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let bias = ps.push(&alloc::format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, vars[self.weight])?;
        g.add(y, vars[self.bias])
    }
}

/// Stack of linear layers: hidden layers use `hidden_act`, the last layer
/// `out_act`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_act: Activation,
    pub out_act: Activation,
}

impl Mlp {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        sizes: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &alloc::format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden_act,
            out_act,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], x: Var) -> Result<Var> {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, vars, h)?;
            h = activate(g, h, if i + 1 == n { self.out_act } else { self.hidden_act });
        }
        Ok(h)
    }
}

/// Gated recurrent unit.
///
/// ```text
/// r  = σ(x·Wr + h·Ur + br)
/// u  = σ(x·Wu + h·Uu + bu)
/// c  = tanh(x·Wc + r ⊙ (h·Uc) + bc)
/// h' = u ⊙ h + (1 − u) ⊙ c
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub input_weight: usize,
    pub hidden_weight: usize,
    pub bias: usize,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input_weight = ps.push(
            &alloc::format!("{name}.wx"),
            glorot(rng, input, 3 * hidden),
        );
        let hidden_weight = ps.push(
            &alloc::format!("{name}.wh"),
            glorot(rng, hidden, 3 * hidden),
        );
        let bias = ps.push(&alloc::format!("{name}.b"), Tensor::zeros(&[3 * hidden]));
        Self {
            input_weight,
            hidden_weight,
            bias,
            input,
            hidden,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let xw = g.add(g.matmul(x, vars[self.input_weight])?, vars[self.bias])?;
        let hu = g.matmul(h, vars[self.hidden_weight])?;
        let r = g.sigmoid(g.add(g.slice(xw, 0, n)?, g.slice(hu, 0, n)?)?);
        let u = g.sigmoid(g.add(g.slice(xw, n, 2 * n)?, g.slice(hu, n, 2 * n)?)?);
        let gated = g.mul(r, g.slice(hu, 2 * n, 3 * n)?)?;
        let c = g.tanh(g.add(g.slice(xw, 2 * n, 3 * n)?, gated)?);
        // h' = c + u ⊙ (h − c)
        let diff = g.sub(h, c)?;
        g.add(c, g.mul(u, diff)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_with_zero_weights_and_inputs_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let cell = GruCell::new(&mut ps, "gru", 5, 4, &mut rng);
        for id in 0..ps.len() {
            ps.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let vars = ps.bind(&g, false);
        let x = g.zeros(&[2, 5]);
        let h = g.zeros(&[2, 4]);
        let out = cell.forward(&g, &vars, x, h).unwrap();
        assert_eq!(g.shape(out), [2, 4]);
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_shapes_and_determinism() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut ps = ParamSet::<f32>::new();
            let mlp = Mlp::new(&mut ps, "m", &[3, 8, 2], Activation::Elu, Activation::Identity, &mut rng);
            (ps, mlp)
        };
        let (ps, mlp) = build();
        assert_eq!(ps, build().0);
        let g = Graph::new();
        let vars = ps.bind(&g, false);
        let x = g.constant(&Tensor::full(&[4, 3], 0.5));
        let y = mlp.forward(&g, &vars, x).unwrap();
        assert_eq!(g.shape(y), [4, 2]);
    }
}
