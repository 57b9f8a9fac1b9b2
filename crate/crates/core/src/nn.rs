//! Small parameterised building blocks and the per-evaluation graph binder.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tensor::{DualValue, Tape, Tensor, Var};

use crate::batch::TrajectoryBatch;
use crate::error::Result;

/// Name under which the hidden-state leaf is registered.
pub const HIDDEN: &str = "hidden";

/// Flag attached to losses with no admissible terms.
pub const EMPTY: &str = "empty";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Gaussian(f64),
    /// Gaussian with standard deviation `fan_in^{-1/2}`.
    Xavier,
}

impl Init {
    pub fn tensor<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let sd = match self {
            Init::Zeros => return Tensor::zeros(shape),
            Init::Gaussian(sd) => sd,
            Init::Xavier => 1.0 / (fan_in as f64).sqrt(),
        };
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Plain gradient descent on every trainable parameter found in `grads`.
    fn sgd_step(&mut self, grads: &DualValue, lr: f64) -> Result<()> {
        for p in self.params_mut() {
            if p.frozen {
                continue;
            }
            if let Some(g) = grads.grad(&p.name) {
                p.value = p.value.zip_map(g, |x, d| x - lr * d)?;
            }
        }
        Ok(())
    }
}

/// `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), init.tensor(&[output, input], input, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[output]))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn freeze(&mut self) {
        self.weight.frozen = true;
        if let Some(b) = &mut self.bias {
            b.frozen = true;
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let wt = g.tape.transpose(w)?;
        let mut y = g.tape.matmul(x, wt)?;
        if let Some(b) = &self.bias {
            let b = g.param(b);
            y = g.tape.add(y, b)?;
        }
        Ok(y)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight.value.transpose()?)?;
        if let Some(b) = &self.bias {
            let n = b.value.numel();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b.value.data()[i % n];
            }
        }
        Ok(y)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(&format!("{name}.l1"), input, hidden, Init::Xavier, true, rng),
            l2: Linear::new(&format!("{name}.l2"), hidden, output, out_init, true, rng),
        }
    }

    pub fn freeze(&mut self) {
        self.l1.freeze();
        self.l2.freeze();
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.l1.forward(g, x)?;
        let a = g.tape.gelu(a);
        self.l2.forward(g, a)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.l1.eval(x)?.map(tensor::gelu);
        self.l2.eval(&a)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.l1.params();
        v.extend(self.l2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.l2.params_mut());
        v
    }
}

/// A tape plus a by-name registry so each parameter is bound once per evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    pub tape: Tape,
    bound: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a differentiable input under `name`.
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.tape.leaf(name, value);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Bind a parameter; frozen parameters are wrapped in stop-gradient.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(v) = self.bound.get(&p.name) {
            return *v;
        }
        let leaf = self.tape.leaf(p.name.clone(), p.value.clone());
        let v = if p.frozen { self.tape.stop_grad(leaf) } else { leaf };
        self.bound.insert(p.name.clone(), v);
        v
    }

    pub fn bind_all<M: Module + ?Sized>(&mut self, m: &M) {
        for p in m.params() {
            self.param(p);
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn finish(&self, root: Var) -> Result<DualValue> {
        Ok(self.tape.dual(root)?)
    }

    /// Zero loss with zero gradients for every bound leaf, flagged [`EMPTY`].
    pub fn empty(&self) -> DualValue {
        let grads = self
            .tape
            .leaves()
            .iter()
            .map(|(name, v)| (name.clone(), Tensor::zeros(self.tape.shape(*v))))
            .collect();
        DualValue {
            value: 0.0,
            grads,
            flags: Default::default(),
        }
        .with_flag(EMPTY)
    }
}

/// Bind the batch's hidden states as the [`HIDDEN`] leaf and return the `[B*S, D]` view.
pub fn bind_hidden(g: &mut Graph, batch: &TrajectoryBatch) -> Result<Var> {
    let h = g.input(HIDDEN, batch.hidden().clone());
    Ok(g.tape.reshape(h, &[batch.batch_size() * batch.seq_len(), batch.dim()])?)
}

/// `k` distinct indices from `0..n`, sorted ascending.
pub fn sample_sorted<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Constant `[rows.len(), B*S]` averaging matrix: row `i` is the mean of the
/// flat positions in `rows[i]`.
pub fn pooling_matrix(rows: &[Vec<usize>], width: usize) -> Tensor {
    let mut m = Tensor::zeros(&[rows.len(), width]);
    for (i, r) in rows.iter().enumerate() {
        let w = 1.0 / r.len() as f64;
        for &j in r {
            m.data_mut()[i * width + j] += w;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_eval_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new("p", 3, 2, Init::Xavier, true, &mut rng);
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1 - 0.5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, xv).unwrap();
        assert_eq!(g.tape.value(y), &lin.eval(&x).unwrap());
    }

    #[test]
    fn frozen_param_gets_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new("p", 3, 2, Init::Xavier, false, &mut rng);
        lin.freeze();
        let mut g = Graph::new();
        let x = g.input(HIDDEN, Tensor::ones(&[1, 3]));
        let y = lin.forward(&mut g, x).unwrap();
        let y = g.tape.square(y);
        let root = g.tape.sum_all(y);
        let dual = g.finish(root).unwrap();
        assert_eq!(dual.grad("p.weight").unwrap().max_abs(), 0.0);
        assert!(dual.grad(HIDDEN).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn params_bind_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new("p", 2, 2, Init::Xavier, true, &mut rng);
        let mut g = Graph::new();
        g.bind_all(&lin);
        g.bind_all(&lin);
        assert_eq!(g.tape.leaves().len(), 2);
    }

    #[test]
    fn empty_has_zero_gradients() {
        let mut g = Graph::new();
        g.input(HIDDEN, Tensor::ones(&[2, 2]));
        let d = g.empty();
        assert!(d.has_flag(EMPTY));
        assert_eq!(d.grad(HIDDEN).unwrap(), &Tensor::zeros(&[2, 2]));
    }
}
