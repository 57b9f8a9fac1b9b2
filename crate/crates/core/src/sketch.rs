//! Linear sketchers `R^D -> R^{d'}` and random direction sets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tensor::{Tensor, Var};

use crate::error::Result;
use crate::nn::{Graph, Init, Module, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchInit {
    /// Entries with standard deviation 1e-2.
    SmallGaussian,
    /// Entries with standard deviation `D^{-1/2}`.
    Xavier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sketcher {
    pub p: Param,
    pub init: SketchInit,
}

impl Sketcher {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dim: usize,
        out: usize,
        init: SketchInit,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        let mode = match init {
            SketchInit::SmallGaussian => Init::Gaussian(1e-2),
            SketchInit::Xavier => Init::Xavier,
        };
        let mut p = Param::new(format!("{name}.p"), mode.tensor(&[out, dim], dim, rng));
        p.frozen = frozen;
        Self { p, init }
    }

    pub fn from_matrix(name: &str, p: Tensor, frozen: bool) -> Self {
        let mut p = Param::new(format!("{name}.p"), p);
        p.frozen = frozen;
        Self {
            p,
            init: SketchInit::Xavier,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.p.value.shape()[0]
    }

    pub fn is_frozen(&self) -> bool {
        self.p.frozen
    }

    /// `x P^T` for `x: [N, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = g.param(&self.p);
        let pt = g.tape.transpose(p)?;
        Ok(g.tape.matmul(x, pt)?)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.p.value.transpose()?)?)
    }
}

impl Module for Sketcher {
    fn params(&self) -> Vec<&Param> {
        vec![&self.p]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.p]
    }
}

/// `M` unit directions in `R^{d'}`, stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub dirs: Tensor,
}

impl DirectionSet {
    pub fn sample<R: Rng + ?Sized>(m: usize, dim: usize, rng: &mut R) -> Self {
        let mut data = Vec::with_capacity(m * dim);
        for _ in 0..m {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-8 {
                    data.extend(v.into_iter().map(|x| x / n));
                    break;
                }
            }
        }
        Self {
            dirs: Tensor::new(vec![m, dim], data).expect("sized above"),
        }
    }

    pub fn from_rows(dirs: Tensor) -> Self {
        Self { dirs }
    }

    pub fn count(&self) -> usize {
        self.dirs.shape()[0]
    }

    /// Projections `z A^T`, shape `[N, M]`.
    pub fn project(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let at = g.constant(self.dirs.transpose()?);
        Ok(g.tape.matmul(z, at)?)
    }

    pub fn negated(&self) -> Self {
        Self {
            dirs: self.dirs.map(|x| -x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn directions_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DirectionSet::sample(64, 64, &mut rng);
        for i in 0..64 {
            let n: f64 = d.dirs.row(i).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sketch_is_zero() {
        let s = Sketcher::from_matrix("s", Tensor::zeros(&[4, 3]), false);
        let y = s.eval(&Tensor::ones(&[2, 3])).unwrap();
        assert!(y.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn xavier_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Sketcher::new("s", 100, 100, SketchInit::Xavier, true, &mut rng);
        let v = s.p.value.data();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var.sqrt() / 0.1 - 1.0).abs() < 0.1, "{}", var.sqrt());
    }
}
