//! Central finite differences, the oracle for every reverse-mode gradient.

use crate::error::Result;
use crate::tensor::Tensor;

/// Step-size rule for [`finite_diff_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    Fixed(f64),
    /// `h = base * (1 + |x_i|)` per coordinate.
    Relative(f64),
}

impl Step {
    fn at(self, x: f64) -> f64 {
        match self {
            Step::Fixed(h) => h,
            Step::Relative(h) => h * (1.0 + x.abs()),
        }
    }
}

impl Default for Step {
    fn default() -> Self {
        Step::Relative(1e-6)
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, step: Step) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let partial = finite_diff_at(f, x, &all, step)?;
    Tensor::new(x.shape().to_vec(), partial)
}

/// Central differences at a subset of flat coordinates.
pub fn finite_diff_at<F>(mut f: F, x: &Tensor, coords: &[usize], step: Step) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let x0 = x.data()[i];
        let h = step.at(x0);
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = numeric.iter().fold(floor, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}
