//! Named parameter traversal shared by the optimizer, checkpoints and
//! gradient accumulation. Gradients use the same type as the model they
//! belong to.

use rand::Rng;

use crate::error::{GdipError, Result};
use crate::tensor::Tensor;

pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    z
}

pub fn param_count<P: Params>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

/// `acc += other`, tensor by tensor in visiting order.
pub fn add_assign<P: Params>(acc: &mut P, other: &P) {
    let flat = flatten(other);
    let mut offset = 0;
    acc.visit_mut("", &mut |_, t| {
        let n = t.len();
        for (a, b) in t.data_mut().iter_mut().zip(&flat[offset..offset + n]) {
            *a += b;
        }
        offset += n;
    });
}

pub fn scale<P: Params>(p: &mut P, factor: f64) {
    p.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= factor));
}

pub fn flatten<P: Params>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

pub fn unflatten<P: Params>(p: &mut P, flat: &[f64]) -> Result<()> {
    let expected = param_count(p);
    if expected != flat.len() {
        return Err(GdipError::ShapeMismatch {
            expected: vec![expected],
            actual: vec![flat.len()],
        });
    }
    let mut offset = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    Ok(())
}

pub fn names<P: Params>(p: &P) -> Vec<String> {
    let mut out = Vec::new();
    p.visit("", &mut |name, _| out.push(name.to_string()));
    out
}

/// Fully connected layer `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Weights uniform in `[-bound, bound]`, zero bias.
    pub fn uniform(out_dim: usize, in_dim: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let mut layer = Linear::zeros(out_dim, in_dim);
        if bound > 0.0 {
            for v in layer.weight.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(GdipError::ShapeMismatch {
                expected: vec![self.in_dim()],
                actual: vec![x.len()],
            });
        }
        let w = self.weight.data();
        let n = self.in_dim();
        Ok(self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| b + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient.
    pub fn backward(&self, x: &[f64], g_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        let n = self.in_dim();
        let w = self.weight.data();
        let mut g_in = vec![0.0; n];
        let gw = grads.weight.data_mut();
        for (o, &g) in g_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n..(o + 1) * n];
            let grow = &mut gw[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                g_in[i] += g * row[i];
            }
        }
        for (b, g) in grads.bias.data_mut().iter_mut().zip(g_out) {
            *b += g;
        }
        g_in
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_and_backward() {
        let layer = Linear {
            weight: Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap(),
            bias: Tensor::from_vec(vec![0.5, -0.5]).unwrap(),
        };
        let x = [1.0, 1.0, 2.0];
        assert_eq!(layer.forward(&x).unwrap(), vec![9.5, -1.0]);
        assert!(layer.forward(&[1.0]).is_err());
        let mut grads = zeros_like(&layer);
        let g_in = layer.backward(&x, &[1.0, 2.0], &mut grads);
        assert_eq!(g_in, vec![-1.0, 3.0, 3.0]);
        assert_eq!(grads.weight.data(), &[1.0, 1.0, 2.0, 2.0, 2.0, 4.0]);
        assert_eq!(grads.bias.data(), &[1.0, 2.0]);
    }

    #[test]
    fn flatten_round_trip_and_names() {
        let mut layers = vec![Linear::zeros(2, 2), Linear::zeros(1, 3)];
        let flat: Vec<f64> = (0..param_count(&layers)).map(|i| i as f64).collect();
        unflatten(&mut layers, &flat).unwrap();
        assert_eq!(flatten(&layers), flat);
        assert_eq!(names(&layers)[2], "1.weight");
        let copy = layers.clone();
        add_assign(&mut layers, &copy);
        assert_eq!(flatten(&layers)[3], 6.0);
        assert!(unflatten(&mut layers, &[0.0]).is_err());
    }
}
