use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ModelHandle;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with decays `(0.5, 0.999)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn for_model(lr: f64, model: &ModelHandle) -> Self {
        Self::new(lr, model.params())
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to `model` and advance its step counter.
    pub fn step(&mut self, model: &mut ModelHandle, grads: &[Tensor]) -> Result<()> {
        let params = self.update(model.params(), grads)?;
        model.set_params(params)?;
        model.step += 1;
        Ok(())
    }

    pub fn update(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("gradient list does not match parameters".into()));
        }
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Diverged(format!("non-finite gradient in parameter {bad}")));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v[i].data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let mut p = params[i].clone();
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
            out.push(p);
        }
        Ok(out)
    }

    /// Raw little-endian dump: `t`, then all first moments, then all second.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.t.to_le_bytes());
        for t in self.m.iter().chain(&self.v) {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let total: usize = self.m.iter().chain(&self.v).map(Tensor::numel).sum();
        if bytes.len() != 8 + total * 8 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "optimizer state size mismatch".into(),
            });
        }
        self.t = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut vals = bytes[8..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data_mut() {
                *x = vals.next().unwrap();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let p = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5])];
        let g = vec![Tensor::from_vec(&[3], vec![0.3, -4.0, 0.0])];
        let mut adam = Adam::new(0.1, &p);
        let out = adam.update(&p, &g).unwrap();
        // bias-corrected first step is lr·g/|g|
        assert!((out[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((out[0].data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(out[0].data()[2], 0.5);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let p = vec![Tensor::zeros(&[2])];
        let mut adam = Adam::new(0.1, &p);
        let g = vec![Tensor::from_vec(&[2], vec![f64::NAN, 0.0])];
        assert!(matches!(adam.update(&p, &g), Err(Error::Diverged(_))));
    }

    #[test]
    fn state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = vec![Tensor::zeros(&[4]), Tensor::zeros(&[2, 2])];
        let g = vec![Tensor::full(&[4], 0.5), Tensor::full(&[2, 2], -1.0)];
        let mut a = Adam::new(0.01, &p);
        a.update(&p, &g).unwrap();
        a.save(&dir.path().join("s")).unwrap();
        let mut b = Adam::new(0.01, &p);
        b.load(&dir.path().join("s")).unwrap();
        assert_eq!(a, b);
    }
}
