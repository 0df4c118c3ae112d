use indexmap::IndexMap;

use crate::scalar::Scalar;
use crate::tensor::{ModelParams, Result, Tensor, TensorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Cosine-annealed learning rate at step `t` of `total`.
pub fn cosine_lr(lr: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam moments and step count, stored at parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let mut m = ModelParams::new();
        for (name, value) in params.iter() {
            m.insert(name, Tensor::zeros(value.shape()))
                .expect("unique names");
        }
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One AdamW update with decoupled weight decay. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if g.len() != p.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..g.len() {
                let mi = BETA1 * md[i].as_f64() + (1.0 - BETA1) * g[i];
                let vi = BETA2 * vd[i].as_f64() + (1.0 - BETA2) * g[i] * g[i];
                md[i] = T::lit(mi);
                vd[i] = T::lit(vi);
                let mut x = pd[i].as_f64();
                x -= lr * weight_decay * x;
                x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
                pd[i] = T::lit(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::from_f64(&[2], &[v, -v]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-18);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = one(0.7);
        let mut a = Adam::new(&p);
        let g: IndexMap<String, Vec<f64>> =
            [("w".to_string(), vec![0.0, 0.0])].into_iter().collect();
        a.step(&mut p, &g, 0.1, 0.0).unwrap();
        assert_eq!(p, one(0.7));
    }

    #[test]
    fn first_step_hand_computed() {
        let mut p = one(1.0);
        let mut a = Adam::new(&p);
        let g: IndexMap<String, Vec<f64>> =
            [("w".to_string(), vec![0.5, -2.0])].into_iter().collect();
        a.step(&mut p, &g, 0.01, 0.0).unwrap();
        // m = 0.1 g, v = 0.001 g^2, bias-corrected ratio g / (|g| + eps)
        let expect = [
            1.0 - 0.01 * 0.5 / (0.5 + 1e-8),
            -1.0 + 0.01 * 2.0 / (2.0 + 1e-8),
        ];
        let got = p.get("w").unwrap().data();
        assert!((got[0] - expect[0]).abs() < 1e-15 && (got[1] - expect[1]).abs() < 1e-15);
        assert!((a.m.get("w").unwrap().data()[0] - 0.05).abs() < 1e-15);
        assert!((a.v.get("w").unwrap().data()[1] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut p = one(2.0);
        let mut a = Adam::new(&p);
        let g: IndexMap<String, Vec<f64>> =
            [("w".to_string(), vec![0.0, 0.0])].into_iter().collect();
        a.step(&mut p, &g, 0.1, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.9, -1.9]);
    }
}
