use crate::error::{Error, Result};
use crate::grad::{ParamStore, Tensor};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied to the whole gradient before the update.
    pub clip_norm: Option<f64>,
    state: Option<AdamState>,
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            state: None,
        }
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn state(&self) -> Option<&AdamState> {
        self.state.as_ref()
    }

    /// One update. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::config(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (g, p) in grads.iter().zip(store.tensors()) {
            if let Some(g) = g {
                if g.numel() != p.numel() {
                    return Err(Error::config(format!(
                        "adam: gradient shape {:?} vs parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        let state = self.state.get_or_insert_with(|| AdamState {
            m: store.tensors().iter().map(|t| t.map(|_| 0.0)).collect(),
            v: store.tensors().iter().map(|t| t.map(|_| 0.0)).collect(),
            step: 0,
        });
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            let g = grads[i].as_ref().map(Tensor::data);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j] * clip);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut s = one_param(1.0);
        let mut opt = Adam::new(0.1);
        opt.step(&mut s, &[Some(Tensor::scalar(2.0))]).unwrap();
        let after_first = s.get(crate::grad::ParamId(0)).item();
        let m1 = opt.state().unwrap().m[0].item();
        // a zero-gradient step still moves by the bias-corrected momentum,
        // but from a fresh optimizer nothing moves at all
        let mut fresh = Adam::new(0.1);
        let mut s2 = one_param(1.0);
        fresh.step(&mut s2, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert_eq!(s2.get(crate::grad::ParamId(0)).item(), 1.0);
        opt.step(&mut s, &[None]).unwrap();
        let m2 = opt.state().unwrap().m[0].item();
        assert!((m2 - 0.9 * m1).abs() < 1e-15);
        assert!(after_first < 1.0);
    }

    #[test]
    fn descends_on_square() {
        let mut s = one_param(1.0);
        let mut opt = Adam::new(0.1);
        let x = s.get(crate::grad::ParamId(0)).item();
        opt.step(&mut s, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
        assert!(s.get(crate::grad::ParamId(0)).item() < 1.0);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut s = one_param(1.0);
        let mut opt = Adam::new(0.1);
        assert!(opt.step(&mut s, &[Some(Tensor::zeros(1, 2))]).is_err());
        assert!(opt.step(&mut s, &[]).is_err());
    }

    #[test]
    fn clipping_bounds_first_step() {
        // with clipping the first Adam step is still ±lr (scale invariant),
        // but the stored moment reflects the clipped gradient
        let mut s = one_param(0.0);
        let mut opt = Adam::new(0.1).with_clip(Some(1.0));
        opt.step(&mut s, &[Some(Tensor::scalar(100.0))]).unwrap();
        let m = opt.state().unwrap().m[0].item();
        assert!((m - 0.1).abs() < 1e-12);
    }
}
