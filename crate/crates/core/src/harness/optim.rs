use crate::backbone::ParamStore;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One AdamW update of a single tensor at step `t ≥ 1`: decoupled decay
/// `p −= lr·wd·p`, then the bias-corrected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(invalid("parameter, gradient and moment lengths differ"));
    }
    if t == 0 {
        return Err(invalid("AdamW step counter starts at 1"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        param[i] -= lr * weight_decay * param[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over every trainable tensor of a store, with separate learning
/// rates for backbone and non-backbone parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamW { hyper: AdamHyper::default(), weight_decay, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads[i]` is the gradient of store entry `i` (`None` when it received
    /// none). All gradients are checked before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr_backbone: f64, lr_other: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(invalid("gradient list does not match the parameter store"));
        }
        if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.t += 1;
        for (i, g) in grads.iter().enumerate() {
            let entry = store.entry(crate::backbone::ParamId(i));
            if !entry.trainable {
                continue;
            }
            let lr = if entry.backbone { lr_backbone } else { lr_other };
            let zero;
            let g = match g {
                Some(g) => g.as_slice(),
                None => {
                    zero = vec![0.0; entry.tensor.numel()];
                    zero.as_slice()
                }
            };
            let p = store.tensor_mut(crate::backbone::ParamId(i)).data_mut();
            adamw_step(p, g, &mut self.m[i], &mut self.v[i], self.t, lr, self.weight_decay, self.hyper)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![0.3, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..5 {
            adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, t, 0.1, 0.0, AdamHyper::default()).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_from_zero_state() {
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.0, AdamHyper::default()).unwrap();
        // m̂ = 1, v̂ = 1, so the step is 0.1 / (1 + 1e-8)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let mut last = 0.0;
        for t in 1..=200 {
            let before = p[0];
            adamw_step(&mut p, &[-3.0], &mut m, &mut v, t, 0.01, 0.0, AdamHyper::default()).unwrap();
            last = p[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let mut p = vec![2.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, 0.5, AdamHyper::default()).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let err = adamw_step(&mut p, &[f64::NAN], &mut m, &mut v, 1, 0.1, 0.0, AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, vec![1.0]);
    }
}
