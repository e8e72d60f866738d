//! Adam with bias correction and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Half-cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Usage(format!("cosine_lr: step {step} is past the schedule end {total_steps}")));
    }
    if lr_min > lr_max {
        return Err(Error::Usage(format!("cosine_lr: lr_min {lr_min} exceeds lr_max {lr_max}")));
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let phase = PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
}

impl<F: Real> Default for AdamState<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> AdamState<F> {
    pub fn new() -> Self {
        AdamState { step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, m: ParamSet::new(), v: ParamSet::new() }
    }

    /// One update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64) -> Result<()> {
        for name in params.names() {
            let g = grads.get(name).ok_or_else(|| Error::Usage(format!("adam_step: no gradient for `{name}`")))?;
            if g.shape() != params.get(name).expect("listed").shape() {
                return Err(Error::Dimension(format!("adam_step: gradient shape mismatch for `{name}`")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, theta) in params.iter_mut() {
            let g = grads.get(name).expect("checked");
            let zeros = || Tensor::zeros(theta.shape().to_vec()).expect("valid shape");
            if !self.m.contains(name) {
                self.m.insert(name, zeros());
                self.v.insert(name, zeros());
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
                let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
                *mi = F::lit(mn);
                *vi = F::lit(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *p = F::lit(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        for s in 0..=10 {
            assert_eq!(cosine_lr(s, 10, 0.5, 0.5).unwrap(), 0.5);
        }
    }

    #[test]
    fn cosine_rejects_out_of_range() {
        assert!(matches!(cosine_lr(11, 10, 1.0, 0.0), Err(Error::Usage(_))));
        assert!(matches!(cosine_lr(0, 10, 0.0, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        for g in [0.3, -2.5, 40.0] {
            let mut p = single("w", 1.0);
            let mut s = AdamState::new();
            s.step(&mut p, &single("w", g), 1e-3).unwrap();
            let delta = p.get("w").unwrap().item().unwrap() - 1.0;
            let want = -1e-3 * g.signum();
            assert!(((delta - want) / want).abs() < 1e-6, "{delta} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single("w", 0.75);
        let mut s = AdamState::new();
        s.step(&mut p, &single("w", 0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item().unwrap(), 0.75);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn two_steps_follow_the_recurrence() {
        let (g, lr, theta0) = (0.2, 0.01, 1.0);
        let mut p = single("w", theta0);
        let mut s = AdamState::new();
        s.step(&mut p, &single("w", g), lr).unwrap();
        s.step(&mut p, &single("w", g), lr).unwrap();
        let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
        let mut theta = theta0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        assert!((p.get("w").unwrap().item().unwrap() - theta).abs() < 1e-15);
        assert!(s.v.get("w").unwrap().data()[0] >= 0.0);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = single("enc.w", 1.0);
        let err = AdamState::new().step(&mut p, &ParamSet::new(), 0.1).unwrap_err();
        assert!(matches!(&err, Error::Usage(m) if m.contains("enc.w")), "{err}");
    }

    #[test]
    fn update_is_independent_of_other_parameters() {
        let mut both = single("a", 1.0);
        both.insert("b", Tensor::new(vec![1], vec![-2.0]).unwrap());
        let mut grads = single("a", 0.5);
        grads.insert("b", Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut s = AdamState::new();
        s.step(&mut both, &grads, 0.01).unwrap();
        let mut alone = single("b", -2.0);
        AdamState::new().step(&mut alone, &single("b", 3.0), 0.01).unwrap();
        assert_eq!(both.get("b"), alone.get("b"));
    }
}
