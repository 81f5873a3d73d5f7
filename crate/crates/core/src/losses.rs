//! Frame-prediction and classification objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the Huber penalty is applied to a residual frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HuberMode {
    /// Standard element-wise Huber, reduced according to [`Reduction`].
    PerPixel,
    /// One branch decision per frame from the frame's L1 residual norm:
    /// `½‖r‖₂²` below `delta`, `delta·‖r‖₁ − ½delta²` otherwise, averaged over frames.
    FrameNorm,
}

/// Reduction used by [`HuberMode::PerPixel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean over every element.
    Mean,
    /// Sum over the pixels of each frame, mean over frames. Same scale as
    /// [`HuberMode::FrameNorm`].
    FrameSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Huber threshold.
    pub delta: f64,
    /// Weight of the frame-prediction loss.
    pub alpha: f64,
    /// Weight of the classification loss.
    pub beta: f64,
    pub huber_mode: HuberMode,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta: 0.01,
            alpha: 0.1,
            beta: 1.0,
            huber_mode: HuberMode::PerPixel,
            reduction: Reduction::FrameSum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid("loss config", format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(
                "loss config",
                format!("alpha/beta must be >= 0, got {}/{}", self.alpha, self.beta),
            ));
        }
        Ok(())
    }
}

/// Element-wise Huber penalty `h(r)`.
#[inline]
pub fn huber_scalar<S: Scalar>(r: S, delta: S) -> S {
    let half = S::lit(0.5);
    if r.abs() < delta {
        half * r * r
    } else {
        delta * r.abs() - half * delta * delta
    }
}

fn frames_of(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(1).max(1)
}

/// Loss value without recording anything.
pub fn huber_raw<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    delta: S,
    mode: HuberMode,
    reduction: Reduction,
) -> S {
    let frames = frames_of(pred.shape());
    let per_frame = pred.len() / frames;
    let half = S::lit(0.5);
    match mode {
        HuberMode::PerPixel => {
            let total: S = pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| huber_scalar(p - t, delta))
                .sum();
            match reduction {
                Reduction::Mean => total / S::lit(pred.len() as f64),
                Reduction::FrameSum => total / S::lit(frames as f64),
            }
        }
        HuberMode::FrameNorm => {
            let mut total = S::zero();
            for f in 0..frames {
                let (p, t) = (&pred.data()[f * per_frame..][..per_frame], &target.data()[f * per_frame..][..per_frame]);
                let l1: S = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum();
                total += if l1 < delta {
                    half * p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>()
                } else {
                    delta * l1 - half * delta * delta
                };
            }
            total / S::lit(frames as f64)
        }
    }
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Gradient of [`huber_raw`] w.r.t. `pred`.
pub(crate) fn huber_grad_raw<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    delta: S,
    mode: HuberMode,
    reduction: Reduction,
) -> Vec<S> {
    let frames = frames_of(pred.shape());
    let per_frame = pred.len() / frames;
    match mode {
        HuberMode::PerPixel => {
            let norm = match reduction {
                Reduction::Mean => S::lit(pred.len() as f64),
                Reduction::FrameSum => S::lit(frames as f64),
            };
            pred.data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| {
                    let r = p - t;
                    let d = if r.abs() < delta { r } else { delta * sign(r) };
                    d / norm
                })
                .collect()
        }
        HuberMode::FrameNorm => {
            let norm = S::lit(frames as f64);
            let mut out = Vec::with_capacity(pred.len());
            for f in 0..frames {
                let (p, t) = (&pred.data()[f * per_frame..][..per_frame], &target.data()[f * per_frame..][..per_frame]);
                let l1: S = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum();
                let quad = l1 < delta;
                out.extend(p.iter().zip(t).map(|(&a, &b)| {
                    let r = a - b;
                    (if quad { r } else { delta * sign(r) }) / norm
                }));
            }
            out
        }
    }
}

/// `−log softmax(logits)[label]` with max subtraction.
pub fn cross_entropy_raw<S: Scalar>(logits: &[S], label: usize) -> S {
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let z: S = logits.iter().map(|&l| (l - m).exp()).sum();
    m + z.ln() - logits[label]
}

impl<S: Scalar> Graph<S> {
    /// Frame-prediction loss between predicted and ground-truth frames.
    pub fn huber_fp(&mut self, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "huber_fp",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let delta = S::lit(cfg.delta);
        let v = huber_raw(p, t, delta, cfg.huber_mode, cfg.reduction);
        self.push_huber(pred, target, delta, cfg.huber_mode, cfg.reduction, v)
    }

    /// Softmax cross-entropy of a `K`-vector of class logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 1 || l.is_empty() {
            return Err(Error::invalid("cross_entropy", format!("expected K logits, got {:?}", l.shape())));
        }
        if label >= l.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: l.len(),
            });
        }
        let v = cross_entropy_raw(l.data(), label);
        self.push_cross_entropy(logits, label, v)
    }

    /// `alpha · l_fp + beta · l_cls`.
    pub fn total_loss(&mut self, l_fp: Var, l_cls: Var, cfg: &LossConfig) -> Result<Var> {
        for v in [l_fp, l_cls] {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::NotScalar(t.shape().to_vec()));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "total_loss" });
            }
        }
        let a = self.scale(l_fp, S::lit(cfg.alpha))?;
        let b = self.scale(l_cls, S::lit(cfg.beta))?;
        self.add(a, b)
    }
}

/// Scalar form of the weighted objective.
pub fn total_loss_value(l_fp: f64, l_cls: f64, cfg: &LossConfig) -> Result<f64> {
    if !l_fp.is_finite() || !l_cls.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(cfg.alpha * l_fp + cfg.beta * l_cls)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1], vec![v]).unwrap()
    }

    fn huber(p: &Tensor<f64>, t: &Tensor<f64>, cfg: &LossConfig) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (g.input(p.clone()).unwrap(), g.input(t.clone()).unwrap());
        let l = g.huber_fp(a, b, cfg).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn huber_examples() {
        let cfg = LossConfig::default();
        let x = Tensor::from_fn(vec![2, 3, 3], |i| i as f64 * 0.1);
        assert_eq!(huber(&x, &x, &cfg), 0.0);
        let v = huber(&one(0.005), &one(0.0), &cfg);
        assert!((v - 0.5 * 0.005 * 0.005).abs() < 1e-18);
        let v = huber(&one(0.02), &one(0.0), &cfg);
        assert!((v - (0.01 * 0.02 - 0.5 * 0.0001)).abs() < 1e-18);
        let mean = LossConfig {
            reduction: Reduction::Mean,
            ..cfg
        };
        assert!((huber(&one(0.02), &one(0.0), &mean) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn reductions_differ_by_pixels_per_frame() {
        let p = Tensor::from_fn(vec![3, 4, 5], |i| (i as f64 * 0.37).sin());
        let t = Tensor::zeros(vec![3, 4, 5]);
        let fs = huber(&p, &t, &LossConfig::default());
        let mean = huber(
            &p,
            &t,
            &LossConfig {
                reduction: Reduction::Mean,
                ..Default::default()
            },
        );
        assert!((fs - 20.0 * mean).abs() < 1e-12);
    }

    #[test]
    fn frame_norm_branches_on_l1() {
        let cfg = LossConfig {
            huber_mode: HuberMode::FrameNorm,
            ..Default::default()
        };
        // L1 = 0.004 < 0.01: quadratic branch
        let p = Tensor::new(vec![1, 1, 2], vec![0.002, -0.002]).unwrap();
        let z = Tensor::zeros(vec![1, 1, 2]);
        assert!((huber(&p, &z, &cfg) - 0.5 * 8e-6).abs() < 1e-18);
        // L1 = 0.04: linear branch
        let p = Tensor::new(vec![1, 1, 2], vec![0.02, -0.02]).unwrap();
        assert!((huber(&p, &z, &cfg) - (0.01 * 0.04 - 0.5e-4)).abs() < 1e-18);
    }

    #[test]
    fn huber_rejects_mismatched_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 2, 2])).unwrap();
        let b = g.input(Tensor::zeros(vec![2, 2, 3])).unwrap();
        assert!(g.huber_fp(a, b, &LossConfig::default()).is_err());
    }

    #[test]
    fn huber_derivative_continuous_at_threshold() {
        let d = 0.01f64;
        let h = 1e-7;
        for r in [d - 1e-12, d + 1e-12] {
            let left = (huber_scalar(r, d) - huber_scalar(r - h, d)) / h;
            let right = (huber_scalar(r + h, d) - huber_scalar(r, d)) / h;
            assert!((left - right).abs() < 1e-6, "{left} {right}");
            assert!((left - d).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let u = g.param(Tensor::zeros(vec![4])).unwrap();
        let l = g.cross_entropy(u, 0).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(u).unwrap(), &[0.25 - 1.0, 0.25, 0.25, 0.25]);

        let s = g.input(Tensor::new(vec![4], vec![50.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let l = g.cross_entropy(s, 0).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-12);

        let k1 = g.input(Tensor::new(vec![1], vec![3.7]).unwrap()).unwrap();
        let l = g.cross_entropy(k1, 0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        assert!(matches!(g.cross_entropy(u, 4), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert!((total_loss_value(2.0, 3.0, &cfg).unwrap() - 3.2).abs() < 1e-15);
        let ablate = LossConfig { alpha: 0.0, ..cfg };
        assert_eq!(total_loss_value(2.0, 3.0, &ablate).unwrap(), 3.0);
        let pre = LossConfig { beta: 0.0, ..cfg };
        assert_eq!(total_loss_value(2.0, 3.0, &pre).unwrap(), 0.2);
        assert!(total_loss_value(f64::NAN, 3.0, &cfg).is_err());

        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::scalar(2.0)).unwrap();
        let b = g.input(Tensor::scalar(3.0)).unwrap();
        let t = g.total_loss(a, b, &cfg).unwrap();
        assert!((g.value(t).item().unwrap() - 3.2).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            delta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
