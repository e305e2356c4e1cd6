use std::f64::consts::PI;

use ndarray::{Array1, Array2, Zip};

use super::{Gradients, NetworkParams};
use crate::error::{invalid, Result};

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Velocity {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }
}

/// `velocity = momentum·velocity + grad + weight_decay·w; w -= lr·velocity`.
///
/// Weight decay applies to weight matrices only, never to biases.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((layer, g), (vw, vb)) in params.layers.iter_mut().zip(&grads.layers).zip(velocity.layers.iter_mut()) {
        Zip::from(&mut layer.weights).and(&g.weights).and(vw).for_each(|w, &gw, v| {
            *v = momentum * *v + gw + weight_decay * *w;
            *w -= lr * *v;
        });
        Zip::from(&mut layer.bias).and(&g.bias).and(vb).for_each(|b, &gb, v| {
            *v = momentum * *v + gb;
            *b -= lr * *v;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// Multiply by `factor` at each milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
    /// Half-cosine from `lr0` down to zero at `total_epochs`.
    Cosine { total_epochs: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Step { factor, .. } if !(*factor > 0.0 && *factor < 1.0) => {
                Err(invalid(format!("step factor must lie in (0, 1), got {factor}")))
            }
            LrSchedule::Cosine { total_epochs: 0 } => Err(invalid("cosine schedule needs total_epochs > 0")),
            _ => Ok(()),
        }
    }
}

pub fn lr_at(lr0: f64, schedule: &LrSchedule, epoch: usize) -> f64 {
    match schedule {
        LrSchedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            lr0 * factor.powi(passed as i32)
        }
        LrSchedule::Cosine { total_epochs } => {
            let t = (epoch.min(*total_epochs)) as f64 / *total_epochs as f64;
            lr0 * 0.5 * (1.0 + (PI * t).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Architecture, LayerGrad};

    fn tiny() -> NetworkParams {
        init_params(&Architecture::new(2, vec![], 2), 3).unwrap()
    }

    fn grads_of(p: &NetworkParams, f: impl Fn(f64) -> f64) -> Gradients {
        Gradients {
            layers: p
                .layers
                .iter()
                .map(|l| LayerGrad { weights: l.weights.mapv(&f), bias: l.bias.mapv(&f) })
                .collect(),
        }
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = tiny();
        let before = p.clone();
        let g = grads_of(&p, |_| 0.5);
        let mut v = Velocity::zeros_like(&p);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0);
        for (a, b) in p.layers[0].weights.iter().zip(before.layers[0].weights.iter()) {
            assert!((a - (b - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_and_velocity_is_noop() {
        let mut p = tiny();
        let before = p.clone();
        let g = grads_of(&p, |_| 0.0);
        let mut v = Velocity::zeros_like(&p);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_bowl_shrinks_by_point_nine() {
        // f(w) = ½w², grad = w
        let mut p = tiny();
        let mut v = Velocity::zeros_like(&p);
        let mut prev = p.layers[0].weights.clone();
        for _ in 0..10 {
            let g = grads_of(&p, |w| w);
            sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0);
            for (now, before) in p.layers[0].weights.iter().zip(prev.iter()) {
                assert!((now - 0.9 * before).abs() < 1e-15);
                assert!(now.abs() <= before.abs());
            }
            prev = p.layers[0].weights.clone();
        }
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = tiny();
        let before = p.clone();
        let g = grads_of(&p, |_| 0.0);
        let mut v = Velocity::zeros_like(&p);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.5);
        assert_eq!(p.layers[0].bias, before.layers[0].bias);
        assert_ne!(p.layers[0].weights, before.layers[0].weights);
    }

    #[test]
    fn schedules() {
        let step = LrSchedule::Step { milestones: vec![60, 120, 160], factor: 0.1 };
        assert!((lr_at(0.1, &step, 130) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(0.1, &step, 59), 0.1);
        let cos = LrSchedule::Cosine { total_epochs: 50 };
        assert_eq!(lr_at(0.2, &cos, 0), 0.2);
        assert!(lr_at(0.2, &cos, 50).abs() < 1e-15);
        assert!((lr_at(0.2, &cos, 25) - 0.1).abs() < 1e-15);
        assert!(LrSchedule::Step { milestones: vec![], factor: 1.5 }.validate().is_err());
        assert!(LrSchedule::Cosine { total_epochs: 0 }.validate().is_err());
    }
}
