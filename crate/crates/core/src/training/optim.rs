use crate::model::ModelParams;
use crate::numerics::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with bias correction and a fixed learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .weights()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads` follow the canonical weight order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (((w, g), m), v) in params
            .weights_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *wi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let p0 = ModelParams::init(&ModelConfig::desk_scale(12, 2), 1).unwrap();
        let mut p = p0.clone();
        let grads: Vec<Tensor> = p
            .weights()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), vec![0.7; t.len()]).unwrap())
            .collect();
        let mut adam = Adam::new(&p, 0.0);
        adam.step(&mut p, &grads);
        assert_eq!(p, p0);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = ModelParams::init(&ModelConfig::desk_scale(12, 2), 1).unwrap();
        let before = p.weights().lm_head.data()[0];
        let grads: Vec<Tensor> = p
            .weights()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), vec![-2.0; t.len()]).unwrap())
            .collect();
        Adam::new(&p, 0.01).step(&mut p, &grads);
        assert!((p.weights().lm_head.data()[0] - before - 0.01).abs() < 1e-9);
    }
}
