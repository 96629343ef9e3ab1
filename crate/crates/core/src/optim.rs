use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per trainable tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    /// Number of updates applied (for bias correction).
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Matrix]) -> Self {
        let z: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            first: z.clone(),
            second: z,
            t: 0,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (p, g) = (p.as_mut_slice(), g.as_slice());
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computed_updates_on_quadratic() {
        // f(w) = (w − 3)², f'(w) = 2(w − 3)
        let lr = 0.1;
        let mut w = Matrix::row_vector(vec![0.0]);
        let mut state = AdamState::zeros_like(&[&w]);

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);

            let grad = Matrix::row_vector(vec![2.0 * (w.get(0, 0) - 3.0)]);
            state.step(&mut [&mut w], &[grad], lr);
            assert!((w.get(0, 0) - x).abs() < 1e-12);
        }
        // first step magnitude is lr regardless of gradient scale
        let first = 0.1 * (-6.0 * 0.1 / 0.1) / ((36.0f64 * 0.001 / 0.001).sqrt() + 1e-8);
        assert!((first + 0.1).abs() < 1e-9);
    }
}
