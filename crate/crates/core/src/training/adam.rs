use crate::networks::NetworkParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_network(net: &NetworkParams) -> Self {
        Self::new(net.params().iter().map(|(_, t)| t.numel()))
    }

    /// Bias-corrected Adam update, in place. A tensor whose gradient is
    /// missing is treated as zero-gradient; one with a non-finite gradient
    /// is left untouched (moments included) and logged.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
        grads: &[Option<&[f32]>],
        lr: f64,
        hp: AdamHyper,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = hp.eps as f32;
        for (i, p) in params.into_iter().enumerate() {
            let g = grads.get(i).copied().flatten();
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    log::warn!("adam: non-finite gradient in tensor {i}, update skipped");
                    continue;
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *w -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}
