use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step_count: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

/// Result of [`AdamState::step`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN/Inf; nothing was updated.
    Skipped { param: String },
}

impl AdamState {
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`; moments sized for `params`.
    pub fn new(lr: f32, weight_decay: f32, params: &[(String, Tensor)]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    pub(crate) fn from_parts(
        hyper: [f32; 5],
        step_count: u64,
        first: Vec<Vec<f32>>,
        second: Vec<Vec<f32>>,
    ) -> Self {
        let [lr, beta1, beta2, eps, weight_decay] = hyper;
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count,
            first,
            second,
        }
    }

    /// Decays every parameter by `lr * weight_decay`, then applies the
    /// bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [(String, Tensor)], grads: &[Tensor]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape("adam_step", format!("{} gradients", params.len()), grads.len()));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name} gradient {:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        if let Some((name, _)) = params.iter().zip(grads).find(|(_, g)| !g.is_finite()).map(|(p, g)| (&p.0, g)) {
            log::warn!("skipping optimizer step {}: non-finite gradient for {name}", self.step_count + 1);
            return Ok(StepOutcome::Skipped { param: name.clone() });
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi as f64 / bc1;
                let v_hat = *vi as f64 / bc2;
                *x = *x * decay - (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(StepOutcome::Applied)
    }
}
