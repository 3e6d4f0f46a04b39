use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .params
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.params.len() || state.m.len() != params.params.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Config(format!(
                "adam: gradient of {} has shape {:?}, expected {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let mut data = p.value.data().to_vec();
        for (i, (&gi, w)) in g.data().iter().zip(data.iter_mut()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.value = Tensor::new(p.value.shape().to_vec(), data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, ConvBlock, Pooling};

    fn params() -> ModelParams {
        let arch = Architecture {
            input_channels: 1,
            input_size: 4,
            conv: vec![ConvBlock { channels: 1, kernel: 1, stride: 1 }],
            pooling: Pooling::Flatten,
            dense_hidden: vec![],
            classes: 2,
            target_layer: 0,
        };
        ModelParams::init(&arch, 0).unwrap()
    }

    fn grads_like(p: &ModelParams, value: f64) -> Vec<Tensor> {
        p.params.iter().map(|q| Tensor::full(q.value.shape(), value)).collect()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        let g = grads_like(&p, 1.0);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        let m_after_one = s.m[0][0];
        let mut q = before.clone();
        let mut s2 = AdamState::new(&q);
        let g = grads_like(&q, 0.0);
        adam_step(&mut q, &g, &mut s2, &cfg).unwrap();
        assert_eq!(q, before);
        let g = grads_like(&p, 0.0);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert!(s.m[0][0].abs() < m_after_one.abs());
    }

    /// Scalar Adam written out by hand.
    fn scalar_adam(mut w: f64, grads: &[f64], cfg: &AdamConfig) -> Vec<f64> {
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = vec![];
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            out.push(w);
        }
        out
    }

    #[test]
    fn matches_scalar_oracle_for_three_steps() {
        let cfg = AdamConfig::default();
        let gs = [0.5, -1.25, 2.0];
        let mut p = params();
        let w0 = p.params[0].value.data()[0];
        let expected = scalar_adam(w0, &gs, &cfg);
        let mut s = AdamState::new(&p);
        for (k, &g) in gs.iter().enumerate() {
            let g = grads_like(&p, g);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            assert!((p.params[0].value.data()[0] - expected[k]).abs() < 1e-15);
        }
        // first step moves by ~lr against the gradient sign
        assert!((expected[0] - (w0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut p = params();
        let vals: Vec<Tensor> = p.params.iter().map(|q| Tensor::full(q.value.shape(), 0.25)).collect();
        p.set_values(vals).unwrap();
        let mut s = AdamState::new(&p);
        let g = grads_like(&p, 0.7);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        let w = p.params[2].value.data();
        assert!(w.iter().all(|&x| x == w[0]));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = params();
        let mut s = AdamState::new(&p);
        let mut g = grads_like(&p, 1.0);
        g[0] = Tensor::vector(vec![1.0; 7]);
        assert!(adam_step(&mut p, &g, &mut s, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut p, &g[1..], &mut s, &AdamConfig::default()).is_err());
    }
}
