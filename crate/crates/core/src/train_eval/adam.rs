use sdsnet_tensor::{Element, Tensor};

use super::{TrainConfig, TrainError};

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Element>(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One Adam update with bias correction. Parameters without a gradient are
/// treated as having a zero gradient. Moments are kept in f64.
pub fn adam_step<T: Element>(
    params: &mut [Tensor<T>],
    names: &[String],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
    assert_eq!(params.len(), state.m.len(), "state built for these parameters");
    let step = state.step + 1;
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.dims() != params[i].dims() {
                return Err(TrainError::Gradient(format!("{}: gradient dims {:?} vs {:?}", names[i], g.dims(), params[i].dims())));
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TrainError::Gradient(format!(
                    "{}[{j}]: non-finite gradient {} at step {step}",
                    names[i],
                    g.data()[j]
                )));
            }
        }
    }
    state.step = step;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (i, param) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_ref().map(Tensor::data);
        for (j, theta) in param.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j].as_f64());
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *theta = T::of(theta.as_f64() - update);
        }
    }
    Ok(())
}
