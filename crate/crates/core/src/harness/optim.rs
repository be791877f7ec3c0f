use crate::error::{dim_err, Error, Result};
use crate::numkernel::{Param, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Moments as named tensors (`adam.m.<param>`, `adam.v.<param>`).
    pub fn to_named(&self, params: &[Param<T>]) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (p, m) in params.iter().zip(&self.m) {
            out.push((format!("adam.m.{}", p.name), m.cast()));
        }
        for (p, v) in params.iter().zip(&self.v) {
            out.push((format!("adam.v.{}", p.name), v.cast()));
        }
        out
    }

    pub fn from_named(params: &[Param<T>], step: u64, named: &[(String, Tensor<f64>)]) -> Result<Self> {
        let mut st = Self::new(params);
        st.step = step;
        for (name, t) in named {
            let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                (&mut st.m, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (&mut st.v, p)
            } else {
                return Err(Error::Format(format!("unknown optimizer tensor `{name}`")));
            };
            let i = params
                .iter()
                .position(|p| p.name == pname)
                .ok_or_else(|| Error::Format(format!("optimizer tensor for unknown parameter `{pname}`")))?;
            if t.shape() != params[i].value.shape() {
                return Err(dim_err!("optimizer tensor `{name}` has shape {:?}", t.shape()));
            }
            slot[i] = t.cast();
        }
        Ok(st)
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
///
/// A non-finite gradient aborts the step before anything is modified.
pub fn adam_step<T: Scalar>(params: &mut [Param<T>], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(dim_err!("optimizer state covers {} of {} parameters", state.m.len(), params.len()));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if m.shape() != p.value.shape() {
            return Err(dim_err!("optimizer state shape mismatch for {}", p.name));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at {}[{i}]",
                p.grad.data()[i],
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step_size = T::lit(cfg.lr / (1.0 - cfg.beta1.powf(t)));
    let bc2 = T::lit(1.0 - cfg.beta2.powf(t));
    let eps = T::lit(cfg.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            *w -= step_size * m[i] / ((v[i] / bc2).sqrt() + eps);
        }
    }
    Ok(())
}
