use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {weight_decay} must be nonnegative"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        })
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    /// One update over named parameters:
    /// `v ← momentum·v + grad + weight_decay·p`, then `p ← p − lr·v`.
    ///
    /// Consumes every gradient. Nothing is written if any gradient is missing
    /// or any value is non-finite.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>) -> Result<()> {
        let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            let g = p.grad().ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            if !g.iter().all(|v| v.is_finite()) || !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
            if let Some(buf) = self.buffers.get(*name) {
                if buf.len() != p.numel() {
                    return Err(Error::shape(
                        format!("momentum buffer `{name}`"),
                        format!("{} values for a {}-value parameter", buf.len(), p.numel()),
                    ));
                }
            }
        }
        for (name, p) in params.iter_mut() {
            let grad = p.take_grad().expect("checked above");
            let buf = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, v), g) in p.data_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}
