//! Named-parameter access shared by agents, the optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// A model whose parameters form a stable, ordered, named list. The order
/// defines the canonical layout of flattened gradient vectors.
pub trait ParamSet {
    fn param_names(&self) -> Vec<&'static str>;
    fn params(&self) -> Vec<&Mat>;
    fn params_mut(&mut self) -> Vec<&mut Mat>;
}

/// Concatenate all parameters in canonical order.
pub fn flatten(p: &impl ParamSet) -> Vec<f64> {
    let mut out = Vec::new();
    for m in p.params() {
        out.extend_from_slice(&m.data);
    }
    out
}

/// Inverse of [`flatten`]; the layout must match exactly.
pub fn unflatten(p: &mut impl ParamSet, flat: &[f64]) -> Result<()> {
    let total: usize = p.params().iter().map(|m| m.numel()).sum();
    if flat.len() != total {
        return Err(Error::Contract(format!(
            "unflatten: {} values for {} parameters",
            flat.len(),
            total
        )));
    }
    let mut offset = 0;
    for m in p.params_mut() {
        let n = m.numel();
        m.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

pub fn param_count(p: &impl ParamSet) -> usize {
    p.params().iter().map(|m| m.numel()).sum()
}
