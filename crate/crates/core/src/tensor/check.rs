//! Central finite differences over the named inputs of a recorded graph.
//!
//! These only use [`Graph::evaluate`], never the backward sweep, so they
//! serve as an independent oracle for analytic gradients.

use std::collections::HashMap;

use super::{Graph, NodeId, Result, Tensor};

/// Central-difference gradient of the scalar `root` with respect to the
/// named input `name`, with step `h` on every entry.
pub fn numeric_gradient(graph: &Graph, root: NodeId, name: &str, h: f64) -> Result<Tensor> {
    let id = graph
        .lookup(name)
        .ok_or_else(|| super::TensorError::UnknownInput(name.to_string()))?;
    let base = graph.value(id).clone();
    let mut grad = Tensor::zeros(base.shape().to_vec());
    let mut inputs = HashMap::new();
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        inputs.insert(name.to_string(), plus);
        let fp = graph.evaluate(root, &inputs)?.item();
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        inputs.insert(name.to_string(), minus);
        let fm = graph.evaluate(root, &inputs)?.item();
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entrywise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks every trainable named input of `graph` and returns the worst
/// relative error together with the offending input name.
pub fn check_all(graph: &Graph, root: NodeId, h: f64, floor: f64) -> Result<(f64, String)> {
    let grads = graph.backward(root)?;
    let mut names: Vec<&str> = grads.names().collect();
    names.sort_unstable();
    let mut worst = (0.0, String::new());
    for name in names {
        let numeric = numeric_gradient(graph, root, name, h)?;
        let err = max_relative_error(grads.get(name).expect("named"), &numeric, floor);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err.max(worst.0), if err >= worst.0 { name.to_string() } else { worst.1 });
        }
    }
    Ok(worst)
}
