use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `grad_out` where `x > 0`, zero elsewhere.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.same_shape(grad_out, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// Per-voxel softmax over the two-class leading axis of `(2, D, H, W)` logits.
pub fn softmax_forward(logits: &Tensor) -> Result<Tensor> {
    let [c, ..] = logits.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("softmax expects 2 classes, got {c}")));
    }
    logits.ensure_finite("softmax logits")?;
    let n = logits.len() / 2;
    let (l0, l1) = logits.data().split_at(n);
    let mut out = vec![0.0; 2 * n];
    let (p0, p1) = out.split_at_mut(n);
    for i in 0..n {
        let m = l0[i].max(l1[i]);
        let e0 = (l0[i] - m).exp();
        let e1 = (l1[i] - m).exp();
        let z = e0 + e1;
        p0[i] = e0 / z;
        p1[i] = e1 / z;
    }
    Ok(Tensor::from_raw(logits.shape().to_vec(), out))
}

/// Gradient of the voxel-summed NLL with respect to the softmax logits:
/// `probs - one_hot(targets)`.
pub fn softmax_nll_backward(probs: &Tensor, targets: &LabelVolume) -> Result<Tensor> {
    check_targets(probs, targets)?;
    let n = targets.len();
    let mut g = probs.data().to_vec();
    for (i, &t) in targets.data().iter().enumerate() {
        g[t as usize * n + i] -= 1.0;
    }
    Ok(Tensor::from_raw(probs.shape().to_vec(), g))
}

/// Probabilities are floored here before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// `sum_i -ln p(t_i | x_i)` over all voxels.
pub fn nll(probs: &Tensor, targets: &LabelVolume) -> Result<f64> {
    check_targets(probs, targets)?;
    let n = targets.len();
    let p = probs.data();
    Ok(targets
        .data()
        .iter()
        .enumerate()
        .map(|(i, &t)| -p[t as usize * n + i].max(LOG_FLOOR).ln())
        .sum())
}

fn check_targets(probs: &Tensor, targets: &LabelVolume) -> Result<()> {
    let [c, d, h, w] = probs.dims4()?;
    if c != 2 || [d, h, w] != targets.shape() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    Ok(())
}
