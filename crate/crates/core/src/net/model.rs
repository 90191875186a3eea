//! Forward pass, the three-part training objective and its exact gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::layers::{
    conv3d_backward_input, conv3d_backward_params, conv3d_forward, deconv3d_backward,
    deconv3d_forward, maxpool3d_backward, maxpool3d_forward, nll, relu_backward, relu_forward,
    softmax_forward, softmax_nll_backward, PoolRecord,
};
use crate::net::params::{deconv_spec, BranchParams, ConvParams, NetworkParams};
use crate::tensor::{axpy, Tensor};

/// Balancing weights `eta_d`, keyed by supervised layer.
pub type Eta = BTreeMap<usize, f64>;

/// Class probabilities `(2, D, H, W)` from the last layer and each branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub last: Tensor,
    pub branches: BTreeMap<usize, Tensor>,
}

impl ProbMap {
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.last.shape();
        [s[1], s[2], s[3]]
    }

    /// Argmax of the last-layer prediction; ties go to background.
    pub fn argmax_labels(&self) -> LabelVolume {
        argmax_labels(&self.last)
    }

    pub fn branch(&self, d: usize) -> Result<&Tensor> {
        self.branches
            .get(&d)
            .ok_or_else(|| Error::Param(format!("no branch prediction for layer {d}")))
    }
}

pub fn argmax_labels(probs: &Tensor) -> LabelVolume {
    let s = probs.shape();
    let n = probs.len() / 2;
    let (p0, p1) = probs.data().split_at(n);
    let data = p0.iter().zip(p1).map(|(a, b)| (b > a) as u8).collect();
    LabelVolume::new([s[1], s[2], s[3]], data).expect("binary labels")
}

/// Loss value with each term of the objective reported separately.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    /// Unweighted auxiliary losses `L_d`.
    pub aux: BTreeMap<usize, f64>,
    /// `lambda (||W||^2 + sum_d ||w_d||^2)`.
    pub weight_decay: f64,
}

struct ConvCache {
    input: Tensor,
    output: Tensor,
}

struct BranchTrace {
    deconvs: Vec<ConvCache>,
    score_input: Tensor,
    probs: Tensor,
}

/// Activations retained for the backward pass.
struct Trace {
    convs: Vec<ConvCache>,
    pools: Vec<Option<PoolRecord>>,
    deconvs: Vec<ConvCache>,
    score_input: Tensor,
    probs: Tensor,
    branches: BTreeMap<usize, BranchTrace>,
}

fn check_volume(params: &NetworkParams, volume: &Tensor) -> Result<()> {
    let [c, d, h, w] = volume.dims4()?;
    if c != params.config.in_channels {
        return Err(Error::Shape(format!(
            "network expects {} input channels, got {c}",
            params.config.in_channels
        )));
    }
    params.config.check_input([d, h, w])
}

fn conv_relu(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    Ok(relu_forward(&conv3d_forward(x, &p.spec())?))
}

fn run_branch(tap: &Tensor, b: &BranchParams) -> Result<BranchTrace> {
    let mut x = tap.clone();
    let mut deconvs = Vec::new();
    for w in &b.deconvs {
        let y = relu_forward(&deconv3d_forward(&x, &deconv_spec(w))?);
        deconvs.push(ConvCache {
            input: x,
            output: y.clone(),
        });
        x = y;
    }
    let probs = softmax_forward(&conv3d_forward(&x, &b.score.spec())?)?;
    Ok(BranchTrace {
        deconvs,
        score_input: x,
        probs,
    })
}

fn forward_trace(params: &NetworkParams, volume: &Tensor) -> Result<Trace> {
    check_volume(params, volume)?;
    let cfg = &params.config;
    let mut x = volume.clone();
    let mut convs = Vec::new();
    let mut pools = Vec::new();
    let mut branches = BTreeMap::new();
    for (i, p) in params.convs.iter().enumerate() {
        let layer = i + 1;
        let y = conv_relu(&x, p)?;
        if let Some(b) = params.branches.get(&layer) {
            branches.insert(layer, run_branch(&y, b)?);
        }
        convs.push(ConvCache {
            input: x,
            output: y.clone(),
        });
        if cfg.pool_after.contains(&layer) {
            let (pooled, rec) = maxpool3d_forward(&y)?;
            pools.push(Some(rec));
            x = pooled;
        } else {
            pools.push(None);
            x = y;
        }
    }
    let mut deconvs = Vec::new();
    for w in &params.deconvs {
        let y = relu_forward(&deconv3d_forward(&x, &deconv_spec(w))?);
        deconvs.push(ConvCache {
            input: x,
            output: y.clone(),
        });
        x = y;
    }
    let probs = softmax_forward(&conv3d_forward(&x, &params.score.spec())?)?;
    Ok(Trace {
        convs,
        pools,
        deconvs,
        score_input: x,
        probs,
        branches,
    })
}

/// Runs the network on a `(1, D, H, W)` volume.
pub fn forward(params: &NetworkParams, volume: &Tensor) -> Result<ProbMap> {
    let t = forward_trace(params, volume)?;
    Ok(ProbMap {
        last: t.probs,
        branches: t.branches.into_iter().map(|(d, b)| (d, b.probs)).collect(),
    })
}

/// Rectified output of every mainstream convolution, for inspection.
pub fn conv_activations(params: &NetworkParams, volume: &Tensor) -> Result<Vec<Tensor>> {
    Ok(forward_trace(params, volume)?
        .convs
        .into_iter()
        .map(|c| c.output)
        .collect())
}

/// Voxel-summed negative log-likelihood of the last-layer prediction.
pub fn loss_main(probmap: &ProbMap, labels: &LabelVolume) -> Result<f64> {
    nll(&probmap.last, labels)
}

/// Voxel-summed negative log-likelihood of branch `d`.
pub fn loss_aux(probmap: &ProbMap, labels: &LabelVolume, d: usize) -> Result<f64> {
    nll(probmap.branch(d)?, labels)
}

fn check_weights(params: &NetworkParams, eta: &Eta, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Param(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if !eta.keys().eq(params.branches.keys()) {
        return Err(Error::Param(format!(
            "eta keys {:?} do not match supervised layers {:?}",
            eta.keys().collect::<Vec<_>>(),
            params.branches.keys().collect::<Vec<_>>()
        )));
    }
    if let Some((d, e)) = eta.iter().find(|(_, &e)| !(e >= 0.0) || !e.is_finite()) {
        return Err(Error::Param(format!("eta for layer {d} must be >= 0, got {e}")));
    }
    Ok(())
}

/// `L(X; W) + sum_d eta_d L_d + lambda (||W||^2 + sum_d ||w_d||^2)`.
pub fn loss_total(
    probmap: &ProbMap,
    labels: &LabelVolume,
    params: &NetworkParams,
    eta: &Eta,
    lambda: f64,
) -> Result<LossBreakdown> {
    check_weights(params, eta, lambda)?;
    let main = loss_main(probmap, labels)?;
    let mut aux = BTreeMap::new();
    let mut total = main;
    for (&d, &e) in eta {
        let l = loss_aux(probmap, labels, d)?;
        total += e * l;
        aux.insert(d, l);
    }
    let mut norm = params.mainstream_sum_squares();
    for &d in params.branches.keys() {
        norm += params.branch_sum_squares(d)?;
    }
    let weight_decay = lambda * norm;
    Ok(LossBreakdown {
        total: total + weight_decay,
        main,
        aux,
        weight_decay,
    })
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    t.map(|v| v * s)
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Back-propagates through `score -> relu(deconv)...` and returns the
/// gradient reaching the chain's input, accumulating parameter gradients.
fn backward_head(
    deconvs: &[ConvCache],
    deconv_weights: &[Tensor],
    score_input: &Tensor,
    score: &ConvParams,
    grad_logits: &Tensor,
    grad_deconvs: &mut [Tensor],
    grad_score: &mut ConvParams,
) -> Result<Tensor> {
    let spec = score.spec();
    let (gw, gb) = conv3d_backward_params(score_input, &spec, grad_logits)?;
    grad_score.weight = gw;
    grad_score.bias = gb;
    let mut g = conv3d_backward_input(score_input.shape(), &spec, grad_logits)?;
    for (j, cache) in deconvs.iter().enumerate().rev() {
        let g_pre = relu_backward(&cache.output, &g)?;
        let grads = deconv3d_backward(&cache.input, &deconv_spec(&deconv_weights[j]), &g_pre)?;
        grad_deconvs[j] = grads.weight;
        g = grads.input;
    }
    Ok(g)
}

/// Exact gradient of [`loss_total`] with respect to every parameter,
/// together with the loss evaluated at `params`.
pub fn backward(
    params: &NetworkParams,
    volume: &Tensor,
    labels: &LabelVolume,
    eta: &Eta,
    lambda: f64,
) -> Result<(NetworkParams, LossBreakdown)> {
    check_weights(params, eta, lambda)?;
    let trace = forward_trace(params, volume)?;
    let probmap = ProbMap {
        last: trace.probs.clone(),
        branches: trace
            .branches
            .iter()
            .map(|(&d, b)| (d, b.probs.clone()))
            .collect(),
    };
    let loss = loss_total(&probmap, labels, params, eta, lambda)?;
    let mut grads = params.zeros_like();

    // Branch heads, scaled by their balancing weights.
    let mut tap_grads: BTreeMap<usize, Tensor> = BTreeMap::new();
    for (&d, bt) in &trace.branches {
        let e = eta[&d];
        if e == 0.0 {
            continue;
        }
        let g_logits = scaled(&softmax_nll_backward(&bt.probs, labels)?, e);
        let bp = &params.branches[&d];
        let bg = grads.branches.get_mut(&d).expect("branch gradient slot");
        let g = backward_head(
            &bt.deconvs,
            &bp.deconvs,
            &bt.score_input,
            &bp.score,
            &g_logits,
            &mut bg.deconvs,
            &mut bg.score,
        )?;
        tap_grads.insert(d, g);
    }

    // Mainstream head.
    let g_logits = softmax_nll_backward(&trace.probs, labels)?;
    let mut g = backward_head(
        &trace.deconvs,
        &params.deconvs,
        &trace.score_input,
        &params.score,
        &g_logits,
        &mut grads.deconvs,
        &mut grads.score,
    )?;

    // Trunk.
    for (i, cache) in trace.convs.iter().enumerate().rev() {
        let layer = i + 1;
        if let Some(rec) = &trace.pools[i] {
            g = maxpool3d_backward(rec, &g)?;
        }
        if let Some(tg) = tap_grads.get(&layer) {
            add_into(&mut g, tg);
        }
        let g_pre = relu_backward(&cache.output, &g)?;
        let spec = params.convs[i].spec();
        let (gw, gb) = conv3d_backward_params(&cache.input, &spec, &g_pre)?;
        grads.convs[i].weight = gw;
        grads.convs[i].bias = gb;
        if i > 0 {
            g = conv3d_backward_input(cache.input.shape(), &spec, &g_pre)?;
        }
    }

    if lambda > 0.0 {
        for (gt, pt) in grads.tensors_mut().into_iter().zip(params.tensors()) {
            *gt = axpy(2.0 * lambda, pt, gt)?;
        }
    }
    for (name, t) in grads.named_tensors() {
        t.ensure_finite(&format!("gradient of {name}"))?;
    }
    Ok((grads, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, ArchitectureConfig};
    use crate::rng::Rng;
    use crate::tensor::gaussian_init;

    fn tiny() -> (NetworkParams, Tensor, LabelVolume) {
        let mut rng = Rng::new(5);
        let p = build_network(&ArchitectureConfig::uniform(2), &mut rng).unwrap();
        let x = gaussian_init(&[1, 8, 8, 8], 0.5, 0.2, &mut rng).unwrap();
        let labels = LabelVolume::new(
            [8, 8, 8],
            (0..512).map(|i| (rng.uniform() < 0.3 + 0.001 * i as f64) as u8).collect(),
        )
        .unwrap();
        (p, x, labels)
    }

    #[test]
    fn output_matches_input_extent() {
        let (p, x, _) = tiny();
        let pm = forward(&p, &x).unwrap();
        assert_eq!(pm.last.shape(), &[2, 8, 8, 8]);
        for b in pm.branches.values() {
            assert_eq!(b.shape(), &[2, 8, 8, 8]);
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let (p, x, labels) = tiny();
        let z = p.zeros_like();
        let pm = forward(&z, &x).unwrap();
        assert!(pm.last.data().iter().all(|&v| v == 0.5));
        assert!(pm.branches.values().all(|b| b.data().iter().all(|&v| v == 0.5)));
        let l = loss_main(&pm, &labels).unwrap();
        assert!((l - 512.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn indivisible_input_rejected() {
        let (p, _, _) = tiny();
        assert!(forward(&p, &Tensor::zeros(&[1, 8, 6, 8])).is_err());
        assert!(forward(&p, &Tensor::zeros(&[2, 8, 8, 8])).is_err());
    }

    #[test]
    fn loss_total_degenerates_to_main() {
        let (p, x, labels) = tiny();
        let pm = forward(&p, &x).unwrap();
        let eta: Eta = [(3, 0.0), (6, 0.0)].into();
        let lb = loss_total(&pm, &labels, &p, &eta, 0.0).unwrap();
        assert_eq!(lb.total, loss_main(&pm, &labels).unwrap());
    }

    #[test]
    fn loss_total_rejects_bad_weights() {
        let (p, x, labels) = tiny();
        let pm = forward(&p, &x).unwrap();
        let bad: Eta = [(3, -0.1), (6, 0.0)].into();
        assert!(loss_total(&pm, &labels, &p, &bad, 0.0).is_err());
        let good: Eta = [(3, 0.1), (6, 0.0)].into();
        assert!(loss_total(&pm, &labels, &p, &good, -1.0).is_err());
        let missing: Eta = [(3, 0.1)].into();
        assert!(loss_total(&pm, &labels, &p, &missing, 0.0).is_err());
        assert!(loss_aux(&pm, &labels, 4).is_err());
    }

    #[test]
    fn zero_eta_leaves_only_decay_on_branches() {
        let (p, x, labels) = tiny();
        let eta: Eta = [(3, 0.0), (6, 0.0)].into();
        let lambda = 0.25;
        let (g, _) = backward(&p, &x, &labels, &eta, lambda).unwrap();
        for d in [3, 6] {
            let gb = &g.branches[&d];
            let pb = &p.branches[&d];
            for (gt, pt) in gb.deconvs.iter().zip(&pb.deconvs) {
                for (a, b) in gt.data().iter().zip(pt.data()) {
                    assert_eq!(*a, 2.0 * lambda * b);
                }
            }
            for (a, b) in gb.score.weight.data().iter().zip(pb.score.weight.data()) {
                assert_eq!(*a, 2.0 * lambda * b);
            }
        }
    }

    #[test]
    fn branch_ignores_deeper_layers() {
        let (p, x, _) = tiny();
        let before = forward(&p, &x).unwrap();
        let mut q = p.clone();
        q.convs[3].weight.data_mut()[0] += 0.5;
        q.convs[5].bias.data_mut()[0] += 0.5;
        let after = forward(&q, &x).unwrap();
        assert_eq!(before.branches[&3], after.branches[&3]);
        assert_ne!(before.branches[&6], after.branches[&6]);
        assert_ne!(before.last, after.last);
    }
}
