//! Network forward pass against a layer-by-layer reference, loss values and training behaviour.

mod support;

use std::collections::BTreeMap;

use dsn3d_core::layers::ConvSpec;
use dsn3d_core::net::{backward, build_network_with_init, build_network_with_sigma, forward, loss_main, loss_total, Init};
use dsn3d_core::train::{sgd_step, train, Sample, TrainConfig};
use dsn3d_core::volume::{make_phantoms, normalize, PhantomSpec, DEFAULT_WINDOW};
use dsn3d_core::{ArchitectureConfig, Eta, LabelVolume, NetworkParams, ProbMap, Rng, Tensor};
use support::{naive_conv3d, randn, rel_err};

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn conv_relu(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let k = w.shape();
    let spec = ConvSpec {
        geometry: dsn3d_core::layers::Geometry::same([k[2], k[3], k[4]]),
        weight: w.clone(),
        bias: b.clone(),
    };
    let s = x.shape();
    Tensor::new(vec![k[0], s[1], s[2], s[3]], relu(naive_conv3d(x, &spec))).unwrap()
}

fn pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (d, h, w) = (s[1] / 2, s[2] / 2, s[3] / 2);
    let at = |c: usize, z: usize, y: usize, q: usize| x.data()[((c * s[1] + z) * s[2] + y) * s[3] + q];
    let mut out = Vec::new();
    for c in 0..s[0] {
        for z in 0..d {
            for y in 0..h {
                for q in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dq in 0..2 {
                                m = m.max(at(c, 2 * z + dz, 2 * y + dy, 2 * q + dq));
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![s[0], d, h, w], out).unwrap()
}

/// Scatter form of the 3x3x3 stride-2 transposed convolution that doubles extents.
fn upsample_relu(x: &Tensor, w: &Tensor) -> Tensor {
    let s = x.shape();
    let cout = w.shape()[1];
    let n = [2 * s[1], 2 * s[2], 2 * s[3]];
    let mut y = vec![0.0; cout * n[0] * n[1] * n[2]];
    for i in 0..s[0] {
        for z in 0..s[1] {
            for r in 0..s[2] {
                for c in 0..s[3] {
                    let xv = x.data()[((i * s[1] + z) * s[2] + r) * s[3] + c];
                    for o in 0..cout {
                        for kz in 0..3 {
                            for kr in 0..3 {
                                for kc in 0..3 {
                                    let (oz, or, oc) = (2 * z + kz, 2 * r + kr, 2 * c + kc);
                                    if oz < 1 || or < 1 || oc < 1 || oz > n[0] || or > n[1] || oc > n[2] {
                                        continue;
                                    }
                                    let wv = w.data()[(((i * cout + o) * 3 + kz) * 3 + kr) * 3 + kc];
                                    y[((o * n[0] + oz - 1) * n[1] + or - 1) * n[2] + oc - 1] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, n[0], n[1], n[2]], relu(y)).unwrap()
}

fn softmax_score(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let spec = ConvSpec {
        geometry: dsn3d_core::layers::Geometry::same([1, 1, 1]),
        weight: w.clone(),
        bias: b.clone(),
    };
    let logits = naive_conv3d(x, &spec);
    let n = s[1] * s[2] * s[3];
    let mut p = vec![0.0; 2 * n];
    for v in 0..n {
        let (a, c) = (logits[v], logits[n + v]);
        let m = a.max(c);
        let z = (a - m).exp() + (c - m).exp();
        p[v] = (a - m).exp() / z;
        p[n + v] = (c - m).exp() / z;
    }
    p
}

/// Independent composition of the layer definitions.
fn reference_forward(params: &NetworkParams, volume: &Tensor) -> (Vec<f64>, BTreeMap<usize, Vec<f64>>) {
    let mut x = volume.clone();
    let mut branches = BTreeMap::new();
    for (i, c) in params.convs.iter().enumerate() {
        let layer = i + 1;
        let y = conv_relu(&x, &c.weight, &c.bias);
        if let Some(b) = params.branches.get(&layer) {
            let mut t = y.clone();
            for w in &b.deconvs {
                t = upsample_relu(&t, w);
            }
            branches.insert(layer, softmax_score(&t, &b.score.weight, &b.score.bias));
        }
        x = if params.config.pool_after.contains(&layer) { pool(&y) } else { y };
    }
    for w in &params.deconvs {
        x = upsample_relu(&x, w);
    }
    (softmax_score(&x, &params.score.weight, &params.score.bias), branches)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

#[test]
fn forward_matches_layer_by_layer_composition() {
    let mut arch = ArchitectureConfig::uniform(2);
    for c in &mut arch.convs {
        c.kernel = [3, 3, 3];
    }
    for seed in 0..3 {
        let mut rng = Rng::new(seed);
        let params = build_network_with_sigma(&arch, 0.5, &mut rng).unwrap();
        let volume = randn(&[1, 16, 16, 16], &mut rng);
        let out = forward(&params, &volume).unwrap();
        let (last, branches) = reference_forward(&params, &volume);
        assert!(max_rel(out.last.data(), &last) <= 1e-10);
        assert_eq!(out.branches.keys().collect::<Vec<_>>(), branches.keys().collect::<Vec<_>>());
        for (d, p) in &branches {
            assert!(max_rel(out.branches[d].data(), p) <= 1e-10, "branch {d}");
        }
    }
}

fn one_hot(labels: &LabelVolume, p_true: f64) -> Tensor {
    let [d, h, w] = labels.shape();
    let fg: Vec<f64> = labels.data().iter().map(|&l| if l == 1 { p_true } else { 1.0 - p_true }).collect();
    let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
    data.extend(fg);
    Tensor::new(vec![2, d, h, w], data).unwrap()
}

#[test]
fn loss_reference_values() {
    let mut rng = Rng::new(4);
    let labels = support::random_mask([2, 3, 4], 0.5, &mut rng);
    let perfect = ProbMap {
        last: one_hot(&labels, 1.0),
        branches: BTreeMap::new(),
    };
    assert_eq!(loss_main(&perfect, &labels).unwrap(), 0.0);
    let uniform = ProbMap {
        last: one_hot(&labels, 0.5),
        branches: BTreeMap::new(),
    };
    let expected = 24.0 * 2f64.ln();
    assert!((loss_main(&uniform, &labels).unwrap() - expected).abs() < 1e-12);
    let confident = ProbMap {
        last: one_hot(&labels, 0.9),
        branches: BTreeMap::new(),
    };
    assert!((loss_main(&confident, &labels).unwrap() + 24.0 * 0.9f64.ln()).abs() < 1e-12);
}

fn probs_of(labels: &LabelVolume, rng: &mut Rng) -> Tensor {
    let [d, h, w] = labels.shape();
    let fg: Vec<f64> = (0..labels.len()).map(|_| rng.uniform_in(0.05, 0.95)).collect();
    let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
    data.extend(fg);
    Tensor::new(vec![2, d, h, w], data).unwrap()
}

fn nll(p: &Tensor, labels: &LabelVolume) -> f64 {
    let n = labels.len();
    labels
        .data()
        .iter()
        .enumerate()
        .map(|(v, &l)| -p.data()[l as usize * n + v].ln())
        .sum()
}

#[test]
fn total_loss_matches_recomputation() {
    let arch = ArchitectureConfig::uniform(2);
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let params = build_network_with_sigma(&arch, 0.1, &mut rng).unwrap();
        let labels = support::random_mask([4, 4, 4], 0.4, &mut rng);
        let probs = ProbMap {
            last: probs_of(&labels, &mut rng),
            branches: [(3, probs_of(&labels, &mut rng)), (6, probs_of(&labels, &mut rng))].into(),
        };
        let eta: Eta = [(3, rng.uniform()), (6, rng.uniform())].into();
        let lambda = rng.uniform_in(0.0, 1e-2);
        let got = loss_total(&probs, &labels, &params, &eta, lambda).unwrap();
        let norm: f64 = params.tensors().iter().map(|t| t.sum_squares()).sum();
        let expected = nll(&probs.last, &labels)
            + eta[&3] * nll(&probs.branches[&3], &labels)
            + eta[&6] * nll(&probs.branches[&6], &labels)
            + lambda * norm;
        assert!(rel_err(got.total, expected) <= 1e-12, "{} vs {expected}", got.total);
    }
}

#[test]
fn total_loss_is_linear_in_branch_weights() {
    let arch = ArchitectureConfig::uniform(2);
    let mut rng = Rng::new(9);
    let params = build_network_with_sigma(&arch, 0.2, &mut rng).unwrap();
    let volume = randn(&[1, 4, 4, 4], &mut rng);
    let labels = support::random_mask([4, 4, 4], 0.5, &mut rng);
    let probs = forward(&params, &volume).unwrap();
    let at = |e3: f64| loss_total(&probs, &labels, &params, &[(3, e3), (6, 0.4)].into(), 5e-4).unwrap().total;
    let (a, b) = (at(0.1), at(0.7));
    assert!(rel_err(at(0.4), 0.5 * (a + b)) <= 1e-12);
}

#[test]
fn small_gradient_step_does_not_increase_loss() {
    let arch = ArchitectureConfig::uniform(2);
    let eta: Eta = [(3, 0.3), (6, 0.4)].into();
    for seed in 0..3 {
        let mut rng = Rng::new(seed);
        let params = build_network_with_init(&arch, Init::He(1.0), &mut rng).unwrap();
        let volume = randn(&[1, 8, 8, 8], &mut rng);
        let labels = support::random_mask([8, 8, 8], 0.3, &mut rng);
        let (grads, before) = backward(&params, &volume, &labels, &eta, 5e-4).unwrap();
        let stepped = sgd_step(&params, &grads, 1e-6).unwrap();
        let after = loss_total(&forward(&stepped, &volume).unwrap(), &labels, &stepped, &eta, 5e-4).unwrap();
        assert!(after.total <= before.total, "{} > {}", after.total, before.total);
    }
}

fn tiny_samples(cases: usize, seed: u64) -> Vec<Sample> {
    let spec = PhantomSpec {
        shape: [8, 8, 8],
        cases,
        seed,
        ..PhantomSpec::default()
    };
    make_phantoms(&spec)
        .unwrap()
        .into_iter()
        .map(|(v, labels)| Sample {
            input: normalize(&v, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1).unwrap(),
            labels,
        })
        .collect()
}

fn tiny_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: 1e-3,
        epochs,
        seed,
        init: Init::He(0.5),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let arch = ArchitectureConfig::uniform(2);
    let cfg = tiny_config(0, 3);
    let (params, curve) = train(&tiny_samples(2, 0), &[], &arch, &cfg, |_, _| Ok(())).unwrap();
    assert!(curve.records.is_empty());
    assert_eq!(params, build_network_with_init(&arch, cfg.init, &mut Rng::new(3)).unwrap());
}

#[test]
fn training_is_deterministic() {
    let arch = ArchitectureConfig::uniform(2);
    let data = tiny_samples(3, 1);
    let run = || train(&data, &[], &arch, &tiny_config(4, 7), |_, _| Ok(())).unwrap();
    let (p1, c1) = run();
    let (p2, c2) = run();
    assert_eq!(p1, p2);
    assert_eq!(c1, c2);
    let (p3, _) = train(&data, &[], &arch, &tiny_config(4, 8), |_, _| Ok(())).unwrap();
    assert_ne!(p1, p3);
}

#[test]
fn training_reduces_the_main_loss() {
    let arch = ArchitectureConfig::uniform(2);
    let data = tiny_samples(4, 2);
    let mut seen = 0;
    let (_, curve) = train(&data, &[], &arch, &tiny_config(30, 0), |r, _| {
        seen += 1;
        assert_eq!(r.epoch, seen);
        Ok(())
    })
    .unwrap();
    assert_eq!(curve.records.len(), 30);
    let first = curve.records[0].loss_main;
    let last = curve.records[29].loss_main;
    assert!(last < first, "epoch 30 loss {last} not below epoch 1 loss {first}");
}
