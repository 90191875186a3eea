//! Brute-force oracles and random instance generators shared by test targets.
//!
//! Nothing here calls the library code it is compared against.

#![allow(dead_code)]

use dsn3d_core::crf::{energy, exact_map, mean_field_infer, CrfParams, SliceProblem};
use dsn3d_core::layers::{conv3d_forward, deconv3d_forward, ConvSpec, DeconvSpec, Geometry};
use dsn3d_core::metrics::{surface_distances, Mask};
use dsn3d_core::tensor::{gaussian_init, inner_product};
use dsn3d_core::{LabelVolume, Rng, Tensor};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    gaussian_init(shape, 0.0, 1.0, rng).unwrap()
}

fn range(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Random input and convolution with kernel 1..=3, stride 1..=2 and padding below the kernel.
pub fn random_conv(rng: &mut Rng) -> (Tensor, ConvSpec) {
    let cin = range(rng, 1, 3);
    let cout = range(rng, 1, 3);
    let mut geometry = Geometry {
        kernel: [1; 3],
        stride: [1; 3],
        padding: [0; 3],
    };
    let mut extent = [0; 3];
    for a in 0..3 {
        geometry.kernel[a] = range(rng, 1, 3);
        geometry.stride[a] = range(rng, 1, 2);
        geometry.padding[a] = rng.below(geometry.kernel[a]);
        extent[a] = range(rng, geometry.kernel[a], 6);
    }
    let k = geometry.kernel;
    let x = randn(&[cin, extent[0], extent[1], extent[2]], rng);
    let spec = ConvSpec {
        geometry,
        weight: randn(&[cout, cin, k[0], k[1], k[2]], rng),
        bias: randn(&[cout], rng),
    };
    (x, spec)
}

/// Direct evaluation of the cross-correlation definition with zero padding.
pub fn naive_conv3d(x: &Tensor, spec: &ConvSpec) -> Vec<f64> {
    let s = x.shape();
    let (cin, n) = (s[0], [s[1], s[2], s[3]]);
    let w = spec.weight.shape();
    let cout = w[0];
    let g = &spec.geometry;
    let out: Vec<usize> = (0..3)
        .map(|a| (n[a] + 2 * g.padding[a] - g.kernel[a]) / g.stride[a] + 1)
        .collect();
    let mut y = Vec::with_capacity(cout * out.iter().product::<usize>());
    for o in 0..cout {
        for z in 0..out[0] {
            for r in 0..out[1] {
                for c in 0..out[2] {
                    let mut acc = spec.bias.data()[o];
                    for i in 0..cin {
                        for kz in 0..w[2] {
                            for kr in 0..w[3] {
                                for kc in 0..w[4] {
                                    let iz = (z * g.stride[0] + kz) as isize - g.padding[0] as isize;
                                    let ir = (r * g.stride[1] + kr) as isize - g.padding[1] as isize;
                                    let ic = (c * g.stride[2] + kc) as isize - g.padding[2] as isize;
                                    if iz < 0 || ir < 0 || ic < 0 {
                                        continue;
                                    }
                                    let (iz, ir, ic) = (iz as usize, ir as usize, ic as usize);
                                    if iz >= n[0] || ir >= n[1] || ic >= n[2] {
                                        continue;
                                    }
                                    let wv = spec.weight.data()[(((o * cin + i) * w[2] + kz) * w[3] + kr) * w[4] + kc];
                                    let xv = x.data()[((i * n[0] + iz) * n[1] + ir) * n[2] + ic];
                                    acc += wv * xv;
                                }
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    y
}

/// Largest relative deviation of the library convolution from the oracle.
pub fn conv_oracle_error(rng: &mut Rng) -> f64 {
    let (x, spec) = random_conv(rng);
    let fast = conv3d_forward(&x, &spec).unwrap();
    let slow = naive_conv3d(&x, &spec);
    assert_eq!(fast.len(), slow.len());
    fast.data().iter().zip(&slow).map(|(&a, &b)| rel_err(a, b)).fold(0.0, f64::max)
}

/// `|<conv(y), x> - <y, deconv(x)>| / (|conv(y)| |x|)` for a random matched pair.
///
/// The transposed convolution shares the convolution's weight and geometry,
/// with output padding chosen so it maps back onto `y`'s grid.
pub fn adjoint_discrepancy(rng: &mut Rng) -> f64 {
    let (y, mut conv) = random_conv(rng);
    conv.bias = Tensor::zeros(&[conv.weight.shape()[0]]);
    let cy = conv3d_forward(&y, &conv).unwrap();
    let x = randn(cy.shape(), rng);
    let g = conv.geometry;
    let mut output_padding = [0; 3];
    for a in 0..3 {
        let m = cy.shape()[a + 1];
        let n = y.shape()[a + 1];
        output_padding[a] = n + 2 * g.padding[a] - ((m - 1) * g.stride[a] + g.kernel[a]);
    }
    let deconv = DeconvSpec {
        geometry: g,
        output_padding,
        weight: conv.weight.clone(),
    };
    let dx = deconv3d_forward(&x, &deconv).unwrap();
    assert_eq!(dx.shape(), y.shape());
    let lhs = inner_product(&cy, &x).unwrap();
    let rhs = inner_product(&y, &dx).unwrap();
    let scale = (cy.sum_squares() * x.sum_squares()).sqrt().max(f64::MIN_POSITIVE);
    (lhs - rhs).abs() / scale
}

/// A random slice: gray values in `[0, 255]`, unaries in `[0.02, 0.98]`.
pub struct RandomSlice {
    pub height: usize,
    pub width: usize,
    pub intensity: Vec<f64>,
    pub fg: Vec<f64>,
}

impl RandomSlice {
    pub fn new(height: usize, width: usize, rng: &mut Rng) -> Self {
        let n = height * width;
        RandomSlice {
            height,
            width,
            intensity: (0..n).map(|_| rng.uniform_in(0.0, 255.0)).collect(),
            fg: (0..n).map(|_| rng.uniform_in(0.02, 0.98)).collect(),
        }
    }

    pub fn problem(&self) -> SliceProblem {
        SliceProblem::new(
            self.height,
            self.width,
            self.intensity.clone(),
            self.fg.iter().map(|&p| [1.0 - p, p]).collect(),
        )
        .unwrap()
    }
}

pub fn random_crf_params(rng: &mut Rng) -> CrfParams {
    CrfParams {
        mu1: rng.uniform_in(0.0, 4.0),
        mu2: rng.uniform_in(0.0, 4.0),
        theta_alpha: rng.uniform_in(1.0, 10.0),
        theta_beta: rng.uniform_in(3.0, 30.0),
        theta_gamma: rng.uniform_in(1.0, 10.0),
        ..CrfParams::default()
    }
}

/// Energy from the written-out potentials, every unordered pair visited once.
pub fn naive_energy(labels: &[u8], s: &RandomSlice, p: &CrfParams) -> f64 {
    let n = labels.len();
    let mut e = 0.0;
    for i in 0..n {
        let pi = if labels[i] == 1 { s.fg[i] } else { 1.0 - s.fg[i] };
        e -= pi.ln();
    }
    for i in 0..n {
        for j in 0..n {
            if i >= j || labels[i] == labels[j] {
                continue;
            }
            let dy = (i / s.width) as f64 - (j / s.width) as f64;
            let dx = (i % s.width) as f64 - (j % s.width) as f64;
            let d2 = dy * dy + dx * dx;
            let di = s.intensity[i] - s.intensity[j];
            let appearance = (-d2 / (2.0 * p.theta_alpha * p.theta_alpha)
                - di * di / (2.0 * p.theta_beta * p.theta_beta))
                .exp();
            let smoothness = (-d2 / (2.0 * p.theta_gamma * p.theta_gamma)).exp();
            e += p.mu1 * appearance + p.mu2 * smoothness;
        }
    }
    e
}

pub fn energy_oracle_error(rng: &mut Rng) -> f64 {
    let h = range(rng, 1, 5);
    let w = range(rng, 1, 5);
    let s = RandomSlice::new(h, w, rng);
    let p = random_crf_params(rng);
    let labels: Vec<u8> = (0..h * w).map(|_| rng.below(2) as u8).collect();
    rel_err(energy(&labels, &s.problem(), &p).unwrap(), naive_energy(&labels, &s, &p))
}

/// Random mask with at least one voxel set.
pub fn random_mask(shape: [usize; 3], density: f64, rng: &mut Rng) -> LabelVolume {
    let n: usize = shape.iter().product();
    let mut data: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < density)).collect();
    data[rng.below(n)] = 1;
    LabelVolume::new(shape, data).unwrap()
}

/// Surface voxels by the 6-neighbor rule, out-of-grid counting as background, in mm.
fn naive_surface(m: &LabelVolume, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [d, h, w] = m.shape();
    let on = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m.get(z as usize, y as usize, x as usize) == 1
    };
    let mut pts = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !on(z, y, x) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| !on(z + a, y + b, x + c)) {
                    pts.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    pts
}

/// `(AvgD, RMSD, MaxD)` by exhaustive nearest-neighbor search.
pub fn naive_surface_distances(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3]) -> (f64, f64, f64) {
    let sa = naive_surface(a, spacing);
    let sb = naive_surface(b, spacing);
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut dists: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    dists.extend(sb.iter().map(|q| nearest(q, &sa)));
    let n = dists.len() as f64;
    let avg = dists.iter().sum::<f64>() / n;
    let rms = (dists.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let max = dists.iter().fold(0.0f64, |m, &d| m.max(d));
    (avg, rms, max)
}

pub fn surface_oracle_error(rng: &mut Rng) -> f64 {
    let shape = [range(rng, 1, 6), range(rng, 1, 6), range(rng, 1, 6)];
    let spacing = [rng.uniform_in(0.5, 3.0), rng.uniform_in(0.5, 2.0), rng.uniform_in(0.5, 2.0)];
    let density = rng.uniform_in(0.1, 0.9);
    let a = random_mask(shape, density, rng);
    let b = random_mask(shape, density, rng);
    let fast = surface_distances(
        &Mask::new(a.clone(), spacing).unwrap(),
        &Mask::new(b.clone(), spacing).unwrap(),
    )
    .unwrap();
    let slow = naive_surface_distances(&a, &b, spacing);
    [rel_err(fast.0, slow.0), rel_err(fast.1, slow.1), rel_err(fast.2, slow.2)]
        .into_iter()
        .fold(0.0, f64::max)
}

/// Outcome of mean-field inference on one random 3x3 slice.
pub struct MeanFieldTrial {
    pub mean_field: f64,
    pub unary_argmax: f64,
    pub exact: f64,
}

pub fn mean_field_trial(rng: &mut Rng) -> MeanFieldTrial {
    let s = RandomSlice::new(3, 3, rng);
    let p = CrfParams {
        iterations: 10,
        ..random_crf_params(rng)
    };
    let problem = s.problem();
    let mf = mean_field_infer(&problem, &p).unwrap();
    let exact = exact_map(&problem, &p).unwrap();
    MeanFieldTrial {
        mean_field: energy(&mf.labels, &problem, &p).unwrap(),
        unary_argmax: energy(&problem.unary_labels(), &problem, &p).unwrap(),
        exact: energy(&exact, &problem, &p).unwrap(),
    }
}
