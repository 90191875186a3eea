//! Fully connected two-label CRF on transverse slices.
//!
//! Unaries are a convex blend of the last-layer and branch probabilities. The
//! pairwise term between pixels `i` and `j` is
//!
//! ```text
//! phi(i, j) = mu1 exp(-|s_i - s_j|^2 / 2 theta_a^2 - |I_i - I_j|^2 / 2 theta_b^2)
//!           + mu2 exp(-|s_i - s_j|^2 / 2 theta_g^2)
//! ```
//!
//! with `s` the pixel position in voxel units and `I` the gray value, paid once
//! per unordered pair whose labels differ. Gray values are the normalized
//! intensities scaled by [`GRAY_SCALE`].

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::{join, parse_list, KvMap};
use crate::labels::LabelVolume;
use crate::layers::LOG_FLOOR;
use crate::net::ProbMap;
use crate::tensor::Tensor;

/// Factor from `[0, 1]` intensities to gray values.
pub const GRAY_SCALE: f64 = 255.0;

/// Message passing ignores pairs farther apart than this many bandwidths.
pub const CUTOFF_BANDWIDTHS: f64 = 10.0;

/// Mean-field stops early once no marginal moves by more than this.
pub const CONVERGENCE_TOL: f64 = 1e-5;

/// Slices with at most this many pixels get precomputed kernel matrices.
const DENSE_LIMIT: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// Blend weight per branch layer; the last layer gets `1 - sum(tau)`.
    pub tau: BTreeMap<usize, f64>,
    pub mu1: f64,
    pub mu2: f64,
    /// Appearance kernel spatial bandwidth, voxels.
    pub theta_alpha: f64,
    /// Appearance kernel gray-value bandwidth.
    pub theta_beta: f64,
    /// Smoothness kernel spatial bandwidth, voxels.
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            tau: BTreeMap::new(),
            mu1: 1.0,
            mu2: 1.0,
            theta_alpha: 5.0,
            theta_beta: 10.0,
            theta_gamma: 3.0,
            iterations: 10,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau.values().any(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(Error::Param(format!("tau weights must be >= 0, got {:?}", self.tau)));
        }
        let sum: f64 = self.tau.values().sum();
        if sum > 1.0 + 1e-12 {
            return Err(Error::Param(format!("tau weights sum to {sum} > 1")));
        }
        if !(self.mu1 >= 0.0 && self.mu2 >= 0.0) || !self.mu1.is_finite() || !self.mu2.is_finite() {
            return Err(Error::Param(format!("mu1, mu2 must be >= 0, got {}, {}", self.mu1, self.mu2)));
        }
        for (name, t) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Param(format!("{name} must be > 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        for (d, t) in &self.tau {
            kv.set(format!("tau.{d}"), t);
        }
        kv.set("mu1", self.mu1);
        kv.set("mu2", self.mu2);
        kv.set("theta_alpha", self.theta_alpha);
        kv.set("theta_beta", self.theta_beta);
        kv.set("theta_gamma", self.theta_gamma);
        kv.set("iterations", self.iterations);
        kv
    }

    /// Overrides fields present in `kv`; any `tau.*` key replaces the whole blend map.
    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        let taus = kv.with_prefix("tau.");
        if taus.keys().next().is_some() {
            self.tau.clear();
            for (d, v) in taus.iter() {
                let layer: usize = d.parse().map_err(|_| Error::Config(format!("bad key `tau.{d}`")))?;
                let t: f64 = v.parse().map_err(|_| Error::Config(format!("bad value for `tau.{d}`: `{v}`")))?;
                self.tau.insert(layer, t);
            }
        }
        self.mu1 = kv.parsed_or("mu1", self.mu1)?;
        self.mu2 = kv.parsed_or("mu2", self.mu2)?;
        self.theta_alpha = kv.parsed_or("theta_alpha", self.theta_alpha)?;
        self.theta_beta = kv.parsed_or("theta_beta", self.theta_beta)?;
        self.theta_gamma = kv.parsed_or("theta_gamma", self.theta_gamma)?;
        self.iterations = kv.parsed_or("iterations", self.iterations)?;
        self.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn is_crf_key(key: &str) -> bool {
        matches!(key, "mu1" | "mu2" | "theta_alpha" | "theta_beta" | "theta_gamma" | "iterations")
            || key.starts_with("tau.")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvMap::read(path)?;
        kv.reject_unknown(Self::is_crf_key)?;
        CrfParams::default().apply_kv(&kv)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }
}

/// One transverse slice: gray values and per-pixel `[p(background), p(liver)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceProblem {
    height: usize,
    width: usize,
    intensity: Vec<f64>,
    unary: Vec<[f64; 2]>,
}

impl SliceProblem {
    pub fn new(height: usize, width: usize, intensity: Vec<f64>, unary: Vec<[f64; 2]>) -> Result<Self> {
        let n = height * width;
        if n == 0 || intensity.len() != n || unary.len() != n {
            return Err(Error::Shape(format!(
                "slice {height}x{width} needs {n} intensities and unaries, got {} and {}",
                intensity.len(),
                unary.len()
            )));
        }
        if intensity.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("slice intensity".into()));
        }
        for (i, u) in unary.iter().enumerate() {
            if !(u[0] >= 0.0 && u[1] >= 0.0) || (u[0] + u[1] - 1.0).abs() > 1e-9 {
                return Err(Error::Param(format!("unary at pixel {i} is not a distribution: {u:?}")));
            }
        }
        Ok(SliceProblem {
            height,
            width,
            intensity,
            unary,
        })
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    pub fn unary(&self) -> &[[f64; 2]] {
        &self.unary
    }

    fn position(&self, i: usize) -> (f64, f64) {
        ((i / self.width) as f64, (i % self.width) as f64)
    }

    fn unary_cost(&self, i: usize, label: usize) -> f64 {
        -self.unary[i][label].max(LOG_FLOOR).ln()
    }

    /// Unary argmax; ties go to background.
    pub fn unary_labels(&self) -> Vec<u8> {
        self.unary.iter().map(|u| u8::from(u[1] > u[0])).collect()
    }
}

/// Convex blend `(1 - sum tau) p_last + sum_d tau_d p_d`, as a `(2, D, H, W)` tensor.
pub fn blend_unary(probs: &ProbMap, tau: &BTreeMap<usize, f64>) -> Result<Tensor> {
    let params = CrfParams {
        tau: tau.clone(),
        ..CrfParams::default()
    };
    params.validate()?;
    let rest = 1.0 - tau.values().sum::<f64>();
    let mut out: Vec<f64> = probs.last.data().iter().map(|p| rest * p).collect();
    for (&d, &t) in tau {
        let b = probs.branch(d)?;
        probs.last.same_shape(b, "branch probabilities")?;
        for (o, p) in out.iter_mut().zip(b.data()) {
            *o += t * p;
        }
    }
    Tensor::new(probs.last.shape().to_vec(), out)
}

/// Pairwise potential between pixels `i` and `j`, without cutoff.
pub fn pairwise_phi(i: usize, j: usize, slice: &SliceProblem, params: &CrfParams) -> f64 {
    let (yi, xi) = slice.position(i);
    let (yj, xj) = slice.position(j);
    let s2 = (yi - yj).powi(2) + (xi - xj).powi(2);
    let di = slice.intensity[i] - slice.intensity[j];
    params.mu1 * (-s2 / (2.0 * params.theta_alpha.powi(2)) - di * di / (2.0 * params.theta_beta.powi(2))).exp()
        + params.mu2 * (-s2 / (2.0 * params.theta_gamma.powi(2))).exp()
}

fn check_labels(labels: &[u8], slice: &SliceProblem) -> Result<()> {
    if labels.len() != slice.len() {
        return Err(Error::Shape(format!("{} labels for {} pixels", labels.len(), slice.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Param("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// `sum_i -ln p(y_i) + sum_{i<j} [y_i != y_j] phi(i, j)`.
pub fn energy(labels: &[u8], slice: &SliceProblem, params: &CrfParams) -> Result<f64> {
    check_labels(labels, slice)?;
    let n = slice.len();
    let mut e: f64 = (0..n).map(|i| slice.unary_cost(i, labels[i] as usize)).sum();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                e += pairwise_phi(i, j, slice, params);
            }
        }
    }
    Ok(e)
}

/// Exhaustive minimum-energy labeling for slices of at most 20 pixels.
///
/// Ties go to the lexicographically smallest labeling.
pub fn exact_map(slice: &SliceProblem, params: &CrfParams) -> Result<Vec<u8>> {
    let n = slice.len();
    if n > 20 {
        return Err(Error::Param(format!("exhaustive search needs at most 20 pixels, got {n}")));
    }
    let phi: Vec<f64> = (0..n * n).map(|k| pairwise_phi(k / n, k % n, slice, params)).collect();
    let cost: Vec<[f64; 2]> = (0..n).map(|i| [slice.unary_cost(i, 0), slice.unary_cost(i, 1)]).collect();
    // Pixel 0 is the most significant bit, so counting up walks labelings in lexicographic order.
    let label = |code: u32, i: usize| ((code >> (n - 1 - i)) & 1) as usize;
    let mut best = (f64::INFINITY, 0u32);
    for code in 0..(1u32 << n) {
        let mut e = 0.0;
        for i in 0..n {
            let li = label(code, i);
            e += cost[i][li];
            for j in i + 1..n {
                if li != label(code, j) {
                    e += phi[i * n + j];
                }
            }
        }
        if e < best.0 {
            best = (e, code);
        }
    }
    Ok((0..n).map(|i| label(best.1, i) as u8).collect())
}

/// Appearance and smoothness kernels with the diagonal and far pairs removed.
enum Kernels {
    Dense { n: usize, appearance: Vec<f64>, smoothness: Vec<f64> },
    Windowed(Windowed),
}

struct Windowed {
    height: usize,
    width: usize,
    radius: usize,
    intensity: Vec<f64>,
    inv_2beta2: f64,
    /// Spatial factors indexed by `|dy| * (radius + 1) + |dx|`.
    alpha_table: Vec<f64>,
    gamma_table: Vec<f64>,
}

impl Kernels {
    fn new(slice: &SliceProblem, theta_alpha: f64, theta_beta: f64, theta_gamma: f64) -> Self {
        Self::build(slice, [theta_alpha, theta_beta, theta_gamma], DENSE_LIMIT)
    }

    fn build(slice: &SliceProblem, thetas: [f64; 3], dense_limit: usize) -> Self {
        let [theta_alpha, theta_beta, theta_gamma] = thetas;
        let (h, w) = (slice.height, slice.width);
        let reach = CUTOFF_BANDWIDTHS * theta_alpha.max(theta_gamma);
        let radius = (reach.floor() as usize).min(h.max(w));
        let r1 = radius + 1;
        let mut alpha_table = vec![0.0; r1 * r1];
        let mut gamma_table = vec![0.0; r1 * r1];
        for dy in 0..r1 {
            for dx in 0..r1 {
                let s2 = (dy * dy + dx * dx) as f64;
                if s2.sqrt() <= reach {
                    alpha_table[dy * r1 + dx] = (-s2 / (2.0 * theta_alpha * theta_alpha)).exp();
                    gamma_table[dy * r1 + dx] = (-s2 / (2.0 * theta_gamma * theta_gamma)).exp();
                }
            }
        }
        let win = Windowed {
            height: h,
            width: w,
            radius,
            intensity: slice.intensity.clone(),
            inv_2beta2: 1.0 / (2.0 * theta_beta * theta_beta),
            alpha_table,
            gamma_table,
        };
        let n = slice.len();
        if n > dense_limit {
            return Kernels::Windowed(win);
        }
        let mut appearance = vec![0.0; n * n];
        let mut smoothness = vec![0.0; n * n];
        appearance
            .par_chunks_mut(n)
            .zip(smoothness.par_chunks_mut(n))
            .enumerate()
            .for_each(|(i, (ra, rs))| win.for_neighbors(i, |j, a, s| {
                ra[j] = a;
                rs[j] = s;
            }));
        Kernels::Dense {
            n,
            appearance,
            smoothness,
        }
    }

    /// `out_a[i] = sum_j A_ij q_j` and `out_s[i] = sum_j S_ij q_j`.
    fn apply(&self, q: &[f64], out_a: &mut [f64], out_s: &mut [f64]) {
        match self {
            Kernels::Dense {
                n,
                appearance,
                smoothness,
            } => {
                out_a
                    .par_iter_mut()
                    .zip(out_s.par_iter_mut())
                    .enumerate()
                    .for_each(|(i, (oa, os))| {
                        let ra = &appearance[i * n..(i + 1) * n];
                        let rs = &smoothness[i * n..(i + 1) * n];
                        *oa = crate::tensor::dot(ra, q);
                        *os = crate::tensor::dot(rs, q);
                    });
            }
            Kernels::Windowed(win) => {
                out_a
                    .par_iter_mut()
                    .zip(out_s.par_iter_mut())
                    .enumerate()
                    .for_each(|(i, (oa, os))| {
                        let (mut sa, mut ss) = (0.0, 0.0);
                        win.for_neighbors(i, |j, a, s| {
                            sa += a * q[j];
                            ss += s * q[j];
                        });
                        *oa = sa;
                        *os = ss;
                    });
            }
        }
    }
}

impl Windowed {
    /// Calls `f(j, appearance, smoothness)` for every `j != i` inside the cutoff.
    fn for_neighbors(&self, i: usize, mut f: impl FnMut(usize, f64, f64)) {
        let (y, x) = (i / self.width, i % self.width);
        let r = self.radius;
        let r1 = r + 1;
        let ii = self.intensity[i];
        for yj in y.saturating_sub(r)..(y + r + 1).min(self.height) {
            let dy = y.abs_diff(yj);
            for xj in x.saturating_sub(r)..(x + r + 1).min(self.width) {
                let dx = x.abs_diff(xj);
                let t = dy * r1 + dx;
                let g = self.gamma_table[t];
                if (dy == 0 && dx == 0) || (g == 0.0 && self.alpha_table[t] == 0.0) {
                    continue;
                }
                let j = yj * self.width + xj;
                let di = ii - self.intensity[j];
                f(j, self.alpha_table[t] * (-di * di * self.inv_2beta2).exp(), g);
            }
        }
    }
}

/// Mean-field marginals, their argmax labeling and the sweeps actually run.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub marginals: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    pub iterations: usize,
}

pub fn mean_field_infer(slice: &SliceProblem, params: &CrfParams) -> Result<MeanField> {
    params.validate()?;
    if params.iterations == 0 || (params.mu1 == 0.0 && params.mu2 == 0.0) {
        return Ok(MeanField {
            marginals: slice.unary.clone(),
            labels: slice.unary_labels(),
            iterations: 0,
        });
    }
    let kernels = Kernels::new(slice, params.theta_alpha, params.theta_beta, params.theta_gamma);
    let mut scratch = Scratch::new(slice.len());
    Ok(run_mean_field(slice, &kernels, params.mu1, params.mu2, params.iterations, &mut scratch))
}

struct Scratch {
    q1: Vec<f64>,
    ma: Vec<f64>,
    ms: Vec<f64>,
    row_a: Vec<f64>,
    row_s: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            q1: vec![0.0; n],
            ma: vec![0.0; n],
            ms: vec![0.0; n],
            row_a: vec![0.0; n],
            row_s: vec![0.0; n],
        }
    }
}

fn run_mean_field(
    slice: &SliceProblem,
    kernels: &Kernels,
    mu1: f64,
    mu2: f64,
    iterations: usize,
    scratch: &mut Scratch,
) -> MeanField {
    let n = slice.len();
    let Scratch { q1, ma, ms, row_a, row_s } = scratch;
    kernels.apply(&vec![1.0; n], row_a, row_s);
    let cost: Vec<[f64; 2]> = (0..n).map(|i| [slice.unary_cost(i, 0), slice.unary_cost(i, 1)]).collect();
    let mut q = slice.unary.clone();
    let mut done = 0;
    for _ in 0..iterations {
        for (dst, m) in q1.iter_mut().zip(&q) {
            *dst = m[1];
        }
        kernels.apply(q1, ma, ms);
        let mut change = 0.0f64;
        for i in 0..n {
            // Taking label 0 pays for neighbors leaning to 1, and vice versa.
            let m = mu1 * ma[i] + mu2 * ms[i];
            let total = mu1 * row_a[i] + mu2 * row_s[i];
            let e0 = -cost[i][0] - m;
            let e1 = -cost[i][1] - (total - m);
            let top = e0.max(e1);
            let (a, b) = ((e0 - top).exp(), (e1 - top).exp());
            let next = [a / (a + b), b / (a + b)];
            change = change.max((next[1] - q[i][1]).abs());
            q[i] = next;
        }
        done += 1;
        if change < CONVERGENCE_TOL {
            break;
        }
    }
    let labels = q.iter().map(|m| u8::from(m[1] > m[0])).collect();
    MeanField {
        marginals: q,
        labels,
        iterations: done,
    }
}

fn check_volume(intensity: &Tensor, probs: &ProbMap) -> Result<[usize; 3]> {
    let [c, d, h, w] = intensity.dims4()?;
    let shape = probs.spatial_shape();
    if c != 1 || [d, h, w] != shape || probs.last.shape()[0] != 2 {
        return Err(Error::Shape(format!(
            "intensity {:?} and probabilities {:?} disagree",
            intensity.shape(),
            probs.last.shape()
        )));
    }
    Ok(shape)
}

fn slice_problem(intensity: &Tensor, blended: &Tensor, shape: [usize; 3], z: usize) -> Result<SliceProblem> {
    let [d, h, w] = shape;
    let n = h * w;
    let plane = &intensity.data()[z * n..(z + 1) * n];
    let p0 = &blended.data()[z * n..(z + 1) * n];
    let p1 = &blended.data()[(d + z) * n..(d + z + 1) * n];
    SliceProblem::new(
        h,
        w,
        plane.iter().map(|v| v * GRAY_SCALE).collect(),
        p0.iter().zip(p1).map(|(&a, &b)| [a, b]).collect(),
    )
}

/// Refines a whole volume slice by slice along `D`.
///
/// `intensity` is the normalized `(1, D, H, W)` network input.
pub fn refine_volume(intensity: &Tensor, probs: &ProbMap, params: &CrfParams) -> Result<LabelVolume> {
    params.validate()?;
    let shape = check_volume(intensity, probs)?;
    let blended = blend_unary(probs, &params.tau)?;
    let slices = (0..shape[0])
        .into_par_iter()
        .map(|z| Ok(mean_field_infer(&slice_problem(intensity, &blended, shape, z)?, params)?.labels))
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::new(shape, slices.concat())
}

/// One grid-search case: normalized input, network probabilities and ground truth.
#[derive(Debug, Clone)]
pub struct CrfCase {
    pub intensity: Tensor,
    pub probs: ProbMap,
    pub labels: LabelVolume,
}

/// Candidate values per hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrid {
    pub tau: BTreeMap<usize, Vec<f64>>,
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub theta_alpha: Vec<f64>,
    pub theta_beta: Vec<f64>,
    pub theta_gamma: Vec<f64>,
    pub iterations: usize,
}

impl Default for CrfGrid {
    fn default() -> Self {
        let taus = vec![0.0, 0.1, 0.2, 0.3, 0.4];
        let mus = vec![0.5, 1.0, 2.0, 4.0];
        let thetas = vec![3.0, 5.0, 10.0];
        CrfGrid {
            tau: BTreeMap::from([(3, taus.clone()), (6, taus)]),
            mu1: mus.clone(),
            mu2: mus,
            theta_alpha: thetas.clone(),
            theta_beta: vec![5.0, 10.0, 20.0],
            theta_gamma: thetas,
            iterations: 10,
        }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

impl CrfGrid {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        for (d, v) in &self.tau {
            kv.set(format!("tau.{d}"), join(v));
        }
        kv.set("mu1", join(&self.mu1));
        kv.set("mu2", join(&self.mu2));
        kv.set("theta_alpha", join(&self.theta_alpha));
        kv.set("theta_beta", join(&self.theta_beta));
        kv.set("theta_gamma", join(&self.theta_gamma));
        kv.set("iterations", self.iterations);
        kv
    }

    /// Overrides axes present in `kv` (comma-separated lists); any `tau.*` key replaces all tau axes.
    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        let list = |key: &str, cur: &Vec<f64>| -> Result<Vec<f64>> { Ok(kv.list(key)?.unwrap_or_else(|| cur.clone())) };
        let taus = kv.with_prefix("tau.");
        if taus.keys().next().is_some() {
            self.tau.clear();
            for (d, v) in taus.iter() {
                let layer: usize = d.parse().map_err(|_| Error::Config(format!("bad key `tau.{d}`")))?;
                let vals = parse_list(v).map_err(|_| Error::Config(format!("bad list for `tau.{d}`: `{v}`")))?;
                self.tau.insert(layer, vals);
            }
        }
        self.mu1 = list("mu1", &self.mu1)?;
        self.mu2 = list("mu2", &self.mu2)?;
        self.theta_alpha = list("theta_alpha", &self.theta_alpha)?;
        self.theta_beta = list("theta_beta", &self.theta_beta)?;
        self.theta_gamma = list("theta_gamma", &self.theta_gamma)?;
        self.iterations = kv.parsed_or("iterations", self.iterations)?;
        self.points().map_err(|e| Error::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn is_grid_key(key: &str) -> bool {
        CrfParams::is_crf_key(key)
    }

    /// Every admissible grid point in lexicographic order of
    /// `(tau by layer, mu1, mu2, theta_alpha, theta_beta, theta_gamma)` over sorted axes.
    ///
    /// Tau combinations summing above 1 are skipped.
    pub fn points(&self) -> Result<Vec<CrfParams>> {
        let mut combos: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new()];
        for (&d, vals) in &self.tau {
            let vals = sorted(vals);
            combos = combos
                .iter()
                .flat_map(|c| {
                    vals.iter().map(move |&t| {
                        let mut c = c.clone();
                        c.insert(d, t);
                        c
                    })
                })
                .collect();
        }
        combos.retain(|c| c.values().sum::<f64>() <= 1.0 + 1e-12);
        let axes = [&self.mu1, &self.mu2, &self.theta_alpha, &self.theta_beta, &self.theta_gamma].map(|v| sorted(v));
        if combos.is_empty() || axes.iter().any(|a| a.is_empty()) || self.tau.values().any(|v| v.is_empty()) {
            return Err(Error::Param("every grid axis needs at least one admissible value".into()));
        }
        let mut out = Vec::new();
        for tau in &combos {
            for &mu1 in &axes[0] {
                for &mu2 in &axes[1] {
                    for &theta_alpha in &axes[2] {
                        for &theta_beta in &axes[3] {
                            for &theta_gamma in &axes[4] {
                                let p = CrfParams {
                                    tau: tau.clone(),
                                    mu1,
                                    mu2,
                                    theta_alpha,
                                    theta_beta,
                                    theta_gamma,
                                    iterations: self.iterations,
                                };
                                p.validate()?;
                                out.push(p);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best: CrfParams,
    pub best_voe: f64,
    /// Every grid point with its mean VOE over the cases, in grid order.
    pub evaluated: Vec<(CrfParams, f64)>,
}

impl GridSearchResult {
    /// One row per grid point: tau columns by layer, the remaining parameters, then `mean_voe`.
    pub fn to_csv(&self) -> String {
        let layers: Vec<usize> = self.best.tau.keys().copied().collect();
        let mut out: Vec<String> = layers.iter().map(|d| format!("tau.{d}")).collect();
        out.extend(["mu1", "mu2", "theta_alpha", "theta_beta", "theta_gamma", "mean_voe"].map(String::from));
        let mut text = out.join(",") + "\n";
        for (p, v) in &self.evaluated {
            let mut row: Vec<String> = layers.iter().map(|d| p.tau[d].to_string()).collect();
            row.extend([p.mu1, p.mu2, p.theta_alpha, p.theta_beta, p.theta_gamma].map(|x| x.to_string()));
            row.push(format!("{v:.6}"));
            text += &(row.join(",") + "\n");
        }
        text
    }
}

/// Exhaustive search for the grid point with the lowest mean VOE over `cases`.
///
/// Ties go to the earliest point in [`CrfGrid::points`] order.
pub fn grid_search(cases: &[CrfCase], grid: &CrfGrid) -> Result<GridSearchResult> {
    if cases.is_empty() {
        return Err(Error::Param("grid search needs at least one case".into()));
    }
    let points = grid.points()?;
    let n_points = points.len();
    // Points sharing a bandwidth triple share kernels, so group by triple.
    let mut by_theta: BTreeMap<[u64; 3], Vec<usize>> = BTreeMap::new();
    for (k, p) in points.iter().enumerate() {
        let key = [p.theta_alpha, p.theta_beta, p.theta_gamma].map(f64::to_bits);
        by_theta.entry(key).or_default().push(k);
    }
    let mut case_voe = vec![0.0; n_points];
    for case in cases {
        let shape = check_volume(&case.intensity, &case.probs)?;
        if case.labels.shape() != shape {
            return Err(Error::Shape(format!(
                "labels {:?} vs probabilities {:?}",
                case.labels.shape(),
                shape
            )));
        }
        let mut blends: Vec<(BTreeMap<usize, f64>, Tensor)> = Vec::new();
        for p in &points {
            if !blends.iter().any(|(t, _)| *t == p.tau) {
                blends.push((p.tau.clone(), blend_unary(&case.probs, &p.tau)?));
            }
        }
        let [_, h, w] = shape;
        let n = h * w;
        let per_slice: Vec<Vec<[usize; 2]>> = (0..shape[0])
            .into_par_iter()
            .map(|z| -> Result<Vec<[usize; 2]>> {
                let truth = &case.labels.data()[z * n..(z + 1) * n];
                let problems: Vec<SliceProblem> = blends
                    .iter()
                    .map(|(_, b)| slice_problem(&case.intensity, b, shape, z))
                    .collect::<Result<_>>()?;
                let mut counts = vec![[0usize; 2]; n_points];
                let mut scratch = Scratch::new(n);
                for (theta, members) in &by_theta {
                    let [ta, tb, tg] = theta.map(f64::from_bits);
                    let kernels = Kernels::new(&problems[0], ta, tb, tg);
                    for &k in members {
                        let p = &points[k];
                        let bi = blends.iter().position(|(t, _)| *t == p.tau).expect("blend");
                        let labels = if p.iterations == 0 || (p.mu1 == 0.0 && p.mu2 == 0.0) {
                            problems[bi].unary_labels()
                        } else {
                            run_mean_field(&problems[bi], &kernels, p.mu1, p.mu2, p.iterations, &mut scratch).labels
                        };
                        for (&a, &b) in labels.iter().zip(truth) {
                            counts[k][0] += usize::from(a & b);
                            counts[k][1] += usize::from(a | b);
                        }
                    }
                }
                Ok(counts)
            })
            .collect::<Result<_>>()?;
        for (k, v) in case_voe.iter_mut().enumerate() {
            let (inter, union) = per_slice
                .iter()
                .fold((0, 0), |(i, u), c| (i + c[k][0], u + c[k][1]));
            *v += if union == 0 { 0.0 } else { 100.0 * (1.0 - inter as f64 / union as f64) };
        }
    }
    let evaluated: Vec<(CrfParams, f64)> = points
        .into_iter()
        .zip(case_voe)
        .map(|(p, total)| (p, total / cases.len() as f64))
        .collect();
    let (best, best_voe) = evaluated
        .iter()
        .fold(None, |acc: Option<&(CrfParams, f64)>, cur| match acc {
            Some(a) if a.1 <= cur.1 => Some(a),
            _ => Some(cur),
        })
        .cloned()
        .expect("nonempty grid");
    Ok(GridSearchResult {
        best,
        best_voe,
        evaluated,
    })
}
