use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{ConvSpec, DeconvSpec, Geometry};
use crate::net::config::ArchitectureConfig;
use crate::rng::Rng;
use crate::tensor::{gaussian_init, Tensor};

/// Standard deviation of the zero-mean Gaussian used for every weight.
pub const INIT_SIGMA: f64 = 0.01;

/// Weight initialization scheme. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Every weight from `N(0, sigma^2)`.
    Gaussian(f64),
    /// Fan-in scaled: `gain * sqrt(2 / fan_in)` before a ReLU, `gain * sqrt(1 / fan_in)` for
    /// scoring layers. A stride-2 transposed convolution has an effective fan-in of `cin * 27 / 8`.
    /// Gains below 1 shrink the signal at every layer.
    He(f64),
}

impl Default for Init {
    fn default() -> Self {
        Init::Gaussian(INIT_SIGMA)
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Gaussian(s) => write!(f, "{s}"),
            Init::He(g) if *g == 1.0 => f.write_str("he"),
            Init::He(g) => write!(f, "he:{g}"),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    /// `he`, `he:GAIN`, or a non-negative standard deviation.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("init must be `he`, `he:GAIN` or a sigma >= 0, got `{s}`"));
        let positive = |v: f64| v >= 0.0 && v.is_finite();
        if s == "he" {
            return Ok(Init::He(1.0));
        }
        if let Some(g) = s.strip_prefix("he:") {
            return g.parse().ok().filter(|&g| positive(g)).map(Init::He).ok_or_else(bad);
        }
        s.parse().ok().filter(|&v| positive(v)).map(Init::Gaussian).ok_or_else(bad)
    }
}

impl Init {
    fn sigma(self, fan_in: f64, gain: f64) -> f64 {
        match self {
            Init::Gaussian(s) => s,
            Init::He(g) => g * (gain / fan_in).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn spec(&self) -> ConvSpec {
        let s = self.weight.shape();
        ConvSpec {
            geometry: Geometry::same([s[2], s[3], s[4]]),
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }
}

/// Upsampling chain and scoring layer bridging one hidden layer to a
/// full-resolution prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub deconvs: Vec<Tensor>,
    pub score: ConvParams,
}

/// Mainstream weights (`convs`, `deconvs`, `score`) and per-branch weights.
///
/// The same type carries gradients, so optimizer code can zip the two.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: ArchitectureConfig,
    pub convs: Vec<ConvParams>,
    pub deconvs: Vec<Tensor>,
    pub score: ConvParams,
    pub branches: BTreeMap<usize, BranchParams>,
}

pub(crate) fn deconv_spec(weight: &Tensor) -> DeconvSpec {
    DeconvSpec::upsample2(weight.clone())
}

fn conv_params(
    cout: usize,
    cin: usize,
    kernel: [usize; 3],
    sigma: f64,
    rng: &mut Rng,
) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: gaussian_init(&[cout, cin, kernel[0], kernel[1], kernel[2]], 0.0, sigma, rng)?,
        bias: Tensor::zeros(&[cout]),
    })
}

/// Draws every weight from `N(0, 0.01^2)`; biases start at zero.
pub fn build_network(config: &ArchitectureConfig, rng: &mut Rng) -> Result<NetworkParams> {
    build_network_with_sigma(config, INIT_SIGMA, rng)
}

/// Like [`build_network`] with weights drawn from `N(0, sigma^2)`.
pub fn build_network_with_sigma(config: &ArchitectureConfig, sigma: f64, rng: &mut Rng) -> Result<NetworkParams> {
    build_network_with_init(config, Init::Gaussian(sigma), rng)
}

pub fn build_network_with_init(config: &ArchitectureConfig, init: Init, rng: &mut Rng) -> Result<NetworkParams> {
    config.validate()?;
    let volume = |k: [usize; 3]| (k[0] * k[1] * k[2]) as f64;
    let deconv_sigma = |cin: usize| init.sigma(cin as f64 * 27.0 / 8.0, 2.0);
    let mut convs = Vec::with_capacity(config.convs.len());
    let mut cin = config.in_channels;
    let mut tap_channels = Vec::new();
    for c in &config.convs {
        let sigma = init.sigma(cin as f64 * volume(c.kernel), 2.0);
        convs.push(conv_params(c.channels, cin, c.kernel, sigma, rng)?);
        cin = c.channels;
        tap_channels.push(cin);
    }
    let mut deconvs = Vec::new();
    for &cout in &config.deconv_channels {
        deconvs.push(gaussian_init(&[cin, cout, 3, 3, 3], 0.0, deconv_sigma(cin), rng)?);
        cin = cout;
    }
    let score = conv_params(2, cin, [1, 1, 1], init.sigma(cin as f64, 1.0), rng)?;
    let mut branches = BTreeMap::new();
    for (&d, chain) in &config.branch_channels {
        let mut cin = tap_channels[d - 1];
        let mut bd = Vec::new();
        for &cout in chain {
            bd.push(gaussian_init(&[cin, cout, 3, 3, 3], 0.0, deconv_sigma(cin), rng)?);
            cin = cout;
        }
        let score = conv_params(2, cin, [1, 1, 1], init.sigma(cin as f64, 1.0), rng)?;
        branches.insert(
            d,
            BranchParams {
                deconvs: bd,
                score,
            },
        );
    }
    Ok(NetworkParams {
        config: config.clone(),
        convs,
        deconvs,
        score,
        branches,
    })
}

impl NetworkParams {
    /// Every parameter tensor with a stable, human-readable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &c.weight));
            out.push((format!("conv{}.bias", i + 1), &c.bias));
        }
        for (i, w) in self.deconvs.iter().enumerate() {
            out.push((format!("deconv{}.weight", i + 1), w));
        }
        out.push(("score.weight".into(), &self.score.weight));
        out.push(("score.bias".into(), &self.score.bias));
        for (d, b) in &self.branches {
            for (i, w) in b.deconvs.iter().enumerate() {
                out.push((format!("branch{d}.deconv{}.weight", i + 1), w));
            }
            out.push((format!("branch{d}.score.weight"), &b.score.weight));
            out.push((format!("branch{d}.score.bias"), &b.score.bias));
        }
        out
    }

    /// Mutable view in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.extend(self.deconvs.iter_mut());
        out.push(&mut self.score.weight);
        out.push(&mut self.score.bias);
        for b in self.branches.values_mut() {
            out.extend(b.deconvs.iter_mut());
            out.push(&mut b.score.weight);
            out.push(&mut b.score.bias);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zeros_like(&self) -> NetworkParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// `||W||^2`: squared norm of the mainstream parameters.
    pub fn mainstream_sum_squares(&self) -> f64 {
        self.convs
            .iter()
            .map(|c| c.weight.sum_squares() + c.bias.sum_squares())
            .chain(self.deconvs.iter().map(Tensor::sum_squares))
            .chain([self.score.weight.sum_squares() + self.score.bias.sum_squares()])
            .sum()
    }

    /// `||w_d||^2` for one branch.
    pub fn branch_sum_squares(&self, d: usize) -> Result<f64> {
        let b = self
            .branches
            .get(&d)
            .ok_or_else(|| Error::Param(format!("no branch head for layer {d}")))?;
        Ok(b.deconvs.iter().map(Tensor::sum_squares).sum::<f64>()
            + b.score.weight.sum_squares()
            + b.score.bias.sum_squares())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Checks that `other` has this network's layout, tensor for tensor.
    pub fn check_compatible(&self, other: &NetworkParams) -> Result<()> {
        let a = self.named_tensors();
        let b = other.named_tensors();
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "parameter sets hold {} and {} tensors",
                a.len(),
                b.len()
            )));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}
