use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::kv::{join, parse_list, KvMap};
use crate::layers::Triple;

/// Layer kinds of the mainstream path, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
    Deconv,
    /// 1x1x1 two-class scoring convolution followed by the per-voxel softmax.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayerConfig {
    pub channels: usize,
    /// `(kd, kh, kw)`; every extent odd.
    pub kernel: Triple,
}

/// Mainstream layout plus deep-supervision branches.
///
/// Layer numbering for `pool_after` and `supervised` counts convolutions
/// only, starting at 1. A branch tapping convolution `d` receives that
/// layer's rectified output (before any pool that follows it) and upsamples
/// it with one stride-2 transposed convolution per preceding pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub in_channels: usize,
    pub convs: Vec<ConvLayerConfig>,
    pub pool_after: Vec<usize>,
    pub deconv_channels: Vec<usize>,
    pub supervised: BTreeSet<usize>,
    /// Output channels of each transposed convolution in branch `d`.
    pub branch_channels: BTreeMap<usize, Vec<usize>>,
}

pub const CONV_LAYERS: usize = 6;
pub const POOL_LAYERS: usize = 2;
pub const DECONV_LAYERS: usize = 2;
pub const TOTAL_LAYERS: usize = CONV_LAYERS + POOL_LAYERS + DECONV_LAYERS + 1;

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let conv = |channels, kernel| ConvLayerConfig { channels, kernel };
        ArchitectureConfig {
            in_channels: 1,
            convs: vec![
                conv(8, [7, 9, 9]),
                conv(16, [5, 5, 5]),
                conv(16, [5, 5, 5]),
                conv(32, [3, 3, 3]),
                conv(32, [3, 3, 3]),
                conv(32, [3, 3, 3]),
            ],
            pool_after: vec![1, 3],
            deconv_channels: vec![16, 8],
            supervised: [3, 6].into(),
            branch_channels: [(3, vec![8]), (6, vec![16, 8])].into(),
        }
    }
}

impl ArchitectureConfig {
    /// Default layout with every layer `channels` wide (branches included).
    pub fn uniform(channels: usize) -> Self {
        let mut cfg = Self::default();
        cfg.convs.iter_mut().for_each(|c| c.channels = channels);
        cfg.deconv_channels = vec![channels; DECONV_LAYERS];
        for chain in cfg.branch_channels.values_mut() {
            chain.iter_mut().for_each(|c| *c = channels);
        }
        cfg
    }

    /// The same mainstream without deep supervision: the plain 3D CNN baseline.
    pub fn without_deep_supervision(mut self) -> Self {
        self.supervised.clear();
        self.branch_channels.clear();
        self
    }

    /// Number of pools applied before convolution `layer`'s output is tapped.
    pub fn level_of(&self, layer: usize) -> usize {
        self.pool_after.iter().filter(|&&p| p < layer).count()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut kinds = Vec::with_capacity(TOTAL_LAYERS);
        for i in 1..=self.convs.len() {
            kinds.push(LayerKind::Conv);
            if self.pool_after.contains(&i) {
                kinds.push(LayerKind::Pool);
            }
        }
        kinds.extend(std::iter::repeat_n(LayerKind::Deconv, self.deconv_channels.len()));
        kinds.push(LayerKind::Softmax);
        kinds
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.convs.len() != CONV_LAYERS {
            return fail(format!("expected {CONV_LAYERS} convolutions, got {}", self.convs.len()));
        }
        for (i, c) in self.convs.iter().enumerate() {
            if c.channels == 0 {
                return fail(format!("conv{} has zero channels", i + 1));
            }
            if c.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
                return fail(format!("conv{} kernel {:?} must have odd extents", i + 1, c.kernel));
            }
        }
        let pools: BTreeSet<_> = self.pool_after.iter().copied().collect();
        if pools.len() != POOL_LAYERS || self.pool_after.len() != POOL_LAYERS {
            return fail(format!("expected {POOL_LAYERS} distinct pools, got {:?}", self.pool_after));
        }
        if pools.iter().any(|&p| p == 0 || p >= CONV_LAYERS) {
            return fail(format!("pools must follow conv1..conv5, got {:?}", self.pool_after));
        }
        if self.deconv_channels.len() != DECONV_LAYERS {
            return fail(format!(
                "expected {DECONV_LAYERS} transposed convolutions, got {}",
                self.deconv_channels.len()
            ));
        }
        if self.deconv_channels.contains(&0) {
            return fail("transposed convolution with zero channels".into());
        }
        let branch_keys: BTreeSet<_> = self.branch_channels.keys().copied().collect();
        if branch_keys != self.supervised {
            return fail(format!(
                "branch heads {branch_keys:?} do not match supervised layers {:?}",
                self.supervised
            ));
        }
        for (&d, chain) in &self.branch_channels {
            if d == 0 || d > CONV_LAYERS {
                return fail(format!("supervised layer {d} is not a convolution index"));
            }
            if chain.len() != self.level_of(d) {
                return fail(format!(
                    "branch {d} sits {} pools deep and needs that many upsamplings, got {}",
                    self.level_of(d),
                    chain.len()
                ));
            }
            if chain.contains(&0) {
                return fail(format!("branch {d} has a zero-channel layer"));
            }
        }
        debug_assert_eq!(self.layer_kinds().len(), TOTAL_LAYERS);
        Ok(())
    }

    /// Input extents accepted by the network: each divisible by `2^pools`.
    pub fn check_input(&self, spatial: Triple) -> Result<()> {
        let m = 1 << self.pool_after.len();
        if spatial.iter().any(|&e| e == 0 || e % m != 0) {
            return Err(Error::Shape(format!(
                "input extents {spatial:?} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("in_channels", self.in_channels);
        for (i, c) in self.convs.iter().enumerate() {
            kv.set(format!("conv{}.channels", i + 1), c.channels);
            kv.set(format!("conv{}.kernel", i + 1), format_kernel(c.kernel));
        }
        kv.set("pool_after", join(&self.pool_after));
        kv.set("deconv.channels", join(&self.deconv_channels));
        kv.set("supervised", join(&self.supervised));
        for (d, chain) in &self.branch_channels {
            kv.set(format!("branch{d}.channels"), join(chain));
        }
        kv
    }

    /// Keys present in `kv` override the corresponding fields of `self`.
    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        self.in_channels = kv.parsed_or("in_channels", self.in_channels)?;
        for i in 0..self.convs.len() {
            if let Some(c) = kv.parsed(&format!("conv{}.channels", i + 1))? {
                self.convs[i].channels = c;
            }
            let key = format!("conv{}.kernel", i + 1);
            if let Some(k) = kv.get(&key) {
                self.convs[i].kernel = parse_kernel(k)
                    .ok_or_else(|| Error::Config(format!("`{key}`: expected DxHxW, got `{k}`")))?;
            }
        }
        if let Some(p) = kv.list("pool_after")? {
            self.pool_after = p;
        }
        if let Some(c) = kv.list("deconv.channels")? {
            self.deconv_channels = c;
        }
        if let Some(s) = kv.list::<usize>("supervised")? {
            self.supervised = s.into_iter().collect();
            self.branch_channels.retain(|d, _| self.supervised.contains(d));
        }
        for (key, value) in kv.iter() {
            if let Some(d) = key
                .strip_prefix("branch")
                .and_then(|r| r.strip_suffix(".channels"))
            {
                let d: usize = d
                    .parse()
                    .map_err(|_| Error::Config(format!("bad branch key `{key}`")))?;
                let chain = parse_list(value)
                    .map_err(|_| Error::Config(format!("`{key}`: bad list `{value}`")))?;
                self.branch_channels.insert(d, chain);
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn is_arch_key(key: &str) -> bool {
        matches!(key, "in_channels" | "pool_after" | "deconv.channels" | "supervised")
            || (key.starts_with("conv") && (key.ends_with(".channels") || key.ends_with(".kernel")))
            || (key.starts_with("branch") && key.ends_with(".channels"))
    }

    /// Canonical text used for checkpoint digests.
    pub fn canonical_text(&self) -> String {
        self.to_kv().to_text()
    }
}

fn format_kernel(k: Triple) -> String {
    format!("{}x{}x{}", k[0], k[1], k[2])
}

fn parse_kernel(s: &str) -> Option<Triple> {
    let parts: Vec<usize> = s.split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    parts.try_into().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_eleven_layers() {
        let cfg = ArchitectureConfig::default();
        cfg.validate().unwrap();
        let kinds = cfg.layer_kinds();
        assert_eq!(kinds.len(), 11);
        let count = |k| kinds.iter().filter(|&&x| x == k).count();
        assert_eq!(count(LayerKind::Conv), 6);
        assert_eq!(count(LayerKind::Pool), 2);
        assert_eq!(count(LayerKind::Deconv), 2);
        assert_eq!(count(LayerKind::Softmax), 1);
        assert_eq!(cfg.level_of(3), 1);
        assert_eq!(cfg.level_of(6), 2);
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = ArchitectureConfig::uniform(3);
        let back = ArchitectureConfig::default().apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let plain = ArchitectureConfig::default().without_deep_supervision();
        let back = ArchitectureConfig::default().apply_kv(&plain.to_kv()).unwrap();
        assert_eq!(back, plain);
        assert!(cfg.to_kv().keys().all(ArchitectureConfig::is_arch_key));
    }

    #[test]
    fn broken_chains_rejected() {
        let mut cfg = ArchitectureConfig::default();
        cfg.branch_channels.insert(6, vec![8]);
        assert!(cfg.validate().is_err());
        let mut cfg = ArchitectureConfig::default();
        cfg.convs[0].kernel = [4, 9, 9];
        assert!(cfg.validate().is_err());
        let mut cfg = ArchitectureConfig::default();
        cfg.pool_after = vec![1];
        assert!(cfg.validate().is_err());
        let mut cfg = ArchitectureConfig::default();
        cfg.supervised.insert(5);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn input_divisibility() {
        let cfg = ArchitectureConfig::default();
        assert!(cfg.check_input([16, 32, 8]).is_ok());
        assert!(cfg.check_input([16, 30, 8]).is_err());
    }
}
