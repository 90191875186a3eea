//! Seeded synthetic liver phantoms.
//!
//! Each case is a union of randomly deformed ellipsoids (the liver, label 1)
//! with an abutting organ of slightly brighter intensity (label 0), an optional
//! darker lesion inside the liver (still label 1), a dark background and
//! additive Gaussian noise. Intensities are HU-like integers stored as
//! `MET_SHORT`. Case `i` draws from its own random stream, so cases are
//! independent of each other and of the case count.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::{join, parse_list, KvMap};
use crate::labels::LabelVolume;
use crate::rng::Rng;
use crate::volume::{ElementType, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// `(D, H, W)`; each extent must be a positive multiple of 4.
    pub shape: [usize; 3],
    pub cases: usize,
    pub seed: u64,
    pub spacing: [f64; 3],
    /// Number of ellipsoids unioned into the liver.
    pub ellipsoids: usize,
    /// Semi-axis range as a fraction of the extent along that axis.
    pub radius_range: (f64, f64),
    /// Relative amplitude of the smooth radial deformation.
    pub deformation: f64,
    pub background: f64,
    pub liver_intensity: f64,
    /// The adjacent organ sits at `liver_intensity + contrast_gap`.
    pub contrast_gap: f64,
    pub noise_sigma: f64,
    pub lesion_probability: f64,
    /// Lesions sit at `liver_intensity - lesion_delta`.
    pub lesion_delta: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [32, 32, 32],
            cases: 30,
            seed: 0,
            spacing: [1.5, 1.0, 1.0],
            ellipsoids: 3,
            radius_range: (0.22, 0.36),
            deformation: 0.15,
            background: -80.0,
            liver_intensity: 120.0,
            contrast_gap: 30.0,
            noise_sigma: 20.0,
            lesion_probability: 0.5,
            lesion_delta: 60.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&e| e == 0 || e % 4 != 0) {
            return Err(Error::Param(format!(
                "phantom extents must be positive multiples of 4, got {:?}",
                self.shape
            )));
        }
        if self.cases == 0 || self.ellipsoids == 0 {
            return Err(Error::Param("phantoms need at least one case and one ellipsoid".into()));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Param(format!("radius range must satisfy 0 < lo <= hi <= 0.5, got ({lo}, {hi})")));
        }
        if !(0.0..1.0).contains(&self.deformation) {
            return Err(Error::Param(format!("deformation must lie in [0, 1), got {}", self.deformation)));
        }
        if !(self.contrast_gap >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.lesion_delta >= 0.0) {
            return Err(Error::Param("contrast gap, noise sigma and lesion delta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::Param(format!(
                "lesion probability must lie in [0, 1], got {}",
                self.lesion_probability
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Param(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        let intensities = [self.background, self.liver_intensity, self.contrast_gap, self.lesion_delta];
        if intensities.iter().any(|v| !v.is_finite() || v.abs() > 10_000.0) {
            return Err(Error::Param("phantom intensities must be finite and within +-10000".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("shape", format!("{}x{}x{}", self.shape[0], self.shape[1], self.shape[2]));
        kv.set("cases", self.cases);
        kv.set("seed", self.seed);
        kv.set("spacing", join(self.spacing));
        kv.set("ellipsoids", self.ellipsoids);
        kv.set("radius_min", self.radius_range.0);
        kv.set("radius_max", self.radius_range.1);
        kv.set("deformation", self.deformation);
        kv.set("background", self.background);
        kv.set("liver_intensity", self.liver_intensity);
        kv.set("contrast_gap", self.contrast_gap);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("lesion_probability", self.lesion_probability);
        kv.set("lesion_delta", self.lesion_delta);
        kv
    }

    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        if let Some(s) = kv.get("shape") {
            let dims: Vec<usize> = s
                .split('x')
                .map(|p| p.trim().parse().ok())
                .collect::<Option<_>>()
                .filter(|d: &Vec<usize>| d.len() == 3)
                .ok_or_else(|| Error::Config(format!("bad shape `{s}`, expected DxHxW")))?;
            self.shape = [dims[0], dims[1], dims[2]];
        }
        if let Some(s) = kv.get("spacing") {
            let v: Vec<f64> = parse_list(s)
                .ok()
                .filter(|v: &Vec<f64>| v.len() == 3)
                .ok_or_else(|| Error::Config(format!("bad spacing `{s}`, expected d,h,w")))?;
            self.spacing = [v[0], v[1], v[2]];
        }
        self.cases = kv.parsed_or("cases", self.cases)?;
        self.seed = kv.parsed_or("seed", self.seed)?;
        self.ellipsoids = kv.parsed_or("ellipsoids", self.ellipsoids)?;
        self.radius_range.0 = kv.parsed_or("radius_min", self.radius_range.0)?;
        self.radius_range.1 = kv.parsed_or("radius_max", self.radius_range.1)?;
        self.deformation = kv.parsed_or("deformation", self.deformation)?;
        self.background = kv.parsed_or("background", self.background)?;
        self.liver_intensity = kv.parsed_or("liver_intensity", self.liver_intensity)?;
        self.contrast_gap = kv.parsed_or("contrast_gap", self.contrast_gap)?;
        self.noise_sigma = kv.parsed_or("noise_sigma", self.noise_sigma)?;
        self.lesion_probability = kv.parsed_or("lesion_probability", self.lesion_probability)?;
        self.lesion_delta = kv.parsed_or("lesion_delta", self.lesion_delta)?;
        self.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn is_phantom_key(key: &str) -> bool {
        PhantomSpec::default().to_kv().contains(key)
    }
}

/// Generates `spec.cases` phantoms; case `i` depends only on `(spec, i)`.
pub fn make_phantoms(spec: &PhantomSpec) -> Result<Vec<(Volume, LabelVolume)>> {
    spec.validate()?;
    (0..spec.cases)
        .into_par_iter()
        .map(|i| make_case(spec, i))
        .collect()
}

/// A smooth multiplicative radius modulation: `1 + a * mean(sin(k . x + phi))`.
struct Deform {
    waves: Vec<([f64; 3], f64)>,
    amplitude: f64,
}

impl Deform {
    fn new(rng: &mut Rng, amplitude: f64) -> Self {
        let waves = (0..2)
            .map(|_| {
                let k = [0; 3].map(|_| rng.uniform_in(-1.5, 1.5) * TAU);
                (k, rng.uniform_in(0.0, TAU))
            })
            .collect();
        Deform { waves, amplitude }
    }

    fn scale(&self, x: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phi)| (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + phi).sin())
            .sum();
        1.0 + self.amplitude * s / self.waves.len() as f64
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius of `p`; below 1 means inside.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

fn make_case(spec: &PhantomSpec, index: usize) -> Result<(Volume, LabelVolume)> {
    let mut rng = Rng::with_stream(spec.seed, index as u64);
    let ext = spec.shape.map(|e| e as f64);
    let (rlo, rhi) = spec.radius_range;
    let n: usize = spec.shape.iter().product();
    let coords = |i: usize| {
        let w = i % spec.shape[2];
        let h = (i / spec.shape[2]) % spec.shape[1];
        let d = i / (spec.shape[1] * spec.shape[2]);
        [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5]
    };
    let unit = |p: [f64; 3]| [p[0] / ext[0], p[1] / ext[1], p[2] / ext[2]];

    let anchor = [0; 3].map(|_| 0.5 + rng.uniform_in(-0.08, 0.08));
    let blobs: Vec<Ellipsoid> = (0..spec.ellipsoids)
        .map(|k| {
            let jitter = if k == 0 { 0.0 } else { 0.12 };
            let center: [f64; 3] = std::array::from_fn(|a| (anchor[a] + rng.uniform_in(-jitter, jitter)) * ext[a]);
            let radii: [f64; 3] = std::array::from_fn(|a| rng.uniform_in(rlo, rhi) * ext[a]);
            Ellipsoid { center, radii }
        })
        .collect();
    let deform = Deform::new(&mut rng, spec.deformation);
    let mut liver: Vec<bool> = (0..n)
        .map(|i| {
            let p = coords(i);
            let s = deform.scale(unit(p));
            blobs.iter().any(|b| b.rho2(p) <= s * s)
        })
        .collect();
    keep_largest_component(&mut liver, spec.shape);
    if !liver.iter().any(|&v| v) {
        // Degenerate draw (all blobs between voxel centers): fall back to the anchor voxel.
        let idx: [usize; 3] = std::array::from_fn(|a| ((anchor[a] * ext[a]) as usize).min(spec.shape[a] - 1));
        liver[(idx[0] * spec.shape[1] + idx[1]) * spec.shape[2] + idx[2]] = true;
    }

    // Adjacent organ: an ellipsoid just beyond the liver's edge along a random in-plane direction.
    let theta = rng.uniform_in(0.0, TAU);
    let dir = [0.0, theta.sin(), theta.cos()];
    let centroid = centroid(&liver, &coords);
    let reach = (0..n)
        .filter(|&i| liver[i])
        .map(|i| {
            let p = coords(i);
            (0..3).map(|a| (p[a] - centroid[a]) * dir[a]).sum::<f64>()
        })
        .fold(0.0, f64::max);
    let organ_radii: [f64; 3] = std::array::from_fn(|a| rng.uniform_in(0.6 * rlo, rlo) * ext[a]);
    let along = (organ_radii[1] * dir[1]).hypot(organ_radii[2] * dir[2]);
    let organ = Ellipsoid {
        center: std::array::from_fn(|a| centroid[a] + dir[a] * (reach + 0.6 * along)),
        radii: organ_radii,
    };

    let lesion = if rng.uniform() < spec.lesion_probability {
        let inside: Vec<usize> = (0..n).filter(|&i| liver[i]).collect();
        let c = coords(inside[rng.below(inside.len())]);
        let r = rng.uniform_in(0.05, 0.09);
        Some(Ellipsoid {
            center: c,
            radii: std::array::from_fn(|a| r * ext[a]),
        })
    } else {
        None
    };

    let organ_intensity = spec.liver_intensity + spec.contrast_gap;
    let lesion_intensity = spec.liver_intensity - spec.lesion_delta;
    let mut data = Vec::with_capacity(n);
    for (i, &is_liver) in liver.iter().enumerate() {
        let p = coords(i);
        let base = if is_liver {
            match &lesion {
                Some(l) if l.rho2(p) <= 1.0 => lesion_intensity,
                _ => spec.liver_intensity,
            }
        } else if organ.rho2(p) <= 1.0 {
            organ_intensity
        } else {
            spec.background
        };
        let noisy = base + rng.normal(0.0, spec.noise_sigma);
        data.push(noisy.round().clamp(-32768.0, 32767.0));
    }
    let mut volume = Volume::new(spec.shape, data, spec.spacing)?;
    volume.element_type = ElementType::I16;
    let labels = LabelVolume::new(spec.shape, liver.iter().map(|&b| u8::from(b)).collect())?;
    Ok((volume, labels))
}

fn centroid(mask: &[bool], coords: &impl Fn(usize) -> [f64; 3]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let p = coords(i);
        for a in 0..3 {
            sum[a] += p[a];
        }
        count += 1.0;
    }
    sum.map(|s| s / count)
}

/// Six-connected components of `mask`, as a per-voxel component id (`usize::MAX` for background).
pub(crate) fn components6(mask: &[bool], shape: [usize; 3]) -> (Vec<usize>, Vec<usize>) {
    let [d, h, w] = shape;
    let mut id = vec![usize::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || id[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let mut size = 0;
        id[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if mask[j] && id[j] == usize::MAX {
                    id[j] = label;
                    queue.push_back(j);
                }
            };
            if z > 0 { visit(i - h * w); }
            if z + 1 < d { visit(i + h * w); }
            if y > 0 { visit(i - w); }
            if y + 1 < h { visit(i + w); }
            if x > 0 { visit(i - 1); }
            if x + 1 < w { visit(i + 1); }
        }
        sizes.push(size);
    }
    (id, sizes)
}

fn keep_largest_component(mask: &mut [bool], shape: [usize; 3]) {
    let (id, sizes) = components6(mask, shape);
    let Some(best) = (0..sizes.len()).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))) else {
        return;
    };
    for (m, &c) in mask.iter_mut().zip(&id) {
        *m = c == best;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            shape: [16, 16, 16],
            cases: 6,
            seed: 9,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = make_phantoms(&small()).unwrap();
        let b = make_phantoms(&small()).unwrap();
        assert_eq!(a, b);
        let c = make_phantoms(&PhantomSpec { seed: 10, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cases_do_not_depend_on_count() {
        let few = make_phantoms(&PhantomSpec { cases: 2, ..small() }).unwrap();
        let many = make_phantoms(&small()).unwrap();
        assert_eq!(few[..], many[..2]);
    }

    #[test]
    fn labels_binary_and_liver_connected() {
        for (v, l) in make_phantoms(&PhantomSpec { cases: 20, ..PhantomSpec::default() }).unwrap() {
            assert!(v.shape.iter().all(|e| e % 4 == 0));
            assert!(l.data().iter().all(|&x| x <= 1));
            let fg = l.count_foreground();
            assert!(fg > 0 && fg < l.len());
            let mask: Vec<bool> = l.data().iter().map(|&x| x == 1).collect();
            let (_, sizes) = components6(&mask, l.shape());
            assert_eq!(sizes.len(), 1);
            assert!(v.data.iter().all(|x| x.fract() == 0.0));
        }
    }

    #[test]
    fn noiseless_intensities_follow_labels() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            lesion_probability: 1.0,
            ..small()
        };
        let mut saw_organ = false;
        for (v, l) in make_phantoms(&spec).unwrap() {
            for (x, &lab) in v.data.iter().zip(l.data()) {
                if lab == 1 {
                    assert!(*x == 120.0 || *x == 60.0);
                } else {
                    assert!(*x == -80.0 || *x == 150.0);
                    saw_organ |= *x == 150.0;
                }
            }
        }
        assert!(saw_organ);
    }

    #[test]
    fn invalid_specs() {
        assert!(make_phantoms(&PhantomSpec { shape: [30, 32, 32], ..small() }).is_err());
        assert!(make_phantoms(&PhantomSpec { contrast_gap: -1.0, ..small() }).is_err());
        assert!(make_phantoms(&PhantomSpec { cases: 0, ..small() }).is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let spec = PhantomSpec { shape: [8, 12, 16], noise_sigma: 3.5, ..small() };
        let back = PhantomSpec::default().apply_kv(&spec.to_kv()).unwrap();
        assert_eq!(back, spec);
        assert!(PhantomSpec::is_phantom_key("noise_sigma"));
        assert!(!PhantomSpec::is_phantom_key("noise"));
    }

    #[test]
    fn components_six_connectivity() {
        // Two separated voxels, then one grown into a pair.
        let mut m = vec![false; 8];
        m[0] = true;
        m[3] = true;
        let (_, sizes) = components6(&m, [1, 2, 4]);
        assert_eq!(sizes, vec![1, 1]);
        m[1] = true;
        let (_, sizes) = components6(&m, [1, 2, 4]);
        assert_eq!(sizes, vec![2, 1]);
    }
}
