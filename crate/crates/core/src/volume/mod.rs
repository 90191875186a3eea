//! Scalar volumes, MetaImage-style files, intensity windowing, synthetic
//! phantoms and leave-one-out splits.

mod manifest;
mod metaimage;
mod phantom;

pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use metaimage::{read_labels, read_volume, write_labels, write_volume};
pub use phantom::{make_phantoms, PhantomSpec};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

/// Storage type of the raw payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    /// `MET_UCHAR`
    U8,
    /// `MET_SHORT`
    I16,
    /// `MET_DOUBLE`
    F64,
}

impl ElementType {
    pub fn met_name(self) -> &'static str {
        match self {
            ElementType::U8 => "MET_UCHAR",
            ElementType::I16 => "MET_SHORT",
            ElementType::F64 => "MET_DOUBLE",
        }
    }

    pub fn from_met_name(s: &str) -> Option<Self> {
        match s {
            "MET_UCHAR" => Some(ElementType::U8),
            "MET_SHORT" => Some(ElementType::I16),
            "MET_DOUBLE" => Some(ElementType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::U8 => 1,
            ElementType::I16 => 2,
            ElementType::F64 => 8,
        }
    }
}

/// A 3D scalar grid in `(D, H, W)` order with per-axis spacing in mm.
///
/// `D` is the through-plane (axial) axis; `(H, W)` spans the transverse plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// Type used when the volume is written.
    pub element_type: ElementType,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>, spacing: [f64; 3]) -> Result<Self> {
        let v = Volume {
            shape,
            data,
            spacing,
            origin: [0.0; 3],
            element_type: ElementType::F64,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Shape(format!("volume extents must be positive, got {:?}", self.shape)));
        }
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "volume {:?} needs {} values, got {}",
                self.shape,
                self.shape.iter().product::<usize>(),
                self.data.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Param(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        Ok(())
    }

    pub fn from_labels(labels: &LabelVolume, spacing: [f64; 3]) -> Result<Self> {
        let mut v = Volume::new(
            labels.shape(),
            labels.data().iter().map(|&b| f64::from(b)).collect(),
            spacing,
        )?;
        v.element_type = ElementType::U8;
        Ok(v)
    }

    /// Interprets the values as binary labels; anything other than 0 or 1 is an error.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let data = self
            .data
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::Param(format!("label value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelVolume::new(self.shape, data)
    }

    /// The volume as a `(1, D, H, W)` tensor, unchanged.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![1, self.shape[0], self.shape[1], self.shape[2]],
            self.data.clone(),
        )
    }
}

/// Default intensity window in HU.
pub const DEFAULT_WINDOW: (f64, f64) = (-100.0, 400.0);

/// Clamps to `[lo, hi]` and maps affinely onto `[0, 1]`, giving a `(1, D, H, W)` tensor.
pub fn normalize(volume: &Volume, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Param(format!("window needs lo < hi, got ({lo}, {hi})")));
    }
    let data = volume
        .data
        .iter()
        .map(|&v| (v.clamp(lo, hi) - lo) / (hi - lo))
        .collect();
    Tensor::new(
        vec![1, volume.shape[0], volume.shape[1], volume.shape[2]],
        data,
    )
}

/// Leave-one-out folds: `(training indexes, held-out index)` for each case.
pub fn loocv_splits(n: usize) -> Result<Vec<(Vec<usize>, usize)>> {
    if n < 2 {
        return Err(Error::Param(format!("leave-one-out needs at least 2 cases, got {n}")));
    }
    Ok((0..n)
        .map(|test| ((0..n).filter(|&i| i != test).collect(), test))
        .collect())
}
