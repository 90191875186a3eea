use crate::error::{Error, Result};

/// Per-voxel binary targets over a `(D, H, W)` grid: 0 = background, 1 = liver.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVolume {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("label extents must be positive, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "label shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Param(format!("labels must be 0 or 1, found {v}")));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelVolume {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[self.index(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, v: bool) {
        let i = self.index(d, h, w);
        self.data[i] = v as u8;
    }
}
