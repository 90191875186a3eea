use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Winning input offsets recorded by [`maxpool3d_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolRecord {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolRecord {
    /// Linear input index selected for each output voxel.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

/// 2x2x2 max-pooling with stride 2. Odd extents are rejected, not padded.
/// Ties go to the lowest linear input index.
pub fn maxpool3d_forward(x: &Tensor) -> Result<(Tensor, PoolRecord)> {
    let [c, d, h, w] = x.dims4()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max-pool needs even spatial extents, got ({d}, {h}, {w})"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let xs = x.data();
    for ch in 0..c {
        let base = ch * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for q in 0..ow {
                    let mut best_i = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dq in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * q + dq;
                                if best_i == usize::MAX || xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((
        Tensor::from_raw(vec![c, od, oh, ow], out),
        PoolRecord {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool3d_backward(record: &PoolRecord, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != record.argmax.len() {
        return Err(Error::Shape(format!(
            "pool gradient has {} values, record holds {}",
            grad_out.len(),
            record.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&record.input_shape);
    let buf = gx.data_mut();
    for (&i, &g) in record.argmax.iter().zip(grad_out.data()) {
        buf[i] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_max_and_argmax() {
        let x = Tensor::new(vec![1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let (y, rec) = maxpool3d_forward(&x).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(rec.argmax(), &[7]);
    }

    #[test]
    fn ties_go_to_first_index() {
        let x = Tensor::filled(&[1, 2, 2, 2], 3.0);
        let (y, rec) = maxpool3d_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(rec.argmax(), &[0]);
        let g = maxpool3d_backward(&rec, &Tensor::filled(&[1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[2.0, 0., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(maxpool3d_forward(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }
}
