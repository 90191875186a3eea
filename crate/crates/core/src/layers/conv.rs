//! 3D cross-correlation, its adjoint, and the transposed convolution built on it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Triple = [usize; 3];

/// Kernel geometry shared by convolution and transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: Triple,
    pub stride: Triple,
    pub padding: Triple,
}

impl Geometry {
    /// Stride 1 with `floor(k / 2)` padding, which preserves extents for odd kernels.
    pub fn same(kernel: Triple) -> Self {
        Geometry {
            kernel,
            stride: [1; 3],
            padding: kernel.map(|k| k / 2),
        }
    }

    /// `floor((in + 2 pad - k) / stride) + 1` per axis.
    pub fn conv_output(&self, input: Triple) -> Result<Triple> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::Shape(format!(
                    "axis {a}: input {} with padding {} is smaller than kernel {}",
                    input[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(in - 1) stride - 2 pad + k + output_padding` per axis.
    pub fn deconv_output(&self, input: Triple, output_padding: Triple) -> Result<Triple> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            if output_padding[a] >= self.stride[a] {
                return Err(Error::Shape(format!(
                    "axis {a}: output padding {} must be below stride {}",
                    output_padding[a], self.stride[a]
                )));
            }
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a] + output_padding[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::Shape(format!(
                    "axis {a}: transposed convolution output extent is not positive"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Shape(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    fn volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// A convolution layer: weights `(out, in, kd, kh, kw)`, bias `(out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub geometry: Geometry,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvSpec {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 5 || ws[2..] != self.geometry.kernel[..] {
            return Err(Error::Shape(format!(
                "conv weight {ws:?} does not match kernel {:?}",
                self.geometry.kernel
            )));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv bias {:?} for {} output channels",
                self.bias.shape(),
                ws[0]
            )));
        }
        Ok(())
    }
}

/// A transposed convolution: weights `(in, out, kd, kh, kw)`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvSpec {
    pub geometry: Geometry,
    pub output_padding: Triple,
    pub weight: Tensor,
}

impl DeconvSpec {
    /// `k = 3, s = 2, pad = 1, output_padding = 1`: doubles every extent.
    pub fn upsample2(weight: Tensor) -> Self {
        DeconvSpec {
            geometry: Geometry {
                kernel: [3; 3],
                stride: [2; 3],
                padding: [1; 3],
            },
            output_padding: [1; 3],
            weight,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 5 || ws[2..] != self.geometry.kernel[..] {
            return Err(Error::Shape(format!(
                "deconv weight {ws:?} does not match kernel {:?}",
                self.geometry.kernel
            )));
        }
        Ok(())
    }
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct DeconvGrads {
    pub input: Tensor,
    pub weight: Tensor,
}

pub fn conv3d_forward(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.check()?;
    let [c, d, h, w] = x.dims4()?;
    if c != spec.in_channels() {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels()
        )));
    }
    let out = spec.geometry.conv_output([d, h, w])?;
    let mut y = correlate(x.data(), [d, h, w], &spec.weight, &spec.geometry, out);
    let vol = out.iter().product::<usize>();
    for (chunk, &b) in y.chunks_mut(vol).zip(spec.bias.data()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(Tensor::from_raw(
        vec![spec.out_channels(), out[0], out[1], out[2]],
        y,
    ))
}

/// Gradients of `<grad_out, conv3d_forward(x)>` with respect to input, weights and bias.
pub fn conv3d_backward(x: &Tensor, spec: &ConvSpec, grad_out: &Tensor) -> Result<ConvGrads> {
    let input = conv3d_backward_input(x.shape(), spec, grad_out)?;
    let (weight, bias) = conv3d_backward_params(x, spec, grad_out)?;
    Ok(ConvGrads {
        input,
        weight,
        bias,
    })
}

/// The input-gradient half of [`conv3d_backward`].
pub fn conv3d_backward_input(
    x_shape: &[usize],
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<Tensor> {
    spec.check()?;
    let (in_sp, out_sp) = conv_grad_dims(x_shape, spec, grad_out)?;
    let gx = correlate_adjoint(grad_out.data(), out_sp, &spec.weight, &spec.geometry, in_sp);
    Ok(Tensor::from_raw(x_shape.to_vec(), gx))
}

/// The parameter-gradient half of [`conv3d_backward`]: `(weight, bias)`.
pub fn conv3d_backward_params(
    x: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    spec.check()?;
    let (in_sp, out_sp) = conv_grad_dims(x.shape(), spec, grad_out)?;
    let gw = weight_grad(
        x.data(),
        in_sp,
        grad_out.data(),
        out_sp,
        spec.weight.shape(),
        &spec.geometry,
    );
    let vol = out_sp.iter().product::<usize>();
    let gb = grad_out.data().chunks(vol).map(|c| c.iter().sum()).collect();
    Ok((
        Tensor::from_raw(spec.weight.shape().to_vec(), gw),
        Tensor::from_raw(vec![spec.out_channels()], gb),
    ))
}

fn conv_grad_dims(x_shape: &[usize], spec: &ConvSpec, grad_out: &Tensor) -> Result<(Triple, Triple)> {
    let [c, d, h, w] = match x_shape {
        &[c, d, h, w] => [c, d, h, w],
        _ => return Err(Error::Shape(format!("expected (C, D, H, W), got {x_shape:?}"))),
    };
    if c != spec.in_channels() {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels()
        )));
    }
    let out = spec.geometry.conv_output([d, h, w])?;
    let expected = [spec.out_channels(), out[0], out[1], out[2]];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv output gradient {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    Ok(([d, h, w], out))
}

pub fn deconv3d_forward(x: &Tensor, spec: &DeconvSpec) -> Result<Tensor> {
    spec.check()?;
    let [c, d, h, w] = x.dims4()?;
    if c != spec.in_channels() {
        return Err(Error::Shape(format!(
            "deconv expects {} input channels, got {c}",
            spec.in_channels()
        )));
    }
    let out = spec.geometry.deconv_output([d, h, w], spec.output_padding)?;
    // The transposed convolution is the adjoint of a correlation whose
    // (out, in) channels are this layer's (in, out); the weight layouts coincide.
    let y = correlate_adjoint(x.data(), [d, h, w], &spec.weight, &spec.geometry, out);
    Ok(Tensor::from_raw(
        vec![spec.out_channels(), out[0], out[1], out[2]],
        y,
    ))
}

pub fn deconv3d_backward(x: &Tensor, spec: &DeconvSpec, grad_out: &Tensor) -> Result<DeconvGrads> {
    spec.check()?;
    let [c, d, h, w] = x.dims4()?;
    if c != spec.in_channels() {
        return Err(Error::Shape(format!(
            "deconv expects {} input channels, got {c}",
            spec.in_channels()
        )));
    }
    let out = spec.geometry.deconv_output([d, h, w], spec.output_padding)?;
    let expected = [spec.out_channels(), out[0], out[1], out[2]];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "deconv output gradient {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let gx = correlate(grad_out.data(), out, &spec.weight, &spec.geometry, [d, h, w]);
    let gw = weight_grad(
        grad_out.data(),
        out,
        x.data(),
        [d, h, w],
        spec.weight.shape(),
        &spec.geometry,
    );
    Ok(DeconvGrads {
        input: Tensor::from_raw(x.shape().to_vec(), gx),
        weight: Tensor::from_raw(spec.weight.shape().to_vec(), gw),
    })
}

/// Output indices `o` in `0..out_len` for which `o * stride + offset` lies in `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.clamp(0, out_len as isize) as usize;
    let hi = hi.clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

/// Visits every (output row, input row) pair touched by one kernel tap,
/// passing the valid `ow` range and the matching input column start.
#[inline]
fn for_each_row(
    in_sp: Triple,
    out_sp: Triple,
    g: &Geometry,
    tap: Triple,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let offs: [isize; 3] = std::array::from_fn(|a| tap[a] as isize - g.padding[a] as isize);
    let (d0, d1) = valid_range(out_sp[0], in_sp[0], g.stride[0], offs[0]);
    let (h0, h1) = valid_range(out_sp[1], in_sp[1], g.stride[1], offs[1]);
    let (w0, w1) = valid_range(out_sp[2], in_sp[2], g.stride[2], offs[2]);
    if w0 >= w1 {
        return;
    }
    let iw0 = (w0 as isize * g.stride[2] as isize + offs[2]) as usize;
    for od in d0..d1 {
        let id = (od as isize * g.stride[0] as isize + offs[0]) as usize;
        for oh in h0..h1 {
            let ih = (oh as isize * g.stride[1] as isize + offs[1]) as usize;
            let out_row = (od * out_sp[1] + oh) * out_sp[2];
            let in_row = (id * in_sp[1] + ih) * in_sp[2];
            f(out_row, in_row, w0, w1, iw0);
        }
    }
}

fn taps(kernel: Triple) -> impl Iterator<Item = Triple> {
    (0..kernel[0]).flat_map(move |a| {
        (0..kernel[1]).flat_map(move |b| (0..kernel[2]).map(move |c| [a, b, c]))
    })
}

/// `y[o, p] = sum_{i, k} w[o, i, k] x[i, p * s + k - pad]`, without bias.
fn correlate(x: &[f64], in_sp: Triple, weight: &Tensor, g: &Geometry, out_sp: Triple) -> Vec<f64> {
    let ws = weight.shape();
    let (cout, cin) = (ws[0], ws[1]);
    let in_vol: usize = in_sp.iter().product();
    let out_vol: usize = out_sp.iter().product();
    let kvol = g.volume();
    let sw = g.stride[2];
    let mut y = vec![0.0; cout * out_vol];
    y.par_chunks_mut(out_vol).enumerate().for_each(|(oc, yc)| {
        for ic in 0..cin {
            let xc = &x[ic * in_vol..(ic + 1) * in_vol];
            let wk = &weight.data()[(oc * cin + ic) * kvol..(oc * cin + ic + 1) * kvol];
            for (t, tap) in taps(g.kernel).enumerate() {
                let wv = wk[t];
                for_each_row(in_sp, out_sp, g, tap, |orow, irow, w0, w1, iw0| {
                    let ys = &mut yc[orow + w0..orow + w1];
                    if sw == 1 {
                        let xs = &xc[irow + iw0..irow + iw0 + (w1 - w0)];
                        for (yv, xv) in ys.iter_mut().zip(xs) {
                            *yv += wv * xv;
                        }
                    } else {
                        for (n, yv) in ys.iter_mut().enumerate() {
                            *yv += wv * xc[irow + iw0 + n * sw];
                        }
                    }
                });
            }
        }
    });
    y
}

/// Adjoint of [`correlate`]: scatters `g` back onto an input-shaped buffer.
fn correlate_adjoint(
    g_out: &[f64],
    out_sp: Triple,
    weight: &Tensor,
    g: &Geometry,
    in_sp: Triple,
) -> Vec<f64> {
    let ws = weight.shape();
    let (cout, cin) = (ws[0], ws[1]);
    let in_vol: usize = in_sp.iter().product();
    let out_vol: usize = out_sp.iter().product();
    let kvol = g.volume();
    let sw = g.stride[2];
    let mut gx = vec![0.0; cin * in_vol];
    gx.par_chunks_mut(in_vol).enumerate().for_each(|(ic, gxc)| {
        for oc in 0..cout {
            let gc = &g_out[oc * out_vol..(oc + 1) * out_vol];
            let wk = &weight.data()[(oc * cin + ic) * kvol..(oc * cin + ic + 1) * kvol];
            for (t, tap) in taps(g.kernel).enumerate() {
                let wv = wk[t];
                for_each_row(in_sp, out_sp, g, tap, |orow, irow, w0, w1, iw0| {
                    let gs = &gc[orow + w0..orow + w1];
                    if sw == 1 {
                        let xs = &mut gxc[irow + iw0..irow + iw0 + (w1 - w0)];
                        for (xv, gv) in xs.iter_mut().zip(gs) {
                            *xv += wv * gv;
                        }
                    } else {
                        for (n, gv) in gs.iter().enumerate() {
                            gxc[irow + iw0 + n * sw] += wv * gv;
                        }
                    }
                });
            }
        }
    });
    gx
}

/// `dw[o, i, k] = sum_p g[o, p] x[i, p * s + k - pad]`.
fn weight_grad(
    x: &[f64],
    in_sp: Triple,
    g_out: &[f64],
    out_sp: Triple,
    wshape: &[usize],
    g: &Geometry,
) -> Vec<f64> {
    let (cout, cin) = (wshape[0], wshape[1]);
    let in_vol: usize = in_sp.iter().product();
    let out_vol: usize = out_sp.iter().product();
    let kvol = g.volume();
    let sw = g.stride[2];
    let mut gw = vec![0.0; cout * cin * kvol];
    gw.par_chunks_mut(cin * kvol).enumerate().for_each(|(oc, gwo)| {
        let gc = &g_out[oc * out_vol..(oc + 1) * out_vol];
        for ic in 0..cin {
            let xc = &x[ic * in_vol..(ic + 1) * in_vol];
            for (t, tap) in taps(g.kernel).enumerate() {
                let mut acc = 0.0;
                for_each_row(in_sp, out_sp, g, tap, |orow, irow, w0, w1, iw0| {
                    let gs = &gc[orow + w0..orow + w1];
                    if sw == 1 {
                        let xs = &xc[irow + iw0..irow + iw0 + (w1 - w0)];
                        acc += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    } else {
                        for (n, gv) in gs.iter().enumerate() {
                            acc += gv * xc[irow + iw0 + n * sw];
                        }
                    }
                });
                gwo[ic * kvol + t] = acc;
            }
        }
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{gaussian_init, inner_product};

    fn spec(cout: usize, cin: usize, g: Geometry, rng: &mut Rng) -> ConvSpec {
        let k = g.kernel;
        ConvSpec {
            geometry: g,
            weight: gaussian_init(&[cout, cin, k[0], k[1], k[2]], 0.0, 1.0, rng).unwrap(),
            bias: gaussian_init(&[cout], 0.0, 1.0, rng).unwrap(),
        }
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(0);
        let x = gaussian_init(&[1, 3, 4, 5], 0.0, 1.0, &mut rng).unwrap();
        let s = ConvSpec {
            geometry: Geometry::same([1, 1, 1]),
            weight: Tensor::filled(&[1, 1, 1, 1, 1], 1.0),
            bias: Tensor::zeros(&[1]),
        };
        assert_eq!(conv3d_forward(&x, &s).unwrap(), x);
    }

    #[test]
    fn ones_sum_to_eight() {
        let x = Tensor::filled(&[1, 2, 2, 2], 1.0);
        let s = ConvSpec {
            geometry: Geometry {
                kernel: [2; 3],
                stride: [1; 3],
                padding: [0; 3],
            },
            weight: Tensor::filled(&[1, 1, 2, 2, 2], 1.0),
            bias: Tensor::zeros(&[1]),
        };
        let y = conv3d_forward(&x, &s).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(1);
        let x = gaussian_init(&[2, 4, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let s = spec(3, 2, Geometry::same([3, 3, 3]), &mut rng);
        let g = conv3d_backward(&x, &s, &Tensor::zeros(&[3, 4, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_adjoint_routes_single_voxel() {
        let x = Tensor::zeros(&[1, 3, 3, 3]);
        let s = ConvSpec {
            geometry: Geometry::same([1, 1, 1]),
            weight: Tensor::filled(&[1, 1, 1, 1, 1], 1.0),
            bias: Tensor::zeros(&[1]),
        };
        let mut go = Tensor::zeros(&[1, 3, 3, 3]);
        go.data_mut()[13] = 1.0;
        let g = conv3d_backward(&x, &s, &go).unwrap();
        assert_eq!(g.input, go);
    }

    #[test]
    fn rejects_mismatches() {
        let mut rng = Rng::new(2);
        let s = spec(2, 2, Geometry::same([3, 3, 3]), &mut rng);
        assert!(conv3d_forward(&Tensor::zeros(&[1, 4, 4, 4]), &s).is_err());
        let tiny = ConvSpec {
            geometry: Geometry {
                kernel: [5, 5, 5],
                stride: [1; 3],
                padding: [0; 3],
            },
            ..spec(1, 1, Geometry::same([5, 5, 5]), &mut rng)
        };
        assert!(conv3d_forward(&Tensor::zeros(&[1, 3, 3, 3]), &tiny).is_err());
        let x = Tensor::zeros(&[2, 4, 4, 4]);
        assert!(conv3d_backward(&x, &s, &Tensor::zeros(&[2, 3, 4, 4])).is_err());
    }

    #[test]
    fn deconv_single_tap_spreads_kernel() {
        let mut rng = Rng::new(3);
        let k = gaussian_init(&[1, 1, 3, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let s = DeconvSpec {
            geometry: Geometry {
                kernel: [3; 3],
                stride: [2; 3],
                padding: [0; 3],
            },
            output_padding: [0; 3],
            weight: k.clone(),
        };
        let y = deconv3d_forward(&Tensor::filled(&[1, 1, 1, 1], 2.5), &s).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for (a, b) in y.data().iter().zip(k.data()) {
            assert_eq!(*a, 2.5 * b);
        }
    }

    #[test]
    fn upsample_doubles_extent() {
        let s = DeconvSpec::upsample2(Tensor::zeros(&[1, 1, 3, 3, 3]));
        assert_eq!(
            s.geometry.deconv_output([7, 7, 7], s.output_padding).unwrap(),
            [14, 14, 14]
        );
        let y = deconv3d_forward(&Tensor::zeros(&[1, 7, 4, 2]), &s).unwrap();
        assert_eq!(y.shape(), &[1, 14, 8, 4]);
    }

    #[test]
    fn deconv_adjoint_of_strided_conv() {
        let mut rng = Rng::new(4);
        let g = Geometry {
            kernel: [3; 3],
            stride: [2; 3],
            padding: [1; 3],
        };
        let w = gaussian_init(&[3, 2, 3, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let conv = ConvSpec {
            geometry: g,
            weight: w.clone(),
            bias: Tensor::zeros(&[3]),
        };
        let deconv = DeconvSpec {
            geometry: g,
            output_padding: [1; 3],
            weight: w,
        };
        let y = gaussian_init(&[2, 8, 6, 4], 0.0, 1.0, &mut rng).unwrap();
        let x = gaussian_init(&[3, 4, 3, 2], 0.0, 1.0, &mut rng).unwrap();
        let lhs = inner_product(&conv3d_forward(&y, &conv).unwrap(), &x).unwrap();
        let rhs = inner_product(&y, &deconv3d_forward(&x, &deconv).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(4, 4, 1, -1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1), (0, 3));
        assert_eq!(valid_range(4, 8, 2, -1), (1, 4));
        assert_eq!(valid_range(3, 2, 1, 5), (0, 0));
    }
}
