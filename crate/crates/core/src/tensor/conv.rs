//! Cross-correlation over 2D (`[B, C, H, W]`) and 3D (`[B, C, T, H, W]`) inputs.
//!
//! Both entry points lower to one im2col + GEMM kernel; a 2D convolution is a
//! 3D one with a depth-1 input and kernel.

use super::float::{gemm, Mat};
use super::{Float, Tensor};
use crate::error::{config_err, shape_err, Result};

/// Stride and zero padding per (depth, height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

#[derive(Clone, Copy)]
struct Plan {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    geo: ConvGeometry,
}

impl Plan {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn p(&self) -> usize {
        self.output.iter().product()
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.geo.stride == [1, 1, 1] && self.geo.padding == [0, 0, 0]
    }

    /// Unfolds one batch item `x: [Cin, D, H, W]` into `cols: [K, P]`.
    fn im2col<F: Float>(&self, x: &[F], cols: &mut [F]) {
        let [kd, kh, kw] = self.kernel;
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let [sd, sh, sw] = self.geo.stride;
        let [pd, ph, pw] = self.geo.padding;
        let p = self.p();
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        let mut o = 0;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                    dst[o..o + ow].fill(F::zero());
                                    o += ow;
                                    continue;
                                }
                                let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                                for ox in 0..ow {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    dst[o] = if ix < 0 || ix >= w as isize {
                                        F::zero()
                                    } else {
                                        src[ix as usize]
                                    };
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: scatters `cols` back into `dx`.
    fn col2im<F: Float>(&self, cols: &[F], dx: &mut [F]) {
        let [kd, kh, kw] = self.kernel;
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let [sd, sh, sw] = self.geo.stride;
        let [pd, ph, pw] = self.geo.padding;
        let p = self.p();
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        let mut o = 0;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                    o += ow;
                                    continue;
                                }
                                let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                                for ox in 0..ow {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst[ix as usize] += src[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return Err(shape_err!(
            "kernel {kernel} (stride {stride}, pad {pad}) does not fit extent {input}"
        ));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

fn conv_general<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    xdims: [usize; 5],
    kernel: [usize; 3],
    geo: ConvGeometry,
) -> Result<(Vec<usize>, Tensor<F>)> {
    let [batch, cin, d, h, w] = xdims;
    let cout = weight.shape()[0];
    if weight.shape()[1] != cin {
        return Err(shape_err!(
            "conv weight {:?} expects {} input channels, input has {cin}",
            weight.shape(),
            weight.shape()[1]
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("conv bias {:?}, expected [{cout}]", b.shape()));
        }
    }
    let output = [
        out_extent(d, kernel[0], geo.stride[0], geo.padding[0])?,
        out_extent(h, kernel[1], geo.stride[1], geo.padding[1])?,
        out_extent(w, kernel[2], geo.stride[2], geo.padding[2])?,
    ];
    let plan = Plan { cin, input: [d, h, w], kernel, output, geo };
    let (k, p, inp) = (plan.k(), plan.p(), plan.in_plane());
    let (xd, wd) = (x.data_arc(), weight.data_arc());
    let mut out = vec![F::zero(); batch * cout * p];
    let mut cols = if plan.is_pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
    for b in 0..batch {
        let xb = &xd[b * cin * inp..(b + 1) * cin * inp];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        let colm = if plan.is_pointwise() {
            Mat::new(xb, k, p)
        } else {
            plan.im2col(xb, &mut cols);
            Mat::new(&cols, k, p)
        };
        gemm(Mat::new(&wd, cout, k), colm, ob, F::one(), beta);
    }

    let needs = [
        x.requires_grad(),
        weight.requires_grad(),
        bias.is_some_and(|b| b.requires_grad()),
    ];
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let has_bias = bias.is_some();
    let out_dims = vec![batch, cout, output[0], output[1], output[2]];
    let t = Tensor::from_op(out, out_dims.clone(), &inputs, move |g| {
        let mut gx = needs[0].then(|| vec![F::zero(); batch * cin * inp]);
        let mut gw = needs[1].then(|| vec![F::zero(); cout * k]);
        let mut gb = (has_bias && needs[2]).then(|| vec![F::zero(); cout]);
        let mut cols = vec![F::zero(); k * p];
        for b in 0..batch {
            let gbat = Mat::new(&g[b * cout * p..(b + 1) * cout * p], cout, p);
            if let Some(gb) = gb.as_mut() {
                for (co, chunk) in g[b * cout * p..(b + 1) * cout * p].chunks(p).enumerate() {
                    gb[co] += chunk.iter().copied().sum::<F>();
                }
            }
            let xb = &xd[b * cin * inp..(b + 1) * cin * inp];
            if let Some(gw) = gw.as_mut() {
                let colm = if plan.is_pointwise() {
                    Mat::new(xb, k, p)
                } else {
                    plan.im2col(xb, &mut cols);
                    Mat::new(&cols, k, p)
                };
                gemm(gbat, colm.t(), gw, F::one(), F::one());
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[b * cin * inp..(b + 1) * cin * inp];
                if plan.is_pointwise() {
                    gemm(Mat::new(&wd, cout, k).t(), gbat, gxb, F::one(), F::zero());
                } else {
                    gemm(Mat::new(&wd, cout, k).t(), gbat, &mut cols, F::one(), F::zero());
                    plan.col2im(&cols, gxb);
                }
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(gb);
        }
        grads
    });
    Ok((out_dims, t))
}

impl<F: Float> Tensor<F> {
    /// 2D cross-correlation: input `[B, Cin, H, W]`, weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<F>> {
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(shape_err!(
                "conv2d expects [B,C,H,W] input and [Co,Ci,kh,kw] weight, got {:?} / {:?}",
                self.shape(),
                weight.shape()
            ));
        }
        let s = self.shape();
        let geo = ConvGeometry { stride: [1, stride, stride], padding: [0, padding, padding] };
        let kernel = [1, weight.dim(2), weight.dim(3)];
        let (dims, out) = conv_general(self, weight, bias, [s[0], s[1], 1, s[2], s[3]], kernel, geo)?;
        out.reshape(&[dims[0], dims[1], dims[3], dims[4]])
    }

    /// 3D cross-correlation with unit stride: input `[B, Cin, T, H, W]`,
    /// weight `[Cout, Cin, kt, kh, kw]` with every extent in {1, 3}.
    pub fn conv3d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        padding: [usize; 3],
    ) -> Result<Tensor<F>> {
        if self.rank() != 5 || weight.rank() != 5 {
            return Err(shape_err!(
                "conv3d expects [B,C,T,H,W] input and [Co,Ci,kt,kh,kw] weight, got {:?} / {:?}",
                self.shape(),
                weight.shape()
            ));
        }
        let kernel = [weight.dim(2), weight.dim(3), weight.dim(4)];
        if kernel.iter().any(|&e| e != 1 && e != 3) {
            return Err(config_err!("unsupported conv3d kernel extents {:?}", kernel));
        }
        if kernel[0] != 2 * padding[0] + 1 {
            return Err(config_err!(
                "temporal padding {} does not preserve the frame count for kernel depth {}",
                padding[0],
                kernel[0]
            ));
        }
        let s = self.shape();
        let geo = ConvGeometry { stride: [1, 1, 1], padding };
        let (_, out) = conv_general(self, weight, bias, [s[0], s[1], s[2], s[3], s[4]], kernel, geo)?;
        Ok(out)
    }
}
