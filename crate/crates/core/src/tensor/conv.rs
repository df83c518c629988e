//! im2col convolution kernels backed by `matrixmultiply`.

use crate::error::{config_err, Result};

use super::Tensor;

/// Stride, zero padding and dilation of a square cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Validated geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Self> {
        let [batch, cin, h, w] = input.dims4()?;
        let [cout, wcin, kh, kw] = weight.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(config_err!("conv2d needs an odd square kernel, got {kh}x{kw}"));
        }
        if wcin != cin {
            return Err(config_err!(
                "conv2d input has {cin} channels but the weight expects {wcin}"
            ));
        }
        if bias.shape() != [cout] {
            return Err(config_err!(
                "conv2d bias shape {:?} does not match {cout} output channels",
                bias.shape()
            ));
        }
        if spec.dilation == 0 || spec.stride == 0 {
            return Err(config_err!("conv2d stride and dilation must be at least 1"));
        }
        let ho = spec.output_extent(h, kh);
        let wo = spec.output_extent(w, kw);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok(ConvGeom {
                batch,
                cin,
                cout,
                h,
                w,
                k: kh,
                ho,
                wo,
                spec,
            }),
            _ => Err(config_err!(
                "conv2d output extent is not positive for input {h}x{w}, kernel {kh}, {spec:?}"
            )),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1 kernels at stride 1 without padding read the input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }
}

/// `c = alpha * a * b + beta * c` for row-major operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid output coordinates `o` for which `o*stride - pad + offset` lies in `0..len`.
fn valid_range(len: usize, out: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    // first o with o*stride + offset >= pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // last o with o*stride + offset - pad < len
    let hi = if len + pad <= offset {
        0
    } else {
        ((len + pad - offset - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let ConvGeom { h, w, k, ho, wo, .. } = *g;
    let ConvSpec {
        stride,
        padding,
        dilation,
    } = g.spec;
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(h, ho, stride, padding, ky * dilation);
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = valid_range(w, wo, stride, padding, kx * dilation);
                dst[..oy_lo * wo].fill(0.0);
                dst[oy_hi * wo..].fill(0.0);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky * dilation - padding;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..ox_lo].fill(0.0);
                    line[ox_hi..].fill(0.0);
                    let src = &plane[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        let ix0 = ox_lo + kx * dilation - padding;
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * stride + kx * dilation - padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let ConvGeom { h, w, k, ho, wo, .. } = *g;
    let ConvSpec {
        stride,
        padding,
        dilation,
    } = g.spec;
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(h, ho, stride, padding, ky * dilation);
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = valid_range(w, wo, stride, padding, kx * dilation);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky * dilation - padding;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * stride + kx * dilation - padding] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Tensor {
    let (rows, p) = (g.rows(), g.cols());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let mut out = vec![0.0; g.batch * out_item];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * p]
    };
    for b in 0..g.batch {
        let img = &input.data()[b * in_item..(b + 1) * in_item];
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        for (co, chunk) in dst.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let src: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(g.cout, rows, p, weight.data(), (rows, 1), src, (p, 1), 1.0, dst);
    }
    Tensor {
        shape: g.output_shape().to_vec(),
        data: out,
    }
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (rows, p) = (g.rows(), g.cols());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let [need_in, need_w, need_b] = need;
    let mut d_in = need_in.then(|| vec![0.0; g.batch * in_item]);
    let mut d_w = need_w.then(|| vec![0.0; weight.len()]);
    let d_b = need_b.then(|| {
        let mut db = vec![0.0; g.cout];
        for b in 0..g.batch {
            let go = &grad_out[b * out_item..(b + 1) * out_item];
            for (co, chunk) in go.chunks_exact(p).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut cols = vec![0.0; if pointwise { 0 } else { rows * p }];
    let mut dcols = vec![0.0; if need_in && !pointwise { rows * p } else { 0 }];
    for b in 0..g.batch {
        let go = &grad_out[b * out_item..(b + 1) * out_item];
        let img = &input.data()[b * in_item..(b + 1) * in_item];
        if let Some(dw) = d_w.as_mut() {
            let src: &[f64] = if pointwise {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dW[cout, rows] += gout[cout, p] * cols^T[p, rows]
            gemm(g.cout, p, rows, go, (p, 1), src, (1, p), 1.0, dw);
        }
        if let Some(di) = d_in.as_mut() {
            let dst = &mut di[b * in_item..(b + 1) * in_item];
            // dcols[rows, p] = W^T[rows, cout] * gout[cout, p]
            if pointwise {
                gemm(rows, g.cout, p, weight.data(), (1, rows), go, (p, 1), 0.0, dst);
            } else {
                gemm(rows, g.cout, p, weight.data(), (1, rows), go, (p, 1), 0.0, &mut dcols);
                col2im_add(g, &dcols, dst);
            }
        }
    }
    ConvGrads {
        input: d_in,
        weight: d_w,
        bias: d_b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let s = ConvSpec::new(1, 1, 1);
        assert_eq!(s.output_extent(8, 3), Some(8));
        assert_eq!(ConvSpec::new(2, 1, 1).output_extent(8, 3), Some(4));
        assert_eq!(ConvSpec::new(1, 0, 2).output_extent(8, 3), Some(4));
        assert_eq!(ConvSpec::new(1, 0, 4).output_extent(8, 3), None);
        assert_eq!(ConvSpec::new(1, 0, 1).output_extent(2, 5), None);
        assert_eq!(ConvSpec::same(3, 4), ConvSpec::new(1, 4, 4));
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..7 {
            for out in 1..9 {
                for stride in 1..4 {
                    for pad in 0..5 {
                        for offset in 0..9 {
                            let ok: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + offset) as isize - pad as isize;
                                    i >= 0 && (i as usize) < len
                                })
                                .collect();
                            let (lo, hi) = valid_range(len, out, stride, pad, offset);
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, ok, "len {len} out {out} s {stride} p {pad} o {offset}");
                        }
                    }
                }
            }
        }
    }
}
