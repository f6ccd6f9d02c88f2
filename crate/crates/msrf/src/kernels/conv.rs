use crate::error::{Error, Result};
use crate::runtime::for_each_chunk;
use crate::tensor::Tensor;

use super::span;

/// Zero-padding policy for `conv2d`.
///
/// `Same` keeps `out = ceil(in / stride)` with symmetric padding and the
/// extra pixel on the bottom/right when the total is odd; `Valid` pads
/// nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    Same,
    Valid,
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_pad(extent: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(extent);
    (total / 2, out)
}

pub fn conv2d_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: Pad,
) -> Result<ConvGeom> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects 4-D input and weight, got {:?} and {:?}",
            x_shape, w_shape
        )));
    }
    if stride < 1 {
        return Err(Error::config("conv2d stride must be >= 1".to_string()));
    }
    let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {} channels, weight expects {}",
            cin, wcin
        )));
    }
    let (pad_top, pad_left, out_h, out_w) = match pad {
        Pad::Same => {
            let (pt, oh) = same_pad(h, kh, stride);
            let (pl, ow) = same_pad(w, kw, stride);
            (pt, pl, oh, ow)
        }
        Pad::Valid => {
            if h < kh || w < kw {
                return Err(Error::shape(format!(
                    "conv2d valid: kernel {}x{} larger than input {}x{}",
                    kh, kw, h, w
                )));
            }
            (0, 0, (h - kh) / stride + 1, (w - kw) / stride + 1)
        }
    };
    Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad_top, pad_left, out_h, out_w })
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    let mut out = Tensor::zeros(vec![g.n, g.cout, g.out_h, g.out_w]);
    let plane = g.out_h * g.out_w;
    let (s, pt, pl) = (g.stride, g.pad_top as isize, g.pad_left as isize);
    for_each_chunk(&mut out.data, plane, |idx, o_plane| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        o_plane.fill(bias.data[co]);
        for ci in 0..g.cin {
            let x_img = &x.data[((n * g.cin + ci) * g.h) * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = span(g.out_h, s, ky as isize - pt, g.h);
                for kx in 0..g.kw {
                    let wv = weight.data[(((co * g.cin + ci) * g.kh + ky) * g.kw) + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = span(g.out_w, s, kx as isize - pl, g.w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s) as isize + ky as isize - pt;
                        let x_row = &x_img[iy as usize * g.w..][..g.w];
                        let o_row = &mut o_plane[oy * g.out_w..][..g.out_w];
                        if s == 1 {
                            let shift = (ox_lo as isize + kx as isize - pl) as usize;
                            let xs = &x_row[shift..shift + (ox_hi - ox_lo)];
                            for (o, xv) in o_row[ox_lo..ox_hi].iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * s) as isize + kx as isize - pl;
                                o_row[ox] += wv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_grad_input(gout: &Tensor, weight: &Tensor, g: &ConvGeom) -> Tensor {
    let mut gx = Tensor::zeros(vec![g.n, g.cin, g.h, g.w]);
    let plane = g.h * g.w;
    let (s, pt, pl) = (g.stride, g.pad_top as isize, g.pad_left as isize);
    for_each_chunk(&mut gx.data, plane, |idx, gx_plane| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let go_img = &gout.data[((n * g.cout + co) * g.out_h) * g.out_w..][..g.out_h * g.out_w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = span(g.out_h, s, ky as isize - pt, g.h);
                for kx in 0..g.kw {
                    let wv = weight.data[(((co * g.cin + ci) * g.kh + ky) * g.kw) + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = span(g.out_w, s, kx as isize - pl, g.w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * s) as isize + ky as isize - pt) as usize;
                        let go_row = &go_img[oy * g.out_w..][..g.out_w];
                        let gx_row = &mut gx_plane[iy * g.w..][..g.w];
                        if s == 1 {
                            let shift = (ox_lo as isize + kx as isize - pl) as usize;
                            let dst = &mut gx_row[shift..shift + (ox_hi - ox_lo)];
                            for (d, go) in dst.iter_mut().zip(&go_row[ox_lo..ox_hi]) {
                                *d += wv * go;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize + kx as isize - pl) as usize;
                                gx_row[ix] += wv * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub fn conv2d_grad_weight(gout: &Tensor, x: &Tensor, g: &ConvGeom) -> Tensor {
    let mut gw = Tensor::zeros(vec![g.cout, g.cin, g.kh, g.kw]);
    let plane = g.cin * g.kh * g.kw;
    let (s, pt, pl) = (g.stride, g.pad_top as isize, g.pad_left as isize);
    for_each_chunk(&mut gw.data, plane, |co, gw_plane| {
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = span(g.out_h, s, ky as isize - pt, g.h);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = span(g.out_w, s, kx as isize - pl, g.w);
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let go_img =
                            &gout.data[((n * g.cout + co) * g.out_h) * g.out_w..][..g.out_h * g.out_w];
                        let x_img = &x.data[((n * g.cin + ci) * g.h) * g.w..][..g.h * g.w];
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + ky as isize - pt) as usize;
                            let go_row = &go_img[oy * g.out_w..][..g.out_w];
                            let x_row = &x_img[iy * g.w..][..g.w];
                            if s == 1 {
                                let shift = (ox_lo as isize + kx as isize - pl) as usize;
                                let xs = &x_row[shift..shift + (ox_hi - ox_lo)];
                                for (go, xv) in go_row[ox_lo..ox_hi].iter().zip(xs) {
                                    acc += go * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * s) as isize + kx as isize - pl) as usize;
                                    acc += go_row[ox] * x_row[ix];
                                }
                            }
                        }
                    }
                    gw_plane[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

pub fn conv2d_grad_bias(gout: &Tensor, g: &ConvGeom) -> Tensor {
    let mut gb = Tensor::zeros(vec![g.cout]);
    let plane = g.out_h * g.out_w;
    for n in 0..g.n {
        for co in 0..g.cout {
            let img = &gout.data[(n * g.cout + co) * plane..][..plane];
            gb.data[co] += img.iter().sum::<f64>();
        }
    }
    gb
}

/// Geometry of a transposed convolution constrained to `out = stride * in`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_transpose2d_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
) -> Result<ConvTGeom> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::shape(format!(
            "conv_transpose2d expects 4-D input and weight, got {:?} and {:?}",
            x_shape, w_shape
        )));
    }
    if stride < 1 {
        return Err(Error::config("conv_transpose2d stride must be >= 1".to_string()));
    }
    let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (wcin, cout, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv_transpose2d channel mismatch: input has {} channels, weight expects {}",
            cin, wcin
        )));
    }
    if kh != kw {
        return Err(Error::shape(format!(
            "conv_transpose2d requires a square kernel, got {}x{}",
            kh, kw
        )));
    }
    // Padding such that implicit output-padding 2p + stride - k lands in
    // [0, stride): gives out = stride * in exactly.
    let k = kh;
    let pad = if k > stride { (k - stride).div_ceil(2) } else { 0 };
    let out_pad = (2 * pad + stride) as isize - k as isize;
    if out_pad < 0 || out_pad >= stride as isize {
        return Err(Error::config(format!(
            "conv_transpose2d kernel {} with stride {} cannot produce an exact stride multiple",
            k, stride
        )));
    }
    Ok(ConvTGeom { n, cin, h, w, cout, kh, kw, stride, pad, out_h: h * stride, out_w: w * stride })
}

pub fn conv_transpose2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvTGeom) -> Tensor {
    let mut out = Tensor::zeros(vec![g.n, g.cout, g.out_h, g.out_w]);
    let plane = g.out_h * g.out_w;
    let (s, p) = (g.stride, g.pad as isize);
    for_each_chunk(&mut out.data, plane, |idx, o_plane| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        o_plane.fill(bias.data[co]);
        for ci in 0..g.cin {
            let x_img = &x.data[((n * g.cin + ci) * g.h) * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (iy_lo, iy_hi) = span(g.h, s, ky as isize - p, g.out_h);
                for kx in 0..g.kw {
                    let wv = weight.data[(((ci * g.cout + co) * g.kh + ky) * g.kw) + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ix_lo, ix_hi) = span(g.w, s, kx as isize - p, g.out_w);
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * s) as isize + ky as isize - p) as usize;
                        let x_row = &x_img[iy * g.w..][..g.w];
                        let o_row = &mut o_plane[oy * g.out_w..][..g.out_w];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * s) as isize + kx as isize - p) as usize;
                            o_row[ox] += wv * x_row[ix];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv_transpose2d_grad_input(gout: &Tensor, weight: &Tensor, g: &ConvTGeom) -> Tensor {
    let mut gx = Tensor::zeros(vec![g.n, g.cin, g.h, g.w]);
    let plane = g.h * g.w;
    let (s, p) = (g.stride, g.pad as isize);
    for_each_chunk(&mut gx.data, plane, |idx, gx_plane| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let go_img = &gout.data[((n * g.cout + co) * g.out_h) * g.out_w..][..g.out_h * g.out_w];
            for ky in 0..g.kh {
                let (iy_lo, iy_hi) = span(g.h, s, ky as isize - p, g.out_h);
                for kx in 0..g.kw {
                    let wv = weight.data[(((ci * g.cout + co) * g.kh + ky) * g.kw) + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ix_lo, ix_hi) = span(g.w, s, kx as isize - p, g.out_w);
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * s) as isize + ky as isize - p) as usize;
                        let go_row = &go_img[oy * g.out_w..][..g.out_w];
                        let gx_row = &mut gx_plane[iy * g.w..][..g.w];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * s) as isize + kx as isize - p) as usize;
                            gx_row[ix] += wv * go_row[ox];
                        }
                    }
                }
            }
        }
    });
    gx
}

pub fn conv_transpose2d_grad_weight(gout: &Tensor, x: &Tensor, g: &ConvTGeom) -> Tensor {
    let mut gw = Tensor::zeros(vec![g.cin, g.cout, g.kh, g.kw]);
    let plane = g.cout * g.kh * g.kw;
    let (s, p) = (g.stride, g.pad as isize);
    for_each_chunk(&mut gw.data, plane, |ci, gw_plane| {
        for co in 0..g.cout {
            for ky in 0..g.kh {
                let (iy_lo, iy_hi) = span(g.h, s, ky as isize - p, g.out_h);
                for kx in 0..g.kw {
                    let (ix_lo, ix_hi) = span(g.w, s, kx as isize - p, g.out_w);
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let go_img =
                            &gout.data[((n * g.cout + co) * g.out_h) * g.out_w..][..g.out_h * g.out_w];
                        let x_img = &x.data[((n * g.cin + ci) * g.h) * g.w..][..g.h * g.w];
                        for iy in iy_lo..iy_hi {
                            let oy = ((iy * s) as isize + ky as isize - p) as usize;
                            let go_row = &go_img[oy * g.out_w..][..g.out_w];
                            let x_row = &x_img[iy * g.w..][..g.w];
                            for ix in ix_lo..ix_hi {
                                let ox = ((ix * s) as isize + kx as isize - p) as usize;
                                acc += go_row[ox] * x_row[ix];
                            }
                        }
                    }
                    gw_plane[(co * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

pub fn conv_transpose2d_grad_bias(gout: &Tensor, g: &ConvTGeom) -> Tensor {
    let mut gb = Tensor::zeros(vec![g.cout]);
    let plane = g.out_h * g.out_w;
    for n in 0..g.n {
        for co in 0..g.cout {
            let img = &gout.data[(n * g.cout + co) * plane..][..plane];
            gb.data[co] += img.iter().sum::<f64>();
        }
    }
    gb
}
