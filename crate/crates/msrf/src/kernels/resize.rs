use crate::error::{Error, Result};
use crate::runtime::for_each_chunk;
use crate::tensor::Tensor;

/// Source coordinate for bilinear resizing with the half-pixel
/// (align-corners = false) convention, clamped into the valid range.
fn src_coord(dst: usize, scale: f64, in_extent: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_extent - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_extent - 1);
    (lo, hi, s - lo as f64)
}

pub fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h < 1 || out_w < 1 {
        return Err(Error::config(format!(
            "bilinear target size {}x{} invalid",
            out_h, out_w
        )));
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    for_each_chunk(&mut out.data, out_h * out_w, |plane_idx, o_img| {
        let x_img = &x.data[plane_idx * h * w..][..h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = src_coord(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = src_coord(ox, sx, w);
                let v00 = x_img[y0 * w + x0];
                let v01 = x_img[y0 * w + x1];
                let v10 = x_img[y1 * w + x0];
                let v11 = x_img[y1 * w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                o_img[oy * out_w + ox] = top + fy * (bot - top);
            }
        }
    });
    Ok(out)
}

pub fn bilinear_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (gout.shape[2], gout.shape[3]);
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut gx = Tensor::zeros(in_shape.to_vec());
    for_each_chunk(&mut gx.data, h * w, |plane_idx, gx_img| {
        let go_img = &gout.data[plane_idx * out_h * out_w..][..out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = src_coord(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = src_coord(ox, sx, w);
                let g = go_img[oy * out_w + ox];
                gx_img[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gx_img[y0 * w + x1] += g * (1.0 - fy) * fx;
                gx_img[y1 * w + x0] += g * fy * (1.0 - fx);
                gx_img[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    gx
}

/// Pads a 4-D tensor by one pixel on each side, replicating edge values.
pub fn replicate_pad1_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h + 2, w + 2);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    for_each_chunk(&mut out.data, oh * ow, |plane_idx, o_img| {
        let x_img = &x.data[plane_idx * h * w..][..h * w];
        for oy in 0..oh {
            let iy = oy.saturating_sub(1).min(h - 1);
            for ox in 0..ow {
                let ix = ox.saturating_sub(1).min(w - 1);
                o_img[oy * ow + ox] = x_img[iy * w + ix];
            }
        }
    });
    Ok(out)
}

pub fn replicate_pad1_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h + 2, w + 2);
    let mut gx = Tensor::zeros(in_shape.to_vec());
    for_each_chunk(&mut gx.data, h * w, |plane_idx, gx_img| {
        let go_img = &gout.data[plane_idx * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let iy = oy.saturating_sub(1).min(h - 1);
            for ox in 0..ow {
                let ix = ox.saturating_sub(1).min(w - 1);
                gx_img[iy * w + ix] += go_img[oy * ow + ox];
            }
        }
    });
    gx
}
