use crate::error::{Error, Result};
use crate::runtime::for_each_chunk;
use crate::tensor::Tensor;

/// 2x2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input-plane index of the selected maximum (first
/// occurrence in row-major window order on ties).
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "maxpool2 requires even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane_idx in 0..n * c {
        let x_img = &x.data[plane_idx * h * w..][..h * w];
        let o_img = &mut out.data[plane_idx * oh * ow..][..oh * ow];
        let a_img = &mut arg[plane_idx * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * w + 2 * ox;
                let idxs = [base, base + 1, base + w, base + w + 1];
                let mut best = idxs[0];
                let mut best_v = x_img[idxs[0]];
                for &i in &idxs[1..] {
                    if x_img[i] > best_v {
                        best_v = x_img[i];
                        best = i;
                    }
                }
                o_img[oy * ow + ox] = best_v;
                a_img[oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(gout: &Tensor, arg: &[u32], in_shape: &[usize]) -> Tensor {
    let (n, c) = (in_shape[0], in_shape[1]);
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (gout.shape[2], gout.shape[3]);
    let mut gx = Tensor::zeros(vec![n, c, h, w]);
    for_each_chunk(&mut gx.data, h * w, |plane_idx, gx_img| {
        let go_img = &gout.data[plane_idx * oh * ow..][..oh * ow];
        let a_img = &arg[plane_idx * oh * ow..][..oh * ow];
        for i in 0..oh * ow {
            gx_img[a_img[i] as usize] += go_img[i];
        }
    });
    gx
}

/// Mean over the spatial dims: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(vec![n, c]);
    for i in 0..n * c {
        let img = &x.data[i * plane..][..plane];
        out.data[i] = img.iter().sum::<f64>() / plane as f64;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let plane = in_shape[2] * in_shape[3];
    let inv = 1.0 / plane as f64;
    let mut gx = Tensor::zeros(in_shape.to_vec());
    for i in 0..gout.data.len() {
        let g = gout.data[i] * inv;
        for v in &mut gx.data[i * plane..(i + 1) * plane] {
            *v += g;
        }
    }
    gx
}
