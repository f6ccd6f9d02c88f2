use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer `out[n,o] = b[o] + sum_i x[n,i] * w[o,i]`.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape(format!(
            "dense expects 2-D input and weight, got {:?} and {:?}",
            x.shape, weight.shape
        )));
    }
    let (n, i) = (x.shape[0], x.shape[1]);
    let (o, wi) = (weight.shape[0], weight.shape[1]);
    if wi != i {
        return Err(Error::shape(format!(
            "dense feature mismatch: input has {} features, weight expects {}",
            i, wi
        )));
    }
    let mut out = Tensor::zeros(vec![n, o]);
    for b_row in 0..n {
        let x_row = &x.data[b_row * i..][..i];
        for oo in 0..o {
            let w_row = &weight.data[oo * i..][..i];
            let mut acc = bias.data[oo];
            for (xv, wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            out.data[b_row * o + oo] = acc;
        }
    }
    Ok(out)
}

pub fn dense_grad_input(gout: &Tensor, weight: &Tensor) -> Tensor {
    let (n, o) = (gout.shape[0], gout.shape[1]);
    let i = weight.shape[1];
    let mut gx = Tensor::zeros(vec![n, i]);
    for b_row in 0..n {
        let g_row = &gout.data[b_row * o..][..o];
        let gx_row = &mut gx.data[b_row * i..][..i];
        for oo in 0..o {
            let g = g_row[oo];
            let w_row = &weight.data[oo * i..][..i];
            for (gxv, wv) in gx_row.iter_mut().zip(w_row) {
                *gxv += g * wv;
            }
        }
    }
    gx
}

pub fn dense_grad_weight(gout: &Tensor, x: &Tensor) -> Tensor {
    let (n, o) = (gout.shape[0], gout.shape[1]);
    let i = x.shape[1];
    let mut gw = Tensor::zeros(vec![o, i]);
    for b_row in 0..n {
        let g_row = &gout.data[b_row * o..][..o];
        let x_row = &x.data[b_row * i..][..i];
        for oo in 0..o {
            let g = g_row[oo];
            let gw_row = &mut gw.data[oo * i..][..i];
            for (gwv, xv) in gw_row.iter_mut().zip(x_row) {
                *gwv += g * xv;
            }
        }
    }
    gw
}

pub fn dense_grad_bias(gout: &Tensor) -> Tensor {
    let (n, o) = (gout.shape[0], gout.shape[1]);
    let mut gb = Tensor::zeros(vec![o]);
    for b_row in 0..n {
        for oo in 0..o {
            gb.data[oo] += gout.data[b_row * o + oo];
        }
    }
    gb
}
