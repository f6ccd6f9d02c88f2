//! Dual-scale dense fusion block: two parallel five-stage dense residual
//! streams at adjacent resolutions, exchanging features after every stage.
//!
//! Stage `d` of the high stream convolves the concatenation of its own
//! running history with the upsampled previous output of the low stream;
//! the low stream mirrors this with a stride-2 downsampling convolution.
//! A 1x1 fusion convolution maps the final stage back to the stream's
//! input channel count before the scaled residual add, which reconciles
//! the growth-factor channel count with the residual connection.

use crate::blocks::{clr, clr_specs};
use crate::error::{Error, Result};
use crate::kernels::conv::Pad;
use crate::params::{conv_spec, convt_spec, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};

/// Number of CLR stages per stream.
pub const DSDF_DEPTH: usize = 5;

#[derive(Clone, Copy, Debug)]
pub struct DsdfConfig {
    /// Input channels of the high-resolution stream.
    pub ch_high: usize,
    /// Input channels of the low-resolution stream.
    pub ch_low: usize,
    /// Growth factor: output channels of every stage CLR.
    pub k: usize,
    /// Residual scaling factor.
    pub w: f64,
    /// When false the residual add skips the multiplication by `w`.
    pub scaled: bool,
    /// LeakyReLU negative slope.
    pub slope: f64,
}

impl DsdfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("dsdf growth factor must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::config(format!("dsdf scaling w={} outside [0,1]", self.w)));
        }
        if self.ch_high < 1 || self.ch_low < 1 {
            return Err(Error::config("dsdf stream channels must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Input channel count of the stage-`d` CLR (1-based): the stream's own
    /// history plus one cross-scale term of `k` channels.
    pub fn stage_in_channels(&self, own_ch: usize, d: usize) -> usize {
        own_ch + (d - 1) * self.k + self.k
    }
}

/// Every tensor the block owns: per-stage CLR kernels for both streams,
/// per-stage cross-scale exchange kernels, and the two 1x1 fusion kernels.
pub fn dsdf_param_specs(prefix: &str, cfg: &DsdfConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for d in 1..=DSDF_DEPTH {
        let cross_in_h = if d == 1 { cfg.ch_low } else { cfg.k };
        let cross_in_l = if d == 1 { cfg.ch_high } else { cfg.k };
        specs.extend(convt_spec(&format!("{prefix}.up{d}"), cross_in_h, cfg.k, 3));
        specs.extend(clr_specs(
            &format!("{prefix}.h.clr{d}"),
            cfg.k,
            cfg.stage_in_channels(cfg.ch_high, d),
        ));
        specs.extend(conv_spec(&format!("{prefix}.down{d}"), cfg.k, cross_in_l, 3));
        specs.extend(clr_specs(
            &format!("{prefix}.l.clr{d}"),
            cfg.k,
            cfg.stage_in_channels(cfg.ch_low, d),
        ));
    }
    specs.extend(conv_spec(&format!("{prefix}.h.fuse"), cfg.ch_high, cfg.k, 1));
    specs.extend(conv_spec(&format!("{prefix}.l.fuse"), cfg.ch_low, cfg.k, 1));
    specs
}

pub fn dsdf_forward(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x_h: Var,
    x_l: Var,
    cfg: &DsdfConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (hn, hc, hh, hw) = tape.value(x_h).dims4()?;
    let (ln, lc, lh, lw) = tape.value(x_l).dims4()?;
    if hn != ln || hh != lh * 2 || hw != lw * 2 {
        return Err(Error::shape(format!(
            "dsdf streams must sit one scale apart: high {:?} vs low {:?}",
            tape.value(x_h).shape,
            tape.value(x_l).shape
        )));
    }
    if hc != cfg.ch_high || lc != cfg.ch_low {
        return Err(Error::shape(format!(
            "dsdf channel mismatch: inputs have {}/{} channels, config expects {}/{}",
            hc, lc, cfg.ch_high, cfg.ch_low
        )));
    }

    let mut hist_h = vec![x_h];
    let mut hist_l = vec![x_l];
    for d in 1..=DSDF_DEPTH {
        let prev_h = *hist_h.last().unwrap();
        let prev_l = *hist_l.last().unwrap();

        let uw = tape.param(params, &format!("{prefix}.up{d}.w"))?;
        let ub = tape.param(params, &format!("{prefix}.up{d}.b"))?;
        let cross_h = tape.conv_transpose2d(prev_l, uw, ub, 2)?;
        let mut parts_h = vec![prev_h, cross_h];
        parts_h.extend(hist_h[..hist_h.len() - 1].iter().rev());
        let cat_h = tape.concat(&parts_h)?;
        let m_h = clr(tape, params, &format!("{prefix}.h.clr{d}"), cat_h, cfg.slope)?;

        let dw = tape.param(params, &format!("{prefix}.down{d}.w"))?;
        let db = tape.param(params, &format!("{prefix}.down{d}.b"))?;
        let cross_l = tape.conv2d(prev_h, dw, db, 2, Pad::Same)?;
        let mut parts_l = vec![prev_l, cross_l];
        parts_l.extend(hist_l[..hist_l.len() - 1].iter().rev());
        let cat_l = tape.concat(&parts_l)?;
        let m_l = clr(tape, params, &format!("{prefix}.l.clr{d}"), cat_l, cfg.slope)?;

        hist_h.push(m_h);
        hist_l.push(m_l);
    }

    let out_h = fuse_and_add(tape, params, &format!("{prefix}.h.fuse"), x_h, hist_h[DSDF_DEPTH], cfg)?;
    let out_l = fuse_and_add(tape, params, &format!("{prefix}.l.fuse"), x_l, hist_l[DSDF_DEPTH], cfg)?;
    Ok((out_h, out_l))
}

fn fuse_and_add(
    tape: &mut Tape,
    params: &ParamStore,
    fuse_name: &str,
    input: Var,
    m5: Var,
    cfg: &DsdfConfig,
) -> Result<Var> {
    let fw = tape.param(params, &format!("{fuse_name}.w"))?;
    let fb = tape.param(params, &format!("{fuse_name}.b"))?;
    let fused = tape.conv2d(m5, fw, fb, 1, Pad::Same)?;
    if cfg.scaled {
        tape.add_scaled(input, fused, cfg.w)
    } else {
        tape.add(input, fused)
    }
}
