//! Full network assembly: four-stage encoder with squeeze-excitation,
//! the multi-scale fusion sub-network, the gated shape stream, the
//! triple-attention decoder chain, and the prediction / deep-supervision
//! heads.

use crate::blocks::{
    attention_gate, attention_gate_specs, clr, clr_specs, gated_conv, gated_conv_specs, se_block,
    se_specs,
};
use crate::error::{Error, Result};
use crate::kernels::conv::Pad;
use crate::params::{conv_spec, convt_spec, ParamSpec, ParamStore};
use crate::subnet::{msrf_forward, msrf_param_specs, MsrfWiring, SubnetVariant};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architectural configuration of the network.
#[derive(Clone, Debug)]
pub struct MsrfNetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_ch: usize,
    /// Encoder widths per scale (scale 1 = full resolution).
    pub widths: [usize; 4],
    /// Growth factors for the scale pairs (1,2), (2,3), (3,4).
    pub growth: [usize; 3],
    pub dropout: f64,
    /// Residual scaling factor.
    pub w: f64,
    pub leaky_slope: f64,
    pub se_reduction: usize,
    /// Channel width of the shape stream.
    pub shape_channels: usize,
    pub shape_stream: bool,
    pub deep_supervision: bool,
    pub decoder_attention: bool,
    pub subnet_variant: SubnetVariant,
}

impl Default for MsrfNetConfig {
    /// Desk-scale defaults: 64x64 grayscale, widths 8/16/32/64.
    fn default() -> Self {
        MsrfNetConfig {
            input_h: 64,
            input_w: 64,
            input_ch: 1,
            widths: [8, 16, 32, 64],
            growth: [4, 8, 16],
            dropout: 0.2,
            w: 0.4,
            leaky_slope: 0.01,
            se_reduction: 8,
            shape_channels: 8,
            shape_stream: true,
            deep_supervision: true,
            decoder_attention: true,
            subnet_variant: SubnetVariant::Full,
        }
    }
}

impl MsrfNetConfig {
    /// Configuration at the published scale (informational; the desk
    /// pipeline never trains it).
    pub fn paper_scale() -> Self {
        MsrfNetConfig {
            input_h: 256,
            input_w: 256,
            input_ch: 3,
            widths: [32, 64, 128, 256],
            growth: [16, 32, 64],
            shape_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h % 8 != 0 || self.input_w % 8 != 0 {
            return Err(Error::config(format!(
                "input size {}x{} must be divisible by 8",
                self.input_h, self.input_w
            )));
        }
        if self.input_ch < 1 {
            return Err(Error::config("input_channels must be >= 1".to_string()));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w < 1 {
                return Err(Error::config(format!("width[{}] must be >= 1", i)));
            }
            if self.se_reduction == 0 || w % self.se_reduction != 0 {
                return Err(Error::config(format!(
                    "width {} at scale {} not divisible by se_reduction {}",
                    w,
                    i + 1,
                    self.se_reduction
                )));
            }
        }
        for (i, &k) in self.growth.iter().enumerate() {
            if k < 1 {
                return Err(Error::config(format!("growth[{}] must be >= 1", i)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::config(format!("w {} outside [0,1]", self.w)));
        }
        if self.shape_channels < 1 {
            return Err(Error::config("shape_channels must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn wiring(&self) -> MsrfWiring {
        MsrfWiring::for_variant(self.subnet_variant)
    }
}

/// Forward outputs. `ds0`/`ds1` are present only under deep supervision,
/// `edge` only when the shape stream is enabled. All maps are sigmoid
/// activations at full resolution.
pub struct NetOutputs {
    pub pred: Var,
    pub ds0: Option<Var>,
    pub ds1: Option<Var>,
    pub edge: Option<Var>,
}

// ---- parameter enumeration ------------------------------------------------

fn encoder_specs(cfg: &MsrfNetConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut in_ch = cfg.input_ch;
    for s in 0..4 {
        let out_ch = cfg.widths[s];
        specs.extend(clr_specs(&format!("enc{}.conv1", s + 1), out_ch, in_ch));
        specs.extend(clr_specs(&format!("enc{}.conv2", s + 1), out_ch, out_ch));
        specs.extend(se_specs(&format!("enc{}.se", s + 1), out_ch, cfg.se_reduction));
        in_ch = out_ch;
    }
    specs
}

fn shape_stream_specs(cfg: &MsrfNetConfig) -> Vec<ParamSpec> {
    let cs = cfg.shape_channels;
    let mut specs = conv_spec("ss.proj", cs, cfg.widths[0], 1).to_vec();
    for (i, scale) in [2usize, 3, 4].iter().enumerate() {
        specs.extend(gated_conv_specs(&format!("ss.gate{}", i + 1), cs, cfg.widths[scale - 1]));
    }
    specs.extend(conv_spec("ss.edge", 1, cs, 1));
    specs.extend(conv_spec("ss.fuse", cs, 2, 1));
    specs
}

fn decoder_specs(cfg: &MsrfNetConfig, index: usize, skip_ch: usize, dec_ch: usize) -> Vec<ParamSpec> {
    let p = format!("dec{index}");
    let mut specs = Vec::new();
    let clr1_in = if cfg.decoder_attention {
        specs.extend(se_specs(&format!("{p}.se"), skip_ch, cfg.se_reduction));
        specs.extend(conv_spec(&format!("{p}.spatial"), 1, skip_ch, 1));
        specs.extend(attention_gate_specs(&format!("{p}.ag"), skip_ch, dec_ch));
        3 * skip_ch
    } else {
        2 * skip_ch
    };
    specs.extend(convt_spec(&format!("{p}.omega_dec"), dec_ch, skip_ch, 3));
    specs.extend(clr_specs(&format!("{p}.clr1"), skip_ch, clr1_in));
    let clr2_in = if index == 4 && cfg.shape_stream {
        skip_ch + cfg.shape_channels
    } else {
        skip_ch
    };
    specs.extend(clr_specs(&format!("{p}.clr2"), skip_ch, clr2_in));
    specs
}

/// Declares every trainable tensor for the given configuration, in the
/// order initialization and checkpoints use.
pub fn param_specs(cfg: &MsrfNetConfig) -> Vec<ParamSpec> {
    let mut specs = encoder_specs(cfg);
    specs.extend(msrf_param_specs(
        "subnet",
        &cfg.wiring(),
        &cfg.widths,
        &cfg.growth,
        cfg.w,
        cfg.leaky_slope,
    ));
    if cfg.shape_stream {
        specs.extend(shape_stream_specs(cfg));
    }
    specs.extend(decoder_specs(cfg, 2, cfg.widths[2], cfg.widths[3]));
    specs.extend(decoder_specs(cfg, 3, cfg.widths[1], cfg.widths[2]));
    specs.extend(decoder_specs(cfg, 4, cfg.widths[0], cfg.widths[1]));
    specs.extend(conv_spec("head.pred", 1, cfg.widths[0], 1));
    if cfg.deep_supervision {
        specs.extend(conv_spec("head.ds0", 1, cfg.widths[2], 1));
        specs.extend(conv_spec("head.ds1", 1, cfg.widths[1], 1));
    }
    specs
}

/// Deterministic per-module parameter counts.
pub fn param_count_report(cfg: &MsrfNetConfig) -> String {
    let specs = param_specs(cfg);
    let module_of = |name: &str| -> &'static str {
        if name.starts_with("enc") {
            "encoder"
        } else if name.starts_with("subnet") {
            "msrf-subnet"
        } else if name.starts_with("ss.") {
            "shape-stream"
        } else if name.starts_with("dec") {
            "decoder"
        } else {
            "heads"
        }
    };
    let mut out = String::from("parameters per module:\n");
    let mut total = 0usize;
    for module in ["encoder", "msrf-subnet", "shape-stream", "decoder", "heads"] {
        let count: usize = specs
            .iter()
            .filter(|s| module_of(&s.name) == module)
            .map(|s| s.numel())
            .sum();
        if count > 0 {
            out.push_str(&format!("  {:<13} {:>10}\n", module, count));
        }
        total += count;
    }
    out.push_str(&format!("  {:<13} {:>10}\n", "total", total));
    out
}

// ---- forward passes ---------------------------------------------------------

/// Encoder stages: two CLR convolutions then squeeze-excitation per scale.
/// The pre-pool activation feeds the fusion sub-network (with dropout in
/// training mode); the path to the next stage is max-pooled without
/// dropout.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &MsrfNetConfig,
    image: Var,
    training: bool,
) -> Result<[Var; 4]> {
    let (_, c, h, w) = tape.value(image).dims4()?;
    if c != cfg.input_ch || h != cfg.input_h || w != cfg.input_w {
        return Err(Error::shape(format!(
            "encoder expects [N,{},{},{}], got {:?}",
            cfg.input_ch,
            cfg.input_h,
            cfg.input_w,
            tape.value(image).shape
        )));
    }
    let mut x = image;
    let mut skips = [image; 4];
    for s in 0..4 {
        let p = format!("enc{}", s + 1);
        let a = clr(tape, params, &format!("{p}.conv1"), x, cfg.leaky_slope)?;
        let a = clr(tape, params, &format!("{p}.conv2"), a, cfg.leaky_slope)?;
        let (a, _) = se_block(tape, params, &format!("{p}.se"), a, cfg.se_reduction)?;
        skips[s] = tape.dropout(a, cfg.dropout, training)?;
        if s < 3 {
            x = tape.maxpool2(a)?;
        }
    }
    Ok(skips)
}

/// Sobel gradient magnitude of the intensity channel, normalized to [0,1]
/// with edge-replicated padding (a constant image maps to exactly zero).
fn sobel_magnitude(tape: &mut Tape, image: Var) -> Result<Var> {
    let (_, c, _, _) = tape.value(image).dims4()?;
    let intensity = if c == 1 {
        image
    } else {
        let w = tape.constant(Tensor::full(vec![1, c, 1, 1], 1.0 / c as f64));
        let b = tape.constant(Tensor::zeros(vec![1]));
        tape.conv2d(image, w, b, 1, Pad::Same)?
    };
    let padded = tape.replicate_pad1(intensity)?;
    // Separable Sobel: the difference factor runs first so a constant
    // image cancels to exactly zero before any smoothing.
    let dx = tape.constant(Tensor::new(vec![1, 1, 1, 3], vec![-1.0, 0.0, 1.0])?);
    let dy = tape.constant(Tensor::new(vec![1, 1, 3, 1], vec![-1.0, 0.0, 1.0])?);
    let sx = tape.constant(Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 1.0])?);
    let sy = tape.constant(Tensor::new(vec![1, 1, 3, 1], vec![1.0, 2.0, 1.0])?);
    let zb = tape.constant(Tensor::zeros(vec![1]));
    let gx_d = tape.conv2d(padded, dx, zb, 1, Pad::Valid)?;
    let gx = tape.conv2d(gx_d, sy, zb, 1, Pad::Valid)?;
    let gy_d = tape.conv2d(padded, dy, zb, 1, Pad::Valid)?;
    let gy = tape.conv2d(gy_d, sx, zb, 1, Pad::Valid)?;
    let mag = tape.hypot(gx, gy)?;
    Ok(tape.mul_const(mag, 1.0 / (4.0 * std::f64::consts::SQRT_2)))
}

/// Gated shape stream: the scale-1 fusion output is projected to the
/// stream width and gated three times by the resized scale-2..4 outputs;
/// a 1x1 head yields the edge map, which is fused with the image's Sobel
/// magnitude into features for the final decoder stage.
pub fn shape_stream_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &MsrfNetConfig,
    msrf_outs: &[Var; 4],
    image: Var,
) -> Result<(Var, Var)> {
    let (h, w) = (cfg.input_h, cfg.input_w);
    let pw = tape.param(params, "ss.proj.w")?;
    let pb = tape.param(params, "ss.proj.b")?;
    let mut s = tape.conv2d(msrf_outs[0], pw, pb, 1, Pad::Same)?;
    for (i, scale) in [2usize, 3, 4].iter().enumerate() {
        let resized = tape.bilinear_upsample(msrf_outs[scale - 1], h, w)?;
        let (next, _) = gated_conv(
            tape,
            params,
            &format!("ss.gate{}", i + 1),
            s,
            resized,
            cfg.leaky_slope,
        )?;
        s = next;
    }
    let ew = tape.param(params, "ss.edge.w")?;
    let eb = tape.param(params, "ss.edge.b")?;
    let edge_pre = tape.conv2d(s, ew, eb, 1, Pad::Same)?;
    let edge = tape.sigmoid(edge_pre);

    let grad = sobel_magnitude(tape, image)?;
    let cat = tape.concat(&[edge, grad])?;
    let fw = tape.param(params, "ss.fuse.w")?;
    let fb = tape.param(params, "ss.fuse.b")?;
    let feats = tape.conv2d(cat, fw, fb, 1, Pad::Same)?;
    Ok((edge, feats))
}

/// Triple-attention decoder block. Branch one scales the skip tensor by
/// channel attention and an amplified spatial map; branch two prunes it
/// through the attention gate and concatenates the upsampled previous
/// decoder output. Two CLR convolutions finish the block, with `extra`
/// (shape features) concatenated before the last one.
pub fn decoder_block_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &MsrfNetConfig,
    index: usize,
    x: Var,
    d_minus: Var,
    extra: Option<Var>,
) -> Result<Var> {
    let p = format!("dec{index}");
    let (xn, _, xh, xw) = tape.value(x).dims4()?;
    let (dn, _, dh, dw) = tape.value(d_minus).dims4()?;
    if xn != dn || xh != dh * 2 || xw != dw * 2 {
        return Err(Error::shape(format!(
            "decoder {} pyramid misaligned: skip {:?} vs previous {:?}",
            index,
            tape.value(x).shape,
            tape.value(d_minus).shape
        )));
    }

    let ow = tape.param(params, &format!("{p}.omega_dec.w"))?;
    let ob = tape.param(params, &format!("{p}.omega_dec.b"))?;
    let up_prev = tape.conv_transpose2d(d_minus, ow, ob, 2)?;

    let merged = if cfg.decoder_attention {
        let (x_se, _) = se_block(tape, params, &format!("{p}.se"), x, cfg.se_reduction)?;
        let sw = tape.param(params, &format!("{p}.spatial.w"))?;
        let sb = tape.param(params, &format!("{p}.spatial.b"))?;
        let sp_pre = tape.conv2d(x, sw, sb, 1, Pad::Same)?;
        let alpha_s = tape.sigmoid(sp_pre);
        let amplified = tape.add_const(alpha_s, 1.0);
        let d_sc = tape.mul_spatial1(x_se, amplified)?;

        let d_ag = attention_gate(tape, params, &format!("{p}.ag"), x, d_minus)?;
        let pruned = tape.mul_spatial1(x, d_ag)?;
        let d_ag_tilde = tape.concat(&[pruned, up_prev])?;
        tape.concat(&[d_sc, d_ag_tilde])?
    } else {
        tape.concat(&[x, up_prev])?
    };

    let h = clr(tape, params, &format!("{p}.clr1"), merged, cfg.leaky_slope)?;
    let h = match extra {
        Some(feats) => {
            let cat = tape.concat(&[h, feats])?;
            clr(tape, params, &format!("{p}.clr2"), cat, cfg.leaky_slope)?
        }
        None => clr(tape, params, &format!("{p}.clr2"), h, cfg.leaky_slope)?,
    };
    Ok(h)
}

fn sigmoid_head(
    tape: &mut Tape,
    params: &ParamStore,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    let pre = tape.conv2d(x, w, b, 1, Pad::Same)?;
    Ok(tape.sigmoid(pre))
}

/// Whole-network forward pass.
pub fn msrfnet_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &MsrfNetConfig,
    image: Var,
    training: bool,
) -> Result<NetOutputs> {
    cfg.validate()?;
    let skips = encoder_forward(tape, params, cfg, image, training)?;
    let msrf = msrf_forward(
        tape,
        params,
        "subnet",
        skips,
        &cfg.wiring(),
        &cfg.widths,
        &cfg.growth,
        cfg.w,
        cfg.leaky_slope,
    )?;

    let (edge, shape_feats) = if cfg.shape_stream {
        let (e, f) = shape_stream_forward(tape, params, cfg, &msrf, image)?;
        (Some(e), Some(f))
    } else {
        (None, None)
    };

    // D2 is seeded by the scale-4 fusion output; D3/D4 chain upward.
    let d2 = decoder_block_forward(tape, params, cfg, 2, msrf[2], msrf[3], None)?;
    let d3 = decoder_block_forward(tape, params, cfg, 3, msrf[1], d2, None)?;
    let d4 = decoder_block_forward(tape, params, cfg, 4, msrf[0], d3, shape_feats)?;

    let pred = sigmoid_head(tape, params, "head.pred", d4)?;
    let (ds0, ds1) = if cfg.deep_supervision {
        let h0 = sigmoid_head(tape, params, "head.ds0", d2)?;
        let h1 = sigmoid_head(tape, params, "head.ds1", d3)?;
        let (h, w) = (cfg.input_h, cfg.input_w);
        (
            Some(tape.bilinear_upsample(h0, h, w)?),
            Some(tape.bilinear_upsample(h1, h, w)?),
        )
    } else {
        (None, None)
    };

    Ok(NetOutputs { pred, ds0, ds1, edge })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn toy_cfg() -> MsrfNetConfig {
        MsrfNetConfig {
            input_h: 16,
            input_w: 16,
            widths: [4, 8, 16, 32],
            growth: [2, 4, 8],
            se_reduction: 4,
            shape_channels: 4,
            ..Default::default()
        }
    }

    fn image(cfg: &MsrfNetConfig, n: usize) -> Tensor {
        let numel = n * cfg.input_ch * cfg.input_h * cfg.input_w;
        Tensor {
            shape: vec![n, cfg.input_ch, cfg.input_h, cfg.input_w],
            data: (0..numel).map(|i| ((i * 97) % 251) as f64 / 250.0).collect(),
        }
    }

    #[test]
    fn encoder_shapes_follow_the_pyramid() {
        let cfg = MsrfNetConfig::default();
        let store = ParamStore::init_glorot(&param_specs(&cfg), 1);
        let mut tape = Tape::new();
        let img = tape.constant(image(&cfg, 2));
        let skips = encoder_forward(&mut tape, &store, &cfg, img, false).unwrap();
        assert_eq!(tape.value(skips[0]).shape, vec![2, 8, 64, 64]);
        assert_eq!(tape.value(skips[1]).shape, vec![2, 16, 32, 32]);
        assert_eq!(tape.value(skips[2]).shape, vec![2, 32, 16, 16]);
        assert_eq!(tape.value(skips[3]).shape, vec![2, 64, 8, 8]);
    }

    #[test]
    fn zero_image_and_zero_bias_give_zero_activations() {
        let cfg = MsrfNetConfig::default();
        let store = ParamStore::init_glorot(&param_specs(&cfg), 1);
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(vec![1, 1, 64, 64]));
        let skips = encoder_forward(&mut tape, &store, &cfg, img, false).unwrap();
        for s in skips {
            assert!(tape.value(s).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_outputs_are_full_resolution_probabilities() {
        let cfg = toy_cfg();
        let store = ParamStore::init_glorot(&param_specs(&cfg), 2);
        let mut tape = Tape::new();
        let img = tape.constant(image(&cfg, 2));
        let outs = msrfnet_forward(&mut tape, &store, &cfg, img, false).unwrap();
        for v in [Some(outs.pred), outs.ds0, outs.ds1, outs.edge].into_iter().flatten() {
            assert_eq!(tape.value(v).shape, vec![2, 1, 16, 16]);
            assert!(tape.value(v).data.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn toggles_produce_runnable_networks_with_the_same_contract() {
        for shape_stream in [true, false] {
            for deep_supervision in [true, false] {
                for decoder_attention in [true, false] {
                    for variant in [
                        SubnetVariant::Full,
                        SubnetVariant::NoSubnet,
                        SubnetVariant::Subset,
                        SubnetVariant::NoCross23,
                        SubnetVariant::NoScaling,
                    ] {
                        let cfg = MsrfNetConfig {
                            shape_stream,
                            deep_supervision,
                            decoder_attention,
                            subnet_variant: variant,
                            ..toy_cfg()
                        };
                        let store = ParamStore::init_glorot(&param_specs(&cfg), 3);
                        let mut tape = Tape::new();
                        let img = tape.constant(image(&cfg, 1));
                        let outs = msrfnet_forward(&mut tape, &store, &cfg, img, false).unwrap();
                        assert_eq!(tape.value(outs.pred).shape, vec![1, 1, 16, 16]);
                        assert_eq!(outs.edge.is_some(), shape_stream);
                        assert_eq!(outs.ds0.is_some(), deep_supervision);
                        assert!(tape.value(outs.pred).all_finite());
                    }
                }
            }
        }
    }

    #[test]
    fn forward_touches_exactly_the_enumerated_parameters() {
        let cfg = toy_cfg();
        let specs = param_specs(&cfg);
        let store = ParamStore::init_glorot(&specs, 4);
        let mut tape = Tape::new();
        let img = tape.constant(image(&cfg, 1));
        msrfnet_forward(&mut tape, &store, &cfg, img, false).unwrap();
        let mut touched = tape.param_names();
        touched.sort();
        touched.dedup();
        let mut declared: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        declared.sort();
        assert_eq!(touched, declared);
    }

    #[test]
    fn sobel_magnitude_of_constant_image_is_zero() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::full(vec![1, 1, 8, 8], 0.37));
        let mag = sobel_magnitude(&mut tape, img).unwrap();
        assert!(tape.value(mag).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_without_attention_reduces_to_concat_form() {
        let cfg = MsrfNetConfig { decoder_attention: false, ..toy_cfg() };
        let specs = param_specs(&cfg);
        assert!(!specs.iter().any(|s| s.name.contains(".ag.")));
        assert!(!specs.iter().any(|s| s.name.contains("dec2.se")));
        let store = ParamStore::init_glorot(&specs, 5);
        let mut tape = Tape::new();
        let img = tape.constant(image(&cfg, 1));
        let outs = msrfnet_forward(&mut tape, &store, &cfg, img, false).unwrap();
        assert_eq!(tape.value(outs.pred).shape, vec![1, 1, 16, 16]);
    }

    #[test]
    fn config_validation_rejects_bad_dims() {
        let mut cfg = toy_cfg();
        cfg.input_h = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_cfg();
        cfg.se_reduction = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_report_is_deterministic() {
        let cfg = MsrfNetConfig::default();
        assert_eq!(param_count_report(&cfg), param_count_report(&cfg));
        assert!(param_count_report(&cfg).contains("msrf-subnet"));
    }
}
