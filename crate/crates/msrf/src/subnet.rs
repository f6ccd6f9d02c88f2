//! The multi-scale fusion sub-network: layered dual-scale blocks across
//! four resolution scales, with a final scaled residual against the
//! sub-network inputs.
//!
//! The normative wiring: six layers, where layers 1, 2, 4 and 6 run blocks
//! on the outer scale pairs (1,2) and (3,4), and layers 3 and 5 run one
//! block on the middle pair (2,3). A perturbation anywhere reaches every
//! scale by the end of layer 4.

use crate::dsdf::{dsdf_forward, dsdf_param_specs, DsdfConfig};
use crate::error::{Error, Result};
use crate::params::{ParamSpec, ParamStore};
use crate::tape::{Tape, Var};

pub const SUBNET_LAYERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubnetVariant {
    Full,
    NoSubnet,
    Subset,
    NoCross23,
    NoScaling,
}

impl SubnetVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SubnetVariant::Full),
            "no_subnet" => Ok(SubnetVariant::NoSubnet),
            "subset" => Ok(SubnetVariant::Subset),
            "no_cross_23" => Ok(SubnetVariant::NoCross23),
            "no_scaling" => Ok(SubnetVariant::NoScaling),
            other => Err(Error::config(format!("unknown subnet variant `{}`", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SubnetVariant::Full => "full",
            SubnetVariant::NoSubnet => "no_subnet",
            SubnetVariant::Subset => "subset",
            SubnetVariant::NoCross23 => "no_cross_23",
            SubnetVariant::NoScaling => "no_scaling",
        }
    }
}

/// One sub-network layer: its original layer number (kept stable across
/// variants so parameter names never shift) and the scale pairs it runs,
/// each given by the lower scale index (1-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubnetLayer {
    pub number: usize,
    pub pairs: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MsrfWiring {
    pub layers: Vec<SubnetLayer>,
    /// Multiply residuals by `w` (false for the no-scaling ablation).
    pub scaled: bool,
    /// Bypass the whole sub-network (identity map).
    pub bypass: bool,
}

impl MsrfWiring {
    pub fn full() -> Self {
        let layers = (1..=SUBNET_LAYERS)
            .map(|number| SubnetLayer {
                number,
                pairs: if number == 3 || number == 5 { vec![2] } else { vec![1, 3] },
            })
            .collect();
        MsrfWiring { layers, scaled: true, bypass: false }
    }

    pub fn for_variant(variant: SubnetVariant) -> Self {
        let mut wiring = Self::full();
        match variant {
            SubnetVariant::Full => {}
            SubnetVariant::NoSubnet => {
                wiring.layers.clear();
                wiring.bypass = true;
            }
            SubnetVariant::Subset => wiring.layers.truncate(3),
            SubnetVariant::NoCross23 => wiring.layers.retain(|l| l.pairs != vec![2]),
            SubnetVariant::NoScaling => wiring.scaled = false,
        }
        wiring
    }

    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            for &lo in &layer.pairs {
                if !(1..=3).contains(&lo) {
                    return Err(Error::config(format!(
                        "subnet layer {} pairs scale {} with {}, outside 1..=4",
                        layer.number,
                        lo,
                        lo + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

fn pair_cfg(widths: &[usize; 4], growth: &[usize; 3], lo: usize, w: f64, scaled: bool, slope: f64) -> DsdfConfig {
    DsdfConfig {
        ch_high: widths[lo - 1],
        ch_low: widths[lo],
        k: growth[lo - 1],
        w,
        scaled,
        slope,
    }
}

pub fn msrf_param_specs(
    prefix: &str,
    wiring: &MsrfWiring,
    widths: &[usize; 4],
    growth: &[usize; 3],
    w: f64,
    slope: f64,
) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for layer in &wiring.layers {
        for &lo in &layer.pairs {
            let cfg = pair_cfg(widths, growth, lo, w, wiring.scaled, slope);
            specs.extend(dsdf_param_specs(
                &format!("{prefix}.l{}.p{}{}", layer.number, lo, lo + 1),
                &cfg,
            ));
        }
    }
    specs
}

/// Applies the wired layers to the four scale tensors and finishes with the
/// scaled residual against the original inputs. Output shapes equal input
/// shapes at every scale; the whole map is the identity when `w == 0`
/// everywhere, and exactly the input when bypassed.
pub fn msrf_forward(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    inputs: [Var; 4],
    wiring: &MsrfWiring,
    widths: &[usize; 4],
    growth: &[usize; 3],
    w: f64,
    slope: f64,
) -> Result<[Var; 4]> {
    wiring.validate()?;
    if wiring.bypass {
        return Ok(inputs);
    }
    for s in 0..3 {
        let hi = tape.value(inputs[s]).dims4()?;
        let lo = tape.value(inputs[s + 1]).dims4()?;
        if hi.2 != lo.2 * 2 || hi.3 != lo.3 * 2 || hi.0 != lo.0 {
            return Err(Error::shape(format!(
                "subnet pyramid inconsistent between scales {} and {}: {:?} vs {:?}",
                s + 1,
                s + 2,
                tape.value(inputs[s]).shape,
                tape.value(inputs[s + 1]).shape
            )));
        }
    }

    let mut states = inputs;
    for layer in &wiring.layers {
        for &lo in &layer.pairs {
            let cfg = pair_cfg(widths, growth, lo, w, wiring.scaled, slope);
            let name = format!("{prefix}.l{}.p{}{}", layer.number, lo, lo + 1);
            let (h_out, l_out) =
                dsdf_forward(tape, params, &name, states[lo - 1], states[lo], &cfg)?;
            states[lo - 1] = h_out;
            states[lo] = l_out;
        }
    }

    let mut out = [states[0]; 4];
    for s in 0..4 {
        out[s] = if wiring.scaled {
            tape.add_scaled(inputs[s], states[s], w)?
        } else {
            tape.add(inputs[s], states[s])?
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_layer_counts_match_the_ablations() {
        assert_eq!(MsrfWiring::for_variant(SubnetVariant::Full).n_layers(), 6);
        assert_eq!(MsrfWiring::for_variant(SubnetVariant::NoSubnet).n_layers(), 0);
        assert!(MsrfWiring::for_variant(SubnetVariant::NoSubnet).bypass);
        assert_eq!(MsrfWiring::for_variant(SubnetVariant::Subset).n_layers(), 3);
        let no_cross = MsrfWiring::for_variant(SubnetVariant::NoCross23);
        assert_eq!(no_cross.n_layers(), 4);
        assert_eq!(
            no_cross.layers.iter().map(|l| l.number).collect::<Vec<_>>(),
            vec![1, 2, 4, 6]
        );
        assert!(!MsrfWiring::for_variant(SubnetVariant::NoScaling).scaled);
    }

    #[test]
    fn outer_layers_run_disjoint_pairs_and_middle_layers_bridge() {
        let wiring = MsrfWiring::full();
        for layer in &wiring.layers {
            match layer.number {
                3 | 5 => assert_eq!(layer.pairs, vec![2]),
                _ => assert_eq!(layer.pairs, vec![1, 3]),
            }
        }
        wiring.validate().unwrap();
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert!(SubnetVariant::parse("bogus").is_err());
        assert_eq!(SubnetVariant::parse("subset").unwrap(), SubnetVariant::Subset);
    }
}
