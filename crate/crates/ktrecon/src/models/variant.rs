//! Declarative description of the learnable reconstruction family and the
//! named catalog used by the CLI and the training/evaluation front ends.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    UNet,
    /// Iterative time-frequency refinement network.
    IterativeTf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetDim {
    Two,
    Three,
}

/// Representation the network operates in (and the loss is computed in).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcDomain {
    Xt,
    Xf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcMode {
    None,
    Forced,
    Adjustable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxInput {
    None,
    SlidingWindow,
    TemporalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoilMode {
    Combined,
    Multi,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelVariant {
    pub name: String,
    pub kind: ModelKind,
    pub dim: NetDim,
    pub domain: ProcDomain,
    pub dc_mode: DcMode,
    pub skip_temporal_avg: bool,
    pub aux_input: AuxInput,
    pub coil_mode: CoilMode,
    pub base_channels: usize,
    pub depth: usize,
    /// refinement blocks (iterative kind only)
    pub iters: usize,
}

impl ModelVariant {
    pub fn validate(&self) -> Result<()> {
        if self.dim == NetDim::Two && self.domain != ProcDomain::Xt {
            return Err(Error::Config(format!(
                "{}: 2D models process frames independently and must stay in xt",
                self.name
            )));
        }
        if self.skip_temporal_avg && self.domain != ProcDomain::Xf {
            return Err(Error::Config(format!(
                "{}: the temporal-average skip connection requires the xf domain",
                self.name
            )));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Config(format!("{}: degenerate architecture", self.name)));
        }
        // iters == 0 is legal for the iterative kind: the model degenerates
        // to the zero-filled initial estimate
        Ok(())
    }

    /// Human-readable row label for report tables.
    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::IterativeTf => format!(
                "Iterative t-f net, {} DC",
                match self.dc_mode {
                    DcMode::None => "no",
                    DcMode::Forced => "forced",
                    DcMode::Adjustable => "adj.",
                }
            ),
            ModelKind::UNet => {
                let mut parts = vec![match self.dim {
                    NetDim::Two => "2D U-Net".to_string(),
                    NetDim::Three => format!(
                        "3D U-Net, {}",
                        match self.domain {
                            ProcDomain::Xt => "xt",
                            ProcDomain::Xf => "xf",
                        }
                    ),
                }];
                if self.skip_temporal_avg {
                    parts.push("skip connect".into());
                }
                match self.aux_input {
                    AuxInput::SlidingWindow => parts.push("sliding window".into()),
                    AuxInput::TemporalAverage => parts.push("temporal average".into()),
                    AuxInput::None => parts.push(
                        match self.dc_mode {
                            DcMode::None => "no DC",
                            DcMode::Forced => "forced DC",
                            DcMode::Adjustable => "adj. DC",
                        }
                        .into(),
                    ),
                }
                let mut label = parts.join(", ");
                if self.coil_mode == CoilMode::Multi {
                    label.push_str(" (multi-coil)");
                }
                label
            }
        }
    }

    /// Network input channel count for `n_coils` input coils.
    pub fn in_channels(&self, n_coils: usize) -> usize {
        let aux = if self.aux_input == AuxInput::None { 1 } else { 2 };
        2 * n_coils * aux
    }

    pub fn out_channels(&self, n_coils: usize) -> usize {
        2 * n_coils
    }
}

fn unet(
    name: &str,
    dim: NetDim,
    domain: ProcDomain,
    dc: DcMode,
    skip: bool,
    aux: AuxInput,
    coil: CoilMode,
) -> ModelVariant {
    ModelVariant {
        name: name.to_string(),
        kind: ModelKind::UNet,
        dim,
        domain,
        dc_mode: dc,
        skip_temporal_avg: skip,
        aux_input: aux,
        coil_mode: coil,
        base_channels: 32,
        depth: 4,
        iters: 0,
    }
}

/// The fourteen coil-combined variants, in report-table row order.
pub fn canonical_variants() -> Vec<ModelVariant> {
    use CoilMode::Combined;
    use NetDim::*;
    use ProcDomain::*;
    let (none, adj, forced) = (DcMode::None, DcMode::Adjustable, DcMode::Forced);
    let (no_aux, sw, ta) = (AuxInput::None, AuxInput::SlidingWindow, AuxInput::TemporalAverage);
    vec![
        unet("2d", Two, Xt, none, false, no_aux, Combined),
        unet("2d_dca", Two, Xt, adj, false, no_aux, Combined),
        unet("2d_dcf", Two, Xt, forced, false, no_aux, Combined),
        unet("2d_sw", Two, Xt, none, false, sw, Combined),
        unet("2d_ta", Two, Xt, none, false, ta, Combined),
        unet("3d_xt", Three, Xt, none, false, no_aux, Combined),
        unet("3d_xt_dca", Three, Xt, adj, false, no_aux, Combined),
        unet("3d_xt_dcf", Three, Xt, forced, false, no_aux, Combined),
        unet("3d_xf", Three, Xf, none, false, no_aux, Combined),
        unet("3d_xf_dca", Three, Xf, adj, false, no_aux, Combined),
        unet("3d_xf_dcf", Three, Xf, forced, false, no_aux, Combined),
        unet("3d_xf_skip", Three, Xf, none, true, no_aux, Combined),
        unet("3d_xf_skip_dca", Three, Xf, adj, true, no_aux, Combined),
        unet("3d_xf_skip_dcf", Three, Xf, forced, true, no_aux, Combined),
    ]
}

/// Multi-coil variants: the best-performing family plus the iterative
/// time-frequency network.
pub fn multicoil_variants() -> Vec<ModelVariant> {
    let mut out = Vec::new();
    for (name, dc) in [
        ("mc_3d_xf_skip", DcMode::None),
        ("mc_3d_xf_skip_dca", DcMode::Adjustable),
        ("mc_3d_xf_skip_dcf", DcMode::Forced),
    ] {
        out.push(unet(
            name,
            NetDim::Three,
            ProcDomain::Xf,
            dc,
            true,
            AuxInput::None,
            CoilMode::Multi,
        ));
    }
    out.push(ModelVariant {
        name: "ctfnet".to_string(),
        kind: ModelKind::IterativeTf,
        dim: NetDim::Three,
        domain: ProcDomain::Xt,
        dc_mode: DcMode::Adjustable,
        skip_temporal_avg: false,
        aux_input: AuxInput::None,
        coil_mode: CoilMode::Multi,
        base_channels: 16,
        depth: 3,
        iters: 4,
    });
    out
}

/// Every registered variant name.
pub fn all_variants() -> Vec<ModelVariant> {
    let mut v = canonical_variants();
    v.extend(multicoil_variants());
    v
}

/// Look up a variant by registry name.
pub fn variant_by_name(name: &str) -> Result<ModelVariant> {
    all_variants()
        .into_iter()
        .find(|v| v.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = all_variants().into_iter().map(|v| v.name).collect();
            Error::Config(format!("unknown variant '{name}'; known: {}", names.join(", ")))
        })
}
