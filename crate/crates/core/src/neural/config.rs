use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// How a message direction is computed at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Plain BP update.
    None,
    /// Incoming messages pass through a 3-layer MLP.
    Mlp,
    /// Incoming messages are reweighted by the attention stack.
    Gat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bpgat,
    Bpnn,
    FvgatVfnone,
    FvnoneVfgat,
    FvgatVfmlp,
    FvmlpVfgat,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Bpgat,
        Variant::Bpnn,
        Variant::FvgatVfnone,
        Variant::FvnoneVfgat,
        Variant::FvgatVfmlp,
        Variant::FvmlpVfgat,
    ];

    /// `(variable-to-factor, factor-to-variable)` transforms.
    pub fn transforms(self) -> (Transform, Transform) {
        use Transform::*;
        match self {
            Variant::Bpgat => (Gat, Gat),
            Variant::Bpnn => (Mlp, Mlp),
            Variant::FvgatVfnone => (None, Gat),
            Variant::FvnoneVfgat => (Gat, None),
            Variant::FvgatVfmlp => (Mlp, Gat),
            Variant::FvmlpVfgat => (Gat, Mlp),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bpgat => "bpgat",
            Variant::Bpnn => "bpnn",
            Variant::FvgatVfnone => "fvgat_vfnone",
            Variant::FvnoneVfgat => "fvnone_vfgat",
            Variant::FvgatVfmlp => "fvgat_vfmlp",
            Variant::FvmlpVfgat => "fvmlp_vfgat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingMode {
    /// Learned operator on factor-to-variable messages, scalar on the rest.
    DeltaF2v,
    DeltaV2f,
    DeltaAll,
    FixedAll,
}

impl DampingMode {
    pub const ALL: [DampingMode; 4] =
        [DampingMode::DeltaF2v, DampingMode::DeltaV2f, DampingMode::DeltaAll, DampingMode::FixedAll];

    /// `(variable-to-factor learned, factor-to-variable learned)`.
    pub fn learned(self) -> (bool, bool) {
        match self {
            DampingMode::DeltaF2v => (false, true),
            DampingMode::DeltaV2f => (true, false),
            DampingMode::DeltaAll => (true, true),
            DampingMode::FixedAll => (false, false),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DampingMode::DeltaF2v => "delta_f2v",
            DampingMode::DeltaV2f => "delta_v2f",
            DampingMode::DeltaAll => "delta_all",
            DampingMode::FixedAll => "fixed_all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// MLP over the Bethe terms of every iteration.
    Mlp3,
    /// Bethe estimate `-F` of the last iteration, no learned readout.
    BetheBypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    SeededRandom {
        seed: u64,
    },
    /// Parameters under which every learned map is the identity, so the
    /// model reproduces plain BP.
    BpIdentity,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| ModelError::Config(format!(concat!("unknown ", $what, " `{}`"), s)))
            }
        }
    };
}

str_enum!(Variant, "variant");
str_enum!(DampingMode, "damping mode");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Message-passing iterations.
    pub t: usize,
    /// Heads per attention layer; one layer per entry.
    pub gat_heads: Vec<usize>,
    /// Per-head width of the inner attention layers. The last layer always
    /// emits length-2 messages.
    pub gat_head_dim: usize,
    pub damping_mode: DampingMode,
    pub alpha: f64,
    pub readout: Readout,
    pub mlp_hidden: usize,
    pub init: Init,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_slope() -> f64 {
    0.2
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bpgat,
            t: 5,
            gat_heads: vec![4, 4, 6],
            gat_head_dim: 2,
            damping_mode: DampingMode::DeltaF2v,
            alpha: 0.5,
            readout: Readout::Mlp3,
            mlp_hidden: 8,
            init: Init::SeededRandom { seed: 0 },
            leaky_slope: default_slope(),
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    /// The configuration under which every variant reproduces plain BP with
    /// scalar damping `alpha`.
    pub fn bp_equivalent(variant: Variant, t: usize, alpha: f64) -> Self {
        Self {
            variant,
            t,
            damping_mode: DampingMode::FixedAll,
            alpha,
            readout: Readout::BetheBypass,
            init: Init::BpIdentity,
            ..Self::default()
        }
    }

    /// Width of layer `l`'s output per head.
    pub fn head_out_dim(&self, layer: usize) -> usize {
        if layer + 1 == self.gat_heads.len() {
            2
        } else {
            self.gat_head_dim
        }
    }

    /// Width of layer `l`'s input rows.
    pub fn layer_in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            2
        } else {
            self.gat_heads[layer - 1] * self.gat_head_dim
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.t < 1 {
            return bad("T must be at least 1".into());
        }
        if self.gat_heads.is_empty() || self.gat_heads.contains(&0) {
            return bad("attention layers need at least one head each".into());
        }
        if self.gat_head_dim < 1 {
            return bad("gat_head_dim must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.mlp_hidden < 1 {
            return bad("mlp_hidden must be at least 1".into());
        }
        if self.init == Init::BpIdentity {
            if self.mlp_hidden < 4 {
                return bad("bp_identity init needs mlp_hidden >= 4".into());
            }
            if self.gat_heads.len() > 1 && self.gat_head_dim < 2 {
                return bad("bp_identity init needs gat_head_dim >= 2".into());
            }
        }
        Ok(())
    }
}
