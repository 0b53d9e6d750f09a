//! Model hyperparameters. Defaults are the full-size published settings;
//! tests and desk-scale runs use [`ModelConfig::tiny`] / [`ModelConfig::small`].

use serde::{Deserialize, Serialize};

use crate::basis::{CutoffBank, RadialBasisSpec, RadialKind};
use crate::error::{input, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompStreamConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub vocab: usize,
    /// Log-count attention bias and log-count token feature.
    pub count_features: bool,
}

impl Default for CompStreamConfig {
    fn default() -> Self {
        Self {
            width: 256,
            layers: 4,
            heads: 8,
            ff_width: 1024,
            dropout: 0.1,
            vocab: 100,
            count_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructStreamConfig {
    pub width: usize,
    pub r_cut: f64,
    pub radial_count: usize,
    pub mixed_channels: usize,
    pub l_max: usize,
    pub basis: RadialKind,
    pub mlp_layers: usize,
    pub mp_layers: usize,
    pub scales: Vec<f64>,
    /// Width of the learned radial edge embedding used in message passing.
    pub edge_width: usize,
}

impl Default for StructStreamConfig {
    fn default() -> Self {
        Self {
            width: 256,
            r_cut: 6.0,
            radial_count: 8,
            mixed_channels: 8,
            l_max: 4,
            basis: RadialKind::Bessel,
            mlp_layers: 3,
            mp_layers: 2,
            scales: vec![0.5, 0.75, 1.0],
            edge_width: 32,
        }
    }
}

impl StructStreamConfig {
    pub fn radial(&self) -> RadialBasisSpec {
        RadialBasisSpec {
            kind: self.basis,
            count: self.radial_count,
            r_cut: self.r_cut,
        }
    }

    pub fn bank(&self) -> CutoffBank {
        CutoffBank {
            scales: self.scales.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterStreamConfig {
    pub width: usize,
    pub layers: usize,
    pub r_cut: f64,
    pub radial_count: usize,
    pub basis: RadialKind,
    pub scales: Vec<f64>,
    /// Registered backbone name.
    pub backbone: String,
}

impl Default for InterStreamConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 3,
            r_cut: 6.0,
            radial_count: 8,
            basis: RadialKind::Bessel,
            scales: vec![0.5, 0.75, 1.0],
            backbone: "invariant-mpnn".into(),
        }
    }
}

impl InterStreamConfig {
    pub fn radial(&self) -> RadialBasisSpec {
        RadialBasisSpec {
            kind: self.basis,
            count: self.radial_count,
            r_cut: self.r_cut,
        }
    }

    pub fn bank(&self) -> CutoffBank {
        CutoffBank {
            scales: self.scales.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyHeadMode {
    /// One MLP over the fused vector.
    Fused,
    /// `E = E_geom(struct ‖ int) + E_cf(comp)` with no cross terms.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub energy_hidden: Vec<usize>,
    pub energy_mode: EnergyHeadMode,
    pub force_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
    pub mask_hidden: Vec<usize>,
    pub mask_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            energy_hidden: vec![128, 128],
            energy_mode: EnergyHeadMode::Fused,
            force_hidden: vec![128, 128],
            noise_hidden: vec![128, 128],
            mask_hidden: vec![128],
            mask_classes: 100,
        }
    }
}

/// Which streams feed the fusion boundary. A disabled stream keeps its slice
/// (fixed offsets) but contributes zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSet {
    pub comp: bool,
    pub structure: bool,
    pub interaction: bool,
}

impl Default for StreamSet {
    fn default() -> Self {
        Self {
            comp: true,
            structure: true,
            interaction: true,
        }
    }
}

/// Neighbor-graph parameters used outside augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub cutoff: f64,
    pub max_neighbors: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            cutoff: 6.0,
            max_neighbors: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    pub comp: CompStreamConfig,
    pub structure: StructStreamConfig,
    pub interaction: InterStreamConfig,
    pub heads: HeadConfig,
    pub streams: StreamSet,
}

impl ModelConfig {
    /// Very small widths for gradient and invariance checks.
    pub fn tiny() -> Self {
        Self {
            graph: GraphConfig {
                cutoff: 4.0,
                max_neighbors: 32,
            },
            comp: CompStreamConfig {
                width: 8,
                layers: 2,
                heads: 2,
                ff_width: 16,
                dropout: 0.0,
                ..Default::default()
            },
            structure: StructStreamConfig {
                width: 8,
                r_cut: 4.0,
                radial_count: 4,
                mixed_channels: 3,
                l_max: 2,
                mlp_layers: 2,
                mp_layers: 2,
                edge_width: 4,
                ..Default::default()
            },
            interaction: InterStreamConfig {
                width: 8,
                layers: 2,
                r_cut: 4.0,
                radial_count: 4,
                ..Default::default()
            },
            heads: HeadConfig {
                energy_hidden: vec![8],
                force_hidden: vec![8],
                noise_hidden: vec![8],
                mask_hidden: vec![8],
                ..Default::default()
            },
            streams: StreamSet::default(),
        }
    }

    /// Desk-scale widths used by the training and retrieval experiments.
    pub fn small() -> Self {
        Self {
            graph: GraphConfig {
                cutoff: 5.0,
                max_neighbors: 48,
            },
            comp: CompStreamConfig {
                width: 32,
                layers: 2,
                heads: 4,
                ff_width: 64,
                dropout: 0.0,
                ..Default::default()
            },
            structure: StructStreamConfig {
                width: 32,
                r_cut: 5.0,
                radial_count: 6,
                mixed_channels: 4,
                l_max: 3,
                mlp_layers: 2,
                mp_layers: 1,
                edge_width: 8,
                ..Default::default()
            },
            interaction: InterStreamConfig {
                width: 32,
                layers: 2,
                r_cut: 5.0,
                radial_count: 6,
                ..Default::default()
            },
            heads: HeadConfig {
                energy_hidden: vec![32, 32],
                force_hidden: vec![32],
                noise_hidden: vec![32],
                mask_hidden: vec![32],
                ..Default::default()
            },
            streams: StreamSet::default(),
        }
    }

    pub fn fused_width(&self) -> usize {
        self.comp.width + self.structure.width + self.interaction.width
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.graph.cutoff > 0.0) || self.graph.max_neighbors == 0 {
            return input("graph cutoff and max_neighbors must be positive");
        }
        let c = &self.comp;
        if c.width == 0 || c.heads == 0 || c.width % c.heads != 0 {
            return input(format!(
                "composition width {} must be a positive multiple of heads {}",
                c.width, c.heads
            ));
        }
        if c.vocab != 100 {
            return input("element vocabulary is fixed at 100");
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return input("dropout must lie in [0, 1)");
        }
        let s = &self.structure;
        if s.width == 0 || s.mixed_channels == 0 || s.mlp_layers == 0 {
            return input("structural stream widths must be positive");
        }
        s.radial().validate()?;
        s.bank().validate()?;
        let i = &self.interaction;
        if i.width == 0 || i.layers == 0 {
            return input("interaction stream needs width ≥ 1 and layers ≥ 1");
        }
        i.radial().validate()?;
        i.bank().validate()?;
        if self.heads.mask_classes != 100 {
            return input("mask head predicts 100 element classes");
        }
        Ok(())
    }
}
