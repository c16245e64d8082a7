//! Globally-aware multiple-instance classifier: a global saliency network,
//! greedy ROI retrieval, a gated-attention local network over the retrieved
//! patches, and a fusion head.

mod forward;
mod roi;

pub use forward::{
    build_forward, fusion_forward, global_forward, gmic_loss, local_attention, ForwardNodes, GlobalNodes,
};
pub use roi::{aggregate_topr, combined_saliency, retrieve_rois, select_windows};

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::ProcessedImage;
use crate::tensor::{Graph, ParamStore};

/// Architecture and loss settings shared by the classifier and the risk-curve model.
#[derive(Clone, Debug, PartialEq)]
pub struct GmicConfig {
    pub input_side: usize,
    pub saliency_side: usize,
    pub global_channels: Vec<usize>,
    pub local_channels: Vec<usize>,
    pub attention_dim: usize,
    pub num_windows: usize,
    pub crop_side: usize,
    pub patch_side: usize,
    pub num_patches: usize,
    pub pool_fraction: f64,
    pub sparsity_weight: f64,
}

impl Default for GmicConfig {
    fn default() -> Self {
        GmicConfig {
            input_side: 64,
            saliency_side: 8,
            global_channels: vec![8, 16, 32, 64],
            local_channels: vec![8, 16],
            attention_dim: 8,
            num_windows: 4,
            crop_side: 16,
            patch_side: 14,
            num_patches: 6,
            pool_fraction: 0.5,
            sparsity_weight: 4e-5,
        }
    }
}

impl GmicConfig {
    /// Risk-curve variant: nine output channels and one extra global stage.
    pub fn drc_default() -> Self {
        GmicConfig {
            global_channels: vec![8, 16, 32, 64, 64],
            num_windows: 9,
            sparsity_weight: 1e-5,
            ..Self::default()
        }
    }

    /// 16x16 input, 4x4 saliency grid, two patches: for smoke runs and gradient checks.
    pub fn tiny() -> Self {
        GmicConfig {
            input_side: 16,
            saliency_side: 4,
            global_channels: vec![4, 6],
            local_channels: vec![3, 4],
            attention_dim: 4,
            num_windows: 4,
            crop_side: 8,
            patch_side: 6,
            num_patches: 2,
            pool_fraction: 0.5,
            sparsity_weight: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_side == 0 || self.saliency_side == 0 || !self.input_side.is_multiple_of(self.saliency_side) {
            return bad(format!(
                "input side {} must be a positive multiple of saliency side {}",
                self.input_side, self.saliency_side
            ));
        }
        let ratio = self.input_side / self.saliency_side;
        if !ratio.is_power_of_two() || self.pool_stages() > self.global_channels.len() {
            return bad(format!(
                "input/saliency ratio {ratio} must be a power of two reachable with {} pooling stages",
                self.global_channels.len()
            ));
        }
        if self.global_channels.iter().chain(&self.local_channels).any(|&c| c == 0)
            || self.local_channels.is_empty()
            || self.attention_dim == 0
        {
            return bad("channel widths and attention dimension must be positive".into());
        }
        if self.crop_side == 0
            || self.crop_side > self.input_side
            || !(self.crop_side * self.saliency_side).is_multiple_of(self.input_side)
        {
            return bad(format!(
                "crop side {} must cover a whole number of saliency cells",
                self.crop_side
            ));
        }
        if self.patch_side == 0 || self.num_patches == 0 || self.num_windows == 0 {
            return bad("patch side, patch count and window count must be positive".into());
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return bad(format!("pool fraction {} outside (0, 1]", self.pool_fraction));
        }
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            return bad(format!("sparsity weight {} must be nonnegative", self.sparsity_weight));
        }
        Ok(())
    }

    /// Number of 2x pooling steps from the input to the saliency grid.
    pub fn pool_stages(&self) -> usize {
        (self.input_side / self.saliency_side.max(1)).max(1).trailing_zeros() as usize
    }

    /// Image pixels per saliency cell.
    pub fn cell_size(&self) -> usize {
        self.input_side / self.saliency_side
    }

    /// ROI window edge in saliency cells.
    pub fn window_cells(&self) -> usize {
        self.crop_side * self.saliency_side / self.input_side
    }

    /// Global feature width `n`.
    pub fn feature_channels(&self) -> usize {
        *self.global_channels.last().expect("validated")
    }

    /// Local feature width.
    pub fn local_features(&self) -> usize {
        *self.local_channels.last().expect("validated")
    }

    /// Fresh parameters drawn uniformly in `±1/sqrt(fan_in)`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in self.global_channels.iter().enumerate() {
            store.insert_uniform(format!("global.conv{i}.weight"), &[c, cin, 3, 3], cin * 9, rng);
            store.insert_uniform(format!("global.conv{i}.bias"), &[c], cin * 9, rng);
            cin = c;
        }
        let n = self.feature_channels();
        store.insert_uniform("global.saliency.weight", &[self.num_windows, n, 1, 1], n, rng);
        store.insert_uniform("global.saliency.bias", &[self.num_windows], n, rng);
        let mut cin = 1;
        for (i, &c) in self.local_channels.iter().enumerate() {
            store.insert_uniform(format!("local.conv{i}.weight"), &[c, cin, 3, 3], cin * 9, rng);
            store.insert_uniform(format!("local.conv{i}.bias"), &[c], cin * 9, rng);
            cin = c;
        }
        let nl = self.local_features();
        let l = self.attention_dim;
        store.insert_uniform("attention.v", &[nl, l], nl, rng);
        store.insert_uniform("attention.u", &[nl, l], nl, rng);
        store.insert_uniform("attention.w", &[l, 1], l, rng);
        store.insert_uniform("local.head.weight", &[nl, self.num_windows], nl, rng);
        store.insert_uniform("local.head.bias", &[self.num_windows], nl, rng);
        store.insert_uniform("fusion.weight", &[n + nl, self.num_windows], n + nl, rng);
        store.insert_uniform("fusion.bias", &[self.num_windows], n + nl, rng);
        Ok(store)
    }
}

/// Per-window saliency maps, stored `[window][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMaps {
    side: usize,
    values: Vec<f64>,
}

impl SaliencyMaps {
    pub fn new(num_maps: usize, side: usize, values: Vec<f64>) -> Result<Self> {
        if num_maps == 0 || side == 0 || values.len() != num_maps * side * side {
            return Err(Error::invalid(format!(
                "{num_maps} maps of {side}x{side} need {} values, got {}",
                num_maps * side * side,
                values.len()
            )));
        }
        Ok(SaliencyMaps { side, values })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_maps(&self) -> usize {
        self.values.len() / (self.side * self.side)
    }

    pub fn map(&self, t: usize) -> &[f64] {
        let cells = self.side * self.side;
        &self.values[t * cells..(t + 1) * cells]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Map `t` as a square image for export.
    pub fn image(&self, t: usize) -> ProcessedImage {
        ProcessedImage::from_unchecked(self.side, self.map(t).iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

/// Retrieved patches with their image positions and attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSet {
    pub positions: Vec<(usize, usize)>,
    pub patches: Vec<ProcessedImage>,
    pub attention: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmicOutputs {
    pub y_global: Vec<f64>,
    pub y_local: Vec<f64>,
    pub y_fusion: Vec<f64>,
    pub saliency: SaliencyMaps,
    pub rois: RoiSet,
}

/// Frozen parameters plus architecture, the unit used for inference.
#[derive(Clone, Debug)]
pub struct GmicModel {
    pub config: GmicConfig,
    pub params: ParamStore,
}

impl GmicModel {
    pub fn new(config: GmicConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (name, t) in expected.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    name.clone(),
                    format!("checkpoint has {:?}, config expects {:?}", got.shape(), t.shape()),
                ));
            }
        }
        Ok(GmicModel { config, params })
    }

    pub fn forward(&self, img: &ProcessedImage) -> Result<GmicOutputs> {
        forward_outputs(&self.config, &self.params, img)
    }

    /// Final per-window probabilities.
    pub fn predict(&self, img: &ProcessedImage) -> Result<Vec<f64>> {
        Ok(self.forward(img)?.y_fusion)
    }
}

/// Runs the full forward pass and collects every output.
pub fn forward_outputs(cfg: &GmicConfig, params: &ParamStore, img: &ProcessedImage) -> Result<GmicOutputs> {
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, params, cfg, img)?;
    let saliency = SaliencyMaps::new(
        cfg.num_windows,
        cfg.saliency_side,
        g.value(nodes.global.saliency).data().to_vec(),
    )?;
    Ok(GmicOutputs {
        y_global: g.value(nodes.global.y_global).data().to_vec(),
        y_local: g.value(nodes.y_local).data().to_vec(),
        y_fusion: g.value(nodes.y_fusion).data().to_vec(),
        saliency,
        rois: RoiSet {
            positions: nodes.positions,
            patches: nodes.patches,
            attention: g.value(nodes.attention).data().to_vec(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_is_consistent() {
        let cfg = GmicConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.pool_stages(), 3);
        assert_eq!(cfg.window_cells(), 2);
        assert_eq!(cfg.cell_size(), 8);
        GmicConfig::drc_default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_geometry() {
        let cfg = GmicConfig {
            crop_side: 12,
            ..GmicConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GmicConfig {
            global_channels: vec![4, 4],
            ..GmicConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_checks_checkpoint_shapes() {
        let cfg = GmicConfig::default();
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(GmicModel::new(cfg.clone(), params.clone()).is_ok());
        let other = GmicConfig { num_windows: 9, ..cfg };
        assert!(GmicModel::new(other, params).is_err());
    }
}
