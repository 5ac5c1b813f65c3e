//! The assembled network: pillar encoder, backbone, occupancy heads and,
//! optionally, the point generation heads.

use std::path::Path;

use crate::backbone::{backbone_forward, init_backbone};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::grid::{assign_points, encode_pillars, init_encoder, GridConfig};
use crate::nn::checkpoint::{self, Checkpoint};
use crate::nn::{Graph, ParamStore, Var};
use crate::opp::{init_opp, opp_forward, OppHeads, OppOutput};
use crate::ppg::{collect_generation, init_ppg, ppg_forward, Generation, PpgVars};
use crate::rng::stable_hash;
use crate::types::PointCloud;

pub const PPG_PREFIX: &str = "ppg.";

pub fn is_ppg_param(name: &str) -> bool {
    name.starts_with(PPG_PREFIX)
}

/// Key of a scene in the expansion noise stream.
pub fn scene_key(scene_id: &str) -> u64 {
    stable_hash(scene_id.as_bytes())
}

#[derive(Debug, Clone)]
pub struct PillarGen {
    pub grid: GridConfig,
    pub config: ModelConfig,
    pub store: ParamStore,
}

/// Graph handles of the shared trunk and the occupancy heads.
#[derive(Debug, Clone, Copy)]
pub struct Trunk {
    pub bev: Var,
    pub heads: OppHeads,
}

impl PillarGen {
    /// Freshly initialized model; the generation heads are only created when
    /// `with_ppg` is set.
    pub fn new(grid: GridConfig, config: ModelConfig, seed: u64, with_ppg: bool) -> Result<Self> {
        grid.validate()?;
        config.validate()?;
        let mut store = ParamStore::new();
        init_encoder(&mut store, &grid, seed)?;
        init_backbone(&mut store, grid.channels, seed)?;
        init_opp(&mut store, 3 * grid.channels, config.bins, seed)?;
        let mut model = Self { grid, config, store };
        if with_ppg {
            model.add_ppg(seed)?;
        }
        Ok(model)
    }

    pub fn add_ppg(&mut self, seed: u64) -> Result<()> {
        let c = self.bev_channels();
        init_ppg(&mut self.store, c, self.config.ppg_hidden, seed)
    }

    pub fn has_ppg(&self) -> bool {
        self.store.names().any(is_ppg_param)
    }

    pub fn bev_channels(&self) -> usize {
        3 * self.grid.channels
    }

    pub fn trunk(&self, g: &mut Graph, source: &PointCloud) -> Result<Trunk> {
        let buckets = assign_points(source, &self.grid);
        let pseudo = encode_pillars(g, &buckets, &self.store, &self.grid)?;
        let bev = backbone_forward(g, pseudo, &self.store)?;
        let heads = opp_forward(g, bev, &self.store)?;
        Ok(Trunk { bev, heads })
    }

    /// Point generation on top of a trunk pass.
    pub fn generate(&self, g: &mut Graph, trunk: &Trunk, scene_id: &str) -> Result<(OppOutput, PpgVars)> {
        if !self.has_ppg() {
            return Err(Error::Config("model has no point generation parameters; train phase e2e first".into()));
        }
        let out = OppOutput::from_graph(g, &trunk.heads, &self.grid)?;
        let vars = ppg_forward(
            g,
            trunk.bev,
            &trunk.heads,
            &out,
            &self.store,
            &self.grid,
            self.config.active_threshold,
            self.config.noise_seed,
            scene_key(scene_id),
        )?;
        Ok((out, vars))
    }

    pub fn opp_output(&self, source: &PointCloud) -> Result<OppOutput> {
        let mut g = Graph::new();
        let t = self.trunk(&mut g, source)?;
        OppOutput::from_graph(&mut g, &t.heads, &self.grid)
    }

    /// Generated points for one scene, filtered at the configured score
    /// threshold.
    pub fn infer(&self, source: &PointCloud, scene_id: &str) -> Result<Generation> {
        self.infer_with_threshold(source, scene_id, self.config.score_threshold)
    }

    pub fn infer_with_threshold(&self, source: &PointCloud, scene_id: &str, threshold: f64) -> Result<Generation> {
        let mut g = Graph::new();
        let t = self.trunk(&mut g, source)?;
        let (_, vars) = self.generate(&mut g, &t, scene_id)?;
        Ok(collect_generation(&g, &vars, threshold))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.store, path, |_| true)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.store, |_| true)
    }

    /// Model matching `grid` and `config` with every parameter taken from the
    /// checkpoint. Generation heads are created iff the checkpoint has them.
    pub fn from_checkpoint(ckpt: &Checkpoint, grid: GridConfig, config: ModelConfig) -> Result<Self> {
        let with_ppg = ckpt.names().any(is_ppg_param);
        let mut model = Self::new(grid, config, 0, with_ppg)?;
        checkpoint::load_into(ckpt, &mut model.store, |_| true)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>, grid: GridConfig, config: ModelConfig) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::read(path)?, grid, config)
    }
}
