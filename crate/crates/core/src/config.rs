//! Model and run configuration.

use serde::{Deserialize, Serialize};

use crate::corpus::level_names;
use crate::error::{Error, Result};
use crate::numerics::{Adam, StackConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PndbMode {
    Off,
    PoolAll,
    #[default]
    LeaveOneOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PndbConfig {
    pub mode: PndbMode,
    /// Rows of the question matrix.
    pub questions: usize,
    /// Unigram filters per gate; a multiple of 8.
    pub filters: usize,
    /// Pins the update gate at 0 so reads never change the decoder side.
    pub force_closed: bool,
}

impl Default for PndbConfig {
    fn default() -> Self {
        Self {
            mode: PndbMode::LeaveOneOut,
            questions: 4,
            filters: 16,
            force_closed: false,
        }
    }
}

/// Architecture of every level. `dims[k]` is the width of level `k`
/// (0 = token, last = document) and `caps[k]` the padded length of a
/// level-`k` child sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub caps: Vec<usize>,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    /// Depth `L` of coherence checkers, generators and the answer generator.
    pub dense_layers: usize,
    pub discriminator_widths: Vec<usize>,
    pub discriminator_channels: usize,
    pub pndb: PndbConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: vec![32, 48, 64, 96],
            caps: vec![16, 8, 8],
            encoder: StackConfig::default(),
            decoder: StackConfig::default(),
            dense_layers: 2,
            discriminator_widths: vec![2, 3, 4],
            discriminator_channels: 8,
            pndb: PndbConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Number of encoding hops.
    pub fn depth(&self) -> usize {
        self.caps.len()
    }

    pub fn level_names(&self) -> Vec<String> {
        level_names(self.depth())
    }

    pub fn pndb_enabled(&self) -> bool {
        self.pndb.mode != PndbMode::Off
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth() < 2 {
            return bad(format!("need at least 2 hops, got {}", self.depth()));
        }
        if self.dims.len() != self.depth() + 1 {
            return bad(format!(
                "{} dims for {} caps",
                self.dims.len(),
                self.caps.len()
            ));
        }
        for w in self.dims.windows(2) {
            if w[1] <= w[0] {
                return bad(format!(
                    "level widths must strictly increase: {:?}",
                    self.dims
                ));
            }
        }
        if let Some(d) = self.dims[1..].iter().find(|&&d| d % 2 == 1) {
            return bad(format!(
                "width {d} is odd; compressor directions split it in half"
            ));
        }
        for stack in [&self.encoder, &self.decoder] {
            if stack.heads == 0 || stack.layers == 0 || stack.ff_mult == 0 {
                return bad("encoder/decoder need layers, heads and ff_mult ≥ 1".into());
            }
            if let Some(d) = self.dims[..self.depth()]
                .iter()
                .find(|&&d| d % stack.heads != 0)
            {
                return bad(format!("width {d} not divisible by {} heads", stack.heads));
            }
        }
        if let Some(c) = self.caps.iter().find(|&&c| c < 2) {
            return bad(format!("cap {c} leaves no room for a child and EoS"));
        }
        if self.dense_layers == 0 {
            return bad("dense_layers must be ≥ 1".into());
        }
        if self.discriminator_widths.is_empty() || self.discriminator_widths.contains(&0) {
            return bad("discriminator widths must be non-empty and positive".into());
        }
        if self.discriminator_channels == 0 {
            return bad("discriminator_channels must be ≥ 1".into());
        }
        if self.pndb_enabled() {
            let p = &self.pndb;
            if p.filters == 0 || !p.filters.is_multiple_of(8) {
                return bad(format!(
                    "gate filters {} not a positive multiple of 8",
                    p.filters
                ));
            }
            if p.questions == 0 || p.questions >= self.caps[0] {
                return bad(format!(
                    "question count {} must be in 1..{} (token cap)",
                    p.questions, self.caps[0]
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    Off,
    /// Generators and discriminators trained after the main phase.
    #[default]
    PostTrain,
    /// Generators trained against the frozen coherence checkers.
    CcDiscriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub mode: GanMode,
    pub steps: usize,
    pub optimizer: Adam,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            mode: GanMode::PostTrain,
            steps: 200,
            optimizer: Adam::default(),
        }
    }
}

/// Weights of the three per-level tasks; index `k` is the child level of
/// hop `k` (0 = tokens within sentences).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelWeights {
    pub reconstruction: f64,
    pub mlm: f64,
    pub coherence: f64,
}

impl Default for LevelWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            mlm: 1.0,
            coherence: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// One entry per hop; empty means all ones.
    pub weights: Vec<LevelWeights>,
    pub ae_weight: f64,
    /// Initial ε_auto; decays linearly to 0 over the first half of training.
    pub eps_auto: f64,
    pub mlm_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Adam,
    pub gan: GanConfig,
    pub seed: Option<u64>,
    pub checkpoint_every: usize,
    /// Token-first curriculum: hop `k` losses switch on after
    /// `k * steps / depth` steps.
    pub staged: bool,
    pub min_freq: usize,
    pub max_vocab: usize,
    /// Corpus path (a `.jsonl` file, one document per line, a single
    /// document file, or a directory of `.json` documents).
    pub corpus: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: Vec::new(),
            ae_weight: 1.0,
            eps_auto: 0.1,
            mlm_rate: 0.15,
            steps: 2000,
            batch_size: 4,
            optimizer: Adam::default(),
            gan: GanConfig::default(),
            seed: None,
            checkpoint_every: 500,
            staged: false,
            min_freq: 1,
            max_vocab: 10_000,
            corpus: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required".into()))
    }

    pub fn level_weights(&self) -> Vec<LevelWeights> {
        if self.weights.is_empty() {
            vec![LevelWeights::default(); self.model.depth()]
        } else {
            self.weights.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.seed()?;
        let w = self.level_weights();
        if w.len() != self.model.depth() {
            return Err(Error::Config(format!(
                "{} weight entries for {} hops",
                w.len(),
                self.model.depth()
            )));
        }
        let all: Vec<f64> = w
            .iter()
            .flat_map(|l| [l.reconstruction, l.mlm, l.coherence])
            .chain([self.ae_weight])
            .collect();
        if all.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("loss weights must be finite and ≥ 0".into()));
        }
        if all[..all.len() - 1].iter().all(|&x| x == 0.0)
            && (self.ae_weight == 0.0 || self.eps_auto == 0.0)
        {
            return Err(Error::Config("every loss component is disabled".into()));
        }
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return Err(Error::Config(format!(
                "mlm_rate {} not in (0, 1)",
                self.mlm_rate
            )));
        }
        if self.eps_auto < 0.0 {
            return Err(Error::Config("eps_auto must be ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.optimizer.lr <= 0.0 || self.gan.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.max_vocab < 4 {
            return Err(Error::Config(
                "max_vocab must hold the 4 reserved tokens".into(),
            ));
        }
        Ok(())
    }

    /// ε_auto at `step` of a run of `steps` steps.
    pub fn eps_auto_at(&self, step: usize) -> f64 {
        eps_schedule(self.eps_auto, step, self.steps)
    }
}

/// Linear decay from `eps0` at step 0 to 0 at half of `total`.
pub fn eps_schedule(eps0: f64, step: usize, total: usize) -> f64 {
    let half = (total as f64 / 2.0).max(1.0);
    eps0 * (1.0 - step as f64 / half).max(0.0)
}
