//! Pipeline configuration: a flat TOML file with one table per stage.
//!
//! Values resolve in order: built-in defaults, the config file, environment
//! variables `DYGRAG__<SECTION>__<KEY>`, then `--set section.key=value`.

use std::path::Path;

use dygrag_core::backbone::{BackboneConfig, LmTrainOptions};
use dygrag_core::fusion::{FusionConfig, Strategy};
use dygrag_core::graphdata::SynthParams;
use dygrag_core::numerics::AdamConfig;
use dygrag_core::retriever::RetrieverConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::formats::read_text;

pub const ENV_PREFIX: &str = "DYGRAG__";

pub const METHODS: [&str; 4] = ["trained", "bm25", "jaccard", "groundtruth"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Edge-list file; empty selects the planted synthetic generator.
    pub path: String,
    pub steps: usize,
    /// History token budget per sample; 0 keeps everything.
    pub max_history: usize,
    pub communities: usize,
    pub nodes_per_community: usize,
    pub overlap: f64,
    pub targets: usize,
    pub partners: usize,
    pub history_per_step: usize,
    pub step_width: f64,
    pub drift_every: usize,
    pub leaver_fraction: f64,
    pub synth_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthParams::default();
        Self {
            path: String::new(),
            steps: s.steps,
            max_history: 0,
            communities: s.communities,
            nodes_per_community: s.nodes_per_community,
            overlap: s.overlap,
            targets: s.targets,
            partners: s.partners,
            history_per_step: s.history_per_step,
            step_width: s.step_width,
            drift_every: s.drift_every,
            leaver_fraction: s.leaver_fraction,
            synth_seed: 0,
        }
    }
}

impl DataSection {
    pub fn synthetic(&self) -> bool {
        self.path.is_empty()
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            communities: self.communities,
            nodes_per_community: self.nodes_per_community,
            steps: self.steps,
            overlap: self.overlap,
            targets: self.targets,
            partners: self.partners,
            history_per_step: self.history_per_step,
            step_width: self.step_width,
            drift_every: self.drift_every,
            leaver_fraction: self.leaver_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// A named size preset (`uci`, `hepth`, ...); empty uses the explicit sizes.
    pub preset: String,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    /// Longest sequence the model accepts; 0 derives it from the data.
    pub max_len: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let d = BackboneConfig::desk(0, 0);
        let o = LmTrainOptions::default();
        Self {
            preset: String::new(),
            layers: d.layers,
            heads: d.heads,
            hidden_dim: d.hidden_dim,
            max_len: 128,
            dropout: d.dropout,
            epochs: o.epochs,
            batch_size: o.batch_size,
            lr: o.adam.learning_rate,
            clip_norm: o.clip_norm,
        }
    }
}

impl BackboneSection {
    pub fn model_config(&self, vocab_size: usize, max_len: usize) -> Result<BackboneConfig> {
        let mut c = if self.preset.is_empty() {
            BackboneConfig {
                layers: self.layers,
                heads: self.heads,
                hidden_dim: self.hidden_dim,
                max_len,
                dropout: self.dropout,
                vocab_size,
            }
        } else {
            BackboneConfig::preset(&self.preset, vocab_size, max_len)
                .ok_or_else(|| Error::Config(format!("unknown backbone preset `{}`", self.preset)))?
        };
        c.dropout = self.dropout;
        Ok(c)
    }

    pub fn train_options(&self, seed: u64) -> LmTrainOptions {
        LmTrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig::with_lr(self.lr),
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    /// `trained`, `bm25`, `jaccard` or `groundtruth`.
    pub method: String,
    pub threshold: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub mask_portion: f64,
    pub crop_portion: f64,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub use_decay: bool,
    pub use_ccl: bool,
    pub cosine: bool,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let r = RetrieverConfig::default();
        Self {
            method: "trained".into(),
            threshold: dygrag_core::retriever::DEFAULT_THRESHOLD,
            lambda: r.lambda,
            alpha: r.alpha,
            tau: r.tau,
            batch_size: 32,
            mask_portion: r.mask_portion,
            crop_portion: r.crop_portion,
            epochs: r.epochs,
            lr: r.adam.learning_rate,
            clip_norm: r.clip_norm,
            use_decay: r.use_decay,
            use_ccl: r.use_ccl,
            cosine: r.cosine,
        }
    }
}

impl RetrieverSection {
    pub fn core_config(&self, seed: u64) -> RetrieverConfig {
        RetrieverConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            tau: self.tau,
            batch_size: self.batch_size,
            mask_portion: self.mask_portion,
            crop_portion: self.crop_portion,
            epochs: self.epochs,
            adam: AdamConfig::with_lr(self.lr),
            clip_norm: self.clip_norm,
            seed,
            use_decay: self.use_decay,
            use_ccl: self.use_ccl,
            cosine: self.cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// `graph`, `concat` or `mlp`.
    pub strategy: String,
    pub k: usize,
    pub prefix_len: usize,
    pub include_outputs: bool,
    pub prefix_positional: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub max_new: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        Self {
            strategy: f.strategy.name().into(),
            k: f.k,
            prefix_len: f.prefix_len,
            include_outputs: f.include_outputs,
            prefix_positional: f.prefix_positional,
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.adam.learning_rate,
            clip_norm: f.clip_norm,
            max_new: f.max_new,
        }
    }
}

impl FusionSection {
    pub fn core_config(&self, seed: u64) -> Result<FusionConfig> {
        Ok(FusionConfig {
            strategy: Strategy::parse(&self.strategy).map_err(|e| Error::Config(e.to_string()))?,
            k: self.k,
            prefix_len: self.prefix_len,
            include_outputs: self.include_outputs,
            prefix_positional: self.prefix_positional,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig::with_lr(self.lr),
            clip_norm: self.clip_norm,
            max_new: self.max_new,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cut-off for Recall, NDCG and Jaccard.
    pub k: usize,
    /// Cut-offs for the retrieval hit ratio.
    pub hr_k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k: 5, hr_k: vec![1, 3, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: "out".into(),
        }
    }
}

/// Experiment axes. An empty list keeps the base configuration's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub k: Vec<usize>,
    /// `full`, `no-ccl`, `no-decay`.
    pub ablations: Vec<String>,
    pub strategies: Vec<String>,
    pub retrievers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub retriever: RetrieverSection,
    pub fusion: FusionSection,
    pub eval: EvalSection,
    pub run: RunSection,
    pub matrix: MatrixSection,
}

pub const ABLATIONS: [&str; 3] = ["full", "no-ccl", "no-decay"];

impl PipelineConfig {
    /// Reads `path` (if given) and applies environment and command-line
    /// overrides on top.
    pub fn load<I>(path: Option<&Path>, env: I, sets: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match path {
            Some(p) => read_text(p)?
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Table::new(),
        };
        for (k, v) in env {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                let Some((section, key)) = rest.split_once("__") else {
                    return Err(Error::Config(format!("environment override `{k}` needs SECTION__KEY")));
                };
                set_value(&mut table, &section.to_lowercase(), &key.to_lowercase(), &v)?;
            }
        }
        for s in sets {
            let (path, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` must look like section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{path}` must look like section.key")))?;
            set_value(&mut table, section, key, value.trim())?;
        }
        Self::from_table(table)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<Table>().map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_table(mut table: Table) -> Result<Self> {
        let defaults = Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        coerce(&mut table, &defaults)?;
        let c: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.steps < 3 {
            return bad("data.steps must be at least 3".into());
        }
        if self.data.synthetic() {
            self.data.synth_params().validate()?;
        }
        if !self.backbone.preset.is_empty() && BackboneConfig::preset(&self.backbone.preset, 1, 1).is_none() {
            return bad(format!("unknown backbone preset `{}`", self.backbone.preset));
        }
        if !METHODS.contains(&self.retriever.method.as_str()) {
            return bad(format!("retriever.method must be one of {METHODS:?}, got `{}`", self.retriever.method));
        }
        self.retriever.core_config(0).validate()?;
        if !(0.0..=1.0).contains(&self.retriever.threshold) {
            return bad("retriever.threshold must lie in [0, 1]".into());
        }
        self.fusion.core_config(0)?;
        if self.eval.k == 0 || self.eval.hr_k.contains(&0) {
            return bad("evaluation cut-offs must be positive".into());
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds must not be empty".into());
        }
        for a in &self.matrix.ablations {
            if !ABLATIONS.contains(&a.as_str()) {
                return bad(format!("matrix.ablations entries must be one of {ABLATIONS:?}, got `{a}`"));
            }
        }
        for s in &self.matrix.strategies {
            Strategy::parse(s).map_err(|e| Error::Config(e.to_string()))?;
        }
        for r in &self.matrix.retrievers {
            if !METHODS.contains(&r.as_str()) {
                return bad(format!("matrix.retrievers entries must be one of {METHODS:?}, got `{r}`"));
            }
        }
        Ok(())
    }
}

fn set_value(table: &mut Table, section: &str, key: &str, raw: &str) -> Result<()> {
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        return Err(Error::Config(format!("`{section}` is not a section")));
    };
    t.insert(key.to_string(), value);
    Ok(())
}

/// Lets integers stand in for floats and bare words for strings, using the
/// defaults as the type reference. Unknown keys are left for serde to reject.
fn coerce(table: &mut Table, reference: &Table) -> Result<()> {
    for (name, value) in table.iter_mut() {
        match (value, reference.get(name)) {
            (Value::Table(t), Some(Value::Table(r))) => coerce(t, r)?,
            (v @ Value::Integer(_), Some(Value::Float(_))) => {
                let Value::Integer(i) = *v else { unreachable!() };
                *v = Value::Float(i as f64);
            }
            (v, Some(Value::String(_))) if !v.is_str() && !v.is_table() && !v.is_array() => {
                *v = Value::String(v.to_string());
            }
            (Value::Array(items), Some(Value::Array(r))) => {
                let float = r.first().is_some_and(Value::is_float);
                for item in items.iter_mut() {
                    if let (true, Value::Integer(i)) = (float, &item) {
                        *item = Value::Float(*i as f64);
                    } else if !item.is_str() && r.first().is_some_and(Value::is_str) {
                        *item = Value::String(item.to_string());
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}
