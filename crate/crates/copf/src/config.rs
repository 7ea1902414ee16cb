//! Engine configuration: fusion-constraint modes, prediction-head knobs,
//! optimization settings, and the ablation-variant table.
//!
//! Config files are flat TOML key-value documents. Unknown keys are
//! rejected outright so a typo in an ablation run cannot silently fall
//! back to a default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::hex_string;
use crate::error::{CopfError, Result};

/// Which upstream outputs seed the next behavior's propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreMode {
    /// Sum of all upstream final-layer outputs plus the initial embedding.
    Full,
    /// Only the most recent upstream behavior plus the initial embedding.
    Strict,
    /// Initial embedding only.
    None,
}

/// Which relation graphs participate in one propagation layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InMode {
    /// Current behavior and all upstream behaviors.
    Full,
    /// Current behavior only.
    Strict,
    /// Every behavior, downstream included (the constraint removed).
    None,
}

/// Shape of the fusion output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostMode {
    /// One user/item pair per behavior.
    Decoupled,
    /// A single pair: the unweighted mean over the per-behavior outputs.
    Fused,
}

/// Whether the identity term is added once per relation or once per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfLoopMode {
    PerRelation,
    Once,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopGradMode {
    /// Block gradients only on the target-expert slot of auxiliary tasks.
    TargetOnly,
    /// Block gradients on every cross-task slot.
    All,
    /// Never block.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateSharing {
    Shared,
    PerTask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSetMode {
    /// Contrast against every user/item.
    Full,
    /// Contrast only within the current batch.
    Batch,
}

/// Prediction head: the multi-expert network or a plain bilinear score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Dfme,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BprReduction {
    Mean,
    Sum,
}

/// Normalization denominator for the propagation operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegreeMode {
    /// Each behavior graph is normalized by its own degrees.
    PerBehavior,
    /// All graphs share the degrees of the union graph.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CogcnConfig {
    pub layers: usize,
    pub dim: usize,
    pub pre_mode: PreMode,
    pub in_mode: InMode,
    pub post_mode: PostMode,
    pub self_loop_mode: SelfLoopMode,
}

impl Default for CogcnConfig {
    fn default() -> Self {
        CogcnConfig {
            layers: 2,
            dim: 64,
            pre_mode: PreMode::Full,
            in_mode: InMode::Full,
            post_mode: PostMode::Decoupled,
            self_loop_mode: SelfLoopMode::PerRelation,
        }
    }
}

impl CogcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(CopfError::Config("layers must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(CopfError::Config("dim must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfmeConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub neg_mode: NegativeSetMode,
    pub contrastive_on: bool,
    pub fitting_on: bool,
    pub stop_grad_mode: StopGradMode,
    pub gate_sharing: GateSharing,
    pub head: HeadMode,
    /// Cosine similarity switch for the contrastive term; inner product by
    /// default.
    pub cosine_similarity: bool,
}

impl Default for DfmeConfig {
    fn default() -> Self {
        DfmeConfig {
            tau: 0.2,
            alpha: 0.1,
            beta: 0.001,
            neg_mode: NegativeSetMode::Full,
            contrastive_on: true,
            fitting_on: true,
            stop_grad_mode: StopGradMode::TargetOnly,
            gate_sharing: GateSharing::Shared,
            head: HeadMode::Dfme,
            cosine_similarity: false,
        }
    }
}

impl DfmeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(CopfError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(CopfError::Config("alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Per-behavior loss coefficients; must sum to 1.
    pub lambdas: Vec<f64>,
    /// Contrastive-loss coefficient.
    pub gamma: f64,
    /// L2 regularization coefficient.
    pub mu: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Overrides the per-epoch step count (default: ceil(max edges / batch)).
    pub steps_per_epoch: Option<usize>,
    pub eval_every: usize,
    /// Early-stopping patience, counted in evaluations.
    pub patience: usize,
    pub bpr_reduction: BprReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: Vec::new(),
            gamma: 1.0,
            mu: 0.01,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 200,
            seed: 2024,
            steps_per_epoch: None,
            eval_every: 10,
            patience: 20,
            bpr_reduction: BprReduction::Mean,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Directory with a prepared dataset snapshot (`prepare` output).
    pub dataset: Option<String>,
    pub cogcn: CogcnConfig,
    pub dfme: DfmeConfig,
    pub train: TrainConfig,
    pub degree_mode: DegreeMode,
    /// Evaluation candidate rule: when true, items seen under auxiliary
    /// behaviors are excluded from ranking too.
    pub exclude_aux_candidates: bool,
    /// Threads for evaluation workers only.
    pub threads: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            dataset: None,
            cogcn: CogcnConfig::default(),
            dfme: DfmeConfig::default(),
            train: TrainConfig::default(),
            degree_mode: DegreeMode::PerBehavior,
            exclude_aux_candidates: false,
            threads: 1,
        }
    }
}

impl EngineConfig {
    /// Lambda coefficients for `k` behaviors: uniform when unspecified.
    pub fn lambdas_for(&self, behaviors: usize) -> Result<Vec<f64>> {
        if self.train.lambdas.is_empty() {
            return Ok(vec![1.0 / behaviors as f64; behaviors]);
        }
        if self.train.lambdas.len() != behaviors {
            return Err(CopfError::Config(format!(
                "lambdas has {} entries but the dataset has {} behaviors",
                self.train.lambdas.len(),
                behaviors
            )));
        }
        let sum: f64 = self.train.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CopfError::Config(format!(
                "lambda coefficients must sum to 1, got {sum}"
            )));
        }
        Ok(self.train.lambdas.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.cogcn.validate()?;
        self.dfme.validate()?;
        if self.train.mu < 0.0 {
            return Err(CopfError::Config("mu must be >= 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(CopfError::Config("batch_size must be >= 1".into()));
        }
        if self.train.eval_every == 0 {
            return Err(CopfError::Config("eval_every must be >= 1".into()));
        }
        if !self.train.lambdas.is_empty() {
            let sum: f64 = self.train.lambdas.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CopfError::Config(format!(
                    "lambda coefficients must sum to 1, got {sum}"
                )));
            }
            if self.train.lambdas.iter().any(|&l| l < 0.0) {
                return Err(CopfError::Config("lambda coefficients must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Hash of the canonical serialized form; identifies a configuration in
    /// manifests, checkpoints, and metrics reports.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CopfError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_flat_toml(&text)
    }

    /// Parse the flat key-value document. Every key is checked against the
    /// known set; unknown keys fail the parse.
    pub fn from_flat_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CopfError::Config(format!("config parse error: {e}")))?;
        let mut cfg = EngineConfig::default();
        for (key, value) in &table {
            apply_key(&mut cfg, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat_toml(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        if let Some(d) = &self.dataset {
            push("dataset", format!("{d:?}"));
        }
        push("layers", self.cogcn.layers.to_string());
        push("dim", self.cogcn.dim.to_string());
        push("pre_mode", format!("{:?}", mode_str(&self.cogcn.pre_mode)));
        push("in_mode", format!("{:?}", in_mode_str(&self.cogcn.in_mode)));
        push("post_mode", format!("{:?}", post_mode_str(&self.cogcn.post_mode)));
        push("self_loop_mode", format!("{:?}", self_loop_str(&self.cogcn.self_loop_mode)));
        push("tau", fmt_f64(self.dfme.tau));
        push("alpha", fmt_f64(self.dfme.alpha));
        push("beta", fmt_f64(self.dfme.beta));
        push("gamma", fmt_f64(self.train.gamma));
        push("neg_mode", format!("{:?}", neg_mode_str(&self.dfme.neg_mode)));
        push("contrastive_on", self.dfme.contrastive_on.to_string());
        push("fitting_on", self.dfme.fitting_on.to_string());
        push("stop_grad_mode", format!("{:?}", sg_mode_str(&self.dfme.stop_grad_mode)));
        push("gate_sharing", format!("{:?}", gate_sharing_str(&self.dfme.gate_sharing)));
        push("head", format!("{:?}", head_str(&self.dfme.head)));
        push("cosine_similarity", self.dfme.cosine_similarity.to_string());
        if !self.train.lambdas.is_empty() {
            let items: Vec<String> = self.train.lambdas.iter().map(|l| fmt_f64(*l)).collect();
            push("lambdas", format!("[{}]", items.join(", ")));
        }
        push("mu", fmt_f64(self.train.mu));
        push("learning_rate", fmt_f64(self.train.learning_rate));
        push("batch_size", self.train.batch_size.to_string());
        push("epochs", self.train.epochs.to_string());
        push("seed", self.train.seed.to_string());
        if let Some(s) = self.train.steps_per_epoch {
            push("steps_per_epoch", s.to_string());
        }
        push("eval_every", self.train.eval_every.to_string());
        push("patience", self.train.patience.to_string());
        push("bpr_reduction", format!("{:?}", bpr_str(&self.train.bpr_reduction)));
        push("degree_mode", format!("{:?}", degree_str(&self.degree_mode)));
        push("exclude_aux_candidates", self.exclude_aux_candidates.to_string());
        push("threads", self.threads.to_string());
        out
    }
}

fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn mode_str(m: &PreMode) -> &'static str {
    match m {
        PreMode::Full => "full",
        PreMode::Strict => "strict",
        PreMode::None => "none",
    }
}

fn in_mode_str(m: &InMode) -> &'static str {
    match m {
        InMode::Full => "full",
        InMode::Strict => "strict",
        InMode::None => "none",
    }
}

fn post_mode_str(m: &PostMode) -> &'static str {
    match m {
        PostMode::Decoupled => "decoupled",
        PostMode::Fused => "fused",
    }
}

fn self_loop_str(m: &SelfLoopMode) -> &'static str {
    match m {
        SelfLoopMode::PerRelation => "per-relation",
        SelfLoopMode::Once => "once",
    }
}

fn sg_mode_str(m: &StopGradMode) -> &'static str {
    match m {
        StopGradMode::TargetOnly => "target-only",
        StopGradMode::All => "all",
        StopGradMode::None => "none",
    }
}

fn gate_sharing_str(m: &GateSharing) -> &'static str {
    match m {
        GateSharing::Shared => "shared",
        GateSharing::PerTask => "per-task",
    }
}

fn neg_mode_str(m: &NegativeSetMode) -> &'static str {
    match m {
        NegativeSetMode::Full => "full",
        NegativeSetMode::Batch => "batch",
    }
}

fn head_str(m: &HeadMode) -> &'static str {
    match m {
        HeadMode::Dfme => "dfme",
        HeadMode::Bilinear => "bilinear",
    }
}

fn bpr_str(m: &BprReduction) -> &'static str {
    match m {
        BprReduction::Mean => "mean",
        BprReduction::Sum => "sum",
    }
}

fn degree_str(m: &DegreeMode) -> &'static str {
    match m {
        DegreeMode::PerBehavior => "per-behavior",
        DegreeMode::Joint => "joint",
    }
}

fn as_usize(key: &str, value: &toml::Value) -> Result<usize> {
    value
        .as_integer()
        .filter(|v| *v >= 0)
        .map(|v| v as usize)
        .ok_or_else(|| CopfError::Config(format!("{key} must be a non-negative integer")))
}

fn as_f64(key: &str, value: &toml::Value) -> Result<f64> {
    match value {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(CopfError::Config(format!("{key} must be a number"))),
    }
}

fn as_bool(key: &str, value: &toml::Value) -> Result<bool> {
    value
        .as_bool()
        .ok_or_else(|| CopfError::Config(format!("{key} must be a boolean")))
}

fn as_str<'v>(key: &str, value: &'v toml::Value) -> Result<&'v str> {
    value
        .as_str()
        .ok_or_else(|| CopfError::Config(format!("{key} must be a string")))
}

fn bad_value(key: &str, value: &str, allowed: &[&str]) -> CopfError {
    CopfError::Config(format!(
        "invalid {key} value {value:?}; allowed: {}",
        allowed.join(", ")
    ))
}

fn apply_key(cfg: &mut EngineConfig, key: &str, value: &toml::Value) -> Result<()> {
    match key {
        "dataset" => cfg.dataset = Some(as_str(key, value)?.to_string()),
        "layers" => cfg.cogcn.layers = as_usize(key, value)?,
        "dim" => cfg.cogcn.dim = as_usize(key, value)?,
        "pre_mode" => {
            cfg.cogcn.pre_mode = match as_str(key, value)? {
                "full" => PreMode::Full,
                "strict" => PreMode::Strict,
                "none" => PreMode::None,
                other => return Err(bad_value(key, other, &["full", "strict", "none"])),
            }
        }
        "in_mode" => {
            cfg.cogcn.in_mode = match as_str(key, value)? {
                "full" => InMode::Full,
                "strict" => InMode::Strict,
                "none" => InMode::None,
                other => return Err(bad_value(key, other, &["full", "strict", "none"])),
            }
        }
        "post_mode" => {
            cfg.cogcn.post_mode = match as_str(key, value)? {
                "decoupled" => PostMode::Decoupled,
                "fused" => PostMode::Fused,
                other => return Err(bad_value(key, other, &["decoupled", "fused"])),
            }
        }
        "self_loop_mode" => {
            cfg.cogcn.self_loop_mode = match as_str(key, value)? {
                "per-relation" => SelfLoopMode::PerRelation,
                "once" => SelfLoopMode::Once,
                other => return Err(bad_value(key, other, &["per-relation", "once"])),
            }
        }
        "tau" => cfg.dfme.tau = as_f64(key, value)?,
        "alpha" => cfg.dfme.alpha = as_f64(key, value)?,
        "beta" => cfg.dfme.beta = as_f64(key, value)?,
        "gamma" => cfg.train.gamma = as_f64(key, value)?,
        "neg_mode" => {
            cfg.dfme.neg_mode = match as_str(key, value)? {
                "full" => NegativeSetMode::Full,
                "batch" => NegativeSetMode::Batch,
                other => return Err(bad_value(key, other, &["full", "batch"])),
            }
        }
        "contrastive_on" => cfg.dfme.contrastive_on = as_bool(key, value)?,
        "fitting_on" => cfg.dfme.fitting_on = as_bool(key, value)?,
        "stop_grad_mode" => {
            cfg.dfme.stop_grad_mode = match as_str(key, value)? {
                "target-only" => StopGradMode::TargetOnly,
                "all" => StopGradMode::All,
                "none" => StopGradMode::None,
                other => return Err(bad_value(key, other, &["target-only", "all", "none"])),
            }
        }
        "gate_sharing" => {
            cfg.dfme.gate_sharing = match as_str(key, value)? {
                "shared" => GateSharing::Shared,
                "per-task" => GateSharing::PerTask,
                other => return Err(bad_value(key, other, &["shared", "per-task"])),
            }
        }
        "head" => {
            cfg.dfme.head = match as_str(key, value)? {
                "dfme" => HeadMode::Dfme,
                "bilinear" => HeadMode::Bilinear,
                other => return Err(bad_value(key, other, &["dfme", "bilinear"])),
            }
        }
        "cosine_similarity" => cfg.dfme.cosine_similarity = as_bool(key, value)?,
        "lambdas" => {
            let arr = value
                .as_array()
                .ok_or_else(|| CopfError::Config("lambdas must be an array".into()))?;
            cfg.train.lambdas = arr
                .iter()
                .map(|v| as_f64("lambdas", v))
                .collect::<Result<_>>()?;
        }
        "mu" => cfg.train.mu = as_f64(key, value)?,
        "learning_rate" => cfg.train.learning_rate = as_f64(key, value)?,
        "batch_size" => cfg.train.batch_size = as_usize(key, value)?,
        "epochs" => cfg.train.epochs = as_usize(key, value)?,
        "seed" => {
            cfg.train.seed = value
                .as_integer()
                .filter(|v| *v >= 0)
                .map(|v| v as u64)
                .ok_or_else(|| CopfError::Config("seed must be a non-negative integer".into()))?;
        }
        "steps_per_epoch" => cfg.train.steps_per_epoch = Some(as_usize(key, value)?),
        "eval_every" => cfg.train.eval_every = as_usize(key, value)?,
        "patience" => cfg.train.patience = as_usize(key, value)?,
        "bpr_reduction" => {
            cfg.train.bpr_reduction = match as_str(key, value)? {
                "mean" => BprReduction::Mean,
                "sum" => BprReduction::Sum,
                other => return Err(bad_value(key, other, &["mean", "sum"])),
            }
        }
        "degree_mode" => {
            cfg.degree_mode = match as_str(key, value)? {
                "per-behavior" => DegreeMode::PerBehavior,
                "joint" => DegreeMode::Joint,
                other => return Err(bad_value(key, other, &["per-behavior", "joint"])),
            }
        }
        "exclude_aux_candidates" => cfg.exclude_aux_candidates = as_bool(key, value)?,
        "threads" => cfg.threads = as_usize(key, value)?,
        other => {
            return Err(CopfError::Config(format!(
                "unknown config key {other:?}"
            )))
        }
    }
    Ok(())
}

// ---- ablation variants ----

/// Named configurations for the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    WithoutCogcn,
    CopfP,
    CopfA,
    CopfD,
    CopfF,
    CopfC,
    CopfB,
    CopfH,
    WithoutDfme,
    WithoutContrastive,
    WithoutForward,
    WithoutBackward,
    AllStopGrad,
    WithoutFitting,
}

pub const ALL_VARIANTS: &[Variant] = &[
    Variant::Full,
    Variant::WithoutCogcn,
    Variant::CopfP,
    Variant::CopfA,
    Variant::CopfD,
    Variant::CopfF,
    Variant::CopfC,
    Variant::CopfB,
    Variant::CopfH,
    Variant::WithoutDfme,
    Variant::WithoutContrastive,
    Variant::WithoutForward,
    Variant::WithoutBackward,
    Variant::AllStopGrad,
    Variant::WithoutFitting,
];

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        let v = match name {
            "full" => Variant::Full,
            "w/o-cogcn" => Variant::WithoutCogcn,
            "copf-p" => Variant::CopfP,
            "copf-a" => Variant::CopfA,
            "copf-d" => Variant::CopfD,
            "copf-f" => Variant::CopfF,
            "copf-c" => Variant::CopfC,
            "copf-b" => Variant::CopfB,
            "copf-h" => Variant::CopfH,
            "w/o-dfme" => Variant::WithoutDfme,
            "w/o-con" => Variant::WithoutContrastive,
            "w/o-for" => Variant::WithoutForward,
            "w/o-back" => Variant::WithoutBackward,
            "all-sg" => Variant::AllStopGrad,
            "w/o-fit" => Variant::WithoutFitting,
            other => {
                let names: Vec<&str> = ALL_VARIANTS.iter().map(|v| v.name()).collect();
                return Err(CopfError::Usage(format!(
                    "unknown variant {other:?}; valid names: {}",
                    names.join(", ")
                )));
            }
        };
        Ok(v)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutCogcn => "w/o-cogcn",
            Variant::CopfP => "copf-p",
            Variant::CopfA => "copf-a",
            Variant::CopfD => "copf-d",
            Variant::CopfF => "copf-f",
            Variant::CopfC => "copf-c",
            Variant::CopfB => "copf-b",
            Variant::CopfH => "copf-h",
            Variant::WithoutDfme => "w/o-dfme",
            Variant::WithoutContrastive => "w/o-con",
            Variant::WithoutForward => "w/o-for",
            Variant::WithoutBackward => "w/o-back",
            Variant::AllStopGrad => "all-sg",
            Variant::WithoutFitting => "w/o-fit",
        }
    }

    /// Apply the variant on top of a base configuration.
    pub fn apply(&self, base: &EngineConfig) -> EngineConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutCogcn => {
                // Independent per-behavior propagation stacks over a shared
                // embedding table.
                cfg.cogcn.pre_mode = PreMode::None;
                cfg.cogcn.in_mode = InMode::Strict;
            }
            Variant::CopfP => cfg.cogcn.pre_mode = PreMode::None,
            Variant::CopfA => cfg.cogcn.in_mode = InMode::None,
            Variant::CopfD => {
                cfg.cogcn.post_mode = PostMode::Fused;
                cfg.dfme.head = HeadMode::Bilinear;
                cfg.dfme.contrastive_on = false;
                cfg.train.gamma = 0.0;
            }
            Variant::CopfF => {
                cfg.cogcn.pre_mode = PreMode::None;
                cfg.cogcn.in_mode = InMode::None;
            }
            Variant::CopfC => {
                cfg.cogcn.pre_mode = PreMode::Strict;
                cfg.cogcn.in_mode = InMode::Strict;
            }
            Variant::CopfB => cfg.cogcn.pre_mode = PreMode::Strict,
            Variant::CopfH => cfg.cogcn.in_mode = InMode::Strict,
            Variant::WithoutDfme => {
                cfg.dfme.head = HeadMode::Bilinear;
                cfg.dfme.contrastive_on = false;
                cfg.train.gamma = 0.0;
            }
            Variant::WithoutContrastive => {
                cfg.dfme.contrastive_on = false;
                cfg.train.gamma = 0.0;
            }
            Variant::WithoutForward => cfg.dfme.fitting_on = false,
            Variant::WithoutBackward => cfg.dfme.stop_grad_mode = StopGradMode::None,
            Variant::AllStopGrad => cfg.dfme.stop_grad_mode = StopGradMode::All,
            Variant::WithoutFitting => {
                cfg.dfme.fitting_on = false;
                cfg.dfme.stop_grad_mode = StopGradMode::None;
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered key-value view used by reports.
pub fn config_summary(cfg: &EngineConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert("layers".into(), cfg.cogcn.layers.to_string());
    map.insert("dim".into(), cfg.cogcn.dim.to_string());
    map.insert("pre_mode".into(), mode_str(&cfg.cogcn.pre_mode).into());
    map.insert("in_mode".into(), in_mode_str(&cfg.cogcn.in_mode).into());
    map.insert("post_mode".into(), post_mode_str(&cfg.cogcn.post_mode).into());
    map.insert("head".into(), head_str(&cfg.dfme.head).into());
    map.insert("stop_grad_mode".into(), sg_mode_str(&cfg.dfme.stop_grad_mode).into());
    map.insert("gamma".into(), format!("{}", cfg.train.gamma));
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = EngineConfig::from_flat_toml("laeyrs = 3\n").unwrap_err();
        assert!(err.to_string().contains("laeyrs"), "{err}");
    }

    #[test]
    fn roundtrip_through_flat_toml() {
        let mut cfg = EngineConfig::default();
        cfg.cogcn.layers = 3;
        cfg.dfme.tau = 0.4;
        cfg.train.lambdas = vec![0.25, 0.75];
        let text = cfg.to_flat_toml();
        let parsed = EngineConfig::from_flat_toml(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn all_variant_names_resolve() {
        let names = [
            "w/o-cogcn", "copf-p", "copf-a", "copf-d", "copf-f", "copf-c", "copf-b",
            "copf-h", "w/o-dfme", "w/o-con", "w/o-for", "w/o-back", "all-sg", "w/o-fit",
            "full",
        ];
        for name in names {
            let v = Variant::parse(name).unwrap();
            assert_eq!(v.name(), name);
        }
        assert_eq!(names.len(), ALL_VARIANTS.len());
    }

    #[test]
    fn variant_mappings_match_their_definitions() {
        let base = EngineConfig::default();
        let c = Variant::parse("copf-c").unwrap().apply(&base);
        assert_eq!(c.cogcn.pre_mode, PreMode::Strict);
        assert_eq!(c.cogcn.in_mode, InMode::Strict);

        let con = Variant::parse("w/o-con").unwrap().apply(&base);
        assert_eq!(con.train.gamma, 0.0);

        let full = Variant::parse("full").unwrap().apply(&base);
        assert_eq!(full, base);

        let d = Variant::parse("copf-d").unwrap().apply(&base);
        assert_eq!(d.cogcn.post_mode, PostMode::Fused);
        assert_eq!(d.dfme.head, HeadMode::Bilinear);
    }

    #[test]
    fn bad_variant_error_lists_valid_names() {
        let err = Variant::parse("copf-z").unwrap_err().to_string();
        assert!(err.contains("copf-c") && err.contains("w/o-dfme"), "{err}");
    }

    #[test]
    fn lambda_sum_enforced() {
        let err = EngineConfig::from_flat_toml("lambdas = [0.5, 0.6]\n").unwrap_err();
        assert!(err.to_string().contains("sum to 1"), "{err}");
    }
}
