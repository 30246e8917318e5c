//! Experiment configuration in a flat `key = value` text format with dotted
//! section keys. Lists are comma separated. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fmt::{f17, f17_list, parse_f64_list};
use crate::graph::{GeometricParams, SbmParams};
use crate::model::Activation;
use crate::sparsify::ResistanceMode;

/// Parsed `key = value` lines, keyed by name, with the 1-based source line.
pub type KvMap = BTreeMap<String, (usize, String)>;

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut out = KvMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse { line: i + 1, msg: format!("expected `key = value`, got `{line}`") });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
        }
        if out.insert(k.to_string(), (i + 1, v.trim().to_string())).is_some() {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate key `{k}`") });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Sbm,
    Geometric,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Sbm => "sbm",
            Family::Geometric => "geometric",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sbm" => Some(Family::Sbm),
            "geometric" => Some(Family::Geometric),
            _ => None,
        }
    }

    pub fn index(&self) -> u64 {
        match self {
            Family::Sbm => 0,
            Family::Geometric => 1,
        }
    }
}

/// SBM graph plus the class-structured features laid over its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmConfig {
    pub params: SbmParams,
    pub feat_dim: usize,
    pub center_scale: f64,
    pub noise_std: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self { params: SbmParams::default(), feat_dim: 20, center_scale: 4.0, noise_std: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsifierConfig {
    pub mode: ResistanceMode,
    pub c_grid: Vec<f64>,
    pub targets_sbm: Vec<f64>,
    pub targets_geometric: Vec<f64>,
    pub draws_per_level: usize,
    pub probes: usize,
    /// Probe draws averaged per grid multiplier during selection.
    pub probe_repeats: usize,
}

impl Default for SparsifierConfig {
    fn default() -> Self {
        Self {
            mode: ResistanceMode::Exact,
            c_grid: vec![1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 12.0, 16.0],
            targets_sbm: vec![0.41, 0.42, 0.43, 0.43, 0.56, 0.71],
            targets_geometric: vec![0.37, 0.38, 0.41, 0.54, 0.66, 0.75],
            draws_per_level: 5,
            probes: 500,
            probe_repeats: 3,
        }
    }
}

/// The fixed forward map of the stability sweep: one filtered layer followed
/// by unfiltered mixing layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub filter: Vec<f64>,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { filter: vec![1.0, -0.6, 0.15], widths: vec![32, 16], activation: Activation::Identity, init_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr_one_layer: f64,
    pub lr_two_layer: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub hidden_width: usize,
    pub activation: Activation,
    pub targets_sbm: Vec<f64>,
    pub targets_geometric: Vec<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_one_layer: 0.01,
            lr_two_layer: 0.003,
            weight_decay: 1e-3,
            grad_clip_norm: Some(5.0),
            hidden_width: 32,
            activation: Activation::Tanh,
            targets_sbm: vec![0.35, 0.45, 0.55, 0.65, 0.75],
            targets_geometric: vec![0.35, 0.45, 0.55, 0.65, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryConfig {
    pub k: usize,
    pub subset_cap: usize,
    pub test_fraction: f64,
    pub hidden_width_sbm: usize,
    pub hidden_width_geometric: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            k: 20,
            subset_cap: 500,
            test_fraction: 0.4,
            hidden_width_sbm: 48,
            hidden_width_geometric: 32,
            train_epochs: 120,
            train_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub families: Vec<Family>,
    pub sbm: SbmConfig,
    pub geometric: GeometricParams,
    pub sparsifier: SparsifierConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub geometry: GeometryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            families: vec![Family::Sbm, Family::Geometric],
            sbm: SbmConfig::default(),
            geometric: GeometricParams::default(),
            sparsifier: SparsifierConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            geometry: GeometryConfig::default(),
        }
    }
}

fn usize_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value for `{key}`: `{value}`"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad(key, v))
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v))
}

fn p_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    parse_f64_list(v).filter(|xs| xs.iter().all(|x| x.is_finite())).ok_or_else(|| bad(key, v))
}

fn p_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|t| t.trim().parse().map_err(|_| bad(key, v))).collect()
}

impl ExperimentConfig {
    /// Every key with its current value, in emission order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.sbm;
        let g = &self.geometric;
        let sp = &self.sparsifier;
        let m = &self.model;
        let t = &self.training;
        let ge = &self.geometry;
        vec![
            ("master_seed", self.master_seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("dataset.families", self.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")),
            ("dataset.sbm.block_sizes", usize_list(&s.params.block_sizes)),
            ("dataset.sbm.p_in", f17(s.params.p_in)),
            ("dataset.sbm.p_out", f17(s.params.p_out)),
            ("dataset.sbm.weight_low", f17(s.params.weight_low)),
            ("dataset.sbm.weight_high", f17(s.params.weight_high)),
            ("dataset.sbm.feat_dim", s.feat_dim.to_string()),
            ("dataset.sbm.center_scale", f17(s.center_scale)),
            ("dataset.sbm.noise_std", f17(s.noise_std)),
            ("dataset.geometric.n_per_class", g.n_per_class.to_string()),
            ("dataset.geometric.num_classes", g.num_classes.to_string()),
            ("dataset.geometric.feat_dim", g.feat_dim.to_string()),
            ("dataset.geometric.k", g.k.to_string()),
            ("dataset.geometric.center_scale", f17(g.center_scale)),
            ("dataset.geometric.noise_std", f17(g.noise_std)),
            ("sparsifier.mode", sp.mode.name().to_string()),
            ("sparsifier.rank", sp.mode.rank().to_string()),
            ("sparsifier.c_grid", f17_list(&sp.c_grid)),
            ("sparsifier.targets.sbm", f17_list(&sp.targets_sbm)),
            ("sparsifier.targets.geometric", f17_list(&sp.targets_geometric)),
            ("sparsifier.draws_per_level", sp.draws_per_level.to_string()),
            ("sparsifier.probes", sp.probes.to_string()),
            ("sparsifier.probe_repeats", sp.probe_repeats.to_string()),
            ("model.filter", f17_list(&m.filter)),
            ("model.widths", usize_list(&m.widths)),
            ("model.activation", m.activation.tag().to_string()),
            ("model.init_scale", f17(m.init_scale)),
            ("training.epochs", t.epochs.to_string()),
            ("training.lr_one_layer", f17(t.lr_one_layer)),
            ("training.lr_two_layer", f17(t.lr_two_layer)),
            ("training.weight_decay", f17(t.weight_decay)),
            ("training.grad_clip_norm", t.grad_clip_norm.map_or_else(|| "none".to_string(), f17)),
            ("training.hidden_width", t.hidden_width.to_string()),
            ("training.activation", t.activation.tag().to_string()),
            ("training.targets.sbm", f17_list(&t.targets_sbm)),
            ("training.targets.geometric", f17_list(&t.targets_geometric)),
            ("geometry.k", ge.k.to_string()),
            ("geometry.subset_cap", ge.subset_cap.to_string()),
            ("geometry.test_fraction", f17(ge.test_fraction)),
            ("geometry.hidden_width.sbm", ge.hidden_width_sbm.to_string()),
            ("geometry.hidden_width.geometric", ge.hidden_width_geometric.to_string()),
            ("geometry.train_epochs", ge.train_epochs.to_string()),
            ("geometry.train_lr", f17(ge.train_lr)),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "master_seed" => self.master_seed = v.parse().map_err(|_| bad(key, v))?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dataset.families" => {
                self.families = v.split(',').map(|t| Family::parse(t.trim()).ok_or_else(|| bad(key, v))).collect::<Result<_>>()?
            }
            "dataset.sbm.block_sizes" => self.sbm.params.block_sizes = p_usize_list(key, v)?,
            "dataset.sbm.p_in" => self.sbm.params.p_in = p_f64(key, v)?,
            "dataset.sbm.p_out" => self.sbm.params.p_out = p_f64(key, v)?,
            "dataset.sbm.weight_low" => self.sbm.params.weight_low = p_f64(key, v)?,
            "dataset.sbm.weight_high" => self.sbm.params.weight_high = p_f64(key, v)?,
            "dataset.sbm.feat_dim" => self.sbm.feat_dim = p_usize(key, v)?,
            "dataset.sbm.center_scale" => self.sbm.center_scale = p_f64(key, v)?,
            "dataset.sbm.noise_std" => self.sbm.noise_std = p_f64(key, v)?,
            "dataset.geometric.n_per_class" => self.geometric.n_per_class = p_usize(key, v)?,
            "dataset.geometric.num_classes" => self.geometric.num_classes = p_usize(key, v)?,
            "dataset.geometric.feat_dim" => self.geometric.feat_dim = p_usize(key, v)?,
            "dataset.geometric.k" => self.geometric.k = p_usize(key, v)?,
            "dataset.geometric.center_scale" => self.geometric.center_scale = p_f64(key, v)?,
            "dataset.geometric.noise_std" => self.geometric.noise_std = p_f64(key, v)?,
            "sparsifier.mode" => {
                let rank = self.sparsifier.mode.rank();
                self.sparsifier.mode = match v {
                    "exact" => ResistanceMode::Exact,
                    "truncated" => ResistanceMode::Truncated { rank },
                    _ => return Err(bad(key, v)),
                }
            }
            "sparsifier.rank" => {
                let rank = p_usize(key, v)?;
                if let ResistanceMode::Truncated { rank: r } = &mut self.sparsifier.mode {
                    *r = rank;
                } else if rank != 0 {
                    self.sparsifier.mode = ResistanceMode::Truncated { rank };
                }
            }
            "sparsifier.c_grid" => self.sparsifier.c_grid = p_f64_list(key, v)?,
            "sparsifier.targets.sbm" => self.sparsifier.targets_sbm = p_f64_list(key, v)?,
            "sparsifier.targets.geometric" => self.sparsifier.targets_geometric = p_f64_list(key, v)?,
            "sparsifier.draws_per_level" => self.sparsifier.draws_per_level = p_usize(key, v)?,
            "sparsifier.probes" => self.sparsifier.probes = p_usize(key, v)?,
            "sparsifier.probe_repeats" => self.sparsifier.probe_repeats = p_usize(key, v)?,
            "model.filter" => self.model.filter = p_f64_list(key, v)?,
            "model.widths" => self.model.widths = p_usize_list(key, v)?,
            "model.activation" => self.model.activation = Activation::parse(v).ok_or_else(|| bad(key, v))?,
            "model.init_scale" => self.model.init_scale = p_f64(key, v)?,
            "training.epochs" => self.training.epochs = p_usize(key, v)?,
            "training.lr_one_layer" => self.training.lr_one_layer = p_f64(key, v)?,
            "training.lr_two_layer" => self.training.lr_two_layer = p_f64(key, v)?,
            "training.weight_decay" => self.training.weight_decay = p_f64(key, v)?,
            "training.grad_clip_norm" => {
                self.training.grad_clip_norm = if v == "none" { None } else { Some(p_f64(key, v)?) }
            }
            "training.hidden_width" => self.training.hidden_width = p_usize(key, v)?,
            "training.activation" => self.training.activation = Activation::parse(v).ok_or_else(|| bad(key, v))?,
            "training.targets.sbm" => self.training.targets_sbm = p_f64_list(key, v)?,
            "training.targets.geometric" => self.training.targets_geometric = p_f64_list(key, v)?,
            "geometry.k" => self.geometry.k = p_usize(key, v)?,
            "geometry.subset_cap" => self.geometry.subset_cap = p_usize(key, v)?,
            "geometry.test_fraction" => self.geometry.test_fraction = p_f64(key, v)?,
            "geometry.hidden_width.sbm" => self.geometry.hidden_width_sbm = p_usize(key, v)?,
            "geometry.hidden_width.geometric" => self.geometry.hidden_width_geometric = p_usize(key, v)?,
            "geometry.train_epochs" => self.geometry.train_epochs = p_usize(key, v)?,
            "geometry.train_lr" => self.geometry.train_lr = p_f64(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Starts from the defaults and applies every key in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        // mode before rank so `rank` lands in the truncated variant
        let mut keys: Vec<_> = kv.iter().collect();
        keys.sort_by_key(|(k, _)| (k.as_str() != "sparsifier.mode", *k));
        for (k, (line, v)) in keys {
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn targets(&self, family: Family) -> &[f64] {
        match family {
            Family::Sbm => &self.sparsifier.targets_sbm,
            Family::Geometric => &self.sparsifier.targets_geometric,
        }
    }

    pub fn training_targets(&self, family: Family) -> &[f64] {
        match family {
            Family::Sbm => &self.training.targets_sbm,
            Family::Geometric => &self.training.targets_geometric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.families.is_empty() {
            return fail("dataset.families must be nonempty");
        }
        if self.sparsifier.c_grid.is_empty() || self.sparsifier.c_grid.iter().any(|&c| c <= 0.0) {
            return fail("sparsifier.c_grid must be nonempty and positive");
        }
        if self.sparsifier.probes == 0 {
            return fail("sparsifier.probes must be positive");
        }
        if self.sparsifier.probe_repeats == 0 {
            return fail("sparsifier.probe_repeats must be positive");
        }
        if let ResistanceMode::Truncated { rank: 0 } = self.sparsifier.mode {
            return fail("sparsifier.rank must be positive in truncated mode");
        }
        if self.model.filter.is_empty() {
            return fail("model.filter must be nonempty");
        }
        if self.model.widths.iter().any(|&w| w == 0) {
            return fail("model.widths must be positive");
        }
        if self.training.epochs == 0 {
            return fail("training.epochs must be at least 1");
        }
        if !(self.training.lr_one_layer >= 0.0 && self.training.lr_two_layer >= 0.0) {
            return fail("training learning rates must be nonnegative");
        }
        if matches!(self.training.grad_clip_norm, Some(c) if c <= 0.0) {
            return fail("training.grad_clip_norm must be positive or `none`");
        }
        if self.training.hidden_width == 0 || self.geometry.hidden_width_sbm == 0 || self.geometry.hidden_width_geometric == 0 {
            return fail("hidden widths must be positive");
        }
        if !(self.geometry.test_fraction > 0.0 && self.geometry.test_fraction <= 1.0) {
            return fail("geometry.test_fraction must be in (0, 1]");
        }
        if self.geometry.k == 0 || self.geometry.subset_cap == 0 {
            return fail("geometry.k and geometry.subset_cap must be positive");
        }
        Ok(())
    }
}
