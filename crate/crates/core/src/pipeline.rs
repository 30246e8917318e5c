//! Experiment orchestration: data generation, the stability sweep with
//! per-draw certificates, matched training trajectories, and the geometry
//! sweep. Every (level, draw) is an independent job seeded from the master
//! seed, so results do not depend on thread count and any single job can be
//! replayed from the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_kv, ExperimentConfig, Family};
use crate::error::{Error, Result};
use crate::fmt::{f17, parse_f64_list};
use crate::geometry::{
    centroid_projection, class_balanced_split, eval_subset, geometry_csv, geometry_report, gram_norm_gaps, procrustes_report, CentroidProjection,
    GeometryReport, GeometryRow, GramGaps, ProcrustesReport, CERT_SLACK,
};
use crate::graph::{
    block_labels, class_features, generate_geometric_knn, generate_sbm, laplacian, scale_operator, write_graph, GraphOperator, LabeledFeatures,
    LaplacianKind, WeightedGraph,
};
use crate::model::{bound_cp, bound_crep, filter_error, forward, init_weights, representation_error, Activation, GnnModel, Layer, PolynomialFilter, StabilityConstants};
use crate::numerics::{operator_norm, Matrix};
use crate::seed::{derive_seed, stage};
use crate::sparsify::{choose_multipliers, draw_seed, effective_resistances, measured_draw, ChosenMultiplier, ResistanceTable, SparsifierDraw};
use crate::stats::{mean, spearman, std_dev};
use crate::train::{targets_from_labels, train, train_pair, trajectory_rows, TrainConfig, TrajectoryRecord, TRAJECTORY_HEADER};

pub const TOOL_VERSION: &str = concat!("specgeo ", env!("CARGO_PKG_VERSION"));

/// Sub-streams of a family's seed.
mod purpose {
    pub const DATA: u64 = 0;
    pub const SWEEP: u64 = 1;
    pub const TRAINING: u64 = 2;
}

pub fn family_seed(master: u64, family: Family, purpose: u64) -> u64 {
    derive_seed(master, family.index(), purpose, stage::FAMILY)
}

/// Everything about one graph family that every job shares.
#[derive(Debug, Clone)]
pub struct FamilyContext {
    pub family: Family,
    pub graph: WeightedGraph,
    pub features: LabeledFeatures,
    pub dense: GraphOperator,
    /// L / ‖L‖₂.
    pub scaled: GraphOperator,
    pub resistances: ResistanceTable,
    pub train_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
}

impl FamilyContext {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    /// Combinatorial and dense-scaled Laplacians of a sparsifier.
    pub fn sparse_operators(&self, d: &SparsifierDraw) -> Result<(GraphOperator, GraphOperator)> {
        let l = laplacian(&d.graph, LaplacianKind::Combinatorial);
        let s = scale_operator(&l, Some(self.scaled.scale))?;
        Ok((l, s))
    }
}

pub fn generate_family(cfg: &ExperimentConfig, family: Family) -> Result<(WeightedGraph, LabeledFeatures)> {
    let ds = family_seed(cfg.master_seed, family, purpose::DATA);
    match family {
        Family::Sbm => {
            let g = generate_sbm(&cfg.sbm.params, derive_seed(ds, 0, 0, stage::GENERATE))?;
            let labels = block_labels(&cfg.sbm.params.block_sizes);
            let f = class_features(&labels, cfg.sbm.feat_dim, cfg.sbm.center_scale, cfg.sbm.noise_std, derive_seed(ds, 0, 0, stage::FEATURES))?;
            Ok((g, f))
        }
        Family::Geometric => generate_geometric_knn(&cfg.geometric, derive_seed(ds, 0, 0, stage::GENERATE)),
    }
}

pub fn prepare_family(cfg: &ExperimentConfig, family: Family) -> Result<FamilyContext> {
    let (graph, features) = generate_family(cfg, family)?;
    let dense = laplacian(&graph, LaplacianKind::Combinatorial);
    let scaled = scale_operator(&dense, None)?;
    let resistances = effective_resistances(&graph, cfg.sparsifier.mode)?;
    let ds = family_seed(cfg.master_seed, family, purpose::DATA);
    let (train_nodes, test_nodes) = class_balanced_split(&features.labels, cfg.geometry.test_fraction, derive_seed(ds, 0, 0, stage::SPLIT))?;
    Ok(FamilyContext { family, graph, features, dense, scaled, resistances, train_nodes, test_nodes })
}

/// Multiplier and seed of one sparsifier draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawSpec {
    pub family: Family,
    pub level_index: usize,
    pub draw_index: usize,
    pub target: f64,
    pub c: f64,
    pub seed: u64,
}

fn plan_draws(cfg: &ExperimentConfig, ctx: &FamilyContext, targets: &[f64], sweep_seed: u64) -> Result<(Vec<ChosenMultiplier>, Vec<DrawSpec>)> {
    let sp = &cfg.sparsifier;
    let chosen = choose_multipliers(&ctx.graph, &ctx.resistances, targets, &sp.c_grid, sp.probes, sp.probe_repeats, sweep_seed)?;
    let specs = chosen
        .iter()
        .enumerate()
        .flat_map(|(j, ch)| {
            (0..sp.draws_per_level).map(move |i| DrawSpec {
                family: ctx.family,
                level_index: j,
                draw_index: i,
                target: ch.target,
                c: ch.c,
                seed: draw_seed(sweep_seed, j, i),
            })
        })
        .collect();
    Ok((chosen, specs))
}

fn draw_for(cfg: &ExperimentConfig, ctx: &FamilyContext, spec: &DrawSpec) -> Result<SparsifierDraw> {
    measured_draw(&ctx.graph, &ctx.dense, &ctx.resistances, spec.c, spec.seed, spec.draw_index, cfg.sparsifier.probes)
}

/// Record of a run sufficient to replay any single draw.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_text: String,
    pub draws: Vec<DrawSpec>,
    pub artifacts: Vec<String>,
    pub stage_seconds: Vec<(String, f64)>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self { command: command.into(), config_text: cfg.to_text(), draws: vec![], artifacts: vec![], stage_seconds: vec![] }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# run manifest");
        let _ = writeln!(s, "tool = {TOOL_VERSION}");
        let _ = writeln!(s, "command = {}", self.command);
        for line in self.config_text.lines() {
            let _ = writeln!(s, "config.{line}");
        }
        for d in &self.draws {
            let _ = writeln!(s, "draw.{}.{}.{} = {} {} {}", d.family.name(), d.level_index, d.draw_index, f17(d.target), f17(d.c), d.seed);
        }
        for (i, a) in self.artifacts.iter().enumerate() {
            let _ = writeln!(s, "artifact.{i} = {a}");
        }
        for (name, secs) in &self.stage_seconds {
            let _ = writeln!(s, "seconds.{name} = {secs:.3}");
        }
        s
    }

    /// The embedded configuration and the draw table.
    pub fn parse(text: &str) -> Result<(ExperimentConfig, Vec<DrawSpec>)> {
        let kv = parse_kv(text)?;
        let mut cfg_text = String::new();
        let mut draws = vec![];
        for (k, (line, v)) in &kv {
            if let Some(key) = k.strip_prefix("config.") {
                let _ = writeln!(cfg_text, "{key} = {v}");
            } else if let Some(rest) = k.strip_prefix("draw.") {
                let bad = || Error::Parse { line: *line, msg: format!("bad draw record `{k} = {v}`") };
                let parts: Vec<&str> = rest.split('.').collect();
                let vals: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 3 || vals.len() != 3 {
                    return Err(bad());
                }
                let family = Family::parse(parts[0]).ok_or_else(bad)?;
                let nums = parse_f64_list(&format!("{},{}", vals[0], vals[1])).ok_or_else(bad)?;
                draws.push(DrawSpec {
                    family,
                    level_index: parts[1].parse().map_err(|_| bad())?,
                    draw_index: parts[2].parse().map_err(|_| bad())?,
                    target: nums[0],
                    c: nums[1],
                    seed: vals[2].parse().map_err(|_| bad())?,
                });
            }
        }
        draws.sort_by_key(|d| (d.family, d.level_index, d.draw_index));
        Ok((ExperimentConfig::parse(&cfg_text)?, draws))
    }
}

fn timed<T>(stages: &mut Vec<(String, f64)>, name: String, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    stages.push((name, t.elapsed().as_secs_f64()));
    Ok(out)
}

// ---------------------------------------------------------------- stability

/// One scaled-operator filter followed by unfiltered mixing layers.
pub fn stability_model(cfg: &ExperimentConfig, ctx: &FamilyContext) -> Result<GnnModel> {
    let m = &cfg.model;
    let mut dims = vec![ctx.features.x.ncols()];
    dims.extend(&m.widths);
    if dims.len() < 2 {
        return Err(Error::Config("model.widths must name at least one layer".into()));
    }
    let seed = derive_seed(family_seed(cfg.master_seed, ctx.family, purpose::SWEEP), 0, 0, stage::INIT);
    let weights = init_weights(&dims, m.init_scale, seed)?;
    let filter = PolynomialFilter::new(m.filter.clone())?;
    GnnModel::new(
        weights
            .into_iter()
            .enumerate()
            .map(|(k, weight)| Layer {
                filter: if k == 0 { filter.clone() } else { PolynomialFilter::constant(1.0) },
                weight,
                activation: m.activation,
            })
            .collect(),
    )
}

/// Certificate inputs and outcomes for one draw.
#[derive(Debug, Clone)]
pub struct Certificates {
    pub eps_emp: f64,
    /// max(‖S‖₂, ‖S̃‖₂).
    pub b_l: f64,
    pub filter_abs: f64,
    pub filter_rel: f64,
    pub c_p: f64,
    pub repr_abs: f64,
    pub constants: StabilityConstants,
    pub gram: GramGaps,
    /// ‖L − L̃‖₂ on the unscaled Laplacians.
    pub laplacian_diff: f64,
    pub laplacian_norm: f64,
    pub cp_pass: bool,
    pub crep_pass: bool,
    pub gram_pass: bool,
}

/// Filter, representation and Gram certificates for `model` on the dense and
/// sparse scaled operators.
pub fn certify(
    model: &GnnModel,
    filter: &PolynomialFilter,
    ctx: &FamilyContext,
    sparse: &GraphOperator,
    sparse_scaled: &GraphOperator,
    eps_emp: f64,
    z: &Matrix,
    zt: &Matrix,
) -> Result<Certificates> {
    let b_l = operator_norm(&ctx.scaled.matrix)?.max(operator_norm(&sparse_scaled.matrix)?);
    let (filter_abs, filter_rel) = filter_error(filter, &ctx.scaled.matrix, &sparse_scaled.matrix)?;
    let c_p = bound_cp(filter, b_l);
    let constants = bound_crep(model, ctx.features.frobenius_norm(), b_l, ctx.n());
    let (repr_abs, _) = representation_error(z, zt)?;
    let gram = gram_norm_gaps(z, zt)?;
    let laplacian_diff = operator_norm(&(&ctx.dense.matrix - &sparse.matrix))?;
    Ok(Certificates {
        eps_emp,
        b_l,
        filter_abs,
        filter_rel,
        c_p,
        repr_abs,
        laplacian_diff,
        laplacian_norm: ctx.scaled.scale,
        cp_pass: filter_abs <= c_p * eps_emp + CERT_SLACK,
        crep_pass: repr_abs <= constants.c_rep * eps_emp + CERT_SLACK,
        gram_pass: gram.spectral <= constants.c_gram_2 * eps_emp + CERT_SLACK && gram.frobenius <= constants.c_gram_f * eps_emp + CERT_SLACK,
        constants,
        gram,
    })
}

#[derive(Debug, Clone)]
pub struct StabilityDraw {
    pub spec: DrawSpec,
    pub q: usize,
    pub eps_emp: f64,
    pub retained_fraction: f64,
    pub certificates: Certificates,
    pub report: GeometryReport,
    pub row: GeometryRow,
}

impl StabilityDraw {
    /// Certificates plus the pairwise-distance and class-statistic bounds.
    pub fn all_pass(&self) -> bool {
        self.row.all_pass() && self.report.pairwise_mechanism_pass && self.report.class_bounds_pass() && self.report.pairwise_pass != Some(false)
    }
}

fn stability_draw(cfg: &ExperimentConfig, ctx: &FamilyContext, model: &GnnModel, z: &Matrix, spec: &DrawSpec) -> Result<StabilityDraw> {
    let d = draw_for(cfg, ctx, spec)?;
    let eps = d.eps_emp.unwrap();
    let (sparse, sparse_scaled) = ctx.sparse_operators(&d)?;
    let zt = forward(model, &sparse_scaled.matrix, &ctx.features.x)?.pop().unwrap();
    let filter = &model.layers()[0].filter;
    let cert = certify(model, filter, ctx, &sparse, &sparse_scaled, eps, z, &zt)?;
    let eval_seed = derive_seed(spec.seed, 0, 0, stage::EVAL);
    let subset = eval_subset(&ctx.test_nodes, cfg.geometry.subset_cap, eval_seed);
    let report = geometry_report(z, &zt, &ctx.features.labels, cfg.geometry.k, &subset, eval_seed, Some(cert.constants.c_gram_2 * eps))?;
    let row = GeometryRow {
        dataset: ctx.family.name().into(),
        level_index: spec.level_index as i64,
        draw_index: spec.draw_index,
        eps_emp: eps,
        retained_fraction: d.retained_fraction,
        rel_filter_err: cert.filter_rel,
        rel_repr_err: report.rel_representation_error,
        rel_gram_err: report.rel_gram_distortion,
        knn_overlap: report.knn_overlap,
        max_sq_dist_gap: report.max_pairwise_sq_gap,
        mean_gap_max: report.mean_gap_max(),
        cov_gap_max: report.cov_gap_max(),
        cp_bound_pass: cert.cp_pass,
        crep_bound_pass: cert.crep_pass,
        gram_bound_pass: cert.gram_pass && report.pairwise_pass != Some(false),
    };
    Ok(StabilityDraw { spec: *spec, q: d.q, eps_emp: eps, retained_fraction: d.retained_fraction, certificates: cert, report, row })
}

/// Per-level means over draws.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSummary {
    pub family: Family,
    pub level_index: usize,
    pub target: f64,
    pub c: f64,
    pub probe_eps: f64,
    pub mean_eps: f64,
    pub std_eps: f64,
    pub mean_fraction: f64,
    pub std_fraction: f64,
    pub mean_rel_filter: f64,
    pub mean_rel_repr: f64,
    pub mean_rel_gram: f64,
    pub mean_knn: f64,
}

pub const LEVEL_SUMMARY_HEADER: &str = "dataset,level_index,target,c,probe_eps,mean_eps_emp,std_eps_emp,mean_retained_fraction,std_retained_fraction,mean_rel_filter_err,mean_rel_repr_err,mean_rel_gram_err,mean_knn_overlap";

fn summarize_levels(family: Family, chosen: &[ChosenMultiplier], rows: &[&GeometryRow]) -> Vec<LevelSummary> {
    chosen
        .iter()
        .enumerate()
        .map(|(j, ch)| {
            let at: Vec<&&GeometryRow> = rows.iter().filter(|r| r.level_index == j as i64).collect();
            let col = |f: fn(&GeometryRow) -> f64| at.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let eps = col(|r| r.eps_emp);
            let frac = col(|r| r.retained_fraction);
            LevelSummary {
                family,
                level_index: j,
                target: ch.target,
                c: ch.c,
                probe_eps: ch.probe_eps,
                mean_eps: mean(&eps),
                std_eps: std_dev(&eps),
                mean_fraction: mean(&frac),
                std_fraction: std_dev(&frac),
                mean_rel_filter: mean(&col(|r| r.rel_filter_err)),
                mean_rel_repr: mean(&col(|r| r.rel_repr_err)),
                mean_rel_gram: mean(&col(|r| r.rel_gram_err)),
                mean_knn: mean(&col(|r| r.knn_overlap)),
            }
        })
        .collect()
}

fn levels_csv(levels: &[LevelSummary]) -> String {
    let mut s = format!("{LEVEL_SUMMARY_HEADER}\n");
    for l in levels {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            l.family.name(),
            l.level_index,
            f17(l.target),
            f17(l.c),
            f17(l.probe_eps),
            f17(l.mean_eps),
            f17(l.std_eps),
            f17(l.mean_fraction),
            f17(l.std_fraction),
            f17(l.mean_rel_filter),
            f17(l.mean_rel_repr),
            f17(l.mean_rel_gram),
            f17(l.mean_knn)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct StabilityOutput {
    pub draws: Vec<StabilityDraw>,
    pub levels: Vec<LevelSummary>,
    pub manifest: RunManifest,
}

impl StabilityOutput {
    pub fn csv(&self) -> String {
        geometry_csv(&self.draws.iter().map(|d| d.row.clone()).collect::<Vec<_>>())
    }

    pub fn level_summary_csv(&self) -> String {
        levels_csv(&self.levels)
    }

    pub fn failures(&self) -> usize {
        self.draws.iter().filter(|d| !d.all_pass()).count()
    }

    pub fn family(&self, f: Family) -> impl Iterator<Item = &StabilityDraw> {
        self.draws.iter().filter(move |d| d.spec.family == f)
    }
}

pub fn run_stability(cfg: &ExperimentConfig) -> Result<StabilityOutput> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("stability", cfg);
    let (mut draws, mut levels) = (vec![], vec![]);
    for &family in &cfg.families {
        let ctx = timed(&mut manifest.stage_seconds, format!("{}.prepare", family.name()), || prepare_family(cfg, family))?;
        let sweep = family_seed(cfg.master_seed, family, purpose::SWEEP);
        let (chosen, specs) = timed(&mut manifest.stage_seconds, format!("{}.select", family.name()), || plan_draws(cfg, &ctx, cfg.targets(family), sweep))?;
        let model = stability_model(cfg, &ctx)?;
        let z = forward(&model, &ctx.scaled.matrix, &ctx.features.x)?.pop().unwrap();
        let out: Vec<StabilityDraw> = timed(&mut manifest.stage_seconds, format!("{}.draws", family.name()), || {
            specs.par_iter().map(|s| stability_draw(cfg, &ctx, &model, &z, s)).collect::<Result<Vec<_>>>()
        })?;
        levels.extend(summarize_levels(family, &chosen, &out.iter().map(|d| &d.row).collect::<Vec<_>>()));
        manifest.draws.extend(specs);
        draws.extend(out);
    }
    Ok(StabilityOutput { draws, levels, manifest })
}

/// Recomputes one stability CSV row from its draw record.
pub fn replay_stability_row(cfg: &ExperimentConfig, spec: &DrawSpec) -> Result<GeometryRow> {
    let ctx = prepare_family(cfg, spec.family)?;
    let model = stability_model(cfg, &ctx)?;
    let z = forward(&model, &ctx.scaled.matrix, &ctx.features.x)?.pop().unwrap();
    Ok(stability_draw(cfg, &ctx, &model, &z, spec)?.row)
}

// ----------------------------------------------------------------- training

/// Tanh layers, the configured filter on every layer, one-hot sized output.
pub fn training_model(cfg: &ExperimentConfig, ctx: &FamilyContext, depth: usize) -> Result<GnnModel> {
    let mut dims = vec![ctx.features.x.ncols()];
    dims.extend(std::iter::repeat_n(cfg.training.hidden_width, depth.saturating_sub(1)));
    dims.push(ctx.features.num_classes);
    let seed = derive_seed(family_seed(cfg.master_seed, ctx.family, purpose::TRAINING), depth as u64, 0, stage::INIT);
    let filter = PolynomialFilter::new(cfg.model.filter.clone())?;
    GnnModel::uniform(&filter, cfg.training.activation, init_weights(&dims, cfg.model.init_scale, seed)?)
}

pub fn train_config(cfg: &ExperimentConfig, depth: usize) -> TrainConfig {
    let t = &cfg.training;
    TrainConfig {
        epochs: t.epochs,
        lr: if depth == 1 { t.lr_one_layer } else { t.lr_two_layer },
        weight_decay: t.weight_decay,
        grad_clip_norm: t.grad_clip_norm,
        seed: cfg.master_seed,
    }
}

pub const TRAINING_DEPTHS: [usize; 2] = [1, 2];

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub family: Family,
    pub depth: usize,
    /// −1 marks the control run whose sparse operator is the dense one.
    pub level_index: i64,
    pub draw_index: usize,
    pub eps_emp: f64,
    pub record: TrajectoryRecord,
}

impl TrainingRun {
    pub fn csv_rows(&self) -> String {
        trajectory_rows(&self.record, self.eps_emp, self.draw_index, self.level_index, self.depth)
    }
}

fn control_run(cfg: &ExperimentConfig, ctx: &FamilyContext, depth: usize) -> Result<TrainingRun> {
    let y = targets_from_labels(&ctx.features.labels)?;
    let init = training_model(cfg, ctx, depth)?;
    let s = &ctx.scaled.matrix;
    let record = train_pair(&init, s, s, &ctx.features.x, y.matrix(), &train_config(cfg, depth))?;
    Ok(TrainingRun { family: ctx.family, depth, level_index: -1, draw_index: 0, eps_emp: 0.0, record })
}

fn training_draw(cfg: &ExperimentConfig, ctx: &FamilyContext, spec: &DrawSpec) -> Result<Vec<TrainingRun>> {
    let d = draw_for(cfg, ctx, spec)?;
    let (_, sparse_scaled) = ctx.sparse_operators(&d)?;
    let y = targets_from_labels(&ctx.features.labels)?;
    TRAINING_DEPTHS
        .iter()
        .map(|&depth| {
            let init = training_model(cfg, ctx, depth)?;
            let record = train_pair(&init, &ctx.scaled.matrix, &sparse_scaled.matrix, &ctx.features.x, y.matrix(), &train_config(cfg, depth))?;
            Ok(TrainingRun {
                family: ctx.family,
                depth,
                level_index: spec.level_index as i64,
                draw_index: spec.draw_index,
                eps_emp: d.eps_emp.unwrap(),
                record,
            })
        })
        .collect()
}

/// Final-gap means per (family, depth, level).
#[derive(Debug, Clone, PartialEq)]
pub struct GapSummary {
    pub family: Family,
    pub depth: usize,
    pub level_index: i64,
    pub target: f64,
    pub c: f64,
    pub mean_eps: f64,
    pub mean_final_gap: f64,
    pub std_final_gap: f64,
    pub runs: usize,
}

pub const TRAINING_SUMMARY_HEADER: &str = "dataset,depth,level_index,target,c,mean_eps_emp,mean_final_gap,std_final_gap,runs";

#[derive(Debug, Clone)]
pub struct TrainingOutput {
    pub runs: Vec<TrainingRun>,
    pub summary: Vec<GapSummary>,
    pub manifest: RunManifest,
}

impl TrainingOutput {
    /// Trajectory CSV for one family.
    pub fn csv(&self, family: Family) -> String {
        let mut s = format!("{TRAJECTORY_HEADER}\n");
        for r in self.runs.iter().filter(|r| r.family == family) {
            s.push_str(&r.csv_rows());
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{TRAINING_SUMMARY_HEADER}\n");
        for g in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                g.family.name(),
                g.depth,
                g.level_index,
                f17(g.target),
                f17(g.c),
                f17(g.mean_eps),
                f17(g.mean_final_gap),
                f17(g.std_final_gap),
                g.runs
            );
        }
        s
    }
}

pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainingOutput> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("training", cfg);
    let (mut runs, mut summary) = (vec![], vec![]);
    for &family in &cfg.families {
        let ctx = timed(&mut manifest.stage_seconds, format!("{}.prepare", family.name()), || prepare_family(cfg, family))?;
        let sweep = family_seed(cfg.master_seed, family, purpose::TRAINING);
        let (chosen, specs) = timed(&mut manifest.stage_seconds, format!("{}.select", family.name()), || plan_draws(cfg, &ctx, cfg.training_targets(family), sweep))?;
        let mut out: Vec<TrainingRun> = timed(&mut manifest.stage_seconds, format!("{}.train", family.name()), || {
            let controls = TRAINING_DEPTHS.par_iter().map(|&d| control_run(cfg, &ctx, d)).collect::<Result<Vec<_>>>()?;
            let draws = specs.par_iter().map(|s| training_draw(cfg, &ctx, s)).collect::<Result<Vec<_>>>()?;
            Ok(controls.into_iter().chain(draws.into_iter().flatten()).collect())
        })?;
        out.sort_by_key(|r| (r.depth, r.level_index, r.draw_index));
        for &depth in &TRAINING_DEPTHS {
            let levels = std::iter::once((-1i64, 0.0, f64::NAN)).chain(chosen.iter().enumerate().map(|(j, ch)| (j as i64, ch.target, ch.c)));
            for (level, target, c) in levels {
                let at: Vec<&TrainingRun> = out.iter().filter(|r| r.depth == depth && r.level_index == level).collect();
                let gaps: Vec<f64> = at.iter().map(|r| r.record.final_gap()).collect();
                summary.push(GapSummary {
                    family,
                    depth,
                    level_index: level,
                    target,
                    c,
                    mean_eps: mean(&at.iter().map(|r| r.eps_emp).collect::<Vec<_>>()),
                    mean_final_gap: mean(&gaps),
                    std_final_gap: std_dev(&gaps),
                    runs: at.len(),
                });
            }
        }
        manifest.draws.extend(specs);
        runs.extend(out);
    }
    Ok(TrainingOutput { runs, summary, manifest })
}

/// Recomputes the trajectory CSV rows (both depths) of one draw.
pub fn replay_training_rows(cfg: &ExperimentConfig, spec: &DrawSpec) -> Result<String> {
    let ctx = prepare_family(cfg, spec.family)?;
    Ok(training_draw(cfg, &ctx, spec)?.iter().map(|r| r.csv_rows()).collect())
}

// ----------------------------------------------------------------- geometry

/// Two-layer model (tanh hidden, linear read-out) trained on the dense graph.
pub fn geometry_teacher(cfg: &ExperimentConfig, ctx: &FamilyContext) -> Result<(GnnModel, Vec<f64>)> {
    let g = &cfg.geometry;
    let hidden = match ctx.family {
        Family::Sbm => g.hidden_width_sbm,
        Family::Geometric => g.hidden_width_geometric,
    };
    let dims = [ctx.features.x.ncols(), hidden, ctx.features.num_classes];
    let seed = derive_seed(family_seed(cfg.master_seed, ctx.family, purpose::SWEEP), 1, 0, stage::INIT);
    let filter = PolynomialFilter::new(cfg.model.filter.clone())?;
    let mut weights = init_weights(&dims, cfg.model.init_scale, seed)?.into_iter();
    let init = GnnModel::new(vec![
        Layer { filter: filter.clone(), weight: weights.next().unwrap(), activation: Activation::Tanh },
        Layer { filter, weight: weights.next().unwrap(), activation: Activation::Identity },
    ])?;
    let y = targets_from_labels(&ctx.features.labels)?;
    let tc = TrainConfig {
        epochs: g.train_epochs,
        lr: g.train_lr,
        weight_decay: cfg.training.weight_decay,
        grad_clip_norm: cfg.training.grad_clip_norm,
        seed: cfg.master_seed,
    };
    train(&init, &ctx.scaled.matrix, &ctx.features.x, y.matrix(), &tc)
}

/// The hidden layer of the teacher, as a one-layer model.
fn embedding_model(teacher: &GnnModel) -> Result<GnnModel> {
    GnnModel::new(vec![teacher.layers()[0].clone()])
}

fn rows_of(z: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), z.ncols(), |i, j| z[(idx[i], j)])
}

#[derive(Debug, Clone)]
pub struct GeometryDraw {
    pub spec: DrawSpec,
    pub eps_emp: f64,
    pub certificates: Certificates,
    pub report: GeometryReport,
    pub centroids: CentroidProjection,
    pub procrustes: ProcrustesReport,
    pub row: GeometryRow,
}

impl GeometryDraw {
    pub fn all_pass(&self) -> bool {
        self.row.all_pass() && self.report.pairwise_mechanism_pass && self.report.class_bounds_pass()
    }
}

fn geometry_draw(cfg: &ExperimentConfig, ctx: &FamilyContext, emb: &GnnModel, z: &Matrix, spec: &DrawSpec) -> Result<GeometryDraw> {
    let d = draw_for(cfg, ctx, spec)?;
    let eps = d.eps_emp.unwrap();
    let (sparse, sparse_scaled) = ctx.sparse_operators(&d)?;
    let zt = forward(emb, &sparse_scaled.matrix, &ctx.features.x)?.pop().unwrap();
    let cert = certify(emb, &emb.layers()[0].filter, ctx, &sparse, &sparse_scaled, eps, z, &zt)?;
    let test = &ctx.test_nodes;
    let (zs, zts) = (rows_of(z, test), rows_of(&zt, test));
    let labels: Vec<usize> = test.iter().map(|&i| ctx.features.labels[i]).collect();
    let eval_seed = derive_seed(spec.seed, 0, 0, stage::EVAL);
    let local: Vec<usize> = (0..test.len()).collect();
    let subset = eval_subset(&local, cfg.geometry.subset_cap, eval_seed);
    let k = cfg.geometry.k.min(test.len() - 1);
    let report = geometry_report(&zs, &zts, &labels, k, &subset, eval_seed, None)?;
    let row = GeometryRow {
        dataset: ctx.family.name().into(),
        level_index: spec.level_index as i64,
        draw_index: spec.draw_index,
        eps_emp: eps,
        retained_fraction: d.retained_fraction,
        rel_filter_err: cert.filter_rel,
        rel_repr_err: report.rel_representation_error,
        rel_gram_err: report.rel_gram_distortion,
        knn_overlap: report.knn_overlap,
        max_sq_dist_gap: report.max_pairwise_sq_gap,
        mean_gap_max: report.mean_gap_max(),
        cov_gap_max: report.cov_gap_max(),
        cp_bound_pass: cert.cp_pass,
        crep_bound_pass: cert.crep_pass,
        gram_bound_pass: cert.gram_pass,
    };
    Ok(GeometryDraw {
        spec: *spec,
        eps_emp: eps,
        centroids: centroid_projection(&zs, &zts, &labels)?,
        procrustes: procrustes_report(&zs, &zts)?,
        certificates: cert,
        report,
        row,
    })
}

#[derive(Serialize)]
struct GeometryJsonRecord<'a> {
    dataset: &'a str,
    level_index: usize,
    draw_index: usize,
    eps_emp: f64,
    centroids: &'a CentroidProjection,
    procrustes: &'a ProcrustesReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryFamilySummary {
    pub family: Family,
    pub points: usize,
    pub spearman_gram_knn: f64,
    pub spearman_eps_gram: f64,
    pub teacher_initial_loss: f64,
    pub teacher_final_loss: f64,
}

pub const GEOMETRY_SUMMARY_HEADER: &str = "dataset,points,spearman_gram_knn,spearman_eps_gram,teacher_initial_loss,teacher_final_loss";

#[derive(Debug, Clone)]
pub struct GeometryOutput {
    pub draws: Vec<GeometryDraw>,
    pub summary: Vec<GeometryFamilySummary>,
    pub manifest: RunManifest,
}

impl GeometryOutput {
    pub fn csv(&self) -> String {
        geometry_csv(&self.draws.iter().map(|d| d.row.clone()).collect::<Vec<_>>())
    }

    pub fn json(&self) -> String {
        let recs: Vec<GeometryJsonRecord> = self
            .draws
            .iter()
            .map(|d| GeometryJsonRecord {
                dataset: d.spec.family.name(),
                level_index: d.spec.level_index,
                draw_index: d.spec.draw_index,
                eps_emp: d.eps_emp,
                centroids: &d.centroids,
                procrustes: &d.procrustes,
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&recs).expect("geometry records serialize");
        s.push('\n');
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{GEOMETRY_SUMMARY_HEADER}\n");
        for g in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                g.family.name(),
                g.points,
                f17(g.spearman_gram_knn),
                f17(g.spearman_eps_gram),
                f17(g.teacher_initial_loss),
                f17(g.teacher_final_loss)
            );
        }
        s
    }

    pub fn failures(&self) -> usize {
        self.draws.iter().filter(|d| !d.all_pass()).count()
    }
}

pub fn run_geometry(cfg: &ExperimentConfig) -> Result<GeometryOutput> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("geometry", cfg);
    let (mut draws, mut summary) = (vec![], vec![]);
    for &family in &cfg.families {
        let ctx = timed(&mut manifest.stage_seconds, format!("{}.prepare", family.name()), || prepare_family(cfg, family))?;
        let (teacher, losses) = timed(&mut manifest.stage_seconds, format!("{}.teacher", family.name()), || geometry_teacher(cfg, &ctx))?;
        let emb = embedding_model(&teacher)?;
        let z = forward(&emb, &ctx.scaled.matrix, &ctx.features.x)?.pop().unwrap();
        let sweep = family_seed(cfg.master_seed, family, purpose::SWEEP);
        let (_, specs) = timed(&mut manifest.stage_seconds, format!("{}.select", family.name()), || plan_draws(cfg, &ctx, cfg.targets(family), sweep))?;
        let out: Vec<GeometryDraw> = timed(&mut manifest.stage_seconds, format!("{}.draws", family.name()), || {
            specs.par_iter().map(|s| geometry_draw(cfg, &ctx, &emb, &z, s)).collect::<Result<Vec<_>>>()
        })?;
        let gram: Vec<f64> = out.iter().map(|d| d.row.rel_gram_err).collect();
        let knn: Vec<f64> = out.iter().map(|d| d.row.knn_overlap).collect();
        let eps: Vec<f64> = out.iter().map(|d| d.eps_emp).collect();
        summary.push(GeometryFamilySummary {
            family,
            points: out.len(),
            spearman_gram_knn: if out.len() > 1 { spearman(&gram, &knn) } else { f64::NAN },
            spearman_eps_gram: if out.len() > 1 { spearman(&eps, &gram) } else { f64::NAN },
            teacher_initial_loss: losses[0],
            teacher_final_loss: *losses.last().unwrap(),
        });
        manifest.draws.extend(specs);
        draws.extend(out);
    }
    Ok(GeometryOutput { draws, summary, manifest })
}

/// Recomputes one geometry CSV row from its draw record.
pub fn replay_geometry_row(cfg: &ExperimentConfig, spec: &DrawSpec) -> Result<GeometryRow> {
    let ctx = prepare_family(cfg, spec.family)?;
    let (teacher, _) = geometry_teacher(cfg, &ctx)?;
    let emb = embedding_model(&teacher)?;
    let z = forward(&emb, &ctx.scaled.matrix, &ctx.features.x)?.pop().unwrap();
    Ok(geometry_draw(cfg, &ctx, &emb, &z, spec)?.row)
}

// ----------------------------------------------------------------- commands

fn write_file(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, contents)?;
    written.push(p);
    Ok(())
}

fn matrix_csv(x: &Matrix) -> String {
    let mut s = (0..x.ncols()).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in x.row_iter() {
        s.push_str(&r.iter().map(|&v| f17(v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

/// Writes `<family>.graph`, `<family>.features.csv`, `<family>.labels.csv`
/// and `<family>.masks.csv` for every configured family.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut written = vec![];
    for &family in &cfg.families {
        let (g, f) = generate_family(cfg, family)?;
        let ds = family_seed(cfg.master_seed, family, purpose::DATA);
        let (train_nodes, _) = class_balanced_split(&f.labels, cfg.geometry.test_fraction, derive_seed(ds, 0, 0, stage::SPLIT))?;
        let name = family.name();
        let gp = out.join(format!("{name}.graph"));
        write_graph(&g, &gp)?;
        written.push(gp);
        write_file(out, &format!("{name}.features.csv"), &matrix_csv(&f.x), &mut written)?;
        let mut labels = String::from("node,label\n");
        let mut masks = String::from("node,train,test\n");
        for (i, &l) in f.labels.iter().enumerate() {
            let _ = writeln!(labels, "{i},{l}");
            let tr = train_nodes.binary_search(&i).is_ok();
            let _ = writeln!(masks, "{i},{},{}", tr as u8, (!tr) as u8);
        }
        write_file(out, &format!("{name}.labels.csv"), &labels, &mut written)?;
        write_file(out, &format!("{name}.masks.csv"), &masks, &mut written)?;
    }
    Ok(written)
}

fn finish(manifest: &mut RunManifest, out: &Path, name: &str, mut written: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    manifest.artifacts = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    write_file(out, name, &manifest.to_text(), &mut written)?;
    Ok(written)
}

fn strict_check(strict: bool, failures: usize, what: &str) -> Result<()> {
    if strict && failures > 0 {
        return Err(Error::Certificate(format!("{failures} {what} draw(s) failed a bound certificate")));
    }
    Ok(())
}

/// Writes `stability.csv`, `level_summary.csv` and `stability_manifest.txt`.
pub fn cmd_stability(cfg: &ExperimentConfig, out: &Path, strict: bool) -> Result<Vec<PathBuf>> {
    let mut res = run_stability(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut written = vec![];
    write_file(out, "stability.csv", &res.csv(), &mut written)?;
    write_file(out, "level_summary.csv", &res.level_summary_csv(), &mut written)?;
    let written = finish(&mut res.manifest, out, "stability_manifest.txt", written)?;
    strict_check(strict, res.failures(), "stability")?;
    Ok(written)
}

/// Writes `training_<family>.csv`, `training_summary.csv` and `training_manifest.txt`.
pub fn cmd_training(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut res = run_training(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut written = vec![];
    for &f in &cfg.families {
        write_file(out, &format!("training_{}.csv", f.name()), &res.csv(f), &mut written)?;
    }
    write_file(out, "training_summary.csv", &res.summary_csv(), &mut written)?;
    finish(&mut res.manifest, out, "training_manifest.txt", written)
}

/// Writes `geometry.csv`, `geometry.json`, `geometry_summary.csv` and `geometry_manifest.txt`.
pub fn cmd_geometry(cfg: &ExperimentConfig, out: &Path, strict: bool) -> Result<Vec<PathBuf>> {
    let mut res = run_geometry(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut written = vec![];
    write_file(out, "geometry.csv", &res.csv(), &mut written)?;
    write_file(out, "geometry.json", &res.json(), &mut written)?;
    write_file(out, "geometry_summary.csv", &res.summary_csv(), &mut written)?;
    let written = finish(&mut res.manifest, out, "geometry_manifest.txt", written)?;
    strict_check(strict, res.failures(), "geometry")?;
    Ok(written)
}
