//! Effective-resistance spectral sparsification.
//!
//! Edges are sampled i.i.d. with replacement with probability proportional
//! to their leverage score `w_e R_e`; every sample of edge `e` contributes
//! `w_e / (q p_e)` to its output weight, so the sparse Laplacian is an
//! unbiased estimator of the dense one. Distortion is measured as the
//! tightest ε for which `(1−ε)L ⪯ L̃ ⪯ (1+ε)L` holds on the complement of
//! the constant vector.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt::f17;
use crate::graph::{laplacian, parse_graph, read_graph, write_graph, GraphOperator, LaplacianKind, WeightedGraph};
use crate::numerics::{generalized_extremal_eigs, pseudoinverse, sym_eig};
use crate::seed::{derive_seed, rng_from_seed, stage};

/// Graphs up to this size get the exact generalized-eigenvalue envelope;
/// larger ones fall back to random probes.
pub const EXACT_ENVELOPE_MAX_N: usize = 1000;
pub const DEFAULT_NUM_PROBES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResistanceMode {
    Exact,
    Truncated { rank: usize },
}

impl ResistanceMode {
    pub fn name(&self) -> &'static str {
        match self {
            ResistanceMode::Exact => "exact",
            ResistanceMode::Truncated { .. } => "truncated",
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            ResistanceMode::Exact => 0,
            ResistanceMode::Truncated { rank } => *rank,
        }
    }
}

/// Effective resistance of every edge, in the graph's edge order.
#[derive(Debug, Clone)]
pub struct ResistanceTable {
    pub resistances: Vec<f64>,
    pub mode: ResistanceMode,
}

impl ResistanceTable {
    /// Σ_e w_e R_e.
    pub fn total_leverage(&self, g: &WeightedGraph) -> f64 {
        g.edges().iter().zip(&self.resistances).map(|(e, r)| e.w * r).sum()
    }
}

pub fn effective_resistances_exact(g: &WeightedGraph) -> Result<ResistanceTable> {
    if !g.is_connected() {
        return Err(Error::Disconnected);
    }
    let l = laplacian(g, LaplacianKind::Combinatorial);
    let p = pseudoinverse(&l.matrix)?;
    let resistances = g
        .edges()
        .iter()
        .map(|e| p[(e.u, e.u)] + p[(e.v, e.v)] - 2.0 * p[(e.u, e.v)])
        .collect();
    Ok(ResistanceTable { resistances, mode: ResistanceMode::Exact })
}

/// Resistances from the `rank` smallest nonzero Laplacian eigenpairs. Each
/// term is nonnegative, so these never exceed the exact values.
pub fn effective_resistances_approx(g: &WeightedGraph, rank: usize) -> Result<ResistanceTable> {
    let n = g.n();
    if rank == 0 || rank + 1 > n {
        return Err(Error::InvalidInput(format!("rank {rank} must be in 1..={}", n.saturating_sub(1))));
    }
    let l = laplacian(g, LaplacianKind::Combinatorial);
    let eig = sym_eig(&l.matrix)?;
    if eig.eigenvalues[1] < 1e-10 {
        return Err(Error::Disconnected);
    }
    let resistances = g
        .edges()
        .iter()
        .map(|e| {
            (1..=rank)
                .map(|i| {
                    let v = eig.eigenvectors.column(i);
                    (v[e.u] - v[e.v]).powi(2) / eig.eigenvalues[i]
                })
                .sum()
        })
        .collect();
    Ok(ResistanceTable { resistances, mode: ResistanceMode::Truncated { rank } })
}

pub fn effective_resistances(g: &WeightedGraph, mode: ResistanceMode) -> Result<ResistanceTable> {
    match mode {
        ResistanceMode::Exact => effective_resistances_exact(g),
        ResistanceMode::Truncated { rank } => effective_resistances_approx(g, rank),
    }
}

/// q = ⌊c · n · ln n⌋.
pub fn budget_from_multiplier(c: f64, n: usize) -> Result<usize> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidInput(format!("budget multiplier c={c} must be positive")));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("budget needs n >= 2, got {n}")));
    }
    let nf = n as f64;
    Ok((c * nf * nf.ln()).floor() as usize)
}

/// One sampled sparsifier and its bookkeeping.
#[derive(Debug, Clone)]
pub struct SparsifierDraw {
    pub graph: WeightedGraph,
    pub q: usize,
    pub c: f64,
    pub seed: u64,
    pub eps_emp: Option<f64>,
    pub retained_fraction: f64,
    pub draw_index: usize,
    pub mode: ResistanceMode,
}

/// Leverage-score sampling with replacement. `c` is recorded only.
pub fn er_sparsify(g: &WeightedGraph, r: &ResistanceTable, q: usize, seed: u64) -> Result<SparsifierDraw> {
    if q == 0 {
        return Err(Error::InvalidInput("budget q must be at least 1".into()));
    }
    if r.resistances.len() != g.num_edges() {
        return Err(Error::DimensionMismatch(format!(
            "{} resistances for {} edges",
            r.resistances.len(),
            g.num_edges()
        )));
    }
    let scores: Vec<f64> = g.edges().iter().zip(&r.resistances).map(|(e, &res)| (e.w * res).max(0.0)).collect();
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("all leverage scores are zero".into()));
    }
    let dist = WeightedIndex::new(&scores).map_err(|e| Error::InvalidInput(format!("leverage scores: {e}")))?;
    let mut rng = rng_from_seed(seed);
    let mut counts = vec![0usize; scores.len()];
    for _ in 0..q {
        counts[dist.sample(&mut rng)] += 1;
    }
    let qf = q as f64;
    let kept: Vec<(usize, usize, f64)> = g
        .edges()
        .iter()
        .zip(&scores)
        .zip(&counts)
        .filter(|(_, &k)| k > 0)
        .map(|((e, &s), &k)| {
            let p = s / total;
            (e.u, e.v, k as f64 * e.w / (qf * p))
        })
        .collect();
    let retained_fraction = kept.len() as f64 / g.num_edges() as f64;
    Ok(SparsifierDraw {
        graph: WeightedGraph::new(g.n(), kept)?,
        q,
        c: f64::NAN,
        seed,
        eps_emp: None,
        retained_fraction,
        draw_index: 0,
        mode: r.mode,
    })
}

/// max{1 − λ_min, λ_max − 1} over the pencil (L̃, L) on 1⊥.
pub fn empirical_distortion_exact(dense: &GraphOperator, sparse: &GraphOperator) -> Result<f64> {
    let (lo, hi) = generalized_extremal_eigs(&sparse.matrix, &dense.matrix, true)?;
    Ok((1.0 - lo).max(hi - 1.0))
}

/// max over random unit probes x ⊥ 1 of |xᵀL̃x / xᵀLx − 1|.
pub fn empirical_distortion_probe(dense: &GraphOperator, sparse: &GraphOperator, num_probes: usize, seed: u64) -> Result<f64> {
    let n = dense.n();
    if sparse.n() != n {
        return Err(Error::DimensionMismatch(format!("dense n={n}, sparse n={}", sparse.n())));
    }
    if n < 2 || num_probes == 0 {
        return Err(Error::InvalidInput("probing needs n >= 2 and at least one probe".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..num_probes {
        let mut x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = x.mean();
        x.add_scalar_mut(-mean);
        let norm = x.norm();
        x /= norm;
        let den = x.dot(&(&dense.matrix * &x));
        if den < 1e-12 {
            return Err(Error::DegenerateProbe(den));
        }
        let num = x.dot(&(&sparse.matrix * &x));
        worst = worst.max((num / den - 1.0).abs());
    }
    Ok(worst)
}

/// Exact envelope up to [`EXACT_ENVELOPE_MAX_N`] nodes, `num_probes` probes above.
pub fn empirical_distortion(dense: &GraphOperator, sparse: &GraphOperator, num_probes: usize, seed: u64) -> Result<f64> {
    if dense.n() <= EXACT_ENVELOPE_MAX_N {
        empirical_distortion_exact(dense, sparse)
    } else {
        empirical_distortion_probe(dense, sparse, num_probes, seed)
    }
}

/// Draws a sparsifier at multiplier `c` and fills in its distortion.
pub fn measured_draw(
    g: &WeightedGraph,
    dense: &GraphOperator,
    r: &ResistanceTable,
    c: f64,
    seed: u64,
    draw_index: usize,
    num_probes: usize,
) -> Result<SparsifierDraw> {
    let q = budget_from_multiplier(c, g.n())?;
    let mut d = er_sparsify(g, r, q, seed)?;
    let sparse = laplacian(&d.graph, LaplacianKind::Combinatorial);
    d.eps_emp = Some(empirical_distortion(dense, &sparse, num_probes, derive_seed(seed, 0, 0, stage::EVAL))?);
    d.c = c;
    d.draw_index = draw_index;
    Ok(d)
}

/// Draws at one target distortion level.
#[derive(Debug, Clone)]
pub struct LevelSelection {
    pub target: f64,
    pub c: f64,
    /// Realized distortion of the probe draw that led to choosing `c`.
    pub probe_eps: f64,
    pub draws: Vec<SparsifierDraw>,
}

impl LevelSelection {
    pub fn mean_eps(&self) -> f64 {
        mean(self.draws.iter().map(|d| d.eps_emp.unwrap_or(f64::NAN)))
    }

    pub fn mean_retained_fraction(&self) -> f64 {
        mean(self.draws.iter().map(|d| d.retained_fraction))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = xs.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    if k == 0 { f64::NAN } else { s / k as f64 }
}

/// Seed of the grid-probe draw for multiplier index `j`.
pub fn probe_seed(master: u64, j: usize) -> u64 {
    repeat_probe_seed(master, j, 0)
}

/// Seed of repeat `m` of the probe draw at grid index `j`; repeat 0 is [`probe_seed`].
pub fn repeat_probe_seed(master: u64, j: usize, m: usize) -> u64 {
    derive_seed(master, j as u64, m as u64, stage::PROBE)
}

/// Seed of draw `i` at target level `j`.
pub fn draw_seed(master: u64, j: usize, i: usize) -> u64 {
    derive_seed(master, j as u64, i as u64, stage::DRAW)
}

/// Index of the grid entry whose realized distortion is closest to `target`
/// (first one on ties).
pub fn closest_index(realized: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (j, &e) in realized.iter().enumerate() {
        if (e - target).abs() < (realized[best] - target).abs() {
            best = j;
        }
    }
    best
}

/// Multiplier chosen for one target, with the probe distortion behind the choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChosenMultiplier {
    pub target: f64,
    pub c: f64,
    pub probe_eps: f64,
}

/// `probe_repeats` probe draws per grid multiplier, averaged; each target gets
/// the multiplier whose probe distortion is closest. One repeat is the plain
/// single-probe search.
pub fn choose_multipliers(
    g: &WeightedGraph,
    r: &ResistanceTable,
    targets: &[f64],
    c_grid: &[f64],
    num_probes: usize,
    probe_repeats: usize,
    seed: u64,
) -> Result<Vec<ChosenMultiplier>> {
    if c_grid.is_empty() {
        return Err(Error::InvalidInput("c grid must be nonempty".into()));
    }
    if probe_repeats == 0 {
        return Err(Error::InvalidInput("probe_repeats must be positive".into()));
    }
    let dense = laplacian(g, LaplacianKind::Combinatorial);
    let jobs: Vec<(usize, usize)> = (0..c_grid.len()).flat_map(|j| (0..probe_repeats).map(move |m| (j, m))).collect();
    let eps: Vec<f64> = jobs
        .par_iter()
        .map(|&(j, m)| measured_draw(g, &dense, r, c_grid[j], repeat_probe_seed(seed, j, m), 0, num_probes).map(|d| d.eps_emp.unwrap()))
        .collect::<Result<_>>()?;
    let realized: Vec<f64> = eps.chunks(probe_repeats).map(|c| c.iter().sum::<f64>() / probe_repeats as f64).collect();
    Ok(targets
        .iter()
        .map(|&target| {
            let k = closest_index(&realized, target);
            ChosenMultiplier { target, c: c_grid[k], probe_eps: realized[k] }
        })
        .collect())
}

/// [`choose_multipliers`], then `draws_per_target` fresh draws per target at
/// the chosen multiplier, draw `i` of target `j` seeded by [`draw_seed`].
pub fn select_by_target_distortion(
    g: &WeightedGraph,
    r: &ResistanceTable,
    targets: &[f64],
    c_grid: &[f64],
    draws_per_target: usize,
    seed: u64,
) -> Result<Vec<LevelSelection>> {
    let chosen = choose_multipliers(g, r, targets, c_grid, DEFAULT_NUM_PROBES, 1, seed)?;
    let dense = laplacian(g, LaplacianKind::Combinatorial);
    let jobs: Vec<(usize, usize)> = (0..targets.len()).flat_map(|j| (0..draws_per_target).map(move |i| (j, i))).collect();
    let draws: Vec<SparsifierDraw> = jobs
        .par_iter()
        .map(|&(j, i)| measured_draw(g, &dense, r, chosen[j].c, draw_seed(seed, j, i), i, DEFAULT_NUM_PROBES))
        .collect::<Result<_>>()?;
    let mut draws = draws.into_iter();
    Ok(chosen
        .iter()
        .map(|ch| LevelSelection {
            target: ch.target,
            c: ch.c,
            probe_eps: ch.probe_eps,
            draws: draws.by_ref().take(draws_per_target).collect(),
        })
        .collect())
}

/// Sidecar metadata block for a serialized draw.
pub fn draw_metadata(d: &SparsifierDraw) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "q = {}", d.q);
    let _ = writeln!(s, "c = {}", f17(d.c));
    let _ = writeln!(s, "seed = {}", d.seed);
    let _ = writeln!(s, "eps_emp = {}", d.eps_emp.map_or_else(|| "unset".to_string(), f17));
    let _ = writeln!(s, "retained_fraction = {}", f17(d.retained_fraction));
    let _ = writeln!(s, "mode = {}", d.mode.name());
    let _ = writeln!(s, "rank = {}", d.mode.rank());
    s
}

/// Writes `<stem>.graph` and `<stem>.meta` into `dir`.
pub fn write_draw(d: &SparsifierDraw, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    write_graph(&d.graph, dir.join(format!("{stem}.graph")))?;
    std::fs::write(dir.join(format!("{stem}.meta")), draw_metadata(d))?;
    Ok(())
}

pub fn parse_draw(graph_text: &str, meta_text: &str) -> Result<SparsifierDraw> {
    let graph = parse_graph(graph_text)?;
    let kv = crate::config::parse_kv(meta_text)?;
    let get = |k: &str| kv.get(k).map(|(_, v)| v.as_str()).ok_or(Error::Parse { line: 0, msg: format!("missing key `{k}`") });
    let num = |k: &str| -> Result<f64> {
        let (line, v) = kv.get(k).ok_or(Error::Parse { line: 0, msg: format!("missing key `{k}`") })?;
        v.parse().map_err(|_| Error::Parse { line: *line, msg: format!("bad value for `{k}`: `{v}`") })
    };
    let rank = num("rank")? as usize;
    let mode = match get("mode")? {
        "exact" => ResistanceMode::Exact,
        "truncated" => ResistanceMode::Truncated { rank },
        other => return Err(Error::Parse { line: kv["mode"].0, msg: format!("unknown mode `{other}`") }),
    };
    let eps_emp = match get("eps_emp")? {
        "unset" => None,
        _ => Some(num("eps_emp")?),
    };
    Ok(SparsifierDraw {
        graph,
        q: num("q")? as usize,
        c: num("c")?,
        seed: get("seed")?.parse().map_err(|_| Error::Parse { line: kv["seed"].0, msg: "bad seed".into() })?,
        eps_emp,
        retained_fraction: num("retained_fraction")?,
        draw_index: 0,
        mode,
    })
}

pub fn read_draw(dir: impl AsRef<Path>, stem: &str) -> Result<SparsifierDraw> {
    let dir = dir.as_ref();
    let graph = read_graph(dir.join(format!("{stem}.graph")))?;
    let meta = std::fs::read_to_string(dir.join(format!("{stem}.meta")))?;
    let mut d = parse_draw(&crate::graph::graph_to_string(&graph), &meta)?;
    d.graph = graph;
    Ok(d)
}
