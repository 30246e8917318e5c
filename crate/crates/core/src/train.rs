//! Full-batch gradient descent with squared loss, and matched dense/sparse
//! trajectories from a shared initialization.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fmt::f17;
use crate::graph::validate_labels;
use crate::model::{forward_with, propagators, GnnModel, Propagator};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Threshold on the global norm of the concatenated gradient.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidInput("clip threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    y: Matrix,
}

impl TargetMatrix {
    pub fn new(y: Matrix) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { y })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.y
    }
}

/// One-hot rows indexed by class.
pub fn targets_from_labels(labels: &[usize]) -> Result<TargetMatrix> {
    let c = validate_labels(labels)?;
    let mut y = Matrix::zeros(labels.len(), c);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    TargetMatrix::new(y)
}

/// Rejects activations whose derivative is not Lipschitz.
pub fn check_trainable(model: &GnnModel) -> Result<()> {
    for (k, l) in model.layers().iter().enumerate() {
        if l.activation.derivative_lipschitz().is_none() {
            return Err(Error::ContractViolation(format!(
                "layer {k} uses `{}`, whose derivative is not Lipschitz",
                l.activation.tag()
            )));
        }
    }
    Ok(())
}

fn check_targets(model: &GnnModel, x: &Matrix, y: &Matrix) -> Result<()> {
    let out = *model.dims().last().unwrap();
    if y.shape() != (x.nrows(), out) {
        return Err(Error::DimensionMismatch(format!("targets {:?}, model output ({}, {out})", y.shape(), x.nrows())));
    }
    Ok(())
}

fn half_sq(f: &Matrix, y: &Matrix) -> f64 {
    0.5 * (f - y).norm_squared()
}

/// J = ½‖F(Θ; S) − Y‖_F².
pub fn loss(model: &GnnModel, s: &Matrix, x: &Matrix, y: &Matrix) -> Result<f64> {
    loss_with(model, &propagators(model, s)?, x, y)
}

pub fn loss_with(model: &GnnModel, props: &[Propagator], x: &Matrix, y: &Matrix) -> Result<f64> {
    check_targets(model, x, y)?;
    Ok(half_sq(forward_with(model, props, x)?.output(), y))
}

/// Loss and per-layer gradients from one forward pass and the backward
/// recursion Δ_K = H^K − Y, G_k = Δ_{k+1} ⊙ σ′(U_k), ∇W_k = H^kᵀ p_k(S)ᵀ G_k,
/// Δ_k = p_k(S)ᵀ G_k W_kᵀ.
pub fn loss_and_gradient_with(model: &GnnModel, props: &[Propagator], x: &Matrix, y: &Matrix) -> Result<(f64, Vec<Matrix>)> {
    check_trainable(model)?;
    check_targets(model, x, y)?;
    let fw = forward_with(model, props, x)?;
    let mut delta = fw.output() - y;
    let j = 0.5 * delta.norm_squared();
    let mut grads = vec![Matrix::zeros(0, 0); model.depth()];
    for k in (0..model.depth()).rev() {
        let layer = &model.layers()[k];
        let mut g = delta;
        g.zip_apply(&fw.preactivations[k], |d, u| *d *= layer.activation.derivative(u));
        let a = props[k].apply(&g)?;
        grads[k] = fw.states[k].transpose() * &a;
        delta = a * layer.weight.transpose();
    }
    Ok((j, grads))
}

pub fn gradient(model: &GnnModel, s: &Matrix, x: &Matrix, y: &Matrix) -> Result<Vec<Matrix>> {
    Ok(loss_and_gradient_with(model, &propagators(model, s)?, x, y)?.1)
}

/// Optional global-norm clipping, then W ← W − η(∇ + decay·W).
pub fn gd_step(model: &GnnModel, grads: &[Matrix], cfg: &TrainConfig) -> Result<GnnModel> {
    if grads.len() != model.depth() {
        return Err(Error::DimensionMismatch(format!("{} gradients for depth {}", grads.len(), model.depth())));
    }
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    let factor = match cfg.grad_clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let weights = model
        .weights()
        .zip(grads)
        .map(|(w, g)| {
            if w.shape() != g.shape() {
                return Err(Error::DimensionMismatch(format!("weight {:?}, gradient {:?}", w.shape(), g.shape())));
            }
            Ok(w - (g * factor + w * cfg.weight_decay) * cfg.lr)
        })
        .collect::<Result<Vec<_>>>()?;
    model.with_weights(weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_dense: f64,
    pub loss_sparse: f64,
    pub rel_param_gap: f64,
    /// ‖W_k − W̃_k‖_F / ‖Θ‖_F per layer.
    pub layer_gaps: Vec<f64>,
}

/// Epochs 0..=T; epoch 0 is the shared initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrajectoryRecord {
    pub fn final_gap(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.rel_param_gap)
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.rel_param_gap).collect()
    }
}

fn param_gap(dense: &GnnModel, sparse: &GnnModel) -> (f64, Vec<f64>) {
    let norm = dense.param_norm();
    let per: Vec<f64> = dense.weights().zip(sparse.weights()).map(|(a, b)| (a - b).norm()).collect();
    let total = per.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        (total, per)
    } else {
        (total / norm, per.iter().map(|x| x / norm).collect())
    }
}

/// Trains a model on one operator; returns the final model and the loss at
/// epochs 0..=T.
pub fn train(init: &GnnModel, s: &Matrix, x: &Matrix, y: &Matrix, cfg: &TrainConfig) -> Result<(GnnModel, Vec<f64>)> {
    cfg.validate()?;
    let props = propagators(init, s)?;
    let mut model = init.clone();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (j, g) = loss_and_gradient_with(&model, &props, x, y)?;
        if !j.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        losses.push(j);
        if epoch < cfg.epochs {
            model = gd_step(&model, &g, cfg)?;
        }
    }
    Ok((model, losses))
}

/// Runs T full-batch steps from the same `init` on both operators.
pub fn train_pair(init: &GnnModel, s_dense: &Matrix, s_sparse: &Matrix, x: &Matrix, y: &Matrix, cfg: &TrainConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let pd = propagators(init, s_dense)?;
    let ps = propagators(init, s_sparse)?;
    let (mut md, mut ms) = (init.clone(), init.clone());
    let mut epochs = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (jd, gd) = loss_and_gradient_with(&md, &pd, x, y)?;
        let (js, gs) = loss_and_gradient_with(&ms, &ps, x, y)?;
        if !(jd.is_finite() && js.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let (rel_param_gap, layer_gaps) = param_gap(&md, &ms);
        epochs.push(EpochRecord { epoch, loss_dense: jd, loss_sparse: js, rel_param_gap, layer_gaps });
        if epoch < cfg.epochs {
            md = gd_step(&md, &gd, cfg)?;
            ms = gd_step(&ms, &gs, cfg)?;
        }
    }
    Ok(TrajectoryRecord { epochs })
}

pub const TRAJECTORY_HEADER: &str = "epoch,loss_dense,loss_sparse,rel_param_gap,eps_emp,draw_index,level_index,depth";

/// Trajectory CSV rows (no header) for one run.
pub fn trajectory_rows(rec: &TrajectoryRecord, eps_emp: f64, draw_index: usize, level_index: i64, depth: usize) -> String {
    let mut s = String::new();
    for e in &rec.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{draw_index},{level_index},{depth}",
            e.epoch,
            f17(e.loss_dense),
            f17(e.loss_sparse),
            f17(e.rel_param_gap),
            f17(eps_emp)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, Activation, Layer, PolynomialFilter};
    use crate::numerics::operator_norm;
    use crate::seed::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_psd(n: usize, seed: u64) -> Matrix {
        let a = random_matrix(n, n, seed);
        let s = a.transpose() * a;
        &s / operator_norm(&s).unwrap()
    }

    fn model(dims: &[usize], act: Activation, seed: u64) -> GnnModel {
        let f = PolynomialFilter::new(vec![1.0, -0.6, 0.15]).unwrap();
        GnnModel::uniform(&f, act, init_weights(dims, 1.0, seed).unwrap()).unwrap()
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig { epochs: 20, lr, weight_decay: 1e-3, grad_clip_norm: None, seed: 0 }
    }

    #[test]
    fn loss_examples() {
        let m = model(&[3, 2], Activation::Tanh, 1);
        let s = random_psd(5, 2);
        let x = random_matrix(5, 3, 3);
        let f = forward_with(&m, &propagators(&m, &s).unwrap(), &x).unwrap().output().clone();
        assert_eq!(loss(&m, &s, &x, &f).unwrap(), 0.0);
        let zero = Matrix::zeros(5, 2);
        assert!((loss(&m, &s, &x, &zero).unwrap() - 0.5 * f.norm_squared()).abs() < 1e-14);
        let y = random_matrix(5, 2, 4);
        let mut brute = 0.0;
        for i in 0..5 {
            for j in 0..2 {
                brute += (f[(i, j)] - y[(i, j)]).powi(2);
            }
        }
        assert!((loss(&m, &s, &x, &y).unwrap() - brute / 2.0).abs() < 1e-12);
        assert!(loss(&m, &s, &x, &Matrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn one_layer_linear_gradient_closed_form() {
        let s = random_psd(6, 5);
        let x = random_matrix(6, 3, 6);
        let y = random_matrix(6, 2, 7);
        let w = random_matrix(3, 2, 8);
        let m = GnnModel::uniform(&PolynomialFilter::new(vec![0.0, 1.0]).unwrap(), Activation::Identity, vec![w.clone()]).unwrap();
        let g = gradient(&m, &s, &x, &y).unwrap();
        let oracle = x.transpose() * s.transpose() * (&s * &x * &w - &y);
        assert!((&g[0] - oracle).norm() < 1e-12);
    }

    #[test]
    fn zero_gradient_at_global_minimum() {
        let m = model(&[3, 4, 2], Activation::Tanh, 9);
        let s = random_psd(6, 10);
        let x = random_matrix(6, 3, 11);
        let y = forward_with(&m, &propagators(&m, &s).unwrap(), &x).unwrap().output().clone();
        for g in gradient(&m, &s, &x, &y).unwrap() {
            assert!(g.norm() < 1e-14);
        }
    }

    fn fd_check(depth: usize, act: Activation, seed: u64) {
        let n = 8;
        let dims: Vec<usize> = [4, 5, 3][..depth + 1].to_vec();
        let m = model(&dims, act, seed);
        let s = random_psd(n, seed + 1);
        let x = random_matrix(n, 4, seed + 2);
        let y = random_matrix(n, *dims.last().unwrap(), seed + 3);
        let g = gradient(&m, &s, &x, &y).unwrap();
        let h = 1e-5;
        for k in 0..depth {
            let w = m.layers()[k].weight.clone();
            for idx in 0..w.len() {
                let shifted = |delta: f64| {
                    let mut ws: Vec<Matrix> = m.weights().cloned().collect();
                    ws[k][idx] += delta;
                    loss(&m.with_weights(ws).unwrap(), &s, &x, &y).unwrap()
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let an = g[k][idx];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "layer {k} entry {idx}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for depth in [1, 2] {
            for act in [Activation::Identity, Activation::Tanh] {
                for seed in [40, 50, 60] {
                    fd_check(depth, act, seed);
                }
            }
        }
    }

    #[test]
    fn relu_is_rejected_for_training() {
        let m = model(&[3, 2], Activation::Relu, 1);
        let s = random_psd(4, 1);
        let x = random_matrix(4, 3, 1);
        let y = Matrix::zeros(4, 2);
        assert!(matches!(gradient(&m, &s, &x, &y), Err(Error::ContractViolation(_))));
        assert!(matches!(train_pair(&m, &s, &s, &x, &y, &cfg(0.01)), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn gd_step_examples() {
        let m = model(&[3, 2], Activation::Identity, 12);
        let zero = vec![Matrix::zeros(3, 2)];
        let c0 = TrainConfig { epochs: 1, lr: 0.5, weight_decay: 0.0, grad_clip_norm: None, seed: 0 };
        assert_eq!(gd_step(&m, &zero, &c0).unwrap(), m);
        let g = vec![random_matrix(3, 2, 13)];
        let c1 = TrainConfig { lr: 1.0, ..c0.clone() };
        let stepped = gd_step(&m, &g, &c1).unwrap();
        assert_eq!(stepped.layers()[0].weight, &m.layers()[0].weight - &g[0]);
        // clipping a norm-10 gradient to 5
        let two = model(&[3, 3, 2], Activation::Identity, 14);
        let raw = vec![random_matrix(3, 3, 15), random_matrix(3, 2, 16)];
        let n = raw.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        let raw: Vec<Matrix> = raw.iter().map(|g| g * (10.0 / n)).collect();
        let c2 = TrainConfig { grad_clip_norm: Some(5.0), ..c1 };
        let out = gd_step(&two, &raw, &c2).unwrap();
        let applied: Vec<Matrix> = two.weights().zip(out.weights()).map(|(a, b)| a - b).collect();
        let an = applied.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        assert!((an - 5.0).abs() < 1e-12);
        for (a, r) in applied.iter().zip(&raw) {
            assert!((a * 2.0 - r).norm() < 1e-12);
        }
    }

    #[test]
    fn identical_operators_give_zero_gap() {
        let m = model(&[4, 5, 3], Activation::Tanh, 17);
        let s = random_psd(8, 18);
        let x = random_matrix(8, 4, 19);
        let y = random_matrix(8, 3, 20);
        let rec = train_pair(&m, &s, &s, &x, &y, &TrainConfig { grad_clip_norm: Some(1.0), ..cfg(0.05) }).unwrap();
        assert_eq!(rec.epochs.len(), 21);
        assert!(rec.epochs.iter().all(|e| e.rel_param_gap == 0.0 && e.loss_dense == e.loss_sparse));
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let m = model(&[4, 3], Activation::Tanh, 21);
        let x = random_matrix(8, 4, 22);
        let y = random_matrix(8, 3, 23);
        let rec = train_pair(&m, &random_psd(8, 24), &random_psd(8, 25), &x, &y, &cfg(0.0)).unwrap();
        assert!(rec.epochs.iter().all(|e| e.rel_param_gap == 0.0));
        assert!(rec.epochs.iter().all(|e| e.loss_dense == rec.epochs[0].loss_dense && e.loss_sparse == rec.epochs[0].loss_sparse));
    }

    #[test]
    fn one_step_gap_is_lr_times_gradient_difference() {
        let m = model(&[4, 3], Activation::Tanh, 26);
        let (s, st) = (random_psd(8, 27), random_psd(8, 28));
        let x = random_matrix(8, 4, 29);
        let y = random_matrix(8, 3, 30);
        let c = TrainConfig { epochs: 1, lr: 0.01, weight_decay: 0.0, grad_clip_norm: None, seed: 0 };
        let rec = train_pair(&m, &s, &st, &x, &y, &c).unwrap();
        assert_eq!(rec.epochs[0].rel_param_gap, 0.0);
        let gd = gradient(&m, &s, &x, &y).unwrap();
        let gs = gradient(&m, &st, &x, &y).unwrap();
        let oracle = 0.01 * (&gd[0] - &gs[0]).norm();
        let w1 = &m.layers()[0].weight - &gd[0] * 0.01;
        let measured = rec.epochs[1].rel_param_gap * w1.norm();
        assert!((measured - oracle).abs() <= 1e-12 * oracle.max(1e-300) + 1e-15);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let m = model(&[4, 3], Activation::Identity, 31);
        let s = random_psd(8, 32) * 50.0;
        let x = random_matrix(8, 4, 33) * 50.0;
        let y = random_matrix(8, 3, 34);
        let c = TrainConfig { epochs: 500, lr: 10.0, weight_decay: 0.0, grad_clip_norm: None, seed: 0 };
        match train_pair(&m, &s, &s, &x, &y, &c) {
            Err(Error::Diverged { epoch }) => assert!(epoch > 0 && epoch <= 500),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn one_hot_targets() {
        assert_eq!(targets_from_labels(&[0, 1]).unwrap().matrix(), &Matrix::identity(2, 2));
        assert_eq!(targets_from_labels(&[0, 0, 0]).unwrap().matrix(), &Matrix::from_element(3, 1, 1.0));
        let y = targets_from_labels(&[2, 0, 1, 3, 3]).unwrap();
        assert!(y.matrix().row_iter().all(|r| r.sum() == 1.0));
        assert!(targets_from_labels(&[0, 2]).is_err());
    }

    #[test]
    fn trajectory_rows_format() {
        let rec = TrajectoryRecord {
            epochs: vec![EpochRecord { epoch: 0, loss_dense: 1.5, loss_sparse: 1.5, rel_param_gap: 0.0, layer_gaps: vec![0.0] }],
        };
        let rows = trajectory_rows(&rec, 0.25, 3, -1, 2);
        assert_eq!(rows, "0,1.5000000000000000e0,1.5000000000000000e0,0.0000000000000000e0,2.5000000000000000e-1,3,-1,2\n");
        assert_eq!(TRAJECTORY_HEADER.split(',').count(), 8);
    }

    #[test]
    fn layers_with_mixed_filters_train() {
        let layers = vec![
            Layer { filter: PolynomialFilter::new(vec![1.0, -0.6, 0.15]).unwrap(), weight: random_matrix(4, 5, 35), activation: Activation::Tanh },
            Layer { filter: PolynomialFilter::constant(1.0), weight: random_matrix(5, 3, 36), activation: Activation::Identity },
        ];
        let m = GnnModel::new(layers).unwrap();
        let s = random_psd(8, 37);
        let x = random_matrix(8, 4, 38);
        let y = random_matrix(8, 3, 39);
        let (trained, losses) = train(&m, &s, &x, &y, &TrainConfig { epochs: 50, ..cfg(0.01) }).unwrap();
        assert_eq!(losses.len(), 51);
        assert!(losses[50] < losses[0]);
        assert_eq!(trained.depth(), 2);
    }
}
