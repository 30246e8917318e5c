//! Polynomial-filter GNN forward maps and the constructive stability
//! constants C_p, C_rep and C_gram.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::fmt::{f17_list, parse_f64_list};
use crate::numerics::{matrix_polynomial, operator_norm, poly_eval, spectral_norm, Matrix};
use crate::seed::rng_from_seed;

/// Points in the grid used to bound `max |p(λ)|` over `[0, B_L]`.
pub const FILTER_SUP_GRID: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialFilter {
    coeffs: Vec<f64>,
}

impl PolynomialFilter {
    /// `coeffs[r]` multiplies `S^r`.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidInput("filter needs at least one coefficient".into()));
        }
        if coeffs.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { coeffs })
    }

    pub fn constant(a0: f64) -> Self {
        Self { coeffs: vec![a0] }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs[1..].iter().all(|&a| a == 0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        poly_eval(&self.coeffs, x)
    }

    pub fn apply(&self, s: &Matrix) -> Result<Matrix> {
        matrix_polynomial(&self.coeffs, s)
    }

    /// Σ_{r≥1} |a_r| r B_L^r.
    pub fn bound_cp(&self, b_l: f64) -> f64 {
        self.coeffs.iter().enumerate().skip(1).map(|(r, a)| a.abs() * r as f64 * b_l.powi(r as i32)).sum()
    }

    /// max |p(λ)| over λ ∈ [0, B_L] on a uniform grid including both ends.
    pub fn sup_on(&self, b_l: f64) -> f64 {
        (0..=FILTER_SUP_GRID)
            .map(|i| self.eval(b_l * i as f64 / FILTER_SUP_GRID as f64).abs())
            .fold(0.0, f64::max)
    }
}

pub fn bound_cp(filter: &PolynomialFilter, b_l: f64) -> f64 {
    filter.bound_cp(b_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    pub fn value_at_zero(&self) -> f64 {
        self.apply(0.0)
    }

    /// Lipschitz constant of σ′; `None` when σ′ is discontinuous.
    pub fn derivative_lipschitz(&self) -> Option<f64> {
        match self {
            Activation::Identity => Some(0.0),
            Activation::Tanh => Some(4.0 / (3.0 * 3f64.sqrt())),
            Activation::Relu => None,
        }
    }

    pub fn map(&self, m: &Matrix) -> Matrix {
        match self {
            Activation::Identity => m.clone(),
            _ => m.map(|x| self.apply(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub filter: PolynomialFilter,
    pub weight: Matrix,
    pub activation: Activation,
}

/// `H^{k+1} = σ_k(p_k(S) H^k W_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    layers: Vec<Layer>,
}

impl GnnModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("model needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {k} outputs {} columns, layer {} expects {}",
                    pair[0].weight.ncols(),
                    k + 1,
                    pair[1].weight.nrows()
                )));
            }
        }
        if layers.iter().any(|l| l.weight.iter().any(|w| !w.is_finite())) {
            return Err(Error::NonFinite);
        }
        Ok(Self { layers })
    }

    /// Same filter and activation on every layer, one weight per layer.
    pub fn uniform(filter: &PolynomialFilter, activation: Activation, weights: Vec<Matrix>) -> Result<Self> {
        Self::new(weights.into_iter().map(|weight| Layer { filter: filter.clone(), weight, activation }).collect())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weights(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().map(|l| &l.weight)
    }

    pub fn with_weights(&self, weights: Vec<Matrix>) -> Result<Self> {
        if weights.len() != self.depth() {
            return Err(Error::DimensionMismatch(format!("{} weights for depth {}", weights.len(), self.depth())));
        }
        for (k, (l, w)) in self.layers.iter().zip(&weights).enumerate() {
            if l.weight.shape() != w.shape() {
                return Err(Error::DimensionMismatch(format!("layer {k}: {:?} vs {:?}", l.weight.shape(), w.shape())));
            }
        }
        Ok(Self {
            layers: self.layers.iter().zip(weights).map(|(l, weight)| Layer { weight, ..l.clone() }).collect(),
        })
    }

    /// d_0, d_1, …, d_K.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.nrows()];
        d.extend(self.layers.iter().map(|l| l.weight.ncols()));
        d
    }

    /// ‖Θ‖_F with ‖Θ‖_F² = Σ_k ‖W_k‖_F².
    pub fn param_norm(&self) -> f64 {
        self.weights().map(|w| w.norm_squared()).sum::<f64>().sqrt()
    }

    /// max_k ‖W_k‖₂.
    pub fn weight_bound(&self) -> f64 {
        self.weights().map(spectral_norm).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layers = {}", self.depth());
        for (k, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer.{k}.filter = {}", f17_list(l.filter.coefficients()));
            let _ = writeln!(s, "layer.{k}.activation = {}", l.activation.tag());
            let _ = writeln!(s, "layer.{k}.rows = {}", l.weight.nrows());
            let _ = writeln!(s, "layer.{k}.cols = {}", l.weight.ncols());
            let row_major: Vec<f64> = l.weight.transpose().iter().copied().collect();
            let _ = writeln!(s, "layer.{k}.weight = {}", f17_list(&row_major));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| -> Result<(usize, &str)> {
            kv.get(k).map(|(l, v)| (*l, v.as_str())).ok_or(Error::Parse { line: 0, msg: format!("missing key `{k}`") })
        };
        let bad = |line: usize, k: &str| Error::Parse { line, msg: format!("bad value for `{k}`") };
        let count = |k: &str| -> Result<usize> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| bad(line, k))
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            let (line, v) = get(k)?;
            parse_f64_list(v).ok_or_else(|| bad(line, k))
        };
        let depth = count("layers")?;
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let key = |f: &str| format!("layer.{k}.{f}");
            let filter = PolynomialFilter::new(list(&key("filter"))?)?;
            let (line, tag) = get(&key("activation"))?;
            let activation = Activation::parse(tag).ok_or_else(|| bad(line, &key("activation")))?;
            let (rows, cols) = (count(&key("rows"))?, count(&key("cols"))?);
            let entries = list(&key("weight"))?;
            if entries.len() != rows * cols {
                return Err(bad(get(&key("weight"))?.0, &key("weight")));
            }
            layers.push(Layer { filter, weight: Matrix::from_row_slice(rows, cols, &entries), activation });
        }
        let known = 1 + 5 * depth;
        if kv.len() != known {
            return Err(Error::Parse { line: 0, msg: format!("expected {known} keys, found {}", kv.len()) });
        }
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// p_k(S) for one layer. Constant filters stay scalar so the graph never
/// enters the computation.
#[derive(Debug, Clone)]
pub enum Propagator {
    Scalar(f64),
    Dense(Matrix),
}

impl Propagator {
    pub fn new(filter: &PolynomialFilter, s: &Matrix) -> Result<Self> {
        if filter.is_constant() {
            Ok(Propagator::Scalar(filter.coefficients()[0]))
        } else {
            Ok(Propagator::Dense(filter.apply(s)?))
        }
    }

    /// p(S)·H. p(S) is symmetric, so this is also p(S)ᵀ·H.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        match self {
            Propagator::Scalar(a) => Ok(h * *a),
            Propagator::Dense(p) => {
                if p.ncols() != h.nrows() {
                    return Err(Error::DimensionMismatch(format!("operator is {}x{}, state has {} rows", p.nrows(), p.ncols(), h.nrows())));
                }
                Ok(p * h)
            }
        }
    }
}

pub fn propagators(model: &GnnModel, s: &Matrix) -> Result<Vec<Propagator>> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch(format!("operator is {}x{}", s.nrows(), s.ncols())));
    }
    model.layers().iter().map(|l| Propagator::new(&l.filter, s)).collect()
}

/// Hidden states `H^0 = X, …, H^K` and preactivations `U_k = p_k(S) H^k W_k`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub states: Vec<Matrix>,
    pub preactivations: Vec<Matrix>,
}

impl ForwardPass {
    pub fn output(&self) -> &Matrix {
        self.states.last().unwrap()
    }
}

pub fn forward_with(model: &GnnModel, props: &[Propagator], x: &Matrix) -> Result<ForwardPass> {
    if x.ncols() != model.dims()[0] {
        return Err(Error::DimensionMismatch(format!("features have {} columns, model expects {}", x.ncols(), model.dims()[0])));
    }
    let mut states = vec![x.clone()];
    let mut preactivations = Vec::with_capacity(model.depth());
    for (layer, p) in model.layers().iter().zip(props) {
        let u = p.apply(&(states.last().unwrap() * &layer.weight))?;
        states.push(layer.activation.map(&u));
        preactivations.push(u);
    }
    Ok(ForwardPass { states, preactivations })
}

/// All hidden states `H^0 … H^K`.
pub fn forward(model: &GnnModel, s: &Matrix, x: &Matrix) -> Result<Vec<Matrix>> {
    Ok(forward_with(model, &propagators(model, s)?, x)?.states)
}

/// (‖p(S) − p(S̃)‖₂, that divided by ‖p(S)‖₂).
pub fn filter_error(filter: &PolynomialFilter, s_dense: &Matrix, s_sparse: &Matrix) -> Result<(f64, f64)> {
    let pd = filter.apply(s_dense)?;
    let ps = filter.apply(s_sparse)?;
    let abs = operator_norm(&(&pd - &ps))?;
    let den = operator_norm(&pd)?;
    if den == 0.0 {
        return Err(Error::ZeroOperator);
    }
    Ok((abs, abs / den))
}

/// (‖Z − Z̃‖_F, that divided by ‖Z‖_F).
pub fn representation_error(z: &Matrix, zt: &Matrix) -> Result<(f64, f64)> {
    if z.shape() != zt.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", z.shape(), zt.shape())));
    }
    let abs = (z - zt).norm();
    let den = z.norm();
    if den == 0.0 {
        return Err(Error::InvalidInput("dense representation is zero".into()));
    }
    Ok((abs, abs / den))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityConstants {
    pub c_p: Vec<f64>,
    pub c_rep: f64,
    pub c_gram_2: f64,
    pub c_gram_f: f64,
    /// max |p_k| on [0, B_L].
    pub m: Vec<f64>,
    /// Forward Frobenius bounds B_0′ … B_K′.
    pub b_prime: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub b_l: f64,
    pub b_x: f64,
    pub b_w: f64,
}

/// Unrolls Δ_{k+1} = α_k + β_k Δ_k from Δ_0 = 0 with
/// α_k = L_σ B_W C_pk B_k′, β_k = L_σ B_W M_k and
/// B_{k+1}′ = L_σ M_k B_W B_k′ + |σ(0)| √(n d_{k+1}).
pub fn bound_crep(model: &GnnModel, b_x: f64, b_l: f64, n: usize) -> StabilityConstants {
    let b_w = model.weight_bound();
    let dims = model.dims();
    let mut b_prime = vec![b_x];
    let (mut c_p, mut m, mut alpha, mut beta) = (vec![], vec![], vec![], vec![]);
    let mut delta = 0.0;
    for (k, l) in model.layers().iter().enumerate() {
        let lip = l.activation.lipschitz();
        let cp = l.filter.bound_cp(b_l);
        let mk = l.filter.sup_on(b_l);
        let bk = b_prime[k];
        let a = lip * b_w * cp * bk;
        let b = lip * b_w * mk;
        delta = a + b * delta;
        b_prime.push(lip * mk * b_w * bk + l.activation.value_at_zero().abs() * ((n * dims[k + 1]) as f64).sqrt());
        c_p.push(cp);
        m.push(mk);
        alpha.push(a);
        beta.push(b);
    }
    let state = *b_prime.last().unwrap();
    StabilityConstants {
        c_p,
        c_rep: delta,
        c_gram_2: 2.0 * state * delta,
        c_gram_f: 2.0 * state * delta,
        m,
        b_prime,
        alpha,
        beta,
        b_l,
        b_x,
        b_w,
    }
}

/// Gaussian weights with std `scale / √fan_in`, drawn in layer order from one stream.
pub fn init_weights(dims: &[usize], scale: f64, seed: u64) -> Result<Vec<Matrix>> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidInput(format!("dimension chain {dims:?} needs at least two positive entries")));
    }
    let mut rng = rng_from_seed(seed);
    Ok(dims
        .windows(2)
        .map(|d| {
            let std = scale / (d[0] as f64).sqrt();
            Matrix::from_fn(d[0], d[1], |_, _| std * rng.sample::<f64, _>(StandardNormal))
        })
        .collect())
}
