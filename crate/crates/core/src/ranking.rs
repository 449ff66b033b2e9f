//! Ranking losses over predictor outputs.
//!
//! * pairwise loss: `φ((ε_i − ε_j) · sign(y_i − y_j))` over all pairs of a batch;
//! * continuity loss: `φ((d_ij − d_ik) · sign(l_ij − l_ik))` over sampled
//!   triplets, with `d` the Euclidean distance between embeddings and `l`
//!   the absolute label difference;
//! * their combination `L1 + λ·L2`, and a mean squared error baseline.
//!
//! Reported values are means over the contributing pairs or triplets.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("batch of {got} is too small, need at least {need}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Surrogate for the 0-1 ordering penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    /// `(a − z)₊`
    #[default]
    Hinge,
    /// `ln(1 + e^{−z})`
    Logistic,
    /// `e^{−z}`
    Exponential,
}

impl Phi {
    pub fn value(self, z: f64, margin: f64) -> f64 {
        match self {
            Phi::Hinge => (margin - z).max(0.0),
            Phi::Logistic => softplus(-z),
            Phi::Exponential => (-z).exp(),
        }
    }

    /// Derivative in `z`; the hinge kink at `z = a` gets 0.
    pub fn derivative(self, z: f64, margin: f64) -> f64 {
        match self {
            Phi::Hinge => {
                if z < margin {
                    -1.0
                } else {
                    0.0
                }
            }
            Phi::Logistic => -sigmoid(-z),
            Phi::Exponential => -(-z).exp(),
        }
    }
}

impl std::str::FromStr for Phi {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hinge" => Ok(Phi::Hinge),
            "logistic" => Ok(Phi::Logistic),
            "exponential" => Ok(Phi::Exponential),
            other => Err(format!("unknown phi {other:?}, expected hinge|logistic|exponential")),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    pub phi: Phi,
    pub triplets_per_batch: usize,
    pub drop_equal_label_pairs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.1, lambda: 1.0, phi: Phi::Hinge, triplets_per_batch: 4096, drop_equal_label_pairs: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(LossError::InvalidConfig(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Anchor `i` compared against `j` and `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// `count` triplets of distinct batch indices. When `count` covers every
/// combination, all `i < j < k` triplets are returned in lexicographic order
/// instead of sampling.
pub fn sample_triplets<R: Rng + ?Sized>(batch: usize, count: usize, rng: &mut R) -> Vec<Triplet> {
    if batch < 3 {
        return Vec::new();
    }
    let all = batch * (batch - 1) * (batch - 2) / 6;
    if count >= all {
        let mut out = Vec::with_capacity(all);
        for i in 0..batch {
            for j in i + 1..batch {
                for k in j + 1..batch {
                    out.push(Triplet { i, j, k });
                }
            }
        }
        return out;
    }
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..batch);
            let mut j = rng.random_range(0..batch - 1);
            if j >= i {
                j += 1;
            }
            let mut k = rng.random_range(0..batch - 2);
            let (lo, hi) = if i < j { (i, j) } else { (j, i) };
            if k >= lo {
                k += 1;
            }
            if k >= hi {
                k += 1;
            }
            Triplet { i, j, k }
        })
        .collect()
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::LengthMismatch(format!("{a} {what} but {b} labels")));
    }
    Ok(())
}

/// Pairwise ranking loss over all pairs of the batch and its gradient in
/// the scores.
pub fn loss_l1(scores: &[f64], labels: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>), LossError> {
    check_lengths(scores.len(), labels.len(), "scores")?;
    let b = scores.len();
    if b < 2 {
        return Err(LossError::BatchTooSmall { need: 2, got: b });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut grad = vec![0.0; b];
    for i in 0..b {
        for j in i + 1..b {
            let s = sign(labels[i] - labels[j]);
            if s == 0.0 && cfg.drop_equal_label_pairs {
                continue;
            }
            let z = (scores[i] - scores[j]) * s;
            total += cfg.phi.value(z, cfg.margin);
            let d = cfg.phi.derivative(z, cfg.margin) * s;
            grad[i] += d;
            grad[j] -= d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Continuity loss over `triplets` and its gradient in the embeddings.
pub fn loss_l2(
    embeddings: ArrayView2<'_, f64>,
    labels: &[f64],
    cfg: &LossConfig,
    triplets: &[Triplet],
) -> Result<(f64, Array2<f64>), LossError> {
    let b = embeddings.nrows();
    check_lengths(b, labels.len(), "embeddings")?;
    if b < 3 {
        return Err(LossError::BatchTooSmall { need: 3, got: b });
    }
    if let Some(t) = triplets.iter().find(|t| t.i.max(t.j).max(t.k) >= b) {
        return Err(LossError::LengthMismatch(format!("triplet {t:?} out of range for batch {b}")));
    }
    let mut grad = Array2::<f64>::zeros(embeddings.dim());
    let mut total = 0.0;
    let mut count = 0usize;
    for t in triplets {
        let l_ij = (labels[t.i] - labels[t.j]).abs();
        let l_ik = (labels[t.i] - labels[t.k]).abs();
        let s = sign(l_ij - l_ik);
        if s == 0.0 && cfg.drop_equal_label_pairs {
            continue;
        }
        let diff_ij: Array1<f64> = &embeddings.row(t.i) - &embeddings.row(t.j);
        let diff_ik: Array1<f64> = &embeddings.row(t.i) - &embeddings.row(t.k);
        let d_ij = diff_ij.dot(&diff_ij).sqrt();
        let d_ik = diff_ik.dot(&diff_ik).sqrt();
        let z = (d_ij - d_ik) * s;
        total += cfg.phi.value(z, cfg.margin);
        count += 1;
        let dz = cfg.phi.derivative(z, cfg.margin) * s;
        if dz == 0.0 {
            continue;
        }
        if d_ij > 0.0 {
            let u = diff_ij * (dz / d_ij);
            let mut gi = grad.row_mut(t.i);
            gi += &u;
            let mut gj = grad.row_mut(t.j);
            gj -= &u;
        }
        if d_ik > 0.0 {
            let u = diff_ik * (dz / d_ik);
            let mut gi = grad.row_mut(t.i);
            gi -= &u;
            let mut gk = grad.row_mut(t.k);
            gk += &u;
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    grad.mapv_inplace(|g| g / n);
    Ok((total / n, grad))
}

/// Value and gradients of `L1 + λ·L2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub l1: f64,
    pub l2: f64,
    pub d_scores: Vec<f64>,
    pub d_embeddings: Array2<f64>,
}

pub fn loss_combined(
    scores: &[f64],
    embeddings: ArrayView2<'_, f64>,
    labels: &[f64],
    cfg: &LossConfig,
    triplets: &[Triplet],
) -> Result<CombinedLoss, LossError> {
    let b = scores.len();
    if b < 3 {
        return Err(LossError::BatchTooSmall { need: 3, got: b });
    }
    let (l1, d_scores) = loss_l1(scores, labels, cfg)?;
    let (l2, mut d_embeddings) = loss_l2(embeddings, labels, cfg, triplets)?;
    d_embeddings.mapv_inplace(|g| g * cfg.lambda);
    Ok(CombinedLoss { value: l1 + cfg.lambda * l2, l1, l2, d_scores, d_embeddings })
}

/// Mean squared error and its gradient in the scores.
pub fn loss_mse(scores: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    check_lengths(scores.len(), labels.len(), "scores")?;
    let b = scores.len();
    if b == 0 {
        return Err(LossError::BatchTooSmall { need: 1, got: 0 });
    }
    let n = b as f64;
    let value = scores.iter().zip(labels).map(|(s, y)| (s - y) * (s - y)).sum::<f64>() / n;
    let grad = scores.iter().zip(labels).map(|(s, y)| 2.0 * (s - y) / n).collect();
    Ok((value, grad))
}

/// Two-layer ReLU function `f(x) = w2 · relu(W1 x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    pub w1: Array2<f64>,
    pub w2: Array1<f64>,
}

impl TwoLayerNet {
    pub fn eval(&self, x: &Array1<f64>) -> f64 {
        self.w1.dot(x).mapv(|v| v.max(0.0)).dot(&self.w2)
    }

    /// `sqrt(‖W1‖² + ‖w2‖²)`.
    pub fn norm(&self) -> f64 {
        (self.w1.iter().map(|w| w * w).sum::<f64>() + self.w2.dot(&self.w2)).sqrt()
    }

    fn scaled(mut self, target_norm: f64) -> Self {
        let n = self.norm();
        if n > 0.0 {
            let k = target_norm / n;
            self.w1.mapv_inplace(|w| w * k);
            self.w2.mapv_inplace(|w| w * k);
        }
        self
    }
}

/// Hinge ranking loss of `f` on the labelled pair `(x, y)`, `(x2, y2)`.
pub fn hinge_pair_loss(f: &TwoLayerNet, x: &Array1<f64>, y: f64, x2: &Array1<f64>, y2: f64, margin: f64) -> f64 {
    (margin - (f.eval(x) - f.eval(x2)) * sign(y - y2)).max(0.0)
}

/// `|ℓ(f1) − ℓ(f2)| / (|f1(x) − f2(x)| + |f1(x2) − f2(x2)|)`, or `None`
/// when the denominator vanishes. Evaluated in double-double arithmetic:
/// for nearby functions both differences are far below the f64 rounding
/// error of the outputs themselves.
pub fn admissibility_ratio(
    f1: &TwoLayerNet,
    f2: &TwoLayerNet,
    (x, y): (&Array1<f64>, f64),
    (x2, y2): (&Array1<f64>, f64),
    margin: f64,
) -> Option<f64> {
    let (a1, b1, a2, b2) = (eval_dd(f1, x), eval_dd(f1, x2), eval_dd(f2, x), eval_dd(f2, x2));
    let hinge = |a: Dd, b: Dd| (Dd::from(margin) - (a - b) * sign(y - y2)).max0();
    let num = (hinge(a1, b1) - hinge(a2, b2)).abs();
    let den = (a1 - a2).abs() + (b1 - b2).abs();
    (den.hi > 0.0).then(|| num.hi / den.hi)
}

fn eval_dd(f: &TwoLayerNet, x: &Array1<f64>) -> Dd {
    let mut out = Dd::from(0.0);
    for (row, &w2) in f.w1.rows().into_iter().zip(&f.w2) {
        let mut h = Dd::from(0.0);
        for (&w, &xi) in row.iter().zip(x) {
            h = h + Dd::product(w, xi);
        }
        out = out + h.max0() * w2;
    }
    out
}

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi) / 2`.
#[derive(Debug, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
    }

    fn product(a: f64, b: f64) -> Self {
        let p = a * b;
        Dd { hi: p, lo: a.mul_add(b, -p) }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Dd { hi: s, lo: lo - (s - hi) }
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            Dd { hi: -self.hi, lo: -self.lo }
        } else {
            self
        }
    }

    fn max0(self) -> Self {
        if self.hi > 0.0 {
            self
        } else {
            Dd::from(0.0)
        }
    }
}

impl std::ops::Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.hi, o.hi);
        let t = Dd::two_sum(self.lo, o.lo);
        let r = Dd::renorm(s.hi, s.lo + t.hi);
        Dd::renorm(r.hi, r.lo + t.lo)
    }
}

impl std::ops::Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + Dd { hi: -o.hi, lo: -o.lo }
    }
}

impl std::ops::Mul<f64> for Dd {
    type Output = Dd;
    fn mul(self, k: f64) -> Dd {
        let p = Dd::product(self.hi, k);
        Dd::renorm(p.hi, p.lo + self.lo * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityCheckConfig {
    /// Bound on input norms.
    pub c_x: f64,
    /// Bound on `‖f‖₂`.
    pub c_f: f64,
    pub trials: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub margin: f64,
}

impl Default for AdmissibilityCheckConfig {
    fn default() -> Self {
        AdmissibilityCheckConfig { c_x: 1.0, c_f: 2.0, trials: 100_000, hidden: 8, input_dim: 4, margin: 0.1 }
    }
}

/// Largest [`admissibility_ratio`] seen over random function pairs and
/// random labelled input pairs. Half of the trials compare a function with
/// a small perturbation of itself, where the ratio is tightest.
pub fn admissibility_probe(cfg: &AdmissibilityCheckConfig, seed: u64) -> Result<f64, LossError> {
    if !(cfg.c_x > 0.0 && cfg.c_f > 0.0) {
        return Err(LossError::InvalidConfig("c_x and c_f must be positive".into()));
    }
    if cfg.hidden == 0 || cfg.input_dim == 0 {
        return Err(LossError::InvalidConfig("hidden and input_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, d) = (cfg.hidden, cfg.input_dim);
    let mut max_ratio = 0.0f64;
    for trial in 0..cfg.trials {
        let random_net = |rng: &mut ChaCha8Rng| TwoLayerNet {
            w1: Array2::from_shape_fn((h, d), |_| rng.random_range(-1.0..1.0)),
            w2: Array1::from_shape_fn(h, |_| rng.random_range(-1.0..1.0)),
        };
        let f1 = random_net(&mut rng).scaled(cfg.c_f * rng.random_range(0.0..=1.0));
        let f2 = if trial % 2 == 0 {
            random_net(&mut rng).scaled(cfg.c_f * rng.random_range(0.0..=1.0))
        } else {
            let eps = 10f64.powf(rng.random_range(-6.0..-1.0));
            let delta = random_net(&mut rng);
            let g = TwoLayerNet { w1: &f1.w1 + &(delta.w1 * eps), w2: &f1.w2 + &(delta.w2 * eps) };
            if g.norm() > cfg.c_f {
                g.scaled(cfg.c_f)
            } else {
                g
            }
        };
        let point = |rng: &mut ChaCha8Rng| {
            let v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let n = v.dot(&v).sqrt();
            let r = cfg.c_x * rng.random_range(0.0..=1.0);
            if n > 0.0 {
                v * (r / n)
            } else {
                v
            }
        };
        let (x, x2) = (point(&mut rng), point(&mut rng));
        let (y, y2) = (rng.random::<f64>(), rng.random::<f64>());
        if let Some(r) = admissibility_ratio(&f1, &f2, (&x, y), (&x2, y2), cfg.margin) {
            max_ratio = max_ratio.max(r);
        }
    }
    Ok(max_ratio)
}
