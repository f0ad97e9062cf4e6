//! The noise layer: a constrained linear layer between the softmax output
//! and the cross-entropy loss.
//!
//! Its weight matrix `Q` is column-stochastic; entry `q[j][i]` is the
//! probability that a sample whose true class is `i` carries the noisy
//! label `j`. The combined model therefore predicts noisy-label
//! probabilities `out_j = sum_i q[j][i] * p_i` from the base model's
//! clean-class probabilities `p`. Training minimizes cross-entropy between
//! the combined output and the noisy labels; after every gradient step `Q`
//! is projected back to the set of column-stochastic matrices. At test
//! time the layer is dropped and the base model answers directly.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::model::{neg_log, LOG_EPS};
use crate::simplex::{is_column_stochastic, project_columns_stochastic};
use crate::{Error, Result};

/// Column tolerance used when validating stochastic matrices.
pub const COLUMN_TOL: f64 = 1e-9;

/// Whether the layer's weights are being learned or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QMode {
    Learned,
    Fixed,
}

impl QMode {
    fn as_str(self) -> &'static str {
        match self {
            QMode::Learned => "learned",
            QMode::Fixed => "fixed",
        }
    }
}

/// The noise layer's weights: a square column-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMatrix {
    q: Array2<f64>,
    mode: QMode,
}

impl NoiseMatrix {
    /// The identity matrix, ready to be learned.
    pub fn identity(k: usize) -> Self {
        NoiseMatrix {
            q: Array2::eye(k),
            mode: QMode::Learned,
        }
    }

    pub fn learned(q: Array2<f64>) -> Result<Self> {
        Self::with_mode(q, QMode::Learned)
    }

    pub fn fixed(q: Array2<f64>) -> Result<Self> {
        Self::with_mode(q, QMode::Fixed)
    }

    pub fn with_mode(q: Array2<f64>, mode: QMode) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::invalid(format!(
                "noise matrix must be square and non-empty, got {:?}",
                q.dim()
            )));
        }
        if !is_column_stochastic(&q, COLUMN_TOL) {
            return Err(Error::invalid(
                "noise matrix columns must lie on the probability simplex",
            ));
        }
        Ok(NoiseMatrix { q, mode })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn mode(&self) -> QMode {
        self.mode
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.q
    }

    fn check_probs(&self, base: &ArrayView2<f64>) -> Result<()> {
        if base.ncols() != self.dim() {
            return Err(Error::invalid(format!(
                "probabilities have {} classes, noise matrix is {}x{}",
                base.ncols(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Mix base probabilities into noisy-label probabilities:
    /// `out[n][j] = sum_i q[j][i] * base[n][i]`.
    pub fn forward(&self, base: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_probs(base)?;
        Ok(base.dot(&self.q.t()))
    }

    /// Mean cross-entropy of the combined model against noisy labels;
    /// see [`combined_loss`].
    pub fn loss(&self, base: &ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        self.check_probs(base)?;
        combined_loss(&self.q.view(), base, labels)
    }

    /// Gradients of the combined loss with respect to `Q` and the base
    /// probabilities; see [`combined_backward`].
    pub fn backward(
        &self,
        base: &ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_probs(base)?;
        combined_backward(&self.q.view(), base, labels)
    }

    /// `Q <- project_columns(Q + step)`. The caller owns the step
    /// construction (plain `-lr*grad`, or a momentum velocity).
    pub fn apply_step(&mut self, step: &Array2<f64>) -> Result<()> {
        if step.dim() != self.q.dim() {
            return Err(Error::invalid("step shape does not match noise matrix"));
        }
        if !step.iter().all(|x| x.is_finite()) {
            return Err(Error::Diverged("non-finite noise-matrix update".into()));
        }
        self.q = project_columns_stochastic(&(&self.q + step))?;
        Ok(())
    }

    /// One projected gradient step: `Q <- project_columns(Q - lr*grad)`.
    pub fn step_and_project(&mut self, grad: &Array2<f64>, lr: f64) -> Result<()> {
        self.apply_step(&grad.mapv(|g| -lr * g))
    }
}

#[inline]
fn mixed_prob(q: &ArrayView2<f64>, base: &ArrayView2<f64>, row: usize, label: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..q.ncols() {
        s += q[[label, i]] * base[[row, i]];
    }
    s
}

fn check_combined_shapes(
    q: &ArrayView2<f64>,
    base: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<usize> {
    let k = q.nrows();
    if q.ncols() != k || k == 0 {
        return Err(Error::invalid("noise matrix must be square and non-empty"));
    }
    if base.ncols() != k {
        return Err(Error::invalid(format!(
            "probabilities have {} classes, noise matrix is {k}x{k}",
            base.ncols()
        )));
    }
    if labels.len() != base.nrows() {
        return Err(Error::invalid("label count does not match batch"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
    }
    Ok(k)
}

/// Mean cross-entropy of the combined model against noisy labels:
/// `mean_n -ln(sum_i q[y_n][i] * base[n][i])`, with the usual log clamp.
///
/// Defined for any square `q`, stochastic or not, so finite-difference
/// probes can evaluate it at perturbed points.
pub fn combined_loss(
    q: &ArrayView2<f64>,
    base: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<f64> {
    check_combined_shapes(q, base, labels)?;
    let n = base.nrows();
    let mut total = 0.0;
    for (row, &y) in labels.iter().enumerate() {
        total += neg_log(mixed_prob(q, base, row, y));
    }
    Ok(total / n as f64)
}

/// Gradients of [`combined_loss`] with respect to `q` and to the base
/// probabilities, both averaged over the batch:
///
/// - `dq[j][i] = -[j == y] * p_i / (s * N)`
/// - `dbase[n][i] = -q[y][i] / (s * N)`
///
/// where `s = sum_i q[y][i] * p_i` for the sample's noisy label `y`.
/// Samples on the loss clamp (`s <= LOG_EPS`) sit on a plateau and
/// contribute zero gradient.
pub fn combined_backward(
    q: &ArrayView2<f64>,
    base: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let k = check_combined_shapes(q, base, labels)?;
    let n = base.nrows();
    let mut dq = Array2::zeros((k, k));
    let mut dbase = Array2::zeros((n, k));
    let nf = n as f64;
    for (row, &y) in labels.iter().enumerate() {
        let s = mixed_prob(q, base, row, y);
        if s <= LOG_EPS {
            continue;
        }
        let denom = s * nf;
        for i in 0..k {
            dq[[y, i]] -= base[[row, i]] / denom;
            dbase[[row, i]] = -q[[y, i]] / denom;
        }
    }
    Ok((dq, dbase))
}

/// Which diffusion regularizer to apply while learning `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    /// Weight decay: gradient of `(lambda/2) * ||Q||_F^2` is `lambda * Q`.
    #[default]
    Ridge,
    /// Trace penalty: gradient of `lambda * tr(Q)` is `lambda * I`.
    Trace,
}

/// Gradient of the chosen regularizer at `q`.
pub fn regularizer_grad(q: &Array2<f64>, kind: Regularizer, lambda: f64) -> Array2<f64> {
    match kind {
        Regularizer::Ridge => q.mapv(|x| lambda * x),
        Regularizer::Trace => Array2::eye(q.nrows()) * lambda,
    }
}

/// When and how the noise matrix is updated during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSchedule {
    /// Number of initial epochs during which `Q` stays pinned to the
    /// identity while the base model trains.
    pub freeze_epochs: usize,
    /// Regularizer strength (the paper-style default is 0.1).
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl QSchedule {
    /// True once `Q` updates are live at `epoch`.
    pub fn active(&self, epoch: usize) -> bool {
        epoch >= self.freeze_epochs
    }

    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        if self.freeze_epochs > total_epochs {
            return Err(Error::invalid(format!(
                "freeze_epochs {} exceeds total epochs {total_epochs}",
                self.freeze_epochs
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::invalid("q lambda must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("q learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("q momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameters of the fixed noise matrix used for outlier noise.
///
/// `alpha` is the fraction of all outlier samples that are explicitly
/// labeled with the extra class `K+1` (index `classes`). At `alpha = 0`
/// the matrix is singular: the trainer still accepts it but flags the
/// condition, because two different base outputs then map to the same
/// combined output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub alpha: f64,
    pub classes: usize,
}

impl OutlierSpec {
    pub fn new(alpha: f64, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("need at least one inlier class"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(OutlierSpec { alpha, classes })
    }

    /// The matrix loses rank at `alpha = 0` (its last row vanishes).
    pub fn is_singular(&self) -> bool {
        self.alpha == 0.0
    }

    /// The `(K+1) x (K+1)` outlier noise matrix: identity on the first
    /// `K` columns; the last column sends mass `(1-alpha)/K` to every
    /// inlier label and `alpha` to the outlier label.
    pub fn noise_matrix(&self) -> NoiseMatrix {
        let k = self.classes;
        let mut q = Array2::zeros((k + 1, k + 1));
        for i in 0..k {
            q[[i, i]] = 1.0;
            q[[i, k]] = (1.0 - self.alpha) / k as f64;
        }
        q[[k, k]] = self.alpha;
        NoiseMatrix::fixed(q).expect("construction is column-stochastic")
    }
}

/// Exact expected cross-entropy of per-class combined outputs against
/// noisy labels drawn from `q_star`, with uniform class weights:
/// `-(1/K) * sum_k sum_j q_star[j][k] * ln(outputs[j][k])`.
///
/// Column `k` of `outputs` is the combined model's output distribution
/// for samples of true class `k`. The value is bounded below by
/// [`mean_column_entropy`] of `q_star`, with equality exactly when the
/// outputs match `q_star`'s columns.
pub fn expected_noisy_cross_entropy(
    outputs: &Array2<f64>,
    q_star: &Array2<f64>,
) -> Result<f64> {
    if outputs.dim() != q_star.dim() || outputs.nrows() != outputs.ncols() {
        return Err(Error::invalid("per-class outputs must match q_star's shape"));
    }
    let k = q_star.ncols();
    let mut total = 0.0;
    for col in 0..k {
        for row in 0..k {
            let p = q_star[[row, col]];
            if p > 0.0 {
                total += p * neg_log(outputs[[row, col]]);
            }
        }
    }
    Ok(total / k as f64)
}

/// Mean over columns of the column entropy `-sum_j q[j][k] ln q[j][k]`.
pub fn mean_column_entropy(q: &Array2<f64>) -> f64 {
    let k = q.ncols();
    let mut total = 0.0;
    for col in q.columns() {
        for &p in col.iter() {
            if p > 0.0 {
                total += p * neg_log(p);
            }
        }
    }
    total / k as f64
}

/// Write a noise matrix as CSV with a `# Q K=<dim> mode=<mode>` header.
/// Values use the shortest round-trippable decimal form, so reading the
/// file back reproduces the matrix exactly.
pub fn write_q_csv(path: &Path, q: &NoiseMatrix) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# Q K={} mode={}", q.dim(), q.mode().as_str()).expect("string write");
    for row in q.matrix().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(",")).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a noise matrix written by [`write_q_csv`].
pub fn read_q_csv(path: &Path) -> Result<NoiseMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty Q file".into()))?;
    let header = header
        .strip_prefix("# Q ")
        .ok_or_else(|| Error::Parse("Q file must start with '# Q K=<k> mode=<mode>'".into()))?;
    let mut dim: Option<usize> = None;
    let mut mode: Option<QMode> = None;
    for field in header.split_whitespace() {
        if let Some(k) = field.strip_prefix("K=") {
            dim = Some(
                k.parse()
                    .map_err(|_| Error::Parse(format!("bad K in Q header: {k}")))?,
            );
        } else if let Some(m) = field.strip_prefix("mode=") {
            mode = Some(match m {
                "learned" => QMode::Learned,
                "fixed" => QMode::Fixed,
                other => return Err(Error::Parse(format!("unknown Q mode: {other}"))),
            });
        }
    }
    let (dim, mode) = match (dim, mode) {
        (Some(d), Some(m)) => (d, m),
        _ => return Err(Error::Parse("Q header missing K= or mode=".into())),
    };
    let mut values = Vec::with_capacity(dim * dim);
    let mut rows = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad value in Q file: {cell}")))?;
            values.push(v);
        }
    }
    if rows != dim || values.len() != dim * dim {
        return Err(Error::Parse(format!(
            "Q file claims K={dim} but has {rows} rows and {} values",
            values.len()
        )));
    }
    let q = Array2::from_shape_vec((dim, dim), values).expect("shape checked");
    NoiseMatrix::with_mode(q, mode)
}
