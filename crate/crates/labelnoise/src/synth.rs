//! Synthetic benchmarks: Gaussian-mixture classification data corrupted by
//! label flips or outlier injection.
//!
//! Corruption follows the generative story the noise layer models: a flip
//! draws each noisy label from the column of a transition matrix `Q*`
//! indexed by the true label; outlier injection appends points that belong
//! to none of the classes, carrying either a uniformly random inlier label
//! or the explicit outlier label `K` (the extra class).
//!
//! Hidden ground truth (true labels, inlier flags) rides along for
//! evaluation only; training code paths receive features and noisy labels.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::rng::RunRng;
use crate::simplex::is_column_stochastic;
use crate::{Error, Result};

/// Standard deviation of the outlier feature cluster, relative to the
/// unit-variance class clusters.
pub const OUTLIER_STD: f64 = 2.0;

/// Feature vectors with noisy labels plus hidden evaluation-only ground
/// truth. Labels are 0-based; when outliers are present the extra class
/// has index `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub noisy_labels: Vec<usize>,
    /// Hidden ground truth, never read by training code.
    pub true_labels: Vec<usize>,
    /// Hidden ground truth, never read by training code.
    pub inlier: Vec<bool>,
    /// Number of inlier classes `K`.
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of distinct labels in play: `classes`, plus one when any
    /// sample carries the outlier label.
    pub fn label_space(&self) -> usize {
        if self.noisy_labels.iter().any(|&y| y == self.classes) {
            self.classes + 1
        } else {
            self.classes
        }
    }

    /// Rows selected by index, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut features = Array2::zeros((idx.len(), self.dim()));
        for (row, &i) in idx.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
        }
        Dataset {
            features,
            noisy_labels: idx.iter().map(|&i| self.noisy_labels[i]).collect(),
            true_labels: idx.iter().map(|&i| self.true_labels[i]).collect(),
            inlier: idx.iter().map(|&i| self.inlier[i]).collect(),
            classes: self.classes,
        }
    }

    /// Write as CSV: `x_0,..,x_{d-1},noisy_label,true_label,is_inlier`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x_{j}")).collect();
        header.extend(["noisy_label".into(), "true_label".into(), "is_inlier".into()]);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> =
                self.features.row(i).iter().map(|v| format!("{v}")).collect();
            record.push(self.noisy_labels[i].to_string());
            record.push(self.true_labels[i].to_string());
            record.push(if self.inlier[i] { "1".into() } else { "0".into() });
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a CSV produced by [`Dataset::write_csv`]. The inlier class
    /// count is inferred as one past the largest inlier true label.
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let dim = headers.iter().filter(|h| h.starts_with("x_")).count();
        if dim == 0 || headers.len() != dim + 3 {
            return Err(Error::Parse(format!(
                "unexpected dataset header: {headers:?}"
            )));
        }
        let mut rows: Vec<f64> = Vec::new();
        let mut noisy_labels = Vec::new();
        let mut true_labels = Vec::new();
        let mut inlier = Vec::new();
        for record in r.records() {
            let record = record?;
            for j in 0..dim {
                rows.push(
                    record[j]
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad feature: {}", &record[j])))?,
                );
            }
            noisy_labels.push(
                record[dim]
                    .parse()
                    .map_err(|_| Error::Parse("bad noisy label".into()))?,
            );
            true_labels.push(
                record[dim + 1]
                    .parse()
                    .map_err(|_| Error::Parse("bad true label".into()))?,
            );
            inlier.push(&record[dim + 2] == "1");
        }
        let n = noisy_labels.len();
        let features = Array2::from_shape_vec((n, dim), rows).expect("shape consistent");
        let classes = true_labels
            .iter()
            .zip(&inlier)
            .filter(|(_, &inl)| inl)
            .map(|(&y, _)| y + 1)
            .max()
            .or_else(|| true_labels.iter().map(|&y| y + 1).max())
            .unwrap_or(0);
        Ok(Dataset {
            features,
            noisy_labels,
            true_labels,
            inlier,
            classes,
        })
    }
}

/// A mixture of unit-variance spherical Gaussians, one per class. Keeping
/// the means in a value lets train and test sets sample from the same
/// population.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    means: Array2<f64>,
}

impl GaussianMixture {
    /// Draw class means and rescale them so the minimum pairwise distance
    /// equals `separation` (all means coincide at `separation = 0`).
    pub fn new(classes: usize, dim: usize, separation: f64, rng: &mut RunRng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if dim == 0 {
            return Err(Error::invalid("need at least one feature dimension"));
        }
        if !(separation >= 0.0) || !separation.is_finite() {
            return Err(Error::invalid("separation must be non-negative and finite"));
        }
        let mut means = Array2::from_shape_fn((classes, dim), |_| rng.normal());
        let mut min_dist = f64::INFINITY;
        for a in 0..classes {
            for b in (a + 1)..classes {
                let d: f64 = (0..dim)
                    .map(|j| (means[[a, j]] - means[[b, j]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        let scale = if min_dist > 0.0 { separation / min_dist } else { 0.0 };
        means.mapv_inplace(|m| m * scale);
        Ok(GaussianMixture { means })
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    /// `count` clean samples, class-balanced within one.
    pub fn sample(&self, count: usize, rng: &mut RunRng) -> Result<Dataset> {
        let classes = self.classes();
        if count < classes {
            return Err(Error::invalid("need at least one sample per class"));
        }
        let dim = self.dim();
        let mut features = Array2::zeros((count, dim));
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % classes;
            labels.push(class);
            for j in 0..dim {
                features[[i, j]] = self.means[[class, j]] + rng.normal();
            }
        }
        Ok(Dataset {
            features,
            noisy_labels: labels.clone(),
            true_labels: labels,
            inlier: vec![true; count],
            classes,
        })
    }
}

/// One-shot mixture sampling: draw means and a clean dataset in one call.
pub fn gen_gaussian_mixture(
    classes: usize,
    dim: usize,
    count: usize,
    separation: f64,
    rng: &mut RunRng,
) -> Result<Dataset> {
    GaussianMixture::new(classes, dim, separation, rng)?.sample(count, rng)
}

/// The generating noise process, kept next to the data it produced so
/// experiments can score how well it was recovered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrueNoiseSpec {
    pub q_star: Array2<f64>,
    /// Off-diagonal probability mass per column (`1 -` diagonal).
    pub noise_level: f64,
    /// Off-diagonal targets per class (flip noise only).
    pub fan_out: Option<usize>,
    /// Fraction of outliers labeled with the extra class (outlier noise only).
    pub alpha_true: Option<f64>,
    pub n_in: usize,
    pub n_out: usize,
    pub n_known: usize,
    /// Columns whose confusion mass was empty and fell back to a uniform
    /// off-diagonal split (adversarial construction only).
    pub uniform_fallback_columns: Vec<usize>,
}

impl TrueNoiseSpec {
    fn flip(q_star: Array2<f64>, noise_level: f64, fan_out: Option<usize>) -> Self {
        TrueNoiseSpec {
            q_star,
            noise_level,
            fan_out,
            alpha_true: None,
            n_in: 0,
            n_out: 0,
            n_known: 0,
            uniform_fallback_columns: Vec::new(),
        }
    }
}

/// Random flip-noise transition matrix: each column keeps `1 - noise_level`
/// on the diagonal and splits `noise_level` equally over `fan_out` distinct
/// randomly chosen off-diagonal rows.
pub fn build_random_flip_matrix(
    classes: usize,
    noise_level: f64,
    fan_out: usize,
    rng: &mut RunRng,
) -> Result<TrueNoiseSpec> {
    if !(0.0..1.0).contains(&noise_level) {
        return Err(Error::invalid("noise_level must lie in [0, 1)"));
    }
    if fan_out == 0 || fan_out >= classes {
        return Err(Error::invalid(format!(
            "fan_out must lie in [1, {}], got {fan_out}",
            classes - 1
        )));
    }
    let mut q = Array2::zeros((classes, classes));
    let share = noise_level / fan_out as f64;
    for col in 0..classes {
        q[[col, col]] = 1.0 - noise_level;
        let mut pool: Vec<usize> = (0..classes).filter(|&r| r != col).collect();
        rng.shuffle(&mut pool);
        for &row in pool.iter().take(fan_out) {
            q[[row, col]] = share;
        }
    }
    debug_assert!(is_column_stochastic(&q, 1e-12));
    Ok(TrueNoiseSpec::flip(q, noise_level, Some(fan_out)))
}

/// Adversarial flip matrix: off-diagonal flip mass in column `i` follows
/// the off-diagonal confusion of a clean model's confusion matrix, so
/// labels flip toward classes the model already confuses. A column with no
/// off-diagonal confusion mass falls back to a uniform split and is
/// recorded in the returned spec.
pub fn build_adversarial_flip_matrix(
    clean_confusion: &Array2<f64>,
    noise_level: f64,
) -> Result<TrueNoiseSpec> {
    if !(0.0..1.0).contains(&noise_level) {
        return Err(Error::invalid("noise_level must lie in [0, 1)"));
    }
    let k = clean_confusion.nrows();
    if clean_confusion.ncols() != k || k < 2 {
        return Err(Error::invalid("confusion matrix must be square, K >= 2"));
    }
    if !is_column_stochastic(clean_confusion, 1e-6) {
        return Err(Error::invalid("confusion matrix must be column-stochastic"));
    }
    let mut q = Array2::zeros((k, k));
    let mut fallback = Vec::new();
    for col in 0..k {
        q[[col, col]] = 1.0 - noise_level;
        let off_mass: f64 = (0..k)
            .filter(|&r| r != col)
            .map(|r| clean_confusion[[r, col]])
            .sum();
        if off_mass <= 1e-12 {
            fallback.push(col);
            let share = noise_level / (k - 1) as f64;
            for row in (0..k).filter(|&r| r != col) {
                q[[row, col]] = share;
            }
        } else {
            for row in (0..k).filter(|&r| r != col) {
                q[[row, col]] = noise_level * clean_confusion[[row, col]] / off_mass;
            }
        }
    }
    let mut spec = TrueNoiseSpec::flip(q, noise_level, None);
    spec.uniform_fallback_columns = fallback;
    Ok(spec)
}

/// Redraw every noisy label from column `true_label` of `spec.q_star`.
/// Features and hidden fields are untouched.
pub fn apply_label_flips(
    clean: &Dataset,
    spec: &TrueNoiseSpec,
    rng: &mut RunRng,
) -> Result<Dataset> {
    let k = clean.classes;
    if spec.q_star.dim() != (k, k) {
        return Err(Error::invalid(format!(
            "q_star is {:?} but dataset has {k} classes",
            spec.q_star.dim()
        )));
    }
    let mut out = clean.clone();
    let mut column = vec![0.0; k];
    for i in 0..out.len() {
        let truth = out.true_labels[i];
        for (r, c) in column.iter_mut().enumerate() {
            *c = spec.q_star[[r, truth]];
        }
        out.noisy_labels[i] = rng.categorical(&column)?;
    }
    Ok(out)
}

/// Where outlier features come from: one broad Gaussian cluster displaced
/// from the class means. Placing the cluster once and reusing it keeps a
/// held-out noisy test set drawn from the same population as training.
#[derive(Debug, Clone)]
pub struct OutlierCluster {
    center: Array1<f64>,
}

impl OutlierCluster {
    /// Place the cluster at least `separation` away from every class mean
    /// of the mixture underlying `inliers` (estimated empirically).
    pub fn place(inliers: &Dataset, separation: f64, rng: &mut RunRng) -> Result<Self> {
        if inliers.is_empty() {
            return Err(Error::invalid("cannot place outliers for an empty dataset"));
        }
        if !(separation >= 0.0) || !separation.is_finite() {
            return Err(Error::invalid("outlier separation must be non-negative"));
        }
        let k = inliers.classes;
        let dim = inliers.dim();
        let mut means = Array2::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..inliers.len() {
            let y = inliers.true_labels[i];
            if y < k {
                counts[y] += 1;
                for j in 0..dim {
                    means[[y, j]] += inliers.features[[i, j]];
                }
            }
        }
        for y in 0..k {
            if counts[y] == 0 {
                return Err(Error::MissingClass(y));
            }
            for j in 0..dim {
                means[[y, j]] /= counts[y] as f64;
            }
        }
        let centroid: Array1<f64> = means.mean_axis(ndarray::Axis(0)).expect("k >= 1");
        let max_radius = (0..k)
            .map(|y| {
                (0..dim)
                    .map(|j| (means[[y, j]] - centroid[j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);

        let mut direction: Array1<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = direction.dot(&direction).sqrt();
        if norm > 0.0 {
            direction.mapv_inplace(|x| x / norm);
        } else {
            direction[0] = 1.0;
        }
        let center = &centroid + &(direction * (separation + max_radius));
        Ok(OutlierCluster { center })
    }

    pub fn center(&self) -> &Array1<f64> {
        &self.center
    }

    /// Append `n_out` outliers with uniformly random inlier labels and
    /// `n_known` outliers labeled with the extra class `K`. Returns the
    /// corrupted dataset and `alpha = n_known / (n_out + n_known)`; with no
    /// outliers the data is returned unchanged and `alpha` is `None`.
    pub fn inject(
        &self,
        inliers: &Dataset,
        n_out: usize,
        n_known: usize,
        rng: &mut RunRng,
    ) -> Result<(Dataset, Option<f64>)> {
        let total = n_out + n_known;
        if total == 0 {
            return Ok((inliers.clone(), None));
        }
        let k = inliers.classes;
        let dim = inliers.dim();
        if self.center.len() != dim {
            return Err(Error::invalid("outlier cluster dimension mismatch"));
        }
        let n0 = inliers.len();
        let mut features = Array2::zeros((n0 + total, dim));
        features
            .slice_mut(ndarray::s![..n0, ..])
            .assign(&inliers.features);
        let mut noisy = inliers.noisy_labels.clone();
        let mut truth = inliers.true_labels.clone();
        let mut inl = inliers.inlier.clone();
        for t in 0..total {
            let row = n0 + t;
            for j in 0..dim {
                features[[row, j]] = self.center[j] + OUTLIER_STD * rng.normal();
            }
            noisy.push(if t < n_out { rng.below(k) } else { k });
            truth.push(k);
            inl.push(false);
        }
        let alpha = n_known as f64 / total as f64;
        Ok((
            Dataset {
                features,
                noisy_labels: noisy,
                true_labels: truth,
                inlier: inl,
                classes: k,
            },
            Some(alpha),
        ))
    }
}

/// One-shot outlier injection: place a cluster and pollute `inliers` in a
/// single call.
pub fn inject_outliers(
    inliers: &Dataset,
    n_out: usize,
    n_known: usize,
    outlier_separation: f64,
    rng: &mut RunRng,
) -> Result<(Dataset, Option<f64>)> {
    if n_out + n_known == 0 {
        return Ok((inliers.clone(), None));
    }
    OutlierCluster::place(inliers, outlier_separation, rng)?.inject(inliers, n_out, n_known, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sgd_step, Grads, Mlp, TrainHyper, Upstream};
    use crate::rng::{RunRng, Stream};
    use crate::simplex::max_abs_diff;

    /// Minimal plain-SGD training used as an oracle for separability checks.
    fn train_plain(data: &Dataset, hidden: &[usize], epochs: usize, seed: u64) -> Mlp {
        let mut dims = vec![data.dim()];
        dims.extend_from_slice(hidden);
        dims.push(data.classes);
        let mut init_rng = RunRng::stream(seed, Stream::ParamInit);
        let mut shuffle_rng = RunRng::stream(seed, Stream::Shuffle);
        let mut model = Mlp::init(&dims, &mut init_rng).unwrap();
        let hyper = TrainHyper {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            epochs,
        };
        let mut velocity = Grads::zeros_like(&model);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            shuffle_rng.shuffle(&mut order);
            for chunk in order.chunks(hyper.batch_size) {
                let batch = data.select(chunk);
                let cache = model.forward_cache(&batch.features).unwrap();
                let grads = model
                    .backward(&cache, Upstream::Labels(&batch.noisy_labels))
                    .unwrap();
                sgd_step(&mut model, &grads, &hyper, &mut velocity).unwrap();
            }
        }
        model
    }

    fn error_rate(model: &Mlp, data: &Dataset) -> f64 {
        let probs = model.forward(&data.features).unwrap();
        let mut wrong = 0;
        for (i, row) in probs.rows().into_iter().enumerate() {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best != data.true_labels[i] {
                wrong += 1;
            }
        }
        wrong as f64 / data.len() as f64
    }

    #[test]
    fn well_separated_mixture_is_linearly_classifiable() {
        let mut rng = RunRng::stream(100, Stream::TrainData);
        let mixture = GaussianMixture::new(3, 6, 10.0, &mut rng).unwrap();
        let train = mixture.sample(1500, &mut rng).unwrap();
        let mut test_rng = RunRng::stream(100, Stream::TestData);
        let test = mixture.sample(900, &mut test_rng).unwrap();
        // No hidden layer: a purely linear classifier suffices.
        let model = train_plain(&train, &[], 40, 100);
        let err = error_rate(&model, &test);
        assert!(err <= 0.01, "linear test error {err}");
    }

    #[test]
    fn zero_separation_is_indistinguishable() {
        let mut rng = RunRng::stream(101, Stream::TrainData);
        let mixture = GaussianMixture::new(3, 4, 0.0, &mut rng).unwrap();
        let train = mixture.sample(3000, &mut rng).unwrap();
        let mut test_rng = RunRng::stream(101, Stream::TestData);
        let test = mixture.sample(1500, &mut test_rng).unwrap();
        let model = train_plain(&train, &[16], 15, 101);
        let err = error_rate(&model, &test);
        let chance = 1.0 - 1.0 / 3.0;
        assert!((err - chance).abs() <= 0.08, "err = {err}");
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let gen = |seed| {
            let mut rng = RunRng::stream(seed, Stream::TrainData);
            gen_gaussian_mixture(4, 5, 200, 3.0, &mut rng).unwrap()
        };
        let a = gen(7);
        let b = gen(7);
        assert_eq!(a, b);
        assert!(a
            .features
            .iter()
            .zip(b.features.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn labels_are_balanced_within_one() {
        let mut rng = RunRng::new(8);
        let data = gen_gaussian_mixture(3, 2, 100, 2.0, &mut rng).unwrap();
        let mut counts = [0usize; 3];
        for &y in &data.true_labels {
            counts[y] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1, "counts = {counts:?}");
    }

    #[test]
    fn invalid_mixture_arguments_rejected() {
        let mut rng = RunRng::new(9);
        assert!(gen_gaussian_mixture(1, 4, 100, 1.0, &mut rng).is_err());
        assert!(gen_gaussian_mixture(3, 0, 100, 1.0, &mut rng).is_err());
        assert!(gen_gaussian_mixture(3, 4, 2, 1.0, &mut rng).is_err());
        assert!(gen_gaussian_mixture(3, 4, 100, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn zero_noise_flip_matrix_is_identity() {
        let mut rng = RunRng::new(10);
        let spec = build_random_flip_matrix(4, 0.0, 2, &mut rng).unwrap();
        assert!(max_abs_diff(&spec.q_star, &Array2::eye(4)).unwrap() < 1e-15);
    }

    #[test]
    fn half_noise_fan_two_columns_have_expected_structure() {
        let mut rng = RunRng::new(11);
        let spec = build_random_flip_matrix(3, 0.5, 2, &mut rng).unwrap();
        for col in 0..3 {
            assert!((spec.q_star[[col, col]] - 0.5).abs() < 1e-15);
            let mut off: Vec<f64> = (0..3)
                .filter(|&r| r != col)
                .map(|r| spec.q_star[[r, col]])
                .collect();
            off.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(off.len(), 2);
            assert!((off[0] - 0.25).abs() < 1e-15);
            assert!((off[1] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn thousand_class_matrix_has_eleven_nonzeros_per_column() {
        let mut rng = RunRng::new(12);
        let spec = build_random_flip_matrix(1000, 0.5, 10, &mut rng).unwrap();
        for col in 0..1000 {
            let nonzeros = (0..1000).filter(|&r| spec.q_star[[r, col]] != 0.0).count();
            assert_eq!(nonzeros, 11, "column {col}");
        }
        assert!(is_column_stochastic(&spec.q_star, 1e-9));
    }

    #[test]
    fn fan_out_bounds_enforced() {
        let mut rng = RunRng::new(13);
        assert!(build_random_flip_matrix(4, 0.5, 0, &mut rng).is_err());
        assert!(build_random_flip_matrix(4, 0.5, 4, &mut rng).is_err());
        assert!(build_random_flip_matrix(4, 1.0, 2, &mut rng).is_err());
    }

    #[test]
    fn adversarial_zero_noise_is_identity() {
        let confusion = ndarray::array![[0.7, 0.2], [0.3, 0.8]];
        let spec = build_adversarial_flip_matrix(&confusion, 0.0).unwrap();
        assert!(max_abs_diff(&spec.q_star, &Array2::eye(2)).unwrap() < 1e-15);
    }

    #[test]
    fn adversarial_single_confusion_target_takes_all_mass() {
        let confusion = ndarray::array![
            [0.6, 0.0, 0.0],
            [0.4, 1.0, 0.0],
            [0.0, 0.0, 1.0]
        ];
        let spec = build_adversarial_flip_matrix(&confusion, 0.3).unwrap();
        // Column 0's only off-diagonal confusion is row 1.
        assert!((spec.q_star[[1, 0]] - 0.3).abs() < 1e-15);
        assert!(spec.q_star[[2, 0]].abs() < 1e-15);
        // Columns 1 and 2 have no off-diagonal mass: uniform fallback.
        assert_eq!(spec.uniform_fallback_columns, vec![1, 2]);
        assert!((spec.q_star[[0, 1]] - 0.15).abs() < 1e-15);
        assert!((spec.q_star[[2, 1]] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn adversarial_uniform_confusion_equals_random_full_fan_out() {
        let k = 5;
        let level = 0.4;
        // Uniform off-diagonal confusion.
        let mut confusion = Array2::from_elem((k, k), 0.1);
        for i in 0..k {
            confusion[[i, i]] = 1.0 - 0.1 * (k - 1) as f64;
        }
        let adv = build_adversarial_flip_matrix(&confusion, level).unwrap();
        let mut rng = RunRng::new(14);
        let rand = build_random_flip_matrix(k, level, k - 1, &mut rng).unwrap();
        assert!(max_abs_diff(&adv.q_star, &rand.q_star).unwrap() < 1e-12);
    }

    #[test]
    fn identity_q_star_leaves_labels_unchanged() {
        let mut rng = RunRng::new(15);
        let clean = gen_gaussian_mixture(3, 2, 300, 2.0, &mut rng).unwrap();
        let spec = TrueNoiseSpec::flip(Array2::eye(3), 0.0, None);
        let flipped = apply_label_flips(&clean, &spec, &mut rng).unwrap();
        assert_eq!(flipped.noisy_labels, clean.noisy_labels);
    }

    #[test]
    fn flips_never_touch_features_or_truth() {
        let mut rng = RunRng::new(16);
        let clean = gen_gaussian_mixture(4, 3, 400, 2.0, &mut rng).unwrap();
        let spec = build_random_flip_matrix(4, 0.6, 2, &mut rng).unwrap();
        let flipped = apply_label_flips(&clean, &spec, &mut rng).unwrap();
        assert_eq!(flipped.true_labels, clean.true_labels);
        assert_eq!(flipped.inlier, clean.inlier);
        assert!(flipped
            .features
            .iter()
            .zip(clean.features.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn flip_fraction_tracks_noise_level() {
        let mut rng = RunRng::new(17);
        let n = 100_000;
        let clean = gen_gaussian_mixture(4, 2, n, 2.0, &mut rng).unwrap();
        let spec = build_random_flip_matrix(4, 0.5, 2, &mut rng).unwrap();
        let flipped = apply_label_flips(&clean, &spec, &mut rng).unwrap();
        let kept = flipped
            .noisy_labels
            .iter()
            .zip(&flipped.true_labels)
            .filter(|(a, b)| a == b)
            .count();
        let flipped_frac = 1.0 - kept as f64 / n as f64;
        assert!((flipped_frac - 0.5).abs() < 0.005, "flipped = {flipped_frac}");
    }

    #[test]
    fn empirical_flip_matrix_converges_to_q_star() {
        let mut rng = RunRng::new(18);
        let n = 100_000;
        let clean = gen_gaussian_mixture(3, 2, n, 2.0, &mut rng).unwrap();
        let spec = build_random_flip_matrix(3, 0.4, 2, &mut rng).unwrap();
        let flipped = apply_label_flips(&clean, &spec, &mut rng).unwrap();
        let mut counts = Array2::<f64>::zeros((3, 3));
        let mut totals = [0.0; 3];
        for i in 0..n {
            counts[[flipped.noisy_labels[i], flipped.true_labels[i]]] += 1.0;
            totals[flipped.true_labels[i]] += 1.0;
        }
        for col in 0..3 {
            for row in 0..3 {
                counts[[row, col]] /= totals[col];
            }
        }
        assert!(max_abs_diff(&counts, &spec.q_star).unwrap() < 0.02);
    }

    #[test]
    fn no_outliers_returns_unchanged_with_undefined_alpha() {
        let mut rng = RunRng::new(19);
        let data = gen_gaussian_mixture(3, 2, 90, 2.0, &mut rng).unwrap();
        let (out, alpha) = inject_outliers(&data, 0, 0, 6.0, &mut rng).unwrap();
        assert_eq!(out, data);
        assert!(alpha.is_none());
    }

    #[test]
    fn alpha_is_the_exact_count_ratio() {
        let mut rng = RunRng::new(20);
        let data = gen_gaussian_mixture(3, 2, 300, 2.0, &mut rng).unwrap();
        let (out, alpha) = inject_outliers(&data, 9500, 500, 6.0, &mut rng).unwrap();
        assert_eq!(alpha, Some(0.05));
        assert_eq!(out.len(), 300 + 10_000);
        let known = out.noisy_labels.iter().filter(|&&y| y == 3).count();
        assert_eq!(known, 500);
        assert!(out.inlier[..300].iter().all(|&b| b));
        assert!(out.inlier[300..].iter().all(|&b| !b));
        assert!(out.true_labels[300..].iter().all(|&y| y == 3));
    }

    #[test]
    fn unknown_outlier_labels_are_uniform_over_classes() {
        let mut rng = RunRng::new(21);
        let k = 4;
        let data = gen_gaussian_mixture(k, 2, 200, 2.0, &mut rng).unwrap();
        let n_out = 40_000;
        let (out, _) = inject_outliers(&data, n_out, 0, 6.0, &mut rng).unwrap();
        let mut counts = vec![0.0; k];
        for &y in &out.noisy_labels[200..] {
            counts[y] += 1.0;
        }
        // Multinomial 3-sigma bound per class.
        let p = 1.0 / k as f64;
        let sigma = (n_out as f64 * p * (1.0 - p)).sqrt();
        for (class, &c) in counts.iter().enumerate() {
            assert!(
                (c - n_out as f64 * p).abs() <= 3.0 * sigma,
                "class {class}: count {c}"
            );
        }
    }

    #[test]
    fn outlier_cluster_is_separated_from_class_means() {
        let mut rng = RunRng::new(22);
        let data = gen_gaussian_mixture(3, 4, 300, 3.0, &mut rng).unwrap();
        let sep = 9.0;
        let (out, _) = inject_outliers(&data, 500, 0, sep, &mut rng).unwrap();
        let outlier_mean: Vec<f64> = (0..4)
            .map(|j| (300..out.len()).map(|i| out.features[[i, j]]).sum::<f64>() / 500.0)
            .collect();
        for class in 0..3 {
            let class_rows: Vec<usize> =
                (0..300).filter(|&i| out.true_labels[i] == class).collect();
            let class_mean: Vec<f64> = (0..4)
                .map(|j| {
                    class_rows.iter().map(|&i| out.features[[i, j]]).sum::<f64>()
                        / class_rows.len() as f64
                })
                .collect();
            let dist: f64 = (0..4)
                .map(|j| (outlier_mean[j] - class_mean[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist >= sep * 0.8, "class {class} too close: {dist}");
        }
    }

    #[test]
    fn shared_cluster_reproduces_population_for_held_out_sets() {
        let mut rng = RunRng::new(23);
        let train = gen_gaussian_mixture(3, 4, 300, 3.0, &mut rng).unwrap();
        let cluster = OutlierCluster::place(&train, 6.0, &mut rng).unwrap();
        let (a, _) = cluster.inject(&train, 100, 0, &mut RunRng::new(1)).unwrap();
        let (b, _) = cluster.inject(&train, 100, 0, &mut RunRng::new(2)).unwrap();
        // Different draws, same cluster: empirical centers agree loosely.
        let mean_of = |d: &Dataset| -> Vec<f64> {
            (0..4)
                .map(|j| (300..d.len()).map(|i| d.features[[i, j]]).sum::<f64>() / 100.0)
                .collect()
        };
        let (ma, mb) = (mean_of(&a), mean_of(&b));
        let dist: f64 = (0..4).map(|j| (ma[j] - mb[j]).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 2.0, "cluster centers drifted: {dist}");
    }

    #[test]
    fn dataset_csv_round_trip() {
        let mut rng = RunRng::new(24);
        let data = gen_gaussian_mixture(3, 3, 60, 2.0, &mut rng).unwrap();
        let (data, _) = inject_outliers(&data, 10, 5, 6.0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        data.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.classes, 3);
        assert_eq!(back.noisy_labels, data.noisy_labels);
        assert_eq!(back.true_labels, data.true_labels);
        assert_eq!(back.inlier, data.inlier);
        assert!(back
            .features
            .iter()
            .zip(data.features.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
