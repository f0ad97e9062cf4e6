//! Experiment orchestration: generate data, corrupt it, train one of the
//! model variants, evaluate on a clean test set, and report.
//!
//! A run is a pure function of `(config, seed)`: reports serialize without
//! wall-clock time so repeating a run reproduces its files byte for byte.
//! Sweep cells are independent and run in parallel; each owns its derived
//! seed, and the summary is assembled in grid order afterwards.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, NoiseMode, Variant};
use crate::metrics::{
    combined_confusion, confusion_matrix, entropy_score, inlier_pr_curve, q_recovery_error,
    test_error, PRCurve,
};
use crate::model::{nll_loss, sgd_step, Grads, Mlp, TrainHyper, Upstream};
use crate::noise::{regularizer_grad, NoiseMatrix, OutlierSpec, QMode, QSchedule};
use crate::rng::{RunRng, Stream};
use crate::synth::{
    apply_label_flips, build_adversarial_flip_matrix, build_random_flip_matrix, Dataset,
    GaussianMixture, OutlierCluster, TrueNoiseSpec,
};
use crate::{Error, Result};

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
}

/// Serializable snapshot of a noise matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QSnapshot {
    pub mode: QMode,
    pub values: Vec<Vec<f64>>,
}

impl QSnapshot {
    fn of(q: &NoiseMatrix) -> Self {
        QSnapshot {
            mode: q.mode(),
            values: matrix_rows(q.matrix()),
        }
    }
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Everything a single run produced. Every number is recomputable from
/// `(config, seed)`; wall-clock time is kept out of the serialized form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub variant: Variant,
    pub status: RunStatus,
    /// Mean training loss per epoch (cross-entropy of whichever model the
    /// variant trains).
    pub epoch_losses: Vec<f64>,
    /// Base-model argmax error on the clean test set, noise layer removed.
    pub test_error: Option<f64>,
    pub q: Option<QSnapshot>,
    pub q_star: Option<Vec<Vec<f64>>>,
    /// Max elementwise |Q - Q*|.
    pub q_recovery_error: Option<f64>,
    /// Alpha used to build the outlier matrix (outlier runs).
    pub alpha: Option<f64>,
    /// Exact count ratio from synthesis (outlier runs).
    pub alpha_true: Option<f64>,
    /// True when the outlier matrix was built with alpha = 0.
    pub q_singular: Option<bool>,
    /// Base-model confusion matrix on the training set.
    pub confusion_base: Option<Vec<Vec<f64>>>,
    /// Combined-model confusion Q*C on the training set.
    pub confusion_combined: Option<Vec<Vec<f64>>>,
    /// Max |QC - Q*| when Q unfroze (learned-Q runs).
    pub qc_gap_at_unfreeze: Option<f64>,
    /// Max |QC - Q*| after training (learned-Q runs).
    pub qc_gap_final: Option<f64>,
    /// Inlier-detection precision-recall on the noisy held-out set
    /// (outlier-mode runs).
    pub pr: Option<PRCurve>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// A run's report plus the trained artifacts that do not belong in it.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Mlp,
    pub q: Option<NoiseMatrix>,
    pub q_star: Option<NoiseMatrix>,
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainSpec<'a> {
    features: &'a Array2<f64>,
    labels: &'a [usize],
    out_dim: usize,
    hidden: &'a [usize],
    hyper: &'a TrainHyper,
    /// Noise layer to train through, if any.
    q_init: Option<NoiseMatrix>,
    /// Present only when the layer is learned.
    schedule: Option<&'a QSchedule>,
}

struct TrainResult {
    model: Mlp,
    q: Option<NoiseMatrix>,
    epoch_losses: Vec<f64>,
}

/// Frobenius-norm ceiling for one batch's noise-matrix data gradient.
const DQ_CLIP: f64 = 5.0;

/// Minibatch SGD over `spec.hyper.epochs` epochs. `observer` is called at
/// the start of every epoch with the current state; it must not influence
/// training (it exists so callers can log confusion gaps mid-run).
fn train_model(
    spec: TrainSpec<'_>,
    init_rng: &mut RunRng,
    shuffle_rng: &mut RunRng,
    mut observer: impl FnMut(usize, &Mlp, Option<&NoiseMatrix>),
) -> Result<TrainResult> {
    let n = spec.features.nrows();
    if n == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if spec.labels.len() != n {
        return Err(Error::invalid("label count does not match training features"));
    }
    let mut dims = vec![spec.features.ncols()];
    dims.extend_from_slice(spec.hidden);
    dims.push(spec.out_dim);
    let mut model = Mlp::init(&dims, init_rng)?;
    let mut velocity = Grads::zeros_like(&model);

    let mut q = spec.q_init;
    if let Some(q) = &q {
        if q.dim() != spec.out_dim {
            return Err(Error::invalid("noise matrix does not match output dim"));
        }
    }
    let learn_q = spec.schedule.is_some() && q.as_ref().is_some_and(|q| q.mode() == QMode::Learned);
    let mut q_velocity = q
        .as_ref()
        .filter(|_| learn_q)
        .map(|q| Array2::<f64>::zeros((q.dim(), q.dim())));

    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(spec.hyper.epochs);
    let mut batch_features = Array2::zeros((spec.hyper.batch_size.min(n), dims[0]));
    let mut batch_labels = Vec::with_capacity(spec.hyper.batch_size.min(n));

    for epoch in 0..spec.hyper.epochs {
        observer(epoch, &model, q.as_ref());
        shuffle_rng.shuffle(&mut order);
        let q_active = learn_q && spec.schedule.is_some_and(|s| s.active(epoch));
        let mut loss_sum = 0.0;

        for chunk in order.chunks(spec.hyper.batch_size) {
            if batch_features.nrows() != chunk.len() {
                batch_features = Array2::zeros((chunk.len(), dims[0]));
            }
            batch_labels.clear();
            for (row, &i) in chunk.iter().enumerate() {
                batch_features.row_mut(row).assign(&spec.features.row(i));
                batch_labels.push(spec.labels[i]);
            }

            let cache = model.forward_cache(&batch_features)?;
            let loss = match &mut q {
                None => {
                    let loss = nll_loss(&cache.probs, &batch_labels)?;
                    let grads = model.backward(&cache, Upstream::Labels(&batch_labels))?;
                    sgd_step(&mut model, &grads, spec.hyper, &mut velocity)?;
                    loss
                }
                Some(q) => {
                    let loss = q.loss(&cache.probs.view(), &batch_labels)?;
                    let (mut dq, dprobs) = q.backward(&cache.probs.view(), &batch_labels)?;
                    let grads = model.backward(&cache, Upstream::ProbGrad(&dprobs))?;
                    sgd_step(&mut model, &grads, spec.hyper, &mut velocity)?;
                    if q_active {
                        // The cross-entropy gradient scales with 1/s; a
                        // single near-clamp sample would otherwise one-hot
                        // a whole column after projection. Healthy batch
                        // gradients stay under ~2 in Frobenius norm.
                        let norm = dq.iter().map(|g| g * g).sum::<f64>().sqrt();
                        if norm > DQ_CLIP {
                            dq.mapv_inplace(|g| g * (DQ_CLIP / norm));
                        }
                        let schedule = spec.schedule.expect("q_active implies schedule");
                        let total =
                            &dq + &regularizer_grad(q.matrix(), schedule.regularizer, schedule.lambda);
                        if schedule.momentum == 0.0 {
                            q.step_and_project(&total, schedule.learning_rate)?;
                        } else {
                            let v = q_velocity.as_mut().expect("velocity allocated");
                            v.zip_mut_with(&total, |v, &g| {
                                *v = schedule.momentum * *v - schedule.learning_rate * g;
                            });
                            let step = v.clone();
                            q.apply_step(&step)?;
                        }
                    }
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss became {loss} at epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
        }
        epoch_losses.push(loss_sum / n as f64);
    }

    Ok(TrainResult {
        model,
        q,
        epoch_losses,
    })
}

// ---------------------------------------------------------------------------
// Data assembly
// ---------------------------------------------------------------------------

/// Generated-and-corrupted data for one run.
struct RunData {
    train: Dataset,
    /// Clean inlier-only test set; labels unperturbed.
    test: Dataset,
    /// Noisy held-out set for inlier/outlier detection (outlier mode).
    pr_test: Option<Dataset>,
    spec: Option<TrueNoiseSpec>,
    alpha_true: Option<f64>,
}

fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<RunData> {
    let d = &cfg.dataset;
    let mut train_rng = RunRng::stream(seed, Stream::TrainData);
    let mixture = GaussianMixture::new(d.classes, d.dim, d.separation, &mut train_rng)?;
    let clean_train = mixture.sample(d.train_size, &mut train_rng)?;
    let mut test_rng = RunRng::stream(seed, Stream::TestData);
    let test = mixture.sample(d.test_size, &mut test_rng)?;

    match cfg.noise.mode {
        NoiseMode::None => Ok(RunData {
            train: clean_train,
            test,
            pr_test: None,
            spec: None,
            alpha_true: None,
        }),
        NoiseMode::FlipRandom => {
            let mut noise_rng = RunRng::stream(seed, Stream::NoiseBuild);
            let spec = build_random_flip_matrix(
                d.classes,
                cfg.noise.level,
                cfg.noise.fan_out,
                &mut noise_rng,
            )?;
            let mut flip_rng = RunRng::stream(seed, Stream::LabelFlip);
            let train = apply_label_flips(&clean_train, &spec, &mut flip_rng)?;
            Ok(RunData {
                train,
                test,
                pr_test: None,
                spec: Some(spec),
                alpha_true: None,
            })
        }
        NoiseMode::FlipAdversarial => {
            // A clean probe model supplies the confusion structure that the
            // adversary flips along.
            let mut probe_init = RunRng::stream(seed, Stream::ProbeInit);
            let mut probe_shuffle = RunRng::stream(seed, Stream::ProbeShuffle);
            let probe = train_model(
                TrainSpec {
                    features: &clean_train.features,
                    labels: &clean_train.noisy_labels,
                    out_dim: d.classes,
                    hidden: &cfg.model.hidden,
                    hyper: &cfg.model.hyper(),
                    q_init: None,
                    schedule: None,
                },
                &mut probe_init,
                &mut probe_shuffle,
                |_, _, _| {},
            )?;
            let probs = probe.model.forward(&test.features)?;
            let confusion = confusion_matrix(&probs.view(), &test.true_labels)?;
            let spec = build_adversarial_flip_matrix(&confusion.matrix, cfg.noise.level)?;
            let mut flip_rng = RunRng::stream(seed, Stream::LabelFlip);
            let train = apply_label_flips(&clean_train, &spec, &mut flip_rng)?;
            Ok(RunData {
                train,
                test,
                pr_test: None,
                spec: Some(spec),
                alpha_true: None,
            })
        }
        NoiseMode::Outlier => {
            let n_out = cfg.noise.outliers;
            let n_known = cfg.noise.known_outliers;
            let total = n_out + n_known;
            let mut inject_rng = RunRng::stream(seed, Stream::OutlierInject);
            if total == 0 {
                // Degenerate but allowed when alpha_override supplies alpha.
                return Ok(RunData {
                    train: clean_train,
                    test,
                    pr_test: None,
                    spec: None,
                    alpha_true: None,
                });
            }
            let cluster =
                OutlierCluster::place(&clean_train, cfg.outlier_separation(), &mut inject_rng)?;
            let (train, alpha_true) =
                cluster.inject(&clean_train, n_out, n_known, &mut inject_rng)?;

            // Held-out noisy set with the same outlier fraction, for
            // precision-recall scoring.
            let pr_out = ((d.test_size as f64) * (total as f64) / (d.train_size as f64))
                .round()
                .max(1.0) as usize;
            let mut pr_rng = RunRng::stream(seed, Stream::PrTestData);
            let (pr_test, _) = cluster.inject(&test, pr_out, 0, &mut pr_rng)?;

            let alpha = alpha_true.expect("total > 0");
            let q_star = OutlierSpec::new(alpha, d.classes)?.noise_matrix();
            let spec = TrueNoiseSpec {
                q_star: q_star.matrix().clone(),
                noise_level: total as f64 / (d.train_size + total) as f64,
                fan_out: None,
                alpha_true,
                n_in: d.train_size,
                n_out,
                n_known,
                uniform_fallback_columns: Vec::new(),
            };
            Ok(RunData {
                train,
                test,
                pr_test: Some(pr_test),
                spec: Some(spec),
                alpha_true,
            })
        }
    }
}

/// Materialize the datasets a config describes: `train.csv`, `test.csv`,
/// plus `qstar.csv` when a generating matrix exists and `prtest.csv` for
/// outlier runs.
pub fn generate_datasets(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let data = build_data(cfg, cfg.seed)?;
    std::fs::create_dir_all(dir)?;
    data.train.write_csv(&dir.join("train.csv"))?;
    data.test.write_csv(&dir.join("test.csv"))?;
    if let Some(pr_test) = &data.pr_test {
        pr_test.write_csv(&dir.join("prtest.csv"))?;
    }
    if let Some(spec) = &data.spec {
        let q_star = NoiseMatrix::fixed(spec.q_star.clone())?;
        crate::noise::write_q_csv(&dir.join("qstar.csv"), &q_star)?;
    }
    Ok(())
}

/// The clean test set a config + seed implies (used to re-score checkpoints).
pub fn regenerate_test_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(build_data(cfg, cfg.seed)?.test)
}

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

/// Execute one experiment: generate, corrupt, train the configured
/// variant, evaluate. Training divergence is reported in the outcome's
/// status, not as an error.
pub fn run_single(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    run_with_seed(cfg, cfg.seed, cfg.resolved_variant())
}

fn run_with_seed(cfg: &ExperimentConfig, seed: u64, variant: Variant) -> Result<RunOutcome> {
    let start = Instant::now();
    let data = build_data(cfg, seed)?;
    let k = cfg.dataset.classes;
    let hyper = cfg.model.hyper();
    let schedule = cfg.q.schedule(cfg.model.learning_rate);

    // Echo the exact inputs that reproduce this run.
    let mut config_echo = cfg.clone();
    config_echo.seed = seed;
    config_echo.variant = Some(variant);
    config_echo.sweep = None;

    let mut report = RunReport {
        config: config_echo,
        seed,
        variant,
        status: RunStatus::Ok,
        epoch_losses: Vec::new(),
        test_error: None,
        q: None,
        q_star: None,
        q_recovery_error: None,
        alpha: None,
        alpha_true: data.alpha_true,
        q_singular: None,
        confusion_base: None,
        confusion_combined: None,
        qc_gap_at_unfreeze: None,
        qc_gap_final: None,
        pr: None,
        wall_clock_secs: 0.0,
    };

    // Variant-specific training setup. The none-variant in outlier mode
    // drops samples labeled with the extra class: a K-class model has no
    // row for them.
    let (train_view, out_dim, q_init, schedule_ref, alpha_used): (
        Dataset,
        usize,
        Option<NoiseMatrix>,
        Option<&QSchedule>,
        Option<f64>,
    ) = match variant {
        Variant::None => {
            if cfg.noise.mode == NoiseMode::Outlier {
                let keep: Vec<usize> = (0..data.train.len())
                    .filter(|&i| data.train.noisy_labels[i] < k)
                    .collect();
                (data.train.select(&keep), k, None, None, None)
            } else {
                (data.train.clone(), k, None, None, None)
            }
        }
        Variant::LearnedQ => (
            data.train.clone(),
            k,
            Some(NoiseMatrix::identity(k)),
            Some(&schedule),
            None,
        ),
        Variant::TrueQ => {
            let spec = data
                .spec
                .as_ref()
                .ok_or_else(|| Error::invalid("true-q variant needs a generating Q*"))?;
            (
                data.train.clone(),
                k,
                Some(NoiseMatrix::fixed(spec.q_star.clone())?),
                None,
                None,
            )
        }
        Variant::OutlierQ => {
            let alpha = cfg
                .noise
                .alpha_override
                .or(data.alpha_true)
                .ok_or_else(|| Error::invalid("outlier-q variant needs alpha"))?;
            let spec = OutlierSpec::new(alpha, k)?;
            report.q_singular = Some(spec.is_singular());
            (
                data.train.clone(),
                k + 1,
                Some(spec.noise_matrix()),
                None,
                Some(alpha),
            )
        }
    };
    report.alpha = alpha_used;

    let q_star = data.spec.as_ref().map(|s| s.q_star.clone());
    report.q_star = q_star.as_ref().map(matrix_rows);

    // Observe the confusion gap at the moment Q unfreezes.
    let mut gap_at_unfreeze = None;
    let watch_gap = variant == Variant::LearnedQ && q_star.is_some();
    let freeze = schedule.freeze_epochs;
    let train_result = {
        let train_data = &train_view;
        let q_star_ref = q_star.as_ref();
        let gap = &mut gap_at_unfreeze;
        let mut init_rng = RunRng::stream(seed, Stream::ParamInit);
        let mut shuffle_rng = RunRng::stream(seed, Stream::Shuffle);
        train_model(
            TrainSpec {
                features: &train_data.features,
                labels: &train_data.noisy_labels,
                out_dim,
                hidden: &cfg.model.hidden,
                hyper: &hyper,
                q_init,
                schedule: schedule_ref,
            },
            &mut init_rng,
            &mut shuffle_rng,
            |epoch, model, q| {
                if watch_gap && epoch == freeze && gap.is_none() {
                    if let (Some(q), Some(q_star)) = (q, q_star_ref) {
                        *gap = confusion_gap(model, train_data, q, q_star);
                    }
                }
            },
        )
    };

    let result = match train_result {
        Ok(result) => result,
        Err(Error::Diverged(msg)) => {
            report.status = RunStatus::Diverged;
            report.epoch_losses = Vec::new();
            report.wall_clock_secs = start.elapsed().as_secs_f64();
            let _ = msg;
            // Return a placeholder model so callers still get an outcome.
            let mut init_rng = RunRng::stream(seed, Stream::ParamInit);
            let model = Mlp::init(&[cfg.dataset.dim, out_dim], &mut init_rng)?;
            return Ok(RunOutcome {
                report,
                model,
                q: None,
                q_star: q_star.map(NoiseMatrix::fixed).transpose()?,
            });
        }
        Err(other) => return Err(other),
    };

    report.epoch_losses = result.epoch_losses;
    report.qc_gap_at_unfreeze = gap_at_unfreeze;

    // Evaluation: the clean test set sees only the bare base model.
    report.test_error = Some(test_error(&result.model, &data.test)?);

    if let Some(q) = &result.q {
        report.q = Some(QSnapshot::of(q));
        if let Some(q_star) = &q_star {
            report.q_recovery_error = Some(q_recovery_error(q.matrix(), q_star)?);
            if variant == Variant::LearnedQ {
                report.qc_gap_final = confusion_gap(&result.model, &train_view, q, q_star);
            }
        }
    }

    // Confusion snapshots on the training set, when its label space matches
    // the model's output dimension and every class occurs.
    if train_view.true_labels.iter().all(|&y| y < out_dim) {
        let probs = result.model.forward(&train_view.features)?;
        if let Ok(c) = confusion_matrix(&probs.view(), &train_view.true_labels) {
            report.confusion_base = Some(matrix_rows(&c.matrix));
            if let Some(q) = &result.q {
                if let Ok(cc) = combined_confusion(q, &c) {
                    report.confusion_combined = Some(matrix_rows(&cc.matrix));
                }
            }
        }
    }

    // Inlier detection on the noisy held-out set (outlier mode).
    if let Some(pr_test) = &data.pr_test {
        let probs = result.model.forward(&pr_test.features)?;
        let scores: Vec<f64> = match variant {
            // Confidence that the sample is *not* the extra class.
            Variant::OutlierQ => probs.rows().into_iter().map(|r| 1.0 - r[k]).collect(),
            // Entropy of the softmax as outlier confidence; negate so
            // higher means more inlier.
            _ => probs.rows().into_iter().map(|r| -entropy_score(&r)).collect(),
        };
        report.pr = Some(inlier_pr_curve(&scores, &pr_test.inlier)?);
    }

    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        report,
        model: result.model,
        q: result.q,
        q_star: q_star.map(NoiseMatrix::fixed).transpose()?,
    })
}

/// Max |QC - Q*| with the confusion measured on `data` by `model`.
fn confusion_gap(
    model: &Mlp,
    data: &Dataset,
    q: &NoiseMatrix,
    q_star: &Array2<f64>,
) -> Option<f64> {
    let probs = model.forward(&data.features).ok()?;
    let c = confusion_matrix(&probs.view(), &data.true_labels).ok()?;
    let qc = q.matrix().dot(&c.matrix);
    crate::simplex::max_abs_diff(&qc, q_star).ok()
}

/// Write `report.json`, `model.json`, and the Q matrices for one run.
pub fn write_run_artifacts(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&outcome.report)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    outcome.model.save_json(&dir.join("model.json"))?;
    if let Some(q) = &outcome.q {
        crate::noise::write_q_csv(&dir.join("q.csv"), q)?;
    }
    if let Some(q_star) = &outcome.q_star {
        crate::noise::write_q_csv(&dir.join("qstar.csv"), q_star)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// One row of the sweep summary CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub noise_level: f64,
    pub train_size: usize,
    pub variant: Variant,
    pub test_error: Option<f64>,
    pub q_recovery: Option<f64>,
    pub ap: Option<f64>,
    pub seed: u64,
}

/// All runs of one sweep cell (every variant x every seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub noise_level: f64,
    pub train_size: usize,
    pub level_index: usize,
    pub size_index: usize,
    pub reports: Vec<RunReport>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellReport>,
    pub summary: Vec<SummaryRow>,
}

/// Variants a sweep compares under the given noise mode.
pub fn sweep_variants(mode: NoiseMode) -> &'static [Variant] {
    match mode {
        NoiseMode::None => &[Variant::None],
        NoiseMode::FlipRandom | NoiseMode::FlipAdversarial => {
            &[Variant::None, Variant::LearnedQ, Variant::TrueQ]
        }
        NoiseMode::Outlier => &[Variant::None, Variant::OutlierQ],
    }
}

/// Seed for the run at grid cell `(level_index, size_index)`, seed slot
/// `seed_index`. The origin cell of a single-seed sweep reuses the master
/// seed, so a 1x1 sweep reproduces `run_single` exactly.
pub fn cell_seed(master: u64, level_index: usize, size_index: usize, seed_index: usize) -> u64 {
    master
        .wrapping_add(level_index as u64 * 1_000_003)
        .wrapping_add(size_index as u64 * 1_009)
        .wrapping_add(seed_index as u64)
}

fn cell_config(
    cfg: &ExperimentConfig,
    noise_level: f64,
    train_size: usize,
) -> Result<ExperimentConfig> {
    let mut cell = cfg.clone();
    cell.sweep = None;
    cell.dataset.train_size = train_size;
    match cfg.noise.mode {
        NoiseMode::None => {}
        NoiseMode::FlipRandom | NoiseMode::FlipAdversarial => {
            cell.noise.level = noise_level;
        }
        NoiseMode::Outlier => {
            // Interpret the grid's noise level as the outlier fraction of
            // the final training set, preserving the configured share of
            // explicitly labeled outliers.
            let base_total = cfg.noise.outliers + cfg.noise.known_outliers;
            if base_total == 0 {
                return Err(Error::invalid(
                    "outlier sweep needs baseline outlier counts to set the known share",
                ));
            }
            let known_share = cfg.noise.known_outliers as f64 / base_total as f64;
            if noise_level >= 1.0 {
                return Err(Error::invalid("outlier fraction must be below 1"));
            }
            let total =
                ((noise_level / (1.0 - noise_level)) * train_size as f64).round() as usize;
            let known = (known_share * total as f64).round() as usize;
            cell.noise.known_outliers = known;
            cell.noise.outliers = total - known;
        }
    }
    Ok(cell)
}

/// Run the full noise-level x training-size grid. Each cell trains every
/// applicable variant for `num_seeds` seeds; a diverged cell is recorded
/// and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::invalid("config has no sweep section"))?;
    let variants = sweep_variants(cfg.noise.mode);

    let mut cell_specs = Vec::new();
    for (li, &level) in sweep.noise_levels.iter().enumerate() {
        for (si, &size) in sweep.train_sizes.iter().enumerate() {
            cell_specs.push((li, si, level, size));
        }
    }

    let cells: Vec<CellReport> = cell_specs
        .par_iter()
        .map(|&(li, si, level, size)| -> Result<CellReport> {
            let cell_cfg = cell_config(cfg, level, size)?;
            let mut reports = Vec::new();
            for seed_index in 0..cfg.num_seeds {
                let seed = cell_seed(cfg.seed, li, si, seed_index);
                for &variant in variants {
                    let outcome = run_with_seed(&cell_cfg, seed, variant)?;
                    reports.push(outcome.report);
                }
            }
            Ok(CellReport {
                noise_level: level,
                train_size: size,
                level_index: li,
                size_index: si,
                reports,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::new();
    for cell in &cells {
        for report in &cell.reports {
            summary.push(SummaryRow {
                noise_level: cell.noise_level,
                train_size: cell.train_size,
                variant: report.variant,
                test_error: report.test_error,
                q_recovery: report.q_recovery_error,
                ap: report.pr.as_ref().map(|pr| pr.average_precision),
                seed: report.seed,
            });
        }
    }
    Ok(SweepOutcome { cells, summary })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Write one `cell_<i>_<j>.json` per grid cell plus `summary.csv` and the
/// min/median/max aggregate `summary_agg.csv`.
pub fn write_sweep_artifacts(outcome: &SweepOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for cell in &outcome.cells {
        let name = format!("cell_{}_{}.json", cell.level_index, cell.size_index);
        let json = serde_json::to_string_pretty(cell)?;
        std::fs::write(dir.join(name), json + "\n")?;
    }

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "noise_level",
        "train_size",
        "variant",
        "test_error",
        "q_recovery",
        "ap",
        "seed",
    ])?;
    for row in &outcome.summary {
        w.write_record([
            format!("{}", row.noise_level),
            row.train_size.to_string(),
            row.variant.as_str().to_string(),
            fmt_opt(row.test_error),
            fmt_opt(row.q_recovery),
            fmt_opt(row.ap),
            row.seed.to_string(),
        ])?;
    }
    w.flush()?;

    write_aggregate(outcome, &dir.join("summary_agg.csv"))?;
    Ok(())
}

/// Min/median/max of test error and AP across seeds, one row per
/// (cell, variant); stands in for error bars.
fn write_aggregate(outcome: &SweepOutcome, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "noise_level",
        "train_size",
        "variant",
        "test_error_min",
        "test_error_median",
        "test_error_max",
        "ap_min",
        "ap_median",
        "ap_max",
    ])?;
    for cell in &outcome.cells {
        let mut variants: Vec<Variant> = Vec::new();
        for report in &cell.reports {
            if !variants.contains(&report.variant) {
                variants.push(report.variant);
            }
        }
        for variant in variants {
            let errs: Vec<f64> = cell
                .reports
                .iter()
                .filter(|r| r.variant == variant)
                .filter_map(|r| r.test_error)
                .collect();
            let aps: Vec<f64> = cell
                .reports
                .iter()
                .filter(|r| r.variant == variant)
                .filter_map(|r| r.pr.as_ref().map(|pr| pr.average_precision))
                .collect();
            let stats = |mut xs: Vec<f64>| -> (String, String, String) {
                if xs.is_empty() {
                    return (String::new(), String::new(), String::new());
                }
                xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                (
                    format!("{}", xs[0]),
                    format!("{}", xs[xs.len() / 2]),
                    format!("{}", xs[xs.len() - 1]),
                )
            };
            let (emin, emed, emax) = stats(errs);
            let (amin, amed, amax) = stats(aps);
            w.write_record([
                format!("{}", cell.noise_level),
                cell.train_size.to_string(),
                variant.as_str().to_string(),
                emin,
                emed,
                emax,
                amin,
                amed,
                amax,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
