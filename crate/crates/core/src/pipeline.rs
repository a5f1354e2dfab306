//! Training and evaluation of the four compared methods: time-gated
//! reflection intensity, logistic regression, the DNN on raw waveforms,
//! and the quantum feature extractor feeding the same DNN head.
//!
//! The SGD models share one recipe: minibatch SGD with per-epoch seeded
//! shuffling, the step-decayed learning rate, binary cross-entropy, and
//! best-validation checkpointing. For the hybrid model the head's input
//! gradient chains into the adjoint circuit gradient so the 28 rotation
//! angles and the classifier train jointly (a flag can freeze the angles
//! for the sequential reading).
//!
//! Per-sample circuit work inside a batch may run on a rayon pool; results
//! are collected in sample order and reduced sequentially, so metrics are
//! bit-identical for every thread count.

use crate::matrix::Matrix;
use crate::nn::{bce_loss, lr_at, sgd_step, Mlp, MlpGrads, Mode, NnError, TrainConfig};
use crate::thz::{Dataset, Split, ThzError};
use crate::vqc::{
    build_layout, grad_adjoint, vqc_forward, AnsatzLayout, FeatureSpec, VqcError, VqcParams,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("surface {surface} has a single class in the train split")]
    DegenerateClass { surface: usize },
    #[error("pixel ({0}, {1}) has no test-split waveforms")]
    PixelWithoutTestSamples(usize, usize),
    #[error("checkpoint inconsistent with its declared model kind: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Vqc(#[from] VqcError),
    #[error(transparent)]
    Thz(#[from] ThzError),
}

/// The four methods of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "intensity")]
    Intensity,
    #[serde(rename = "logreg")]
    LogReg,
    #[serde(rename = "dnn")]
    Dnn,
    #[serde(rename = "qml-dnn")]
    QmlDnn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Intensity => "intensity",
            ModelKind::LogReg => "logreg",
            ModelKind::Dnn => "dnn",
            ModelKind::QmlDnn => "qml-dnn",
        })
    }
}

/// One training epoch's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_mean_acc: f64,
}

/// Per-surface and aggregate accuracy, plus the training history when the
/// metrics come from a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_surface_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub exact_match_rate: f64,
    pub history: Vec<HistoryEntry>,
}

/// Trainable state of the quantum feature extractor, as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqcState {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub feature_len: usize,
    pub feature_scale: f64,
    pub thetas: Vec<f64>,
}

impl VqcState {
    pub fn layout(&self) -> Result<AnsatzLayout, VqcError> {
        build_layout(self.n_qubits, self.n_layers)
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            feature_len: self.feature_len,
            scale: self.feature_scale,
        }
    }
}

/// Fitted per-surface gate windows (time bounds) and energy thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub windows: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

/// Everything needed to reproduce a trained model's predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub seed: u64,
    pub best_epoch: usize,
    pub train_config: TrainConfig,
    pub vqc: Option<VqcState>,
    pub mlp: Option<Mlp>,
    pub intensity: Option<IntensityModel>,
}

impl Checkpoint {
    /// Checks that the stored sections match the declared kind and that
    /// every tensor has a consistent shape.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::InvalidCheckpoint(msg));
        let expect = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                fail(msg.to_string())
            }
        };
        match self.model_kind {
            ModelKind::Intensity => {
                expect(self.intensity.is_some(), "intensity model missing")?;
                expect(self.vqc.is_none(), "unexpected vqc section")?;
                expect(self.mlp.is_none(), "unexpected mlp section")?;
                let m = self.intensity.as_ref().unwrap();
                expect(
                    m.windows.len() == m.thresholds.len() && !m.windows.is_empty(),
                    "window/threshold count mismatch",
                )?;
            }
            ModelKind::LogReg => {
                expect(self.mlp.is_some(), "classifier missing")?;
                expect(self.vqc.is_none(), "unexpected vqc section")?;
                expect(self.intensity.is_none(), "unexpected intensity section")?;
                let mlp = self.mlp.as_ref().unwrap();
                mlp.validate_shapes()?;
                expect(mlp.dims().len() == 2, "logreg must be a single linear layer")?;
            }
            ModelKind::Dnn => {
                expect(self.mlp.is_some(), "classifier missing")?;
                expect(self.vqc.is_none(), "unexpected vqc section")?;
                expect(self.intensity.is_none(), "unexpected intensity section")?;
                self.mlp.as_ref().unwrap().validate_shapes()?;
            }
            ModelKind::QmlDnn => {
                expect(self.vqc.is_some(), "vqc section missing")?;
                expect(self.mlp.is_some(), "classifier missing")?;
                expect(self.intensity.is_none(), "unexpected intensity section")?;
                let vqc = self.vqc.as_ref().unwrap();
                let layout = vqc
                    .layout()
                    .map_err(|e| PipelineError::InvalidCheckpoint(e.to_string()))?;
                if vqc.thetas.len() != layout.param_count() {
                    return fail(format!(
                        "{} thetas stored, layout expects {}",
                        vqc.thetas.len(),
                        layout.param_count()
                    ));
                }
                if vqc.feature_len > layout.dim() {
                    return fail("feature length exceeds register".into());
                }
                let mlp = self.mlp.as_ref().unwrap();
                mlp.validate_shapes()?;
                if mlp.input_dim() != vqc.feature_len {
                    return fail(format!(
                        "classifier expects {} inputs, vqc produces {}",
                        mlp.input_dim(),
                        vqc.feature_len
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Knobs outside the shared training recipe.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Keep the rotation angles fixed and train only the head.
    pub freeze_vqc: bool,
    /// Worker threads for per-sample circuit evaluation; 1 means inline.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            freeze_vqc: false,
            threads: 1,
        }
    }
}

// seed stream tags
const TAG_SHUFFLE: u64 = 0x50;
const TAG_MLP_INIT: u64 = 0x51;
const TAG_THETA_INIT: u64 = 0x52;

const N_QUBITS: usize = 8;
const N_ANSATZ_LAYERS: usize = 2;
const N_LINEAR: usize = 5;

fn make_pool(threads: usize) -> Option<rayon::ThreadPool> {
    if threads <= 1 {
        None
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
    }
}

/// Applies `f` to `0..n`, preserving index order in the output so later
/// reductions are independent of the thread count.
fn map_ordered<T, F>(pool: Option<&rayon::ThreadPool>, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }),
        None => (0..n).map(f).collect(),
    }
}

fn labels_matrix(dataset: &Dataset, indices: &[usize]) -> Matrix {
    let n_surfaces = dataset.config.n_surfaces();
    let mut m = Matrix::zeros(indices.len(), n_surfaces);
    for (row, &i) in indices.iter().enumerate() {
        let targets = dataset.samples[i].label.to_targets(n_surfaces);
        m.row_mut(row).copy_from_slice(&targets);
    }
    m
}

fn waveform_matrix(dataset: &Dataset, indices: &[usize]) -> Matrix {
    let width = dataset.config.samples_per_waveform;
    let mut m = Matrix::zeros(indices.len(), width);
    for (row, &i) in indices.iter().enumerate() {
        m.row_mut(row).copy_from_slice(&dataset.samples[i].waveform);
    }
    m
}

/// Accuracy metrics from raw scores against 0/1 labels; scores threshold
/// at 0.5.
pub fn metrics_from_scores(scores: &Matrix, labels: &Matrix) -> Metrics {
    assert_eq!(scores.rows(), labels.rows());
    assert_eq!(scores.cols(), labels.cols());
    let (rows, cols) = (scores.rows(), scores.cols());
    let mut correct = vec![0usize; cols];
    let mut exact = 0usize;
    for i in 0..rows {
        let mut all = true;
        for j in 0..cols {
            let bit = scores[(i, j)] > 0.5;
            let truth = labels[(i, j)] > 0.5;
            if bit == truth {
                correct[j] += 1;
            } else {
                all = false;
            }
        }
        if all {
            exact += 1;
        }
    }
    let per_surface: Vec<f64> = correct.iter().map(|&c| c as f64 / rows as f64).collect();
    let mean = per_surface.iter().sum::<f64>() / cols as f64;
    Metrics {
        per_surface_accuracy: per_surface,
        mean_accuracy: mean,
        exact_match_rate: exact as f64 / rows as f64,
        history: Vec::new(),
    }
}

/// The hybrid model: quantum feature extraction plus the classifier head,
/// trained jointly through the chained gradient.
pub struct HybridQml {
    pub layout: AnsatzLayout,
    pub params: VqcParams,
    pub feature: FeatureSpec,
    pub head: Mlp,
}

impl HybridQml {
    /// Fresh hybrid with seeded angle and weight initialization.
    pub fn init(
        n_qubits: usize,
        n_layers: usize,
        n_linear: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let layout = build_layout(n_qubits, n_layers)?;
        let feature = FeatureSpec::default_for(&layout);
        let params = VqcParams::random(&layout, crate::rng::mix_seed(seed, &[TAG_THETA_INIT]));
        let mut head = Mlp::init(
            feature.feature_len,
            output_dim,
            n_linear,
            crate::rng::mix_seed(seed, &[TAG_MLP_INIT]),
        )?;
        head.set_mode(Mode::Train);
        Ok(HybridQml {
            layout,
            params,
            feature,
            head,
        })
    }

    /// Feature matrix for a set of waveforms under the current angles.
    pub fn features(
        &self,
        waveforms: &[&[f64]],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Matrix, PipelineError> {
        let rows = map_ordered(pool, waveforms.len(), |i| {
            vqc_forward(&self.layout, &self.params, waveforms[i], &self.feature)
                .map(|fv| fv.values)
        });
        let mut m = Matrix::zeros(waveforms.len(), self.feature.feature_len);
        for (row, values) in rows.into_iter().enumerate() {
            m.row_mut(row).copy_from_slice(&values?);
        }
        Ok(m)
    }

    /// Train-mode loss on a batch; used by finite-difference checks.
    pub fn loss(
        &mut self,
        waveforms: &[&[f64]],
        labels: &Matrix,
    ) -> Result<f64, PipelineError> {
        let x = self.features(waveforms, None)?;
        self.head.set_mode(Mode::Train);
        let (scores, _) = self.head.forward(&x)?;
        Ok(bce_loss(&scores, labels)?)
    }

    /// Joint gradient of the batch loss: the head's parameter gradients and
    /// the chained gradient for every rotation angle. Per-sample adjoint
    /// sweeps are summed in sample order.
    pub fn batch_grad(
        &mut self,
        waveforms: &[&[f64]],
        labels: &Matrix,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<(f64, Vec<f64>, MlpGrads), PipelineError> {
        let x = self.features(waveforms, pool)?;
        self.head.set_mode(Mode::Train);
        let (scores, cache) = self.head.forward(&x)?;
        let loss = bce_loss(&scores, labels)?;
        let (head_grads, dx) = self.head.backward(&cache, labels)?;

        let per_sample = map_ordered(pool, waveforms.len(), |i| {
            grad_adjoint(
                &self.layout,
                &self.params,
                waveforms[i],
                &self.feature,
                dx.row(i),
            )
        });
        let mut theta_grad = vec![0.0; self.layout.param_count()];
        for g in per_sample {
            for (acc, v) in theta_grad.iter_mut().zip(g?) {
                *acc += v;
            }
        }
        Ok((loss, theta_grad, head_grads))
    }

    pub fn sgd_update(
        &mut self,
        theta_grad: &[f64],
        head_grads: &MlpGrads,
        lr: f64,
        freeze_vqc: bool,
    ) -> Result<(), PipelineError> {
        self.head.apply_sgd(head_grads, lr)?;
        if !freeze_vqc {
            sgd_step(&mut self.params.thetas, theta_grad, lr)?;
        }
        Ok(())
    }
}

/// Fits the per-surface gate windows and energy thresholds on the train
/// split: window `tau_s +- pulse_width`, feature `sum y^2` over the window,
/// threshold the midpoint of the two class means.
pub fn fit_intensity(dataset: &Dataset) -> Result<IntensityModel, PipelineError> {
    let train = dataset.indices_for(Split::Train);
    if train.is_empty() {
        return Err(PipelineError::EmptySplit(Split::Train));
    }
    let cfg = &dataset.config;
    let mut windows = Vec::with_capacity(cfg.n_surfaces());
    let mut thresholds = Vec::with_capacity(cfg.n_surfaces());
    for surface in 0..cfg.n_surfaces() {
        let center = cfg.surface_delays[surface];
        let window = (center - cfg.pulse_width, center + cfg.pulse_width);
        let (mut sum, mut count) = ([0.0f64; 2], [0usize; 2]);
        for &i in &train {
            let sample = &dataset.samples[i];
            let energy = gated_energy(&sample.waveform, cfg, window);
            let class = sample.label.bit(surface) as usize;
            sum[class] += energy;
            count[class] += 1;
        }
        if count[0] == 0 || count[1] == 0 {
            return Err(PipelineError::DegenerateClass { surface });
        }
        let blank_mean = sum[0] / count[0] as f64;
        let drawn_mean = sum[1] / count[1] as f64;
        windows.push(window);
        thresholds.push(0.5 * (blank_mean + drawn_mean));
    }
    Ok(IntensityModel { windows, thresholds })
}

fn gated_energy(waveform: &[f64], cfg: &crate::thz::SceneConfig, window: (f64, f64)) -> f64 {
    let grid = cfg.time_grid();
    grid.iter()
        .zip(waveform)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(_, y)| y * y)
        .sum()
}

fn intensity_scores(
    model: &IntensityModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Matrix {
    let n_surfaces = model.windows.len();
    let mut scores = Matrix::zeros(indices.len(), n_surfaces);
    for (row, &i) in indices.iter().enumerate() {
        let waveform = &dataset.samples[i].waveform;
        for s in 0..n_surfaces {
            let energy = gated_energy(waveform, &dataset.config, model.windows[s]);
            scores[(row, s)] = f64::from(energy > model.thresholds[s]);
        }
    }
    scores
}

/// Prediction scores of a checkpointed model on the given samples.
pub fn scores_for(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    indices: &[usize],
    threads: usize,
) -> Result<Matrix, PipelineError> {
    checkpoint.validate()?;
    let pool = make_pool(threads);
    match checkpoint.model_kind {
        ModelKind::Intensity => Ok(intensity_scores(
            checkpoint.intensity.as_ref().unwrap(),
            dataset,
            indices,
        )),
        ModelKind::LogReg | ModelKind::Dnn => {
            let x = waveform_matrix(dataset, indices);
            Ok(checkpoint.mlp.as_ref().unwrap().forward_eval(&x)?)
        }
        ModelKind::QmlDnn => {
            let vqc = checkpoint.vqc.as_ref().unwrap();
            let layout = vqc.layout()?;
            let params = VqcParams {
                thetas: vqc.thetas.clone(),
            };
            let feature = vqc.feature_spec();
            let rows = map_ordered(pool.as_ref(), indices.len(), |row| {
                vqc_forward(
                    &layout,
                    &params,
                    &dataset.samples[indices[row]].waveform,
                    &feature,
                )
                .map(|fv| fv.values)
            });
            let mut x = Matrix::zeros(indices.len(), feature.feature_len);
            for (row, values) in rows.into_iter().enumerate() {
                x.row_mut(row).copy_from_slice(&values?);
            }
            Ok(checkpoint.mlp.as_ref().unwrap().forward_eval(&x)?)
        }
    }
}

/// Accuracy of a checkpoint on one split.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    split: Split,
) -> Result<Metrics, PipelineError> {
    evaluate_with_threads(checkpoint, dataset, split, 1)
}

pub fn evaluate_with_threads(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    split: Split,
    threads: usize,
) -> Result<Metrics, PipelineError> {
    let indices = dataset.indices_for(split);
    if indices.is_empty() {
        return Err(PipelineError::EmptySplit(split));
    }
    let scores = scores_for(checkpoint, dataset, &indices, threads)?;
    let labels = labels_matrix(dataset, &indices);
    Ok(metrics_from_scores(&scores, &labels))
}

/// Per-surface score maps over the pixel grid: the mean predicted score of
/// each pixel's test-split waveforms.
pub fn reconstruct_images(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let test = dataset.indices_for(Split::Test);
    if test.is_empty() {
        return Err(PipelineError::EmptySplit(Split::Test));
    }
    let scores = scores_for(checkpoint, dataset, &test, 1)?;
    let side = dataset.config.pixels_per_side;
    let n_surfaces = dataset.config.n_surfaces();
    let mut sums = vec![vec![0.0f64; side * side]; n_surfaces];
    let mut counts = vec![0usize; side * side];
    for (row, &i) in test.iter().enumerate() {
        let (pr, pc) = dataset.samples[i].pixel;
        let pixel = pr * side + pc;
        counts[pixel] += 1;
        for s in 0..n_surfaces {
            sums[s][pixel] += scores[(row, s)];
        }
    }
    for (pixel, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(PipelineError::PixelWithoutTestSamples(
                pixel / side,
                pixel % side,
            ));
        }
        for map in sums.iter_mut() {
            map[pixel] /= count as f64;
        }
    }
    Ok(sums)
}

enum Trainee {
    Raw(Mlp),
    Hybrid(HybridQml),
}

impl Trainee {
    fn valid_scores(
        &mut self,
        dataset: &Dataset,
        indices: &[usize],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Matrix, PipelineError> {
        match self {
            Trainee::Raw(mlp) => {
                let x = waveform_matrix(dataset, indices);
                Ok(mlp.forward_eval(&x)?)
            }
            Trainee::Hybrid(h) => {
                let waveforms: Vec<&[f64]> = indices
                    .iter()
                    .map(|&i| dataset.samples[i].waveform.as_slice())
                    .collect();
                let x = h.features(&waveforms, pool)?;
                Ok(h.head.forward_eval(&x)?)
            }
        }
    }
}

/// Trains one model kind on the dataset's train split, recording the
/// validation accuracy every epoch and keeping the best-validation
/// parameters. Returns the checkpoint and metrics of the best parameters
/// on the validation split (with the full history attached).
pub fn train(
    kind: ModelKind,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(Checkpoint, Metrics), PipelineError> {
    config.validate()?;
    let train_idx = dataset.indices_for(Split::Train);
    if train_idx.is_empty() {
        return Err(PipelineError::EmptySplit(Split::Train));
    }
    let valid_idx = dataset.indices_for(Split::Valid);
    if valid_idx.is_empty() {
        return Err(PipelineError::EmptySplit(Split::Valid));
    }

    if kind == ModelKind::Intensity {
        let model = fit_intensity(dataset)?;
        let checkpoint = Checkpoint {
            model_kind: kind,
            seed: config.seed,
            best_epoch: 0,
            train_config: config.clone(),
            vqc: None,
            mlp: None,
            intensity: Some(model),
        };
        let mut metrics = evaluate(&checkpoint, dataset, Split::Valid)?;
        metrics.history = Vec::new();
        return Ok((checkpoint, metrics));
    }

    let waveform_len = dataset.config.samples_per_waveform;
    let n_surfaces = dataset.config.n_surfaces();
    let mlp_seed = crate::rng::mix_seed(config.seed, &[TAG_MLP_INIT]);
    let mut trainee = match kind {
        ModelKind::LogReg => Trainee::Raw(Mlp::init(waveform_len, n_surfaces, 1, mlp_seed)?),
        ModelKind::Dnn => Trainee::Raw(Mlp::init(waveform_len, n_surfaces, N_LINEAR, mlp_seed)?),
        ModelKind::QmlDnn => Trainee::Hybrid(HybridQml::init(
            N_QUBITS,
            N_ANSATZ_LAYERS,
            N_LINEAR,
            n_surfaces,
            config.seed,
        )?),
        ModelKind::Intensity => unreachable!(),
    };

    let pool = make_pool(options.threads);
    let mut shuffle_rng = crate::rng::seeded_rng(config.seed, &[TAG_SHUFFLE]);
    let mut order: Vec<usize> = train_idx.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            // batch statistics need at least two samples
            if batch.len() < 2 {
                continue;
            }
            let labels = labels_matrix(dataset, batch);
            let loss = match &mut trainee {
                Trainee::Raw(mlp) => {
                    let x = waveform_matrix(dataset, batch);
                    mlp.set_mode(Mode::Train);
                    let (scores, cache) = mlp.forward(&x)?;
                    let loss = bce_loss(&scores, &labels)?;
                    let (grads, _) = mlp.backward(&cache, &labels)?;
                    mlp.apply_sgd(&grads, lr)?;
                    loss
                }
                Trainee::Hybrid(h) => {
                    let waveforms: Vec<&[f64]> = batch
                        .iter()
                        .map(|&i| dataset.samples[i].waveform.as_slice())
                        .collect();
                    let (loss, theta_grad, head_grads) =
                        h.batch_grad(&waveforms, &labels, pool.as_ref())?;
                    h.sgd_update(&theta_grad, &head_grads, lr, options.freeze_vqc)?;
                    loss
                }
            };
            loss_sum += loss * batch.len() as f64;
            loss_count += batch.len();
        }
        let train_loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        };

        let valid_scores = trainee.valid_scores(dataset, &valid_idx, pool.as_ref())?;
        let valid_labels = labels_matrix(dataset, &valid_idx);
        let valid_metrics = metrics_from_scores(&valid_scores, &valid_labels);
        let valid_acc = valid_metrics.mean_accuracy;
        history.push(HistoryEntry {
            epoch,
            lr,
            train_loss,
            valid_mean_acc: valid_acc,
        });

        let improved = best.as_ref().map_or(true, |(acc, _, _)| valid_acc > *acc);
        if improved {
            best = Some((valid_acc, epoch, snapshot(kind, config, &trainee)));
        }
    }

    let (_, best_epoch, mut checkpoint) = best.expect("at least one epoch ran");
    checkpoint.best_epoch = best_epoch;
    let mut metrics = evaluate(&checkpoint, dataset, Split::Valid)?;
    metrics.history = history;
    Ok((checkpoint, metrics))
}

fn snapshot(kind: ModelKind, config: &TrainConfig, trainee: &Trainee) -> Checkpoint {
    let (vqc, mlp) = match trainee {
        Trainee::Raw(mlp) => {
            let mut m = mlp.clone();
            m.set_mode(Mode::Eval);
            (None, Some(m))
        }
        Trainee::Hybrid(h) => {
            let mut m = h.head.clone();
            m.set_mode(Mode::Eval);
            (
                Some(VqcState {
                    n_qubits: h.layout.n_qubits(),
                    n_layers: h.layout.n_layers(),
                    feature_len: h.feature.feature_len,
                    feature_scale: h.feature.scale,
                    thetas: h.params.thetas.clone(),
                }),
                Some(m),
            )
        }
    };
    Checkpoint {
        model_kind: kind,
        seed: config.seed,
        best_epoch: 0,
        train_config: config.clone(),
        vqc,
        mlp,
        intensity: None,
    }
}

/// Joint-gradient finite-difference check: builds a small hybrid model,
/// computes the analytic gradient of the batch loss for every rotation
/// angle and every head parameter, and compares each against central
/// finite differences with step `eps` on a 4-sample batch. Returns the
/// maximum relative error.
pub fn hybrid_fd_check(seed: u64, eps: f64) -> Result<f64, PipelineError> {
    use rand::Rng;
    let mut model = HybridQml::init(4, 2, 3, 2, seed)?;
    let mut rng = crate::rng::seeded_rng(seed, &[0xFD]);
    let waveforms: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = waveforms.iter().map(Vec::as_slice).collect();
    let labels = Matrix::from_vec(
        4,
        2,
        (0..8).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
    );

    let (_, theta_grad, head_grads) = model.batch_grad(&refs, &labels, None)?;
    let head_flat = model.head.grads_vec(&head_grads);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut max_rel = 0.0f64;

    for k in 0..model.params.thetas.len() {
        let orig = model.params.thetas[k];
        model.params.thetas[k] = orig + eps;
        let plus = model.loss(&refs, &labels)?;
        model.params.thetas[k] = orig - eps;
        let minus = model.loss(&refs, &labels)?;
        model.params.thetas[k] = orig;
        max_rel = max_rel.max(rel(theta_grad[k], (plus - minus) / (2.0 * eps)));
    }
    for idx in 0..model.head.param_count() {
        model.head.nudge_param(idx, eps);
        let plus = model.loss(&refs, &labels)?;
        model.head.nudge_param(idx, -2.0 * eps);
        let minus = model.loss(&refs, &labels)?;
        model.head.nudge_param(idx, eps);
        max_rel = max_rel.max(rel(head_flat[idx], (plus - minus) / (2.0 * eps)));
    }
    Ok(max_rel)
}

/// First epoch whose validation accuracy reaches `fraction` of the final
/// epoch's accuracy; the convergence-speed measure used when comparing the
/// hybrid model against the plain DNN.
pub fn epochs_to_fraction_of_final(history: &[HistoryEntry], fraction: f64) -> Option<usize> {
    let final_acc = history.last()?.valid_mean_acc;
    let target = fraction * final_acc;
    history
        .iter()
        .find(|h| h.valid_mean_acc >= target)
        .map(|h| h.epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thz::{synth_dataset, SceneConfig};

    fn tiny_config(seed: u64) -> SceneConfig {
        SceneConfig {
            pixels_per_side: 4,
            scans_per_pixel_side: 4,
            seed,
            ..SceneConfig::default()
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn intensity_is_perfect_without_noise_or_shadow() {
        let cfg = SceneConfig {
            depth_jitter_std: 0.0,
            noise_std: 0.0,
            transmit_drawn: 0.95, // equal to transmit_blank: shadow-free
            ..SceneConfig::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        let (ckpt, _) = train(ModelKind::Intensity, &ds, &tiny_train_config(), &TrainOptions::default())
            .unwrap();
        let metrics = evaluate(&ckpt, &ds, Split::Test).unwrap();
        for (s, acc) in metrics.per_surface_accuracy.iter().enumerate() {
            assert_eq!(*acc, 1.0, "surface {s} below 100%");
        }
        assert_eq!(metrics.exact_match_rate, 1.0);
    }

    #[test]
    fn intensity_degrades_on_deep_surfaces_with_shadow() {
        let ds = synth_dataset(&SceneConfig::default()).unwrap();
        let (ckpt, _) = train(ModelKind::Intensity, &ds, &tiny_train_config(), &TrainOptions::default())
            .unwrap();
        let m = evaluate(&ckpt, &ds, Split::Test).unwrap();
        let shallow = (m.per_surface_accuracy[0] + m.per_surface_accuracy[1]) / 2.0;
        let deep = (m.per_surface_accuracy[4] + m.per_surface_accuracy[5]) / 2.0;
        assert!(deep < shallow, "deep {deep} vs shallow {shallow}");
    }

    #[test]
    fn intensity_rejects_single_class_surfaces() {
        let cfg = tiny_config(3);
        let scene = {
            let mut maps = vec![vec![0u8; 16]; 6];
            maps[1] = vec![1; 16];
            for (s, map) in maps.iter_mut().enumerate().skip(2) {
                for (i, v) in map.iter_mut().enumerate() {
                    *v = ((i + s) % 2) as u8;
                }
            }
            crate::thz::Scene::from_bitmaps(maps).unwrap()
        };
        let ds = crate::thz::synth_dataset_with_scene(&cfg, scene).unwrap();
        match fit_intensity(&ds) {
            Err(PipelineError::DegenerateClass { surface }) => assert!(surface < 2),
            other => panic!("expected DegenerateClass, got {other:?}"),
        }
    }

    #[test]
    fn constant_zero_waveforms_hit_the_tie_threshold() {
        let mut ds = synth_dataset(&tiny_config(2)).unwrap();
        for s in &mut ds.samples {
            for y in &mut s.waveform {
                *y = 0.0;
            }
        }
        // both classes present per surface, so the fit succeeds with a
        // zero threshold and every prediction is "blank"
        let model = fit_intensity(&ds).unwrap();
        assert!(model.thresholds.iter().all(|&t| t == 0.0));
        let ckpt = Checkpoint {
            model_kind: ModelKind::Intensity,
            seed: 0,
            best_epoch: 0,
            train_config: TrainConfig::default(),
            vqc: None,
            mlp: None,
            intensity: Some(model),
        };
        let m = evaluate(&ckpt, &ds, Split::Test).unwrap();
        for (s, acc) in m.per_surface_accuracy.iter().enumerate() {
            let blank_fraction = 1.0
                - ds.scene.bitmap(s).iter().map(|&b| b as f64).sum::<f64>()
                    / ds.scene.bitmap(s).len() as f64;
            assert!(
                (acc - blank_fraction).abs() < 0.2,
                "surface {s}: accuracy {acc} far from blank fraction {blank_fraction}"
            );
        }
    }

    #[test]
    fn perfect_scores_give_perfect_metrics() {
        let labels = Matrix::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let metrics = metrics_from_scores(&labels, &labels);
        assert_eq!(metrics.mean_accuracy, 1.0);
        assert_eq!(metrics.exact_match_rate, 1.0);
    }

    #[test]
    fn random_scores_sit_near_half_accuracy() {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(11, &[0x77]);
        let n = 2000;
        let scores = Matrix::from_vec(
            n,
            6,
            (0..n * 6).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let labels = Matrix::from_vec(
            n,
            6,
            (0..n * 6).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
        );
        let metrics = metrics_from_scores(&scores, &labels);
        assert!((metrics.mean_accuracy - 0.5).abs() < 0.03);
    }

    #[test]
    fn metrics_invariants_hold() {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(3, &[0x78]);
        let n = 200;
        let scores = Matrix::from_vec(
            n,
            6,
            (0..n * 6).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let labels = Matrix::from_vec(
            n,
            6,
            (0..n * 6).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
        );
        let m = metrics_from_scores(&scores, &labels);
        let mean: f64 = m.per_surface_accuracy.iter().sum::<f64>() / 6.0;
        assert!((m.mean_accuracy - mean).abs() < 1e-15);
        let min = m.per_surface_accuracy.iter().cloned().fold(1.0, f64::min);
        assert!(m.exact_match_rate <= min + 1e-15);
    }

    #[test]
    fn training_history_follows_the_schedule() {
        let ds = synth_dataset(&tiny_config(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 16,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, metrics) = train(ModelKind::LogReg, &ds, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(metrics.history.len(), 12);
        for (e, h) in metrics.history.iter().enumerate() {
            assert_eq!(h.epoch, e);
            assert_eq!(h.lr, lr_at(&cfg, e));
        }
        assert_eq!(metrics.history[0].lr, 5.0);
        assert_eq!(metrics.history[10].lr, 2.5);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = synth_dataset(&tiny_config(4)).unwrap();
        let cfg = tiny_train_config();
        let opts = TrainOptions::default();
        let (a, ma) = train(ModelKind::LogReg, &ds, &cfg, &opts).unwrap();
        let (b, mb) = train(ModelKind::LogReg, &ds, &cfg, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.history, mb.history);
    }

    #[test]
    fn hybrid_training_is_deterministic_across_thread_counts() {
        let ds = synth_dataset(&tiny_config(6)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let single = train(
            ModelKind::QmlDnn,
            &ds,
            &cfg,
            &TrainOptions { freeze_vqc: false, threads: 1 },
        )
        .unwrap();
        let multi = train(
            ModelKind::QmlDnn,
            &ds,
            &cfg,
            &TrainOptions { freeze_vqc: false, threads: 4 },
        )
        .unwrap();
        assert_eq!(single.0, multi.0);
        assert_eq!(single.1.history, multi.1.history);
    }

    #[test]
    fn freezing_the_vqc_keeps_angles_fixed() {
        let ds = synth_dataset(&tiny_config(7)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let (ckpt, _) = train(
            ModelKind::QmlDnn,
            &ds,
            &cfg,
            &TrainOptions { freeze_vqc: true, threads: 1 },
        )
        .unwrap();
        let layout = build_layout(N_QUBITS, N_ANSATZ_LAYERS).unwrap();
        let init = VqcParams::random(&layout, crate::rng::mix_seed(cfg.seed, &[TAG_THETA_INIT]));
        assert_eq!(ckpt.vqc.unwrap().thetas, init.thetas);

        let (ckpt2, _) = train(ModelKind::QmlDnn, &ds, &cfg, &TrainOptions::default()).unwrap();
        assert_ne!(ckpt2.vqc.unwrap().thetas, init.thetas);
    }

    #[test]
    fn qml_parameter_budget_matches_module_counts() {
        let h = HybridQml::init(8, 2, 5, 6, 0).unwrap();
        assert_eq!(h.layout.param_count(), 28);
        assert_eq!(h.head.param_count(), 26_101);
    }

    #[test]
    fn checkpoint_kind_section_consistency() {
        let ds = synth_dataset(&tiny_config(8)).unwrap();
        let (mut ckpt, _) =
            train(ModelKind::Dnn, &ds, &tiny_train_config(), &TrainOptions::default()).unwrap();
        ckpt.validate().unwrap();
        // a dnn checkpoint relabelled as qml-dnn has no vqc section
        ckpt.model_kind = ModelKind::QmlDnn;
        assert!(matches!(
            ckpt.validate(),
            Err(PipelineError::InvalidCheckpoint(_))
        ));
    }

    #[test]
    fn reconstruction_of_perfect_and_constant_classifiers() {
        // intensity on a clean shadow-free dataset predicts the scene
        let clean = SceneConfig {
            depth_jitter_std: 0.0,
            noise_std: 0.0,
            transmit_drawn: 0.95,
            pixels_per_side: 4,
            scans_per_pixel_side: 4,
            seed: 9,
            ..SceneConfig::default()
        };
        let clean_ds = synth_dataset(&clean).unwrap();
        let (ckpt, _) =
            train(ModelKind::Intensity, &clean_ds, &tiny_train_config(), &TrainOptions::default())
                .unwrap();
        let maps = reconstruct_images(&ckpt, &clean_ds).unwrap();
        for (s, map) in maps.iter().enumerate() {
            for (pixel, &score) in map.iter().enumerate() {
                assert_eq!(score, f64::from(clean_ds.scene.bit(s, pixel)), "surface {s} pixel {pixel}");
            }
        }

        // an all-zero logreg scores a constant 0.5 -> uniform gray maps
        let mut zero_head = Mlp::init(clean.samples_per_waveform, 6, 1, 0).unwrap();
        zero_head
            .set_params_vec(&vec![0.0; zero_head.param_count()])
            .unwrap();
        let gray = Checkpoint {
            model_kind: ModelKind::LogReg,
            seed: 0,
            best_epoch: 0,
            train_config: TrainConfig::default(),
            vqc: None,
            mlp: Some(zero_head),
            intensity: None,
        };
        for map in reconstruct_images(&gray, &clean_ds).unwrap() {
            for &score in &map {
                assert!((score - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn evaluate_rejects_missing_split() {
        let ds = synth_dataset(&tiny_config(10)).unwrap();
        let (ckpt, _) =
            train(ModelKind::Intensity, &ds, &tiny_train_config(), &TrainOptions::default())
                .unwrap();
        let mut emptied = ds.clone();
        for s in &mut emptied.samples {
            if s.split == Split::Test {
                s.split = Split::Train;
            }
        }
        assert!(matches!(
            evaluate(&ckpt, &emptied, Split::Test),
            Err(PipelineError::EmptySplit(Split::Test))
        ));
    }

    #[test]
    fn convergence_epoch_helper() {
        let mk = |accs: &[f64]| -> Vec<HistoryEntry> {
            accs.iter()
                .enumerate()
                .map(|(e, &a)| HistoryEntry {
                    epoch: e,
                    lr: 1.0,
                    train_loss: 0.0,
                    valid_mean_acc: a,
                })
                .collect()
        };
        let h = mk(&[0.5, 0.97, 0.98, 0.99, 1.0]);
        assert_eq!(epochs_to_fraction_of_final(&h, 0.99), Some(3));
        assert_eq!(epochs_to_fraction_of_final(&h, 0.5), Some(0));
        assert_eq!(epochs_to_fraction_of_final(&[], 0.99), None);
    }
}
