//! Outer optimization of the task encoder.
//!
//! Each outer step samples disjoint train/test index sets, labels them with
//! the current encoder, fits a linear probe on the second space's train rows
//! by unrolled gradient descent and scores the probe's test cross-entropy
//! against the encoder's own test labels, minus `eta` times the entropy of
//! the mean label distribution. The gradient is taken through every place
//! the labels appear: the probe's training targets (across all unrolled
//! steps), the test targets, and the entropy term.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{normalize_rows_in_place, EmbeddingSpace};
use crate::error::{Error, Result};
use crate::evaluation::cross_validation_accuracy;
use crate::inner_solver::{fit_probe, probe_predict, soft_cross_entropy, InnerSettings, InnerTrajectory};
use crate::task_encoder::{
    encode_with, orthonormality_defect, orthonormalize_with_tape, sparsemax_vjp_rows, Labeling, TaskEncoder,
};

/// RNG stream used for split sampling during training.
const SPLIT_STREAM: u64 = 1;
/// RNG stream used for the post-training cross-validation folds.
const CV_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of classes.
    pub k: usize,
    /// Outer iterations.
    pub iters: usize,
    /// Adam step size.
    pub alpha: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Entropy regularization weight.
    pub eta: f64,
    /// Initial sparsemax temperature.
    pub gamma: f64,
    /// Samples drawn per train/test pair.
    pub subset_size: usize,
    pub train_fraction: f64,
    /// Split pairs averaged per outer step.
    pub n_subsets: usize,
    pub clip_norm: f64,
    /// Outer iteration indices at which `alpha` and `gamma` are divided by
    /// `anneal_factor` (before that iteration's update).
    pub anneal_iters: Vec<usize>,
    pub anneal_factor: f64,
    /// Folds for the post-training cross-validation accuracy.
    pub cv_folds: usize,
    pub ridge: f64,
    /// Scale second-space rows to unit length before fitting probes.
    pub normalize_phi2: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 10,
            iters: 1000,
            alpha: 1e-3,
            inner_steps: 300,
            inner_lr: 1e-3,
            eta: 10.0,
            gamma: 0.1,
            subset_size: 10_000,
            train_fraction: 0.9,
            n_subsets: 20,
            clip_norm: 1.0,
            anneal_iters: vec![100, 200],
            anneal_factor: 10.0,
            cv_folds: 20,
            ridge: 0.0,
            normalize_phi2: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 10000-sample subsets split 9000/1000.
    Default,
    /// 5000-sample subsets split 4500/500.
    Stl10Inductive,
    /// 8000-sample subsets split 7200/800.
    Stl10Transductive,
    /// Step sizes 0.1, 100 inner steps, 20000 samples split 14000/6000, no annealing.
    Imagenet,
}

impl Preset {
    pub const NAMES: [&'static str; 4] = ["default", "stl10-inductive", "stl10-transductive", "imagenet"];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "default" | "cifar" => Ok(Preset::Default),
            "stl10-inductive" | "stl10" => Ok(Preset::Stl10Inductive),
            "stl10-transductive" => Ok(Preset::Stl10Transductive),
            "imagenet" => Ok(Preset::Imagenet),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected one of {:?}", Self::NAMES))),
        }
    }

    pub fn config(self) -> TrainConfig {
        let base = TrainConfig::default();
        match self {
            Preset::Default => base,
            Preset::Stl10Inductive => TrainConfig { subset_size: 5000, ..base },
            Preset::Stl10Transductive => TrainConfig { subset_size: 8000, ..base },
            Preset::Imagenet => TrainConfig {
                k: 1000,
                alpha: 0.1,
                inner_lr: 0.1,
                inner_steps: 100,
                subset_size: 20_000,
                train_fraction: 0.7,
                anneal_iters: Vec::new(),
                ..base
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_owned())) };
        check(self.k >= 1, "k must be positive")?;
        check(self.inner_steps >= 1, "inner_steps must be positive")?;
        check(self.inner_lr > 0.0, "inner_lr must be positive")?;
        check(self.alpha > 0.0, "alpha must be positive")?;
        check(self.gamma > 0.0, "gamma must be positive")?;
        check(self.eta >= 0.0, "eta must be non-negative")?;
        check(self.n_subsets >= 1, "n_subsets must be positive")?;
        check(self.clip_norm > 0.0, "clip_norm must be positive")?;
        check(self.anneal_factor > 0.0, "anneal_factor must be positive")?;
        check(self.cv_folds >= 1, "cv_folds must be positive")?;
        check(self.ridge >= 0.0, "ridge must be non-negative")?;
        check(
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            "train_fraction must lie strictly between 0 and 1",
        )?;
        let (tr, te) = split_sizes(self.subset_size, self.train_fraction);
        check(tr >= 1 && te >= 1, "subset too small for a non-empty train and test split")
    }

    pub fn inner_settings(&self) -> InnerSettings {
        InnerSettings { steps: self.inner_steps, lr: self.inner_lr, ridge: self.ridge }
    }

    /// Short stable digest of the serialized config.
    pub fn hash(&self) -> String {
        digest(self)
    }
}

/// First 8 bytes of the SHA-256 of a value's JSON form, hex encoded.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("value serializes");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

fn split_sizes(subset_size: usize, train_fraction: f64) -> (usize, usize) {
    let tr = ((subset_size as f64) * train_fraction).round() as usize;
    let tr = tr.min(subset_size);
    (tr, subset_size - tr)
}

/// Disjoint train and test index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws `subset_size` distinct indices from `0..n` and cuts them into train
/// and test parts.
pub fn sample_splits<R: Rng + ?Sized>(n: usize, subset_size: usize, train_fraction: f64, rng: &mut R) -> Result<Split> {
    if subset_size > n {
        return Err(Error::Config(format!("subset size {subset_size} exceeds dataset size {n}")));
    }
    let (n_train, _) = split_sizes(subset_size, train_fraction);
    let mut drawn = index::sample(rng, n, subset_size).into_vec();
    let test = drawn.split_off(n_train);
    Ok(Split { train: drawn, test })
}

/// Column means of the rows.
pub fn mean_distribution(rows: ArrayView2<'_, f64>) -> Array1<f64> {
    rows.mean_axis(Axis(0)).expect("non-empty rows")
}

/// Natural-log entropy of a distribution, with `0 log 0 = 0`.
pub fn entropy(dist: &Array1<f64>) -> f64 {
    -dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy of the column-mean distribution of simplex rows.
pub fn entropy_regularizer(rows: ArrayView2<'_, f64>) -> f64 {
    entropy(&mean_distribution(rows))
}

/// Views over the two spaces plus the objective's constants.
#[derive(Clone, Copy, Debug)]
pub struct OuterProblem<'a> {
    phi1_hat: ArrayView2<'a, f64>,
    phi2: ArrayView2<'a, f64>,
    eta: f64,
    inner: InnerSettings,
}

/// Everything the forward pass of one split produced, kept for the reverse
/// pass.
#[derive(Clone, Debug)]
pub struct OuterForward {
    pub loss: f64,
    pub cross_entropy: f64,
    pub entropy: f64,
    pub trajectory: InnerTrajectory,
    x1_train: Array2<f64>,
    x1_test: Array2<f64>,
    x2_train: Array2<f64>,
    x2_test: Array2<f64>,
    tau_train: Array2<f64>,
    tau_test: Array2<f64>,
    probe_test: Array2<f64>,
    tau_mean: Array1<f64>,
    eta: f64,
    gamma: f64,
}

impl<'a> OuterProblem<'a> {
    /// `phi1_hat` must have unit rows.
    pub fn new(phi1_hat: ArrayView2<'a, f64>, phi2: ArrayView2<'a, f64>, config: &TrainConfig) -> Result<Self> {
        if phi1_hat.nrows() != phi2.nrows() {
            return Err(Error::Input(format!(
                "spaces disagree on sample count: {} vs {}",
                phi1_hat.nrows(),
                phi2.nrows()
            )));
        }
        Ok(Self { phi1_hat, phi2, eta: config.eta, inner: config.inner_settings() })
    }

    pub fn n_samples(&self) -> usize {
        self.phi2.nrows()
    }

    /// Forward pass for given prototypes and temperature.
    pub fn forward(&self, prototypes: ArrayView2<'_, f64>, gamma: f64, split: &Split) -> Result<OuterForward> {
        let x1_train = self.phi1_hat.select(Axis(0), &split.train);
        let x1_test = self.phi1_hat.select(Axis(0), &split.test);
        let x2_train = self.phi2.select(Axis(0), &split.train);
        let x2_test = self.phi2.select(Axis(0), &split.test);
        let tau_train = encode_with(prototypes, gamma, x1_train.view())?;
        let tau_test = encode_with(prototypes, gamma, x1_test.view())?;
        let k = prototypes.nrows();
        let trajectory =
            fit_probe(x2_train.view(), tau_train.view(), self.inner, Array2::zeros((k, x2_train.ncols())))?;
        let probe_test = probe_predict(trajectory.final_weights().view(), x2_test.view());
        let cross_entropy = soft_cross_entropy(probe_test.view(), tau_test.view());
        let n_all = (tau_train.nrows() + tau_test.nrows()) as f64;
        let tau_mean = (tau_train.sum_axis(Axis(0)) + tau_test.sum_axis(Axis(0))) / n_all;
        let entropy = entropy(&tau_mean);
        Ok(OuterForward {
            loss: cross_entropy - self.eta * entropy,
            cross_entropy,
            entropy,
            trajectory,
            x1_train,
            x1_test,
            x2_train,
            x2_test,
            tau_train,
            tau_test,
            probe_test,
            tau_mean,
            eta: self.eta,
            gamma,
        })
    }

    /// Loss for an encoder, computed from scratch.
    pub fn loss(&self, encoder: &TaskEncoder, split: &Split) -> Result<f64> {
        let w1 = encoder.prototypes()?;
        Ok(self.forward(w1.view(), encoder.gamma(), split)?.loss)
    }

    /// Loss and its gradient with respect to the encoder's raw parameters.
    pub fn value_and_grad(&self, encoder: &TaskEncoder, split: &Split) -> Result<(f64, Array2<f64>)> {
        let (w1, tape) = orthonormalize_with_tape(encoder.params().view())?;
        let fwd = self.forward(w1.view(), encoder.gamma(), split)?;
        let w1_bar = fwd.prototype_gradient();
        Ok((fwd.loss, tape.backward(w1_bar.view())))
    }
}

impl OuterForward {
    /// Gradient of the loss with respect to the prototypes `W1`.
    pub fn prototype_gradient(&self) -> Array2<f64> {
        let n_test = self.tau_test.nrows() as f64;
        let n_all = (self.tau_train.nrows() + self.tau_test.nrows()) as f64;

        // cross-entropy w.r.t. the test targets and the test logits
        let mut tau_test_bar = self.probe_test.mapv(|p| -p.ln() / n_test);
        let logits_bar = (&self.probe_test - &self.tau_test) / n_test;
        let final_weights_bar = logits_bar.t().dot(&self.x2_test);
        let mut tau_train_bar = self.trajectory.backward_to_targets(self.x2_train.view(), final_weights_bar.view());

        // -eta * entropy(mean): d/dtau_i = eta * (ln mean_k + 1) / |X|
        let entropy_bar: Array1<f64> =
            self.tau_mean.mapv(|m| if m > 0.0 { self.eta * (m.ln() + 1.0) / n_all } else { 0.0 });
        tau_test_bar += &entropy_bar;
        tau_train_bar += &entropy_bar;

        let z_train_bar = sparsemax_vjp_rows(&self.tau_train, &tau_train_bar);
        let z_test_bar = sparsemax_vjp_rows(&self.tau_test, &tau_test_bar);
        let mut w1_bar = z_train_bar.t().dot(&self.x1_train);
        w1_bar += &z_test_bar.t().dot(&self.x1_test);
        w1_bar /= self.gamma;
        w1_bar
    }

    pub fn tau_train(&self) -> &Array2<f64> {
        &self.tau_train
    }

    pub fn tau_test(&self) -> &Array2<f64> {
        &self.tau_test
    }
}

/// Outer loss for one split, with its forward cache.
pub fn outer_loss(
    encoder: &TaskEncoder,
    phi1_hat: ArrayView2<'_, f64>,
    phi2: ArrayView2<'_, f64>,
    split: &Split,
    config: &TrainConfig,
) -> Result<(f64, OuterForward)> {
    let problem = OuterProblem::new(phi1_hat, phi2, config)?;
    let w1 = encoder.prototypes()?;
    let fwd = problem.forward(w1.view(), encoder.gamma(), split)?;
    Ok((fwd.loss, fwd))
}

/// Gradient of the outer loss with respect to the encoder's raw parameters.
pub fn hypergradient(
    encoder: &TaskEncoder,
    phi1_hat: ArrayView2<'_, f64>,
    phi2: ArrayView2<'_, f64>,
    split: &Split,
    config: &TrainConfig,
) -> Result<Array2<f64>> {
    OuterProblem::new(phi1_hat, phi2, config)?.value_and_grad(encoder, split).map(|(_, g)| g)
}

/// Adam with bias correction. The step size is passed per call so that
/// annealing leaves the moment estimates alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Array2<f64>,
    second: Array2<f64>,
    t: i32,
}

impl Adam {
    pub fn new(shape: (usize, usize)) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, first: Array2::zeros(shape), second: Array2::zeros(shape), t: 0 }
    }

    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>, alpha: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        ndarray::Zip::from(params).and(&mut self.first).and(&mut self.second).and(grad).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= alpha * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        });
    }
}

/// Scales `grad` so its Frobenius norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut Array2<f64>, max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        *grad *= max_norm / norm;
    }
    norm
}

/// One trained seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub encoder: TaskEncoder,
    pub cv_accuracy: f64,
    pub labeling: Labeling,
    /// Subset-averaged outer loss at each iteration, before the update.
    pub objective_trace: Vec<f64>,
    /// Largest `||W1 W1^T - I||_F` seen after any update.
    pub max_ortho_defect: f64,
    pub final_alpha: f64,
    pub final_gamma: f64,
}

/// Per-iteration hook for callers that want to watch training.
pub trait Observer {
    fn on_iteration(&mut self, _iter: usize, _loss: f64, _encoder: &TaskEncoder) {}
}

impl Observer for () {}

pub fn prepare_phi1(phi1: &EmbeddingSpace) -> Result<Array2<f64>> {
    let mut m = phi1.matrix.clone();
    if !phi1.manifest.pre_normalized {
        normalize_rows_in_place(&mut m)?;
    }
    Ok(m)
}

/// Trains one seed end to end.
pub fn train_run(phi1: &EmbeddingSpace, phi2: &EmbeddingSpace, config: &TrainConfig) -> Result<RunResult> {
    let phi1_hat = prepare_phi1(phi1)?;
    train_prepared(phi1_hat.view(), phi2.view(), config, &mut ())
}

/// As [`train_run`] on an already row-normalized first space.
pub fn train_prepared(
    phi1_hat: ArrayView2<'_, f64>,
    phi2: ArrayView2<'_, f64>,
    config: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<RunResult> {
    config.validate()?;
    let phi2_unit;
    let phi2 = if config.normalize_phi2 {
        let mut m = phi2.to_owned();
        normalize_rows_in_place(&mut m)?;
        phi2_unit = m;
        phi2_unit.view()
    } else {
        phi2
    };
    let problem = OuterProblem::new(phi1_hat, phi2, config)?;
    let n = problem.n_samples();
    if config.subset_size > n {
        return Err(Error::Config(format!("subset size {} exceeds dataset size {n}", config.subset_size)));
    }
    let mut encoder = TaskEncoder::ortho_rand(config.k, phi1_hat.ncols(), config.gamma, config.seed)?;
    let mut adam = Adam::new(encoder.params().dim());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SPLIT_STREAM);
    let mut alpha = config.alpha;
    let mut trace = Vec::with_capacity(config.iters);
    let mut max_defect = 0.0f64;

    for iter in 0..config.iters {
        if config.anneal_iters.contains(&iter) {
            alpha /= config.anneal_factor;
            encoder.set_gamma(encoder.gamma() / config.anneal_factor);
            log::debug!("seed {} iter {iter}: alpha -> {alpha:e}, gamma -> {:e}", config.seed, encoder.gamma());
        }
        let splits = (0..config.n_subsets)
            .map(|_| sample_splits(n, config.subset_size, config.train_fraction, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (w1, tape) = orthonormalize_with_tape(encoder.params().view())?;
        let gamma = encoder.gamma();
        let evaluate = |split: &Split| -> Result<(f64, Array2<f64>)> {
            let fwd = problem.forward(w1.view(), gamma, split)?;
            Ok((fwd.loss, fwd.prototype_gradient()))
        };
        let results = map_splits(&splits, evaluate)?;

        // fixed reduction order over subsets
        let mut loss = 0.0;
        let mut w1_bar = Array2::zeros(w1.raw_dim());
        for (l, g) in &results {
            loss += l;
            w1_bar += g;
        }
        let count = results.len() as f64;
        loss /= count;
        w1_bar /= count;
        let mut grad = tape.backward(w1_bar.view());
        clip_global_norm(&mut grad, config.clip_norm);
        trace.push(loss);
        observer.on_iteration(iter, loss, &encoder);

        adam.step(encoder.params_mut(), &grad, alpha);
        let defect = orthonormality_defect(encoder.prototypes()?.view());
        max_defect = max_defect.max(defect);
    }

    let labeling = Labeling::from_probs(encode_with(encoder.prototypes()?.view(), encoder.gamma(), phi1_hat)?);
    let mut cv_rng = ChaCha8Rng::seed_from_u64(config.seed);
    cv_rng.set_stream(CV_STREAM);
    let cv_accuracy = cross_validation_accuracy(&encoder, phi1_hat, phi2, config, config.cv_folds, &mut cv_rng)?;
    log::info!(
        "seed {} finished: cv accuracy {cv_accuracy:.4}, final loss {:.5}",
        config.seed,
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(RunResult {
        seed: config.seed,
        final_gamma: encoder.gamma(),
        encoder,
        cv_accuracy,
        labeling,
        objective_trace: trace,
        max_ortho_defect: max_defect,
        final_alpha: alpha,
    })
}

#[cfg(feature = "parallel")]
fn map_splits<F>(splits: &[Split], f: F) -> Result<Vec<(f64, Array2<f64>)>>
where
    F: Fn(&Split) -> Result<(f64, Array2<f64>)> + Sync + Send,
{
    use rayon::prelude::*;
    splits.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_splits<F>(splits: &[Split], f: F) -> Result<Vec<(f64, Array2<f64>)>>
where
    F: Fn(&Split) -> Result<(f64, Array2<f64>)>,
{
    splits.iter().map(f).collect()
}

/// Number of classes holding at least `min_share` of the hard labels.
pub fn effective_class_count(hard: &[usize], k: usize, min_share: f64) -> usize {
    let mut counts = vec![0usize; k];
    for &l in hard {
        counts[l] += 1;
    }
    let n = hard.len().max(1) as f64;
    counts.iter().filter(|&&c| c as f64 / n >= min_share).count()
}

/// On-disk form of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub cv_accuracy: f64,
    pub objective_trace: Vec<f64>,
    pub labels: Vec<usize>,
    pub encoder: TaskEncoder,
    pub max_ortho_defect: f64,
    pub final_alpha: f64,
    pub final_gamma: f64,
}

impl RunRecord {
    pub fn new(config: &TrainConfig, run: &RunResult) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            seed: run.seed,
            cv_accuracy: run.cv_accuracy,
            objective_trace: run.objective_trace.clone(),
            labels: run.labeling.hard.clone(),
            encoder: run.encoder.clone(),
            max_ortho_defect: run.max_ortho_defect,
            final_alpha: run.final_alpha,
            final_gamma: run.final_gamma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.iters, c.inner_steps, c.n_subsets), (1000, 300, 20));
        assert_eq!((c.alpha, c.inner_lr, c.eta, c.gamma, c.clip_norm), (1e-3, 1e-3, 10.0, 0.1, 1.0));
        assert_eq!(c.anneal_iters, vec![100, 200]);
        assert_eq!(c.anneal_factor, 10.0);
        assert_eq!(split_sizes(c.subset_size, c.train_fraction), (9000, 1000));
    }

    #[test]
    fn preset_split_sizes() {
        let s = Preset::Stl10Inductive.config();
        assert_eq!(split_sizes(s.subset_size, s.train_fraction), (4500, 500));
        let s = Preset::Stl10Transductive.config();
        assert_eq!(split_sizes(s.subset_size, s.train_fraction), (7200, 800));
        let s = Preset::Imagenet.config();
        assert_eq!(split_sizes(s.subset_size, s.train_fraction), (14000, 6000));
        assert_eq!((s.alpha, s.inner_lr, s.inner_steps), (0.1, 0.1, 100));
        assert!(s.anneal_iters.is_empty());
        assert!(Preset::parse("nope").is_err());
    }

    #[test]
    fn full_subset_partitions_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_splits(10_000, 10_000, 0.9, &mut rng).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (9000, 1000));
        let mut all: Vec<_> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10_000).collect::<Vec<_>>());
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = sample_splits(50, 20, 0.75, &mut rng).unwrap();
            assert_eq!(s.train.len() + s.test.len(), 20);
            assert!(s.train.iter().all(|i| !s.test.contains(i)));
            let mut seen = s.train.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), s.train.len());
        }
        let a = sample_splits(100, 30, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_splits(100, 30, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample_splits(10, 11, 0.5, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy_regularizer(array![[0., 1., 0.], [0., 1., 0.]].view()), 0.0);
        let uniform = Array2::from_elem((4, 10), 0.1);
        assert_abs_diff_eq!(entropy_regularizer(uniform.view()), std::f64::consts::LN_10, epsilon = 1e-12);
        // scalar oracle: -(0.7 ln 0.7 + 0.3 ln 0.3)
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        assert_abs_diff_eq!(oracle, 0.610864, epsilon = 1e-6);
        let rows = array![[1.0, 0.0], [0.4, 0.6]];
        assert_abs_diff_eq!(entropy_regularizer(rows.view()), oracle, epsilon = 1e-12);
    }

    #[test]
    fn adam_first_step_has_magnitude_alpha() {
        let mut p = Array2::zeros((2, 2));
        let mut adam = Adam::new((2, 2));
        adam.step(&mut p, &Array2::ones((2, 2)), 1e-3);
        for v in p.iter() {
            assert_abs_diff_eq!(*v, -1e-3, epsilon = 1e-10);
        }
    }

    #[test]
    fn adam_zero_gradient_is_no_op() {
        let mut p = array![[1.0, -2.0]];
        let before = p.clone();
        let mut adam = Adam::new((1, 2));
        adam.step(&mut p, &Array2::zeros((1, 2)), 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_decreases_quadratic() {
        let target = array![[3.0, -1.0, 0.5]];
        let mut p = Array2::zeros((1, 3));
        let mut adam = Adam::new((1, 3));
        let f = |p: &Array2<f64>| (p - &target).mapv(|v| v * v).sum();
        let mut last = f(&p);
        for _ in 0..100 {
            let g = (&p - &target) * 2.0;
            adam.step(&mut p, &g, 0.01);
            let now = f(&p);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = array![[3.0, 4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + 1e-9);
        let mut small = array![[0.1, 0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, array![[0.1, 0.1]]);
    }

    fn random_problem(seed: u64, n: usize, d1: usize, d2: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi1 = Array2::from_shape_simple_fn((n, d1), || StandardNormal.sample(&mut rng));
        normalize_rows_in_place(&mut phi1).unwrap();
        let phi2 = Array2::from_shape_simple_fn((n, d2), || StandardNormal.sample(&mut rng));
        (phi1, phi2)
    }

    #[test]
    fn uniform_labels_without_entropy_give_log_k() {
        let (phi1, phi2) = random_problem(0, 40, 6, 5);
        let config = TrainConfig { k: 3, eta: 0.0, inner_steps: 10, inner_lr: 0.5, ..TrainConfig::default() };
        let enc = TaskEncoder::ortho_rand(3, 6, 1e9, 0).unwrap();
        let split = sample_splits(40, 40, 0.75, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (loss, fwd) = outer_loss(&enc, phi1.view(), phi2.view(), &split, &config).unwrap();
        assert_abs_diff_eq!(loss, 3f64.ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(fwd.cross_entropy, loss, epsilon = 0.0);
        let g = hypergradient(&enc, phi1.view(), phi2.view(), &split, &config).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn loss_is_pure() {
        let (phi1, phi2) = random_problem(1, 50, 6, 4);
        let config = TrainConfig { k: 3, inner_steps: 5, inner_lr: 0.5, ..TrainConfig::default() };
        let enc = TaskEncoder::ortho_rand(3, 6, 0.3, 1).unwrap();
        let split = sample_splits(50, 40, 0.8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (a, _) = outer_loss(&enc, phi1.view(), phi2.view(), &split, &config).unwrap();
        let problem = OuterProblem::new(phi1.view(), phi2.view(), &config).unwrap();
        let b = problem.loss(&enc, &split).unwrap();
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn gradient_depends_on_inner_step_count() {
        let (phi1, phi2) = random_problem(2, 64, 8, 8);
        let enc = TaskEncoder::ortho_rand(3, 8, 0.5, 2).unwrap();
        let split = sample_splits(64, 64, 0.75, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let base = TrainConfig { k: 3, inner_steps: 10, inner_lr: 0.1, ..TrainConfig::default() };
        let doubled = TrainConfig { inner_steps: 20, ..base.clone() };
        let g1 = hypergradient(&enc, phi1.view(), phi2.view(), &split, &base).unwrap();
        let g2 = hypergradient(&enc, phi1.view(), phi2.view(), &split, &doubled).unwrap();
        let diff = (&g1 - &g2).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "diff {diff}");
    }

    #[test]
    fn effective_classes() {
        assert_eq!(effective_class_count(&[0, 0, 0, 1], 3, 0.2), 2);
        assert_eq!(effective_class_count(&[0; 100], 3, 0.01), 1);
    }

    #[test]
    fn normalize_phi2_matches_prenormalized_input() {
        let (phi1, phi2) = random_problem(4, 60, 6, 5);
        let mut phi2_unit = phi2.clone();
        normalize_rows_in_place(&mut phi2_unit).unwrap();
        let base = TrainConfig {
            k: 3,
            iters: 5,
            inner_steps: 5,
            inner_lr: 0.5,
            subset_size: 40,
            n_subsets: 1,
            cv_folds: 2,
            ..TrainConfig::default()
        };
        let flagged = TrainConfig { normalize_phi2: true, ..base.clone() };
        let a = train_prepared(phi1.view(), phi2.view(), &flagged, &mut ()).unwrap();
        let b = train_prepared(phi1.view(), phi2_unit.view(), &base, &mut ()).unwrap();
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.cv_accuracy, b.cv_accuracy);
        let c = train_prepared(phi1.view(), phi2.view(), &base, &mut ()).unwrap();
        assert_ne!(a.objective_trace, c.objective_trace);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
