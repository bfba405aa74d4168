//! Paired representation spaces with a planted labeling.
//!
//! A shared latent `z` is drawn from `K` Gaussian blobs. The first space is a
//! random linear image of `z`, the second a random linear image of a
//! monotone-then-rotated copy of `z`; each gets its own independent noise.
//! Blob membership is therefore linearly recoverable from either space, while
//! any structure coming from one space's noise is invisible in the other.
//! With `spurious` set, the first space also carries a second, independent
//! blob labeling that the second space knows nothing about.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{save_space, write_labels, EmbeddingSpace, GroundTruthLabels};
use crate::error::{Error, Result};
use crate::inner_solver::{fit_hard_labels, hard_accuracy};
use crate::task_encoder::orthonormalize;

const MAX_ATTEMPTS: u64 = 5;
const VERIFY_STEPS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub k: usize,
    pub latent_dim: usize,
    pub d1: usize,
    pub d2: usize,
    /// Distance between blob centres in latent units (blobs have unit spread).
    pub cluster_separation: f64,
    /// Per-coordinate std of each space's private noise.
    pub noise_sigma: f64,
    /// Length of a shared offset added to every latent point along one
    /// random direction.
    pub shared_offset: f64,
    pub spurious: bool,
    pub seed: u64,
    /// Minimum training accuracy both planted-label probes must reach.
    pub verify_threshold: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            k: 5,
            latent_dim: 8,
            d1: 32,
            d2: 32,
            cluster_separation: 7.0,
            noise_sigma: 0.25,
            shared_offset: 4.0,
            spurious: false,
            seed: 0,
            verify_threshold: 0.99,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.n < self.k {
            return fail(format!("need 1 <= K <= N, got K={}, N={}", self.k, self.n));
        }
        if self.k > self.d1.min(self.d2) {
            return fail(format!("K={} exceeds min(d1, d2)={}", self.k, self.d1.min(self.d2)));
        }
        if self.k > self.latent_dim {
            return fail(format!("K={} exceeds latent_dim={}", self.k, self.latent_dim));
        }
        if self.cluster_separation.is_nan() || self.cluster_separation <= 0.0 {
            return fail("cluster_separation must be positive".into());
        }
        if self.shared_offset.is_nan() || self.shared_offset < 0.0 {
            return fail("shared_offset must be non-negative".into());
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return fail("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Probe accuracies measured while certifying a fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureReport {
    pub attempts: u64,
    pub phi1_train_acc: f64,
    pub phi2_train_acc: f64,
    /// Second-space probe trained on one half and scored on the other.
    pub phi2_heldout_acc: f64,
    pub spurious_phi1_train_acc: Option<f64>,
    pub spurious_phi2_heldout_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub phi1: EmbeddingSpace,
    pub phi2: EmbeddingSpace,
    pub truth: GroundTruthLabels,
    pub spurious: Option<GroundTruthLabels>,
    pub report: FixtureReport,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

fn balanced_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

/// Blob centres at pairwise distance `separation`.
fn blob_centres(rng: &mut ChaCha8Rng, k: usize, dim: usize, separation: f64) -> Result<Array2<f64>> {
    let dirs = orthonormalize(gaussian(rng, (k, dim), 1.0).view())?;
    Ok(dirs * (separation / std::f64::consts::SQRT_2))
}

/// `(phi1, phi2, planted, spurious)`
type Draw = (Array2<f64>, Array2<f64>, Vec<usize>, Option<Vec<usize>>);

fn draw(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let SynthSpec { n, k, latent_dim, d1, d2, .. } = *spec;
    let labels = balanced_labels(rng, n, k);
    let centres = blob_centres(rng, k, latent_dim, spec.cluster_separation)?;
    let mut z = gaussian(rng, (n, latent_dim), 1.0);
    for (mut row, &l) in z.axis_iter_mut(Axis(0)).zip(&labels) {
        row += &centres.row(l);
    }
    if spec.shared_offset > 0.0 {
        let dir = orthonormalize(gaussian(rng, (1, latent_dim), 1.0).view())?;
        z += &(dir.row(0).to_owned() * spec.shared_offset);
    }

    let a1 = gaussian(rng, (d1, latent_dim), 1.0 / (d1 as f64).sqrt());
    let a2 = gaussian(rng, (d2, latent_dim), 1.0 / (d2 as f64).sqrt());
    let rotation = orthonormalize(gaussian(rng, (latent_dim, latent_dim), 1.0).view())?;

    let mut phi1 = z.dot(&a1.t());
    phi1 += &gaussian(rng, (n, d1), spec.noise_sigma);

    let warped = z.mapv(|v| v + 0.5 * v.tanh()).dot(&rotation.t());
    let mut phi2 = warped.dot(&a2.t());
    phi2 += &gaussian(rng, (n, d2), spec.noise_sigma);

    let spurious = if spec.spurious {
        let extra = balanced_labels(rng, n, k);
        let directions = blob_centres(rng, k, d1, spec.cluster_separation)?;
        for (mut row, &l) in phi1.axis_iter_mut(Axis(0)).zip(&extra) {
            row += &directions.row(l);
        }
        Some(extra)
    } else {
        None
    };
    Ok((phi1, phi2, labels, spurious))
}

fn probe_lr(x: &Array2<f64>) -> f64 {
    let mean_sq = x.mapv(|v| v * v).sum() / x.nrows() as f64;
    1.0 / mean_sq.max(1e-12)
}

fn train_accuracy(x: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let probe = fit_hard_labels(x.view(), labels, k, VERIFY_STEPS, probe_lr(x))?;
    Ok(hard_accuracy(probe.predict(x.view()).view(), labels))
}

fn heldout_accuracy(x: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let half = x.nrows() / 2;
    let train: Vec<usize> = (0..half).collect();
    let test: Vec<usize> = (half..x.nrows()).collect();
    let xtr = x.select(Axis(0), &train);
    let probe = fit_hard_labels(xtr.view(), &labels[..half], k, VERIFY_STEPS, probe_lr(&xtr))?;
    Ok(hard_accuracy(probe.predict(x.select(Axis(0), &test).view()).view(), &labels[half..]))
}

/// Draws a fixture and certifies it with linear probes, retrying with fresh
/// seed-derived draws up to five times.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt);
        let (phi1, phi2, labels, spurious) = draw(spec, &mut rng)?;
        // match what a save/load cycle would give back
        let phi1 = phi1.mapv(|v| f64::from(v as f32));
        let phi2 = phi2.mapv(|v| f64::from(v as f32));
        let report = FixtureReport {
            attempts: attempt + 1,
            phi1_train_acc: train_accuracy(&phi1, &labels, spec.k)?,
            phi2_train_acc: train_accuracy(&phi2, &labels, spec.k)?,
            phi2_heldout_acc: heldout_accuracy(&phi2, &labels, spec.k)?,
            spurious_phi1_train_acc: spurious.as_deref().map(|s| train_accuracy(&phi1, s, spec.k)).transpose()?,
            spurious_phi2_heldout_acc: spurious.as_deref().map(|s| heldout_accuracy(&phi2, s, spec.k)).transpose()?,
        };
        let chance = 1.0 / spec.k as f64;
        let planted_ok =
            report.phi1_train_acc >= spec.verify_threshold && report.phi2_train_acc >= spec.verify_threshold;
        let spurious_ok = report.spurious_phi1_train_acc.is_none_or(|a| a >= spec.verify_threshold)
            && report.spurious_phi2_heldout_acc.is_none_or(|a| a <= chance + 0.15);
        if planted_ok && spurious_ok {
            let k = spec.k;
            return Ok(SynthData {
                phi1: EmbeddingSpace::from_matrix("phi1", phi1)?,
                phi2: EmbeddingSpace::from_matrix("phi2", phi2)?,
                truth: GroundTruthLabels::new(labels, k)?,
                spurious: spurious.map(|s| GroundTruthLabels::new(s, k)).transpose()?,
                report,
            });
        }
        log::warn!("synthetic draw {attempt} failed verification: {report:?}");
        last = Some(report);
    }
    Err(Error::Data(format!("fixture failed separability verification after {MAX_ATTEMPTS} attempts: {last:?}")))
}

/// Writes `phi1.json`, `phi2.json`, their binaries and `labels.txt` (plus
/// `spurious_labels.txt` when present). Returns the two manifest paths.
pub fn write_fixture(data: &SynthData, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let mut phi1 = data.phi1.clone();
    let mut phi2 = data.phi2.clone();
    phi1.manifest.labels_path = Some("labels.txt".into());
    phi2.manifest.labels_path = Some("labels.txt".into());
    let p1 = save_space(&phi1, dir)?;
    let p2 = save_space(&phi2, dir)?;
    write_labels(dir.join("labels.txt"), &data.truth.labels)?;
    if let Some(s) = &data.spurious {
        write_labels(dir.join("spurious_labels.txt"), &s.labels)?;
    }
    Ok((p1, p2))
}

/// Mean `phi1_hat` direction of each class, orthonormalized; an encoder
/// built from these labels roughly along `labels`.
pub fn class_prototypes(phi1_hat: &Array2<f64>, labels: &[usize], k: usize) -> Result<Array2<f64>> {
    let mut sums = Array2::zeros((k, phi1_hat.ncols()));
    for (row, &l) in phi1_hat.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
    }
    for mut row in sums.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    orthonormalize(sums.view())
}

/// Per-class share of a labeling.
pub fn label_shares(labels: &[usize], k: usize) -> Array1<f64> {
    let mut counts = Array1::zeros(k);
    for &l in labels {
        counts[l] += 1.0;
    }
    counts / labels.len().max(1) as f64
}
