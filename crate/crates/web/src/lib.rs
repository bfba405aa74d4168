//! WebAssembly bindings for the demo page in `www/`.
//!
//! Results cross the boundary as JSON strings so the same functions can be
//! exercised natively in tests.

use labelsearch::evaluation::{adjusted_rand_index, clustering_accuracy, kmeans};
use labelsearch::meta_opt::{prepare_phi1, train_prepared, TrainConfig};
use labelsearch::synthetic::{generate, SynthData, SynthSpec};
use labelsearch::task_encoder::sparsemax;
use ndarray::{Array1, Array2, Axis};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: labelsearch::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `sparsemax(logits / gamma)`.
#[wasm_bindgen]
pub fn sparsemax_scaled(logits: Vec<f64>, gamma: f64) -> Result<Vec<f64>, JsError> {
    if logits.is_empty() {
        return Err(JsError::new("need at least one logit"));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(JsError::new("gamma must be positive"));
    }
    let z = Array1::from(logits) / gamma;
    Ok(sparsemax(z.view()).to_vec())
}

/// Top two principal directions by power iteration with deflation.
fn principal_plane(x: &Array2<f64>) -> Array2<f64> {
    let centred = x - &x.mean_axis(Axis(0)).expect("non-empty");
    let mut cov = centred.t().dot(&centred) / x.nrows() as f64;
    let d = cov.nrows();
    let mut out = Array2::zeros((x.nrows(), 2));
    for c in 0..2 {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 / (1.0 + i as f64 + c as f64));
        for _ in 0..200 {
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-12 {
                break;
            }
            v = next / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov.scaled_add(-lambda, &outer);
        out.column_mut(c).assign(&centred.dot(&v));
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    data: SynthData,
    phi1_hat: Array2<f64>,
    plane: Array2<f64>,
}

#[wasm_bindgen]
impl Demo {
    /// Draws a small certified fixture with `k` planted classes.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, k: usize, separation: f64, seed: u64) -> Result<Demo, JsError> {
        let spec = SynthSpec {
            n,
            k,
            latent_dim: k.max(2),
            d1: 16,
            d2: 16,
            cluster_separation: separation,
            seed,
            verify_threshold: 0.9,
            ..SynthSpec::default()
        };
        let data = generate(&spec).map_err(js_err)?;
        let phi1_hat = prepare_phi1(&data.phi1).map_err(js_err)?;
        let plane = principal_plane(&data.phi2.matrix);
        Ok(Demo { data, phi1_hat, plane })
    }

    pub fn k(&self) -> usize {
        self.data.truth.k
    }

    /// Second-space points projected to 2D, flattened as x0, y0, x1, y1, ...
    pub fn points(&self) -> Vec<f64> {
        self.plane.iter().copied().collect()
    }

    pub fn truth(&self) -> Vec<u32> {
        self.data.truth.labels.iter().map(|&l| l as u32).collect()
    }

    /// Trains one encoder and reports its labels, accuracy and objective
    /// trace as JSON.
    pub fn train(&self, eta: f64, gamma: f64, iters: usize, seed: u64) -> Result<String, JsError> {
        let n = self.data.truth.len();
        let config = TrainConfig {
            k: self.k(),
            iters,
            alpha: 1e-2,
            inner_steps: 20,
            inner_lr: 0.05,
            eta,
            gamma,
            subset_size: n.min(600),
            n_subsets: 1,
            anneal_iters: vec![iters * 2 / 5, iters * 4 / 5],
            cv_folds: 3,
            seed,
            ..TrainConfig::default()
        };
        let run = train_prepared(self.phi1_hat.view(), self.data.phi2.view(), &config, &mut ()).map_err(js_err)?;
        let labels = &run.labeling.hard;
        let truth = &self.data.truth.labels;
        let acc = clustering_accuracy(labels, truth, self.k()).map_err(js_err)?;
        let ari = adjusted_rand_index(labels, truth).map_err(js_err)?;
        Ok(json!({
            "labels": labels,
            "acc": acc,
            "ari": ari,
            "cv_accuracy": run.cv_accuracy,
            "objective_trace": run.objective_trace,
        })
        .to_string())
    }

    /// Lowest-inertia k-means labeling over `n_runs` restarts, as JSON.
    pub fn kmeans(&self, n_runs: usize, seed: u64) -> Result<String, JsError> {
        let truth = &self.data.truth.labels;
        let report = kmeans(self.phi1_hat.view(), self.k(), n_runs, seed, Some(truth)).map_err(js_err)?;
        let acc = clustering_accuracy(&report.labels, truth, self.k()).map_err(js_err)?;
        Ok(json!({
            "labels": report.labels,
            "acc": acc,
            "mean_acc": report.mean_acc,
            "mean_ari": report.mean_ari,
        })
        .to_string())
    }
}
