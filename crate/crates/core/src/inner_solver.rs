//! Multiclass logistic regression on frozen features, solved by a fixed number
//! of plain gradient-descent steps. The whole trajectory is kept so that the
//! outer loop can run the updates backwards.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Row-wise softmax, computed with max-shifted exponentials.
pub fn softmax_rows_in_place(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

/// Softmax class probabilities `softmax(x W2^T)` for each row of `x`.
pub fn probe_predict(w2: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut p = x.dot(&w2.t());
    softmax_rows_in_place(&mut p);
    p
}

/// Mean over rows of `-sum_k targets[i,k] log probs[i,k]`; zero targets
/// contribute nothing even where the probability underflows.
pub fn soft_cross_entropy(probs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> f64 {
    let n = probs.nrows();
    let mut total = 0.0;
    Zip::from(&probs).and(&targets).for_each(|&p, &t| {
        if t != 0.0 {
            total -= t * p.ln();
        }
    });
    total / n as f64
}

/// A linear softmax classifier over `phi2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Array2<f64>,
}

impl LinearProbe {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        probe_predict(self.weights.view(), x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerSettings {
    pub steps: usize,
    pub lr: f64,
    /// Coefficient of `ridge * ||W2||_F^2`. Zero in normal training.
    pub ridge: f64,
}

/// Every iterate of one inner fit. `weights[0]` is the initialization and
/// `weights[t + 1] = weights[t] - lr * grad_t`; `probs[t]` are the training
/// predictions at `weights[t]`.
#[derive(Clone, Debug)]
pub struct InnerTrajectory {
    pub weights: Vec<Array2<f64>>,
    pub probs: Vec<Array2<f64>>,
    pub settings: InnerSettings,
}

impl InnerTrajectory {
    pub fn final_weights(&self) -> &Array2<f64> {
        self.weights.last().expect("trajectory holds the initialization")
    }

    pub fn probe(&self) -> LinearProbe {
        LinearProbe { weights: self.final_weights().clone() }
    }

    /// Training loss at each iterate (`probs[t]` vs `targets`); the last
    /// entry needs one extra forward pass.
    pub fn losses(&self, x: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut out: Vec<f64> = self.probs.iter().map(|p| soft_cross_entropy(p.view(), targets)).collect();
        let last = probe_predict(self.final_weights().view(), x);
        out.push(soft_cross_entropy(last.view(), targets));
        out
    }

    /// Reverse pass through the unrolled updates. Given the gradient of some
    /// scalar with respect to the final weights, returns its gradient with
    /// respect to the training targets.
    pub fn backward_to_targets(&self, x: ArrayView2<'_, f64>, final_weights_bar: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = x.nrows() as f64;
        let InnerSettings { lr, ridge, .. } = self.settings;
        let mut w_bar = final_weights_bar.to_owned();
        let mut targets_bar = Array2::zeros(self.probs[0].raw_dim());
        for p in self.probs.iter().rev() {
            // a = x w_bar^T / n feeds both the target path and the softmax path
            let mut a = x.dot(&w_bar.t());
            a /= n;
            targets_bar.scaled_add(lr, &a);
            let mut dz = a;
            for (mut dz_row, p_row) in dz.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let inner = dz_row.dot(&p_row);
                Zip::from(&mut dz_row).and(&p_row).for_each(|d, &pk| *d = pk * (*d - inner));
            }
            let through_probs = dz.t().dot(&x);
            let scale = 1.0 - 2.0 * lr * ridge;
            w_bar.mapv_inplace(|v| v * scale);
            w_bar.scaled_add(-lr, &through_probs);
        }
        targets_bar
    }
}

/// Gradient of mean soft cross-entropy (plus ridge) with respect to `W2`.
fn probe_gradient(
    x: ArrayView2<'_, f64>,
    probs: &Array2<f64>,
    targets: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    ridge: f64,
) -> Array2<f64> {
    let residual = probs - &targets;
    let mut g = residual.t().dot(&x);
    g /= x.nrows() as f64;
    if ridge != 0.0 {
        g.scaled_add(2.0 * ridge, w);
    }
    g
}

/// Runs `settings.steps` gradient steps from `init`.
pub fn fit_probe(
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    settings: InnerSettings,
    init: Array2<f64>,
) -> Result<InnerTrajectory> {
    if settings.steps == 0 {
        return Err(Error::Config("inner solver needs at least one step".into()));
    }
    if x.nrows() != targets.nrows() || init.nrows() != targets.ncols() || init.ncols() != x.ncols() {
        return Err(Error::Input(format!(
            "probe shapes disagree: x {:?}, targets {:?}, weights {:?}",
            x.dim(),
            targets.dim(),
            init.dim()
        )));
    }
    let mut weights = Vec::with_capacity(settings.steps + 1);
    let mut probs = Vec::with_capacity(settings.steps);
    let mut w = init;
    for step in 0..settings.steps {
        let p = probe_predict(w.view(), x);
        let g = probe_gradient(x, &p, targets, &w, settings.ridge);
        let mut next = w.clone();
        next.scaled_add(-settings.lr, &g);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        weights.push(w);
        probs.push(p);
        w = next;
    }
    weights.push(w);
    Ok(InnerTrajectory { weights, probs, settings })
}

/// Convenience for plain one-hot fitting from zero.
pub fn fit_hard_labels(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    k: usize,
    steps: usize,
    lr: f64,
) -> Result<LinearProbe> {
    let targets = one_hot(labels, k);
    let settings = InnerSettings { steps, lr, ridge: 0.0 };
    let traj = fit_probe(x, targets.view(), settings, Array2::zeros((k, x.ncols())))?;
    Ok(traj.probe())
}

pub fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        t[[i, l]] = 1.0;
    }
    t
}

/// Fraction of rows whose argmax matches `labels`.
pub fn hard_accuracy(probs: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let hits =
        probs.axis_iter(Axis(0)).zip(labels).filter(|(row, &l)| crate::task_encoder::argmax(row.view()) == l).count();
    hits as f64 / labels.len().max(1) as f64
}
