//! Training objectives and the two stateful controllers: the boundary
//! equilibrium terms and the per-identity embedding centroids.
//!
//! All L1-style losses are means over elements, not sums, so the lambda
//! weights transfer across image sizes.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::toymm::ImageBatch;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Balance scalars of the three BEGAN games.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumState {
    pub k_dr: f64,
    pub k_ds: f64,
    pub k_dp: f64,
    pub rate: f64,
    pub gamma: f64,
}

impl Default for EquilibriumState {
    fn default() -> Self {
        EquilibriumState { k_dr: 0.0, k_ds: 0.0, k_dp: 0.0, rate: 0.001, gamma: 0.5 }
    }
}

/// Objective weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_dp: f64,
    pub lambda_c: f64,
    pub lambda_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cyc: 0.5, lambda_dp: 0.5, lambda_c: 0.001, lambda_id: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_dp", self.lambda_dp),
            ("lambda_c", self.lambda_c),
            ("lambda_id", self.lambda_id),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Exponent convention of the identity set loss. The printed formula uses
/// positive scaled distances, which pushes samples away from their own
/// centroid; the metric-learning convention it cites uses negative ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eq7Sign {
    AsPrinted,
    Magnet,
}

/// Knobs of the identity set loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityLossConfig {
    pub sign: Eq7Sign,
    pub eta: f64,
    /// When false, sigma is treated as a constant during differentiation.
    pub differentiate_sigma: bool,
    pub sigma_floor: f64,
}

impl Default for IdentityLossConfig {
    fn default() -> Self {
        IdentityLossConfig {
            sign: Eq7Sign::Magnet,
            eta: 1.0,
            differentiate_sigma: false,
            sigma_floor: 1e-6,
        }
    }
}

/// Momentum-tracked per-identity embedding centroids. Identities never seen
/// read as zero vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidStore {
    dim: usize,
    pub beta: f64,
    /// Alternate reading of the momentum constant: move (1 - beta), not
    /// beta, toward each new sample.
    pub interpret_beta_as_retention: bool,
    centroids: BTreeMap<u32, Vec<f64>>,
}

impl CentroidStore {
    pub fn new(dim: usize, beta: f64) -> Self {
        CentroidStore { dim, beta, interpret_beta_as_retention: false, centroids: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn initialized_len(&self) -> usize {
        self.centroids.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.centroids.keys().copied()
    }

    /// Centroid for a label; zero vector when uninitialized.
    pub fn get(&self, label: u32) -> Array1<f64> {
        match self.centroids.get(&label) {
            Some(v) => Array1::from_vec(v.clone()),
            None => Array1::zeros(self.dim),
        }
    }

    /// Apply the momentum rule sample-sequentially in batch order and return
    /// the successor store.
    pub fn updated(&self, embeddings: &Array2<f64>, labels: &[u32]) -> Result<CentroidStore> {
        let (m, d) = embeddings.dim();
        if d != self.dim {
            return Err(Error::Structure(format!(
                "embedding dim {d} does not match store dim {}",
                self.dim
            )));
        }
        if labels.len() != m {
            return Err(Error::Structure("labels length must equal batch size".into()));
        }
        let mut next = self.clone();
        for (i, &label) in labels.iter().enumerate() {
            let c = next.get(label);
            let e = embeddings.row(i);
            let c_new: Array1<f64> = if self.interpret_beta_as_retention {
                &c * self.beta + &(&e * (1.0 - self.beta))
            } else {
                // c - beta * (c - e)
                &c - &((&c - &e) * self.beta)
            };
            if c_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite centroid after update".into()));
            }
            next.centroids.insert(label, c_new.to_vec());
        }
        Ok(next)
    }
}

fn mad_batches(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    if a.pixels.dim() != b.pixels.dim() {
        return Err(Error::Structure(format!(
            "shape mismatch: {:?} vs {:?}",
            a.pixels.dim(),
            b.pixels.dim()
        )));
    }
    let n = a.pixels.len() as f64;
    Ok((&a.pixels - &b.pixels).mapv(f64::abs).sum() / n)
}

/// Mean |x_cyc - x|: how far the two-way mapping drifts from the input.
pub fn cycle_loss(x: &ImageBatch, x_cyc: &ImageBatch) -> Result<f64> {
    mad_batches(x, x_cyc)
}

/// Mean |G(x) - D(G(x))|: the generator side of a BEGAN game.
pub fn began_gen_loss(gen_out: &ImageBatch, disc_recon: &ImageBatch) -> Result<f64> {
    mad_batches(gen_out, disc_recon)
}

/// `real_err - k * gen_loss`, the discriminator side of a BEGAN game.
pub fn began_disc_loss(real_err: f64, gen_loss: f64, k: f64) -> Result<f64> {
    if !(real_err.is_finite() && gen_loss.is_finite() && k.is_finite()) {
        return Err(Error::Numeric("non-finite BEGAN loss inputs".into()));
    }
    if real_err < 0.0 || gen_loss < 0.0 {
        return Err(Error::InvalidArgument("reconstruction errors must be nonnegative".into()));
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument("k must lie in [0,1]".into()));
    }
    Ok(real_err - k * gen_loss)
}

/// Proportional-control update of a balance term, clamped to [0,1].
pub fn update_k(k_prev: f64, loss_d_real_term: f64, loss_g: f64, rate: f64, gamma: f64) -> Result<f64> {
    if !(k_prev.is_finite() && loss_d_real_term.is_finite() && loss_g.is_finite()) {
        return Err(Error::Numeric("non-finite input to update_k".into()));
    }
    if !(0.0..=1.0).contains(&k_prev) {
        return Err(Error::InvalidArgument("k_prev must lie in [0,1]".into()));
    }
    Ok((k_prev + rate * (gamma * loss_d_real_term - loss_g)).clamp(0.0, 1.0))
}

/// Pair-matching discriminator loss: mean |s - G'(r)| - k_DP * L_cyc.
pub fn pair_disc_loss(
    s: &ImageBatch,
    inv_of_real: &ImageBatch,
    cyc: f64,
    k_dp: f64,
) -> Result<f64> {
    if cyc < 0.0 {
        return Err(Error::InvalidArgument("cycle loss must be nonnegative".into()));
    }
    Ok(mad_batches(s, inv_of_real)? - k_dp * cyc)
}

/// Mean |x - G(x)|: pixel identity regularizer.
pub fn identity_pixel_loss(x: &ImageBatch, gx: &ImageBatch) -> Result<f64> {
    mad_batches(x, gx)
}

/// Value, embedding gradient and sigma^2 of the identity set loss.
///
/// Per sample: `-log[ exp(s*d_own/(2s2) - eta) / sum_{j != own} exp(s*d_j/(2s2)) ]`
/// summed over the batch, with `d_j` the squared distance to centroid `j`,
/// `s2` the batch own-distance variance (floored), and `s` the exponent sign.
pub fn identity_set_loss_grad(
    embeddings: &Array2<f64>,
    labels: &[u32],
    store: &CentroidStore,
    cfg: &IdentityLossConfig,
) -> Result<(f64, Array2<f64>, f64)> {
    let (m, d) = embeddings.dim();
    if m < 2 {
        return Err(Error::BatchSize("identity set loss needs at least 2 samples".into()));
    }
    if labels.len() != m {
        return Err(Error::Structure("labels length must equal batch size".into()));
    }
    if d != store.dim() {
        return Err(Error::Structure("embedding dim does not match centroid store".into()));
    }
    if store.initialized_len() < 2 {
        return Err(Error::State("need at least 2 initialized centroids".into()));
    }
    let sign = match cfg.sign {
        Eq7Sign::Magnet => -1.0,
        Eq7Sign::AsPrinted => 1.0,
    };
    let centroid_labels: Vec<u32> = store.labels().collect();
    let centroids: Vec<Array1<f64>> = centroid_labels.iter().map(|&l| store.get(l)).collect();

    // squared distances to own centroid (which may be the zero vector)
    let own_centroids: Vec<Array1<f64>> = labels.iter().map(|&l| store.get(l)).collect();
    let d_own: Vec<f64> = (0..m)
        .map(|i| {
            let diff = &embeddings.row(i) - &own_centroids[i];
            diff.dot(&diff)
        })
        .collect();
    let sigma_sq = (d_own.iter().sum::<f64>() / (m as f64 - 1.0)).max(cfg.sigma_floor);
    let floored = d_own.iter().sum::<f64>() / (m as f64 - 1.0) <= cfg.sigma_floor;

    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros((m, d));
    let mut dl_dsigma_sq = 0.0;
    for i in 0..m {
        let e = embeddings.row(i);
        // exponents over stored centroids excluding the own label
        let mut terms: Vec<(usize, f64, f64)> = Vec::new(); // (centroid idx, d_ij, exponent)
        for (j, cl) in centroid_labels.iter().enumerate() {
            if *cl == labels[i] {
                continue;
            }
            let diff = &e - &centroids[j];
            let dij = diff.dot(&diff);
            terms.push((j, dij, sign * dij / (2.0 * sigma_sq)));
        }
        if terms.is_empty() {
            return Err(Error::State("no competing centroid for a sample".into()));
        }
        let mx = terms.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = terms.iter().map(|t| (t.2 - mx).exp()).sum();
        let lse = mx + z.ln();
        total += -sign * d_own[i] / (2.0 * sigma_sq) + cfg.eta + lse;

        // d/de_i with sigma fixed
        let own_diff = &e - &own_centroids[i];
        let mut gi: Array1<f64> = &own_diff * (-sign / sigma_sq);
        let mut weighted_d = 0.0;
        for (j, dij, ex) in &terms {
            let w = (ex - mx).exp() / z;
            let diff = &e - &centroids[*j];
            gi = gi + &diff * (w * sign / sigma_sq);
            weighted_d += w * dij;
        }
        grad.row_mut(i).assign(&gi);
        dl_dsigma_sq += sign / (2.0 * sigma_sq * sigma_sq) * (d_own[i] - weighted_d);
    }

    if cfg.differentiate_sigma && !floored {
        for i in 0..m {
            let own_diff = &embeddings.row(i) - &own_centroids[i];
            let extra: Array1<f64> = &own_diff * (2.0 / (m as f64 - 1.0) * dl_dsigma_sq);
            let updated = &grad.row(i) + &extra;
            grad.row_mut(i).assign(&updated);
        }
    }

    if !total.is_finite() {
        return Err(Error::Numeric("identity set loss diverged".into()));
    }
    Ok((total, grad, sigma_sq))
}

/// Value of the identity set loss plus the sigma^2 actually used.
pub fn identity_set_loss(
    embeddings: &Array2<f64>,
    labels: &[u32],
    store: &CentroidStore,
    cfg: &IdentityLossConfig,
) -> Result<(f64, f64)> {
    identity_set_loss_grad(embeddings, labels, store, cfg).map(|(v, _, s)| (v, s))
}

/// Tape node for the identity set loss. Returns the scalar node and the
/// sigma^2 used (for the metrics log).
pub fn identity_set_loss_taped(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[u32],
    store: &CentroidStore,
    cfg: &IdentityLossConfig,
) -> Result<(Var, f64)> {
    let emb: Array2<f64> = tape
        .value(embeddings)
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::Structure("embeddings must be rank 2".into()))?;
    let (value, _, sigma_sq) = identity_set_loss_grad(&emb, labels, store, cfg)?;
    let labels = labels.to_vec();
    let store = store.clone();
    let cfg = *cfg;
    let node = tape.unary_custom(
        embeddings,
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), value),
        Box::new(move |x, g| {
            let gs = *g.iter().next().unwrap();
            let emb: Array2<f64> = x.clone().into_dimensionality().expect("rank-2 embeddings");
            let (_, grad, _) = identity_set_loss_grad(&emb, &labels, &store, &cfg)
                .expect("identity loss gradient failed on values that evaluated cleanly");
            (grad * gs).into_dyn()
        }),
    );
    Ok((node, sigma_sq))
}
