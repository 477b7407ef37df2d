//! Training orchestration: the three simultaneous objectives, the learning
//! rate schedule, EMA weights, embedder pretraining, and checkpointing.
//!
//! Every random draw in a step is keyed by (root seed, iteration), so a run
//! resumed from a checkpoint replays the exact step sequence of an
//! uninterrupted run without persisting generator state for the RNG.

use crate::autodiff::{Arr, Tape};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{
    identity_set_loss_taped, update_k, CentroidStore, EquilibriumState, IdentityLossConfig,
    LossWeights,
};
use crate::nets::{
    autoencode_taped, embed_logits_taped, embed_taped, generator_forward_taped, Mode, NetworkSpec,
    StagedNet, WeightSet,
};
use crate::toymm::{
    fnv1a, render_real, sample_params_with, DataConfig, DatasetBundle, DomainTag, ImageBatch,
};
use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Iterations at which the reference schedule halves the learning rate, for
/// a run of [`REFERENCE_TOTAL_ITERS`] iterations.
pub const REFERENCE_LR_MILESTONES: [u64; 7] =
    [128_000, 192_000, 224_000, 240_000, 244_000, 246_000, 247_000];
pub const REFERENCE_TOTAL_ITERS: u64 = 248_000;

/// Reference milestones scaled to a different run length, preserving their
/// relative positions. Collisions from rounding are deduplicated.
pub fn scaled_milestones(total_iters: u64) -> Vec<u64> {
    let mut out: Vec<u64> = REFERENCE_LR_MILESTONES
        .iter()
        .map(|&m| {
            ((m as u128 * total_iters as u128 + REFERENCE_TOTAL_ITERS as u128 / 2)
                / REFERENCE_TOTAL_ITERS as u128) as u64
        })
        .filter(|&m| m > 0)
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub ids: usize,
    pub per_id: usize,
    pub iters: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { ids: 50, per_id: 8, iters: 250, lr: 2e-3, batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub loss_weights: LossWeights,
    pub identity: IdentityLossConfig,
    pub base_lr: f64,
    /// Halving iterations; empty means "derive from total_iters" via
    /// [`scaled_milestones`].
    pub lr_milestones: Vec<u64>,
    pub batch_size: usize,
    pub total_iters: u64,
    pub ema_decay: f64,
    pub base_channels: usize,
    pub embedding_dim: usize,
    pub centroid_beta: f64,
    pub interpret_beta_as_retention: bool,
    /// Drop the adversarial reconstruction terms from the two generator
    /// objectives, leaving only the lambda-weighted parts. Diagnostic knob.
    pub detach_adversarial: bool,
    pub pretrain: PretrainConfig,
    pub seed: u64,
    /// Checkpoint every N iterations when positive and an output directory
    /// is given.
    pub checkpoint_every: u64,
    /// Emit a sample image grid every N iterations when positive and an
    /// output directory is given.
    pub grid_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let total_iters = 5000;
        TrainConfig {
            data: DataConfig::default(),
            loss_weights: LossWeights::default(),
            identity: IdentityLossConfig::default(),
            base_lr: 8e-5,
            lr_milestones: Vec::new(),
            batch_size: 16,
            total_iters,
            ema_decay: 0.999,
            base_channels: 4,
            embedding_dim: 32,
            centroid_beta: 0.95,
            interpret_beta_as_retention: false,
            detach_adversarial: false,
            pretrain: PretrainConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            grid_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss_weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (the identity set loss needs M >= 2)".into(),
            ));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("lr_milestones must be strictly increasing".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0,1]".into()));
        }
        if self.base_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.centroid_beta) {
            return Err(Error::Config("centroid_beta must lie in [0,1]".into()));
        }
        if self.pretrain.ids < 2 || self.pretrain.per_id == 0 || self.pretrain.batch_size < 2 {
            return Err(Error::Config("pretraining needs >= 2 identities and batch >= 2".into()));
        }
        Ok(())
    }

    pub fn generator_spec(&self) -> NetworkSpec {
        NetworkSpec::generator(self.data.image_size, self.data.channels, self.base_channels)
    }

    pub fn inverse_generator_spec(&self) -> NetworkSpec {
        NetworkSpec::inverse_generator(self.data.image_size, self.data.channels, self.base_channels)
    }

    pub fn discriminator_spec(&self) -> NetworkSpec {
        NetworkSpec::discriminator(self.data.image_size, self.data.channels, self.base_channels)
    }

    pub fn embedder_spec(&self) -> NetworkSpec {
        let mut s =
            NetworkSpec::embedder(self.data.image_size, self.data.channels, self.base_channels);
        s.embedding_dim = self.embedding_dim;
        s
    }

    /// The milestones actually in force: explicit ones, or the reference
    /// schedule scaled to this run length.
    pub fn effective_milestones(&self) -> Vec<u64> {
        if self.lr_milestones.is_empty() {
            scaled_milestones(self.total_iters)
        } else {
            self.lr_milestones.clone()
        }
    }
}

/// Learning rate after the halving schedule: base / 2^(milestones reached).
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    let passed = config.effective_milestones().iter().filter(|&&m| iteration >= m).count();
    config.base_lr * 0.5f64.powi(passed as i32)
}

/// Elementwise ema' = decay * ema + (1 - decay) * current.
pub fn ema_update(ema: &WeightSet, current: &WeightSet, decay: f64) -> Result<WeightSet> {
    let cur = current.entries();
    if ema.entries().len() != cur.len() {
        return Err(Error::Structure("EMA and current weight sets differ in layout".into()));
    }
    let entries = ema
        .entries()
        .iter()
        .zip(cur)
        .map(|((name, e), (cname, c))| {
            if name != cname || e.shape() != c.shape() {
                return Err(Error::Structure("EMA and current weight sets differ in layout".into()));
            }
            Ok((name.clone(), e * decay + &(c * (1.0 - decay))))
        })
        .collect::<Result<Vec<_>>>()?;
    WeightSet::new(entries)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers of one optimized weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: WeightSet,
    pub v: WeightSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &WeightSet) -> Self {
        AdamState { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    /// One bias-corrected update; returns the stepped weights and mutates
    /// the moment buffers.
    pub fn step(&mut self, weights: &WeightSet, grads: &WeightSet, lr: f64) -> Result<WeightSet> {
        let n = weights.entries().len();
        if grads.entries().len() != n || self.m.entries().len() != n {
            return Err(Error::Structure("optimizer buffers do not match weights".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut new_w = Vec::with_capacity(n);
        let mut new_m = Vec::with_capacity(n);
        let mut new_v = Vec::with_capacity(n);
        for i in 0..n {
            let (name, w) = &weights.entries()[i];
            let (gname, g) = &grads.entries()[i];
            if name != gname || w.shape() != g.shape() {
                return Err(Error::Structure("gradient layout does not match weights".into()));
            }
            let m = &self.m.entries()[i].1 * ADAM_BETA1 + &(g * (1.0 - ADAM_BETA1));
            let v = &self.v.entries()[i].1 * ADAM_BETA2 + &(g.mapv(|x| x * x) * (1.0 - ADAM_BETA2));
            let mut stepped = w.clone();
            ndarray::Zip::from(&mut stepped).and(&m).and(&v).for_each(|wv, &mv, &vv| {
                *wv -= lr * (mv / bc1) / ((vv / bc2).sqrt() + ADAM_EPS);
            });
            new_w.push((name.clone(), stepped));
            new_m.push((name.clone(), m));
            new_v.push((name.clone(), v));
        }
        self.m = WeightSet::new(new_m)?;
        self.v = WeightSet::new(new_v)?;
        WeightSet::new(new_w)
    }
}

/// Full mutable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub gen: WeightSet,
    pub inv: WeightSet,
    pub disc_real: WeightSet,
    pub disc_synth: WeightSet,
    pub embedder: WeightSet,
    pub eq: EquilibriumState,
    pub centroids: CentroidStore,
    pub ema_gen: WeightSet,
    pub ema_inv: WeightSet,
    pub opt_gen: AdamState,
    pub opt_inv: AdamState,
    pub opt_disc_real: AdamState,
    pub opt_disc_synth: AdamState,
}

impl TrainState {
    /// Fresh state with seeded initial weights and a frozen embedder.
    pub fn init(config: &TrainConfig, embedder: WeightSet) -> Result<TrainState> {
        config.validate()?;
        embedder.matches(&config.embedder_spec())?;
        let gen = WeightSet::init(&config.generator_spec(), fnv1a(&[config.seed, 0x6e]))?;
        let inv =
            WeightSet::init(&config.inverse_generator_spec(), fnv1a(&[config.seed, 0x17]))?;
        let disc_real =
            WeightSet::init(&config.discriminator_spec(), fnv1a(&[config.seed, 0xd4]))?;
        let disc_synth =
            WeightSet::init(&config.discriminator_spec(), fnv1a(&[config.seed, 0xd5]))?;
        let mut centroids = CentroidStore::new(config.embedding_dim, config.centroid_beta);
        centroids.interpret_beta_as_retention = config.interpret_beta_as_retention;
        Ok(TrainState {
            iteration: 0,
            ema_gen: gen.clone(),
            ema_inv: inv.clone(),
            opt_gen: AdamState::new(&gen),
            opt_inv: AdamState::new(&inv),
            opt_disc_real: AdamState::new(&disc_real),
            opt_disc_synth: AdamState::new(&disc_synth),
            gen,
            inv,
            disc_real,
            disc_synth,
            embedder,
            eq: EquilibriumState::default(),
            centroids,
        })
    }
}

/// The mini-batches one step consumes.
#[derive(Debug, Clone)]
pub struct TrainBatches {
    pub synthetic: ImageBatch,
    pub real: ImageBatch,
    pub paired_synthetic: ImageBatch,
    pub paired_real: ImageBatch,
}

fn gather(
    rng: &mut ChaCha8Rng,
    count: usize,
    n: usize,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Data("cannot sample a batch from an empty dataset".into()));
    }
    Ok((0..count).map(|_| rng.gen_range(0..n)).collect())
}

/// Draw the step's batches; a pure function of (config.seed, iteration).
pub fn sample_batches(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    iteration: u64,
) -> Result<TrainBatches> {
    let b = config.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[config.seed, 0xba7c, iteration]));
    let si = gather(&mut rng, b, bundle.unpaired_synthetic.len())?;
    let ri = gather(&mut rng, b, bundle.unpaired_real.len())?;
    let pi = gather(&mut rng, b, bundle.paired.len())?;
    let synth_images: Vec<_> =
        si.iter().map(|&i| bundle.unpaired_synthetic[i].image.clone()).collect();
    let synth_labels: Vec<u32> =
        si.iter().map(|&i| bundle.unpaired_synthetic[i].params.identity_label).collect();
    let real_images: Vec<_> = ri.iter().map(|&i| bundle.unpaired_real[i].1.clone()).collect();
    let real_labels: Vec<u32> = ri.iter().map(|&i| bundle.unpaired_real[i].0).collect();
    let ps: Vec<_> = pi.iter().map(|&i| bundle.paired[i].0.clone()).collect();
    let pr: Vec<_> = pi.iter().map(|&i| bundle.paired[i].1.clone()).collect();
    Ok(TrainBatches {
        synthetic: ImageBatch::from_images(&synth_images, DomainTag::Synthetic, synth_labels)?,
        real: ImageBatch::from_images(&real_images, DomainTag::Real, real_labels)?,
        paired_synthetic: ImageBatch::from_images(&ps, DomainTag::Synthetic, vec![0; b])?,
        paired_real: ImageBatch::from_images(&pr, DomainTag::Real, vec![0; b])?,
    })
}

/// Scalar losses of one step, in objective composition order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub lr: f64,
    pub l_g: f64,
    pub l_g_inv: f64,
    pub l_cyc: f64,
    pub l_pair: f64,
    pub l_c: f64,
    pub l_id: f64,
    pub l_dr_real: f64,
    pub l_ds_real: f64,
    pub obj_g: f64,
    pub obj_inv: f64,
    pub obj_disc: f64,
    pub k_dr: f64,
    pub k_ds: f64,
    pub k_dp: f64,
    pub sigma_sq: f64,
}

impl MetricsRecord {
    fn check_finite(&self) -> Result<()> {
        let fields = [
            ("l_g", self.l_g),
            ("l_g_inv", self.l_g_inv),
            ("l_cyc", self.l_cyc),
            ("l_pair", self.l_pair),
            ("l_c", self.l_c),
            ("l_id", self.l_id),
            ("l_dr_real", self.l_dr_real),
            ("l_ds_real", self.l_ds_real),
            ("obj_g", self.obj_g),
            ("obj_inv", self.obj_inv),
            ("obj_disc", self.obj_disc),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {}: {name} = {v}; record: {self:?}",
                    self.iteration
                )));
            }
        }
        Ok(())
    }
}

/// Everything computed on the step's tape before any state is mutated.
pub struct StepComputation {
    pub grads_gen: WeightSet,
    pub grads_inv: WeightSet,
    pub grads_disc_real: WeightSet,
    pub grads_disc_synth: WeightSet,
    pub embeddings: Array2<f64>,
    pub metrics: MetricsRecord,
}

fn to_arr(x: &ImageBatch) -> Arr {
    x.pixels.clone().into_dyn()
}

/// Build the step graph from pre-step weights and take the three backward
/// passes of the parameter partition. Pure: no state is mutated.
pub fn compute_step(
    state: &TrainState,
    batches: &TrainBatches,
    config: &TrainConfig,
) -> Result<StepComputation> {
    let lw = &config.loss_weights;
    let mut tape = Tape::new();
    let gen = StagedNet::stage(&mut tape, &config.generator_spec(), &state.gen)?;
    let inv = StagedNet::stage(&mut tape, &config.inverse_generator_spec(), &state.inv)?;
    let dr = StagedNet::stage(&mut tape, &config.discriminator_spec(), &state.disc_real)?;
    let ds = StagedNet::stage(&mut tape, &config.discriminator_spec(), &state.disc_synth)?;
    let emb_net = StagedNet::stage(&mut tape, &config.embedder_spec(), &state.embedder)?;

    let x = tape.leaf(to_arr(&batches.synthetic));
    let y = tape.leaf(to_arr(&batches.real));
    let ps = tape.leaf(to_arr(&batches.paired_synthetic));
    let pr = tape.leaf(to_arr(&batches.paired_real));

    let dropout_seed = fnv1a(&[config.seed, 0xd0, state.iteration]);
    let gx = generator_forward_taped(&mut tape, &gen, x, Mode::Train, dropout_seed)?;
    let x_cyc = generator_forward_taped(&mut tape, &inv, gx, Mode::Train, 0)?;
    let inv_y = generator_forward_taped(&mut tape, &inv, y, Mode::Train, 0)?;
    let inv_pr = generator_forward_taped(&mut tape, &inv, pr, Mode::Train, 0)?;

    // BEGAN reconstruction terms
    let dr_gx = autoencode_taped(&mut tape, &dr, gx)?;
    let dr_y = autoencode_taped(&mut tape, &dr, y)?;
    let ds_inv_y = autoencode_taped(&mut tape, &ds, inv_y)?;
    let ds_x = autoencode_taped(&mut tape, &ds, x)?;
    let l_g = tape.mean_abs_diff(gx, dr_gx);
    let l_dr_real = tape.mean_abs_diff(y, dr_y);
    let l_g_inv = tape.mean_abs_diff(inv_y, ds_inv_y);
    let l_ds_real = tape.mean_abs_diff(x, ds_x);

    let l_cyc = tape.mean_abs_diff(x_cyc, x);
    let l_pair = tape.mean_abs_diff(ps, inv_pr);
    let l_id = tape.mean_abs_diff(gx, x);

    // Identity set loss over the frozen embedder's view of G(x); defined
    // once at least two centroids have been observed.
    let embeddings_node = embed_taped(&mut tape, &emb_net, gx)?;
    let embeddings: Array2<f64> = tape
        .value(embeddings_node)
        .clone()
        .into_dimensionality()
        .expect("rank-2 embeddings");
    let identity_cfg = IdentityLossConfig {
        sign: config.identity.sign,
        eta: config.identity.eta,
        differentiate_sigma: config.identity.differentiate_sigma,
        sigma_floor: config.identity.sigma_floor,
    };
    let id_term = if state.centroids.initialized_len() >= 2 {
        Some(identity_set_loss_taped(
            &mut tape,
            embeddings_node,
            &batches.synthetic.labels,
            &state.centroids,
            &identity_cfg,
        )?)
    } else {
        None
    };
    let (l_c_val, sigma_sq) = match &id_term {
        Some((node, s2)) => (tape.scalar(*node), *s2),
        None => (0.0, 0.0),
    };

    // objective for theta_G
    let mut obj_g = if config.detach_adversarial {
        tape.scale(l_g, 0.0)
    } else {
        tape.scale(l_g, 1.0)
    };
    let cyc_term = tape.scale(l_cyc, lw.lambda_cyc);
    obj_g = tape.add(obj_g, cyc_term);
    if let Some((node, _)) = &id_term {
        if lw.lambda_c != 0.0 {
            let t = tape.scale(*node, lw.lambda_c);
            obj_g = tape.add(obj_g, t);
        }
    }
    if lw.lambda_id != 0.0 {
        let t = tape.scale(l_id, lw.lambda_id);
        obj_g = tape.add(obj_g, t);
    }

    // objective for theta_G' (the pair discriminator shares these weights)
    let mut obj_inv = if config.detach_adversarial {
        tape.scale(l_g_inv, 0.0)
    } else {
        tape.scale(l_g_inv, 1.0)
    };
    let cyc_term = tape.scale(l_cyc, lw.lambda_cyc);
    obj_inv = tape.add(obj_inv, cyc_term);
    if lw.lambda_dp != 0.0 {
        let pair_term = tape.scale(l_pair, lw.lambda_dp);
        obj_inv = tape.add(obj_inv, pair_term);
        let balance = tape.scale(l_cyc, -lw.lambda_dp * state.eq.k_dp);
        obj_inv = tape.add(obj_inv, balance);
    }

    // joint objective for theta_DR and theta_DS
    let neg_g = tape.scale(l_g, -state.eq.k_dr);
    let mut obj_disc = tape.add(l_dr_real, neg_g);
    let neg_gi = tape.scale(l_g_inv, -state.eq.k_ds);
    let ds_part = tape.add(l_ds_real, neg_gi);
    obj_disc = tape.add(obj_disc, ds_part);

    let metrics = MetricsRecord {
        iteration: state.iteration,
        lr: lr_at(state.iteration, config),
        l_g: tape.scalar(l_g),
        l_g_inv: tape.scalar(l_g_inv),
        l_cyc: tape.scalar(l_cyc),
        l_pair: tape.scalar(l_pair),
        l_c: l_c_val,
        l_id: tape.scalar(l_id),
        l_dr_real: tape.scalar(l_dr_real),
        l_ds_real: tape.scalar(l_ds_real),
        obj_g: tape.scalar(obj_g),
        obj_inv: tape.scalar(obj_inv),
        obj_disc: tape.scalar(obj_disc),
        k_dr: state.eq.k_dr,
        k_ds: state.eq.k_ds,
        k_dp: state.eq.k_dp,
        sigma_sq,
    };
    metrics.check_finite()?;

    // three backward passes from the same pre-step graph; each weight set
    // keeps only the gradients of its own objective
    let g_grads = tape.backward(obj_g);
    let grads_gen = gen.collect_grads(&tape, &g_grads);
    let i_grads = tape.backward(obj_inv);
    let grads_inv = inv.collect_grads(&tape, &i_grads);
    let d_grads = tape.backward(obj_disc);
    let grads_disc_real = dr.collect_grads(&tape, &d_grads);
    let grads_disc_synth = ds.collect_grads(&tape, &d_grads);

    Ok(StepComputation {
        grads_gen,
        grads_inv,
        grads_disc_real,
        grads_disc_synth,
        embeddings,
        metrics,
    })
}

/// One simultaneous update of all four networks plus the controllers.
pub fn train_step(
    state: &TrainState,
    batches: &TrainBatches,
    config: &TrainConfig,
) -> Result<(TrainState, MetricsRecord)> {
    let comp = compute_step(state, batches, config)?;
    let m = &comp.metrics;
    let lr = m.lr;

    let mut next = state.clone();
    next.gen = next.opt_gen.step(&state.gen, &comp.grads_gen, lr)?;
    next.inv = next.opt_inv.step(&state.inv, &comp.grads_inv, lr)?;
    next.disc_real = next.opt_disc_real.step(&state.disc_real, &comp.grads_disc_real, lr)?;
    next.disc_synth = next.opt_disc_synth.step(&state.disc_synth, &comp.grads_disc_synth, lr)?;

    next.eq.k_dr = update_k(state.eq.k_dr, m.l_dr_real, m.l_g, state.eq.rate, state.eq.gamma)?;
    next.eq.k_ds = update_k(state.eq.k_ds, m.l_ds_real, m.l_g_inv, state.eq.rate, state.eq.gamma)?;
    next.eq.k_dp = update_k(state.eq.k_dp, m.l_pair, m.l_cyc, state.eq.rate, state.eq.gamma)?;

    next.centroids = state.centroids.updated(&comp.embeddings, &batches.synthetic.labels)?;
    next.ema_gen = ema_update(&state.ema_gen, &next.gen, config.ema_decay)?;
    next.ema_inv = ema_update(&state.ema_inv, &next.inv, config.ema_decay)?;
    next.iteration = state.iteration + 1;
    Ok((next, comp.metrics))
}

/// Pretrain the embedding network as a classifier over a disjoint identity
/// pool in the realistic domain; the softmax head is discarded.
pub fn pretrain_embedder(config: &TrainConfig) -> Result<WeightSet> {
    config.validate()?;
    let pc = &config.pretrain;
    let seed = fnv1a(&[config.seed, 0xe3b]);
    let params = sample_params_with(seed, pc.ids, pc.per_id, config.data.pretrain_id_base)?;
    let size = config.data.image_size;
    let channels = config.data.channels;
    let images: Vec<_> = params
        .iter()
        .map(|p| render_real(p, size, channels))
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<usize> =
        params.iter().map(|p| (p.identity_label - config.data.pretrain_id_base) as usize).collect();

    let spec = config.embedder_spec();
    let mut weights = WeightSet::init(&spec, fnv1a(&[config.seed, 0xe3c]))?;
    let head_dim = spec.embedding_dim;
    // zero head: logits start uniform, so the scaled-cosine loss starts at
    // ln(ids) instead of being dominated by an arbitrary random projection
    let mut head_w: ArrayD<f64> = ArrayD::zeros(ndarray::IxDyn(&[head_dim, pc.ids]));
    let mut head_b: ArrayD<f64> = ArrayD::zeros(ndarray::IxDyn(&[pc.ids]));
    let mut opt = AdamState::new(&weights);
    let mut opt_head = AdamState::new(&WeightSet::new(vec![
        ("w".into(), head_w.clone()),
        ("b".into(), head_b.clone()),
    ])?);

    for iter in 0..pc.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[config.seed, 0xe3e, iter]));
        let idx = gather(&mut rng, pc.batch_size, images.len())?;
        let batch_images: Vec<_> = idx.iter().map(|&i| images[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
        let batch = ImageBatch::from_images(
            &batch_images,
            DomainTag::Real,
            labels.iter().map(|&c| c as u32).collect(),
        )?;

        let mut tape = Tape::new();
        let net = StagedNet::stage(&mut tape, &spec, &weights)?;
        let hw = tape.leaf(head_w.clone());
        let hb = tape.leaf(head_b.clone());
        let xv = tape.leaf(to_arr(&batch));
        let (_, logits) = embed_logits_taped(&mut tape, &net, hw, hb, xv)?;
        let loss = tape.softmax_cross_entropy(logits, &labels);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!("pretraining loss diverged at iteration {iter}")));
        }
        let grads = tape.backward(loss);
        let net_grads = net.collect_grads(&tape, &grads);
        weights = opt.step(&weights, &net_grads, pc.lr)?;
        let zero_w = ArrayD::zeros(head_w.raw_dim());
        let zero_b = ArrayD::zeros(head_b.raw_dim());
        let head_grads = WeightSet::new(vec![
            ("w".into(), grads.get(hw).cloned().unwrap_or(zero_w)),
            ("b".into(), grads.get(hb).cloned().unwrap_or(zero_b)),
        ])?;
        let head_ws =
            WeightSet::new(vec![("w".into(), head_w.clone()), ("b".into(), head_b.clone())])?;
        let stepped = opt_head.step(&head_ws, &head_grads, pc.lr)?;
        head_w = stepped.entries()[0].1.clone();
        head_b = stepped.entries()[1].1.clone();
    }
    Ok(weights)
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_ARRAYS: &str = "arrays.bin";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: String,
    iteration: u64,
    eq: EquilibriumState,
    centroids: CentroidStore,
    adam_t: [u64; 4],
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    let manifest = CheckpointManifest {
        version: io::CHECKPOINT_VERSION.to_string(),
        iteration: state.iteration,
        eq: state.eq.clone(),
        centroids: state.centroids.clone(),
        adam_t: [
            state.opt_gen.t,
            state.opt_inv.t,
            state.opt_disc_real.t,
            state.opt_disc_synth.t,
        ],
    };
    std::fs::write(path.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    let mut entries = Vec::new();
    for (prefix, ws) in [
        ("gen", &state.gen),
        ("inv", &state.inv),
        ("disc_real", &state.disc_real),
        ("disc_synth", &state.disc_synth),
        ("embedder", &state.embedder),
        ("ema_gen", &state.ema_gen),
        ("ema_inv", &state.ema_inv),
        ("opt_gen.m", &state.opt_gen.m),
        ("opt_gen.v", &state.opt_gen.v),
        ("opt_inv.m", &state.opt_inv.m),
        ("opt_inv.v", &state.opt_inv.v),
        ("opt_disc_real.m", &state.opt_disc_real.m),
        ("opt_disc_real.v", &state.opt_disc_real.v),
        ("opt_disc_synth.m", &state.opt_disc_synth.m),
        ("opt_disc_synth.v", &state.opt_disc_synth.v),
    ] {
        entries.extend(io::weight_set_entries(prefix, ws));
    }
    io::write_named_f64(&path.join(CHECKPOINT_ARRAYS), &entries)
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(path.join(CHECKPOINT_MANIFEST))?)?;
    if manifest.version != io::CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            expected: io::CHECKPOINT_VERSION.to_string(),
            found: manifest.version,
        });
    }
    let entries = io::read_named_f64(&path.join(CHECKPOINT_ARRAYS))?;
    let ws = |p: &str| io::weight_set_from_entries(p, &entries);
    let opt = |p: &str, t: u64| -> Result<AdamState> {
        Ok(AdamState { m: ws(&format!("{p}.m"))?, v: ws(&format!("{p}.v"))?, t })
    };
    Ok(TrainState {
        iteration: manifest.iteration,
        gen: ws("gen")?,
        inv: ws("inv")?,
        disc_real: ws("disc_real")?,
        disc_synth: ws("disc_synth")?,
        embedder: ws("embedder")?,
        ema_gen: ws("ema_gen")?,
        ema_inv: ws("ema_inv")?,
        opt_gen: opt("opt_gen", manifest.adam_t[0])?,
        opt_inv: opt("opt_inv", manifest.adam_t[1])?,
        opt_disc_real: opt("opt_disc_real", manifest.adam_t[2])?,
        opt_disc_synth: opt("opt_disc_synth", manifest.adam_t[3])?,
        eq: manifest.eq,
        centroids: manifest.centroids,
    })
}

/// Artifact sinks of a training run.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    /// Metrics are appended here as one JSON record per iteration.
    pub metrics_path: Option<std::path::PathBuf>,
    /// Periodic checkpoints and image grids land under this directory.
    pub artifact_dir: Option<std::path::PathBuf>,
}

/// Run from the state's current iteration up to config.total_iters.
pub fn train_loop(
    mut state: TrainState,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    outputs: &RunOutputs,
) -> Result<(TrainState, Vec<MetricsRecord>)> {
    config.validate()?;
    let mut records = Vec::new();
    while state.iteration < config.total_iters {
        let batches = sample_batches(bundle, config, state.iteration)?;
        let (next, metrics) = train_step(&state, &batches, config)?;
        if let Some(p) = &outputs.metrics_path {
            io::append_jsonl(p, &metrics)?;
        }
        state = next;
        if let Some(dir) = &outputs.artifact_dir {
            if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
                checkpoint_save(&state, &dir.join(format!("checkpoint_{:07}", state.iteration)))?;
            }
            if config.grid_every > 0 && state.iteration % config.grid_every == 0 {
                emit_progress_grid(&state, bundle, config, dir)?;
            }
        }
        records.push(metrics);
    }
    Ok((state, records))
}

/// Save a (synthetic, generated, oracle) strip for the first few held-out
/// items under `dir/grids/`.
fn emit_progress_grid(
    state: &TrainState,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    dir: &Path,
) -> Result<()> {
    let n = bundle.heldout.len().min(4);
    if n == 0 {
        return Ok(());
    }
    let synth: Vec<_> = bundle.heldout[..n].iter().map(|(_, s, _)| s.clone()).collect();
    let batch = ImageBatch::from_images(&synth, DomainTag::Synthetic, vec![0; n])?;
    let out = crate::nets::generator_forward(
        &batch,
        &state.ema_gen,
        &config.generator_spec(),
        Mode::Eval,
        0,
    )?;
    let mut tiles = Vec::new();
    for i in 0..n {
        tiles.push(bundle.heldout[i].1.clone());
        tiles.push(out.pixels.index_axis(ndarray::Axis(0), i).to_owned());
        tiles.push(bundle.heldout[i].2.clone());
    }
    let grid_dir = dir.join("grids");
    std::fs::create_dir_all(&grid_dir)?;
    crate::eval::emit_grid(
        &tiles,
        n,
        3,
        &grid_dir.join(format!("iter_{:07}.png", state.iteration)),
    )
}

/// End-to-end: build (or reuse) state and run the full schedule.
pub fn train(
    config: &TrainConfig,
    bundle: &DatasetBundle,
    embedder: WeightSet,
    outputs: &RunOutputs,
) -> Result<(TrainState, Vec<MetricsRecord>)> {
    let state = TrainState::init(config, embedder)?;
    train_loop(state, bundle, config, outputs)
}
