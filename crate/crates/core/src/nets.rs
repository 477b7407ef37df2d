//! Network definitions: the two translation generators, the autoencoder
//! discriminators and the frozen face embedding network.
//!
//! Architectures are built directly on the [`Tape`](crate::autodiff::Tape) so
//! one shared forward graph can serve several objectives. Weights live in
//! [`WeightSet`]s, immutable collections of named arrays; updates produce new
//! arrays rather than mutating shared state.

use crate::autodiff::{Arr, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::toymm::{DomainTag, ImageBatch};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    InverseGenerator,
    AutoencoderDiscriminator,
    Embedder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shape-level description of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub num_residual_blocks: usize,
    pub base_channels: usize,
    pub use_skip: bool,
    pub dropout_keep: f64,
    pub input_size: usize,
    pub channels: usize,
    /// Embedder only.
    pub embedding_dim: usize,
    /// Autoencoder discriminators only.
    pub bottleneck: usize,
}

/// Strided conv output size: (s + 2*1 - 3) / 2 + 1.
fn half(s: usize) -> usize {
    (s - 1) / 2 + 1
}

impl NetworkSpec {
    pub fn generator(input_size: usize, channels: usize, base_channels: usize) -> Self {
        NetworkSpec {
            kind: NetKind::Generator,
            num_residual_blocks: 3,
            base_channels,
            use_skip: true,
            dropout_keep: 0.9,
            input_size,
            channels,
            embedding_dim: 0,
            bottleneck: 0,
        }
    }

    /// The inverse mapping network. No dropout, no input skip: it must be
    /// free to leave the input domain entirely.
    pub fn inverse_generator(input_size: usize, channels: usize, base_channels: usize) -> Self {
        NetworkSpec {
            kind: NetKind::InverseGenerator,
            use_skip: false,
            ..Self::generator(input_size, channels, base_channels)
        }
    }

    pub fn discriminator(input_size: usize, channels: usize, base_channels: usize) -> Self {
        NetworkSpec {
            kind: NetKind::AutoencoderDiscriminator,
            num_residual_blocks: 0,
            base_channels,
            use_skip: false,
            dropout_keep: 1.0,
            input_size,
            channels,
            embedding_dim: 0,
            bottleneck: 64,
        }
    }

    pub fn embedder(input_size: usize, channels: usize, base_channels: usize) -> Self {
        NetworkSpec {
            kind: NetKind::Embedder,
            num_residual_blocks: 0,
            base_channels,
            use_skip: false,
            dropout_keep: 1.0,
            input_size,
            channels,
            embedding_dim: 32,
            bottleneck: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(0.0 < self.dropout_keep && self.dropout_keep <= 1.0) {
            return Err(Error::Config("dropout_keep must be in (0,1]".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if self.input_size < 4 {
            return Err(Error::Config("input_size must be >= 4".into()));
        }
        match self.kind {
            NetKind::AutoencoderDiscriminator if self.bottleneck == 0 => {
                Err(Error::Config("discriminator needs a bottleneck size".into()))
            }
            NetKind::Embedder if self.embedding_dim == 0 => {
                Err(Error::Config("embedder needs an embedding_dim".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of stride-2 stages in the discriminator encoder.
    pub fn num_downsamples(&self) -> usize {
        if self.input_size >= 16 {
            2
        } else {
            1
        }
    }

    /// All weight arrays this spec expects, by name, in a fixed order.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let f = self.base_channels;
        let mut out = Vec::new();
        let conv = |name: &str, co: usize, ci: usize| {
            [(format!("{name}.w"), vec![co, ci, 3, 3]), (format!("{name}.b"), vec![co])]
        };
        let dense = |name: &str, di: usize, dout: usize| {
            [(format!("{name}.w"), vec![di, dout]), (format!("{name}.b"), vec![dout])]
        };
        match self.kind {
            NetKind::Generator | NetKind::InverseGenerator => {
                out.extend(conv("conv_in", f, c));
                for i in 0..self.num_residual_blocks {
                    out.extend(conv(&format!("res{i}.conv1"), f, f));
                    out.extend(conv(&format!("res{i}.conv2"), f, f));
                }
                out.extend(conv("conv_out", c, f));
            }
            NetKind::AutoencoderDiscriminator => {
                let downs = self.num_downsamples();
                out.extend(conv("enc0", f, c));
                let mut size = self.input_size;
                let mut ch = f;
                for i in 0..downs {
                    out.extend(conv(&format!("enc{}", i + 1), 2 * f, ch));
                    ch = 2 * f;
                    size = half(size);
                }
                let flat = ch * size * size;
                out.extend(dense("fc_enc", flat, self.bottleneck));
                out.extend(dense("fc_dec", self.bottleneck, flat));
                for i in (0..downs).rev() {
                    let co = if i == 0 { f } else { 2 * f };
                    out.extend(conv(&format!("dec{i}"), co, ch));
                    ch = co;
                }
                out.extend(conv("out", c, f));
            }
            NetKind::Embedder => {
                out.extend(conv("conv0", f, c));
                out.extend(conv("conv1", 2 * f, f));
                out.extend(conv("conv2", 2 * f, 2 * f));
                let so = half(half(self.input_size));
                out.extend(dense("fc", 2 * f * so * so, self.embedding_dim));
            }
        }
        out
    }
}

pub const WEIGHTS_VERSION: &str = "ws-1";

/// Ordered collection of named weight arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub version: String,
    entries: Vec<(String, Arr)>,
}

impl WeightSet {
    pub fn new(entries: Vec<(String, Arr)>) -> Result<Self> {
        let ws = WeightSet { version: WEIGHTS_VERSION.to_string(), entries };
        ws.validate()?;
        Ok(ws)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, arr) in &self.entries {
            if !seen.insert(name.clone()) {
                return Err(Error::Structure(format!("duplicate weight name {name}")));
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value in weight {name}")));
            }
        }
        Ok(())
    }

    /// He-style random initialization for the given spec.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, shape) in spec.expected_shapes() {
            let arr = if name.ends_with(".b") {
                ArrayD::zeros(IxDyn(&shape))
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let fan_in = if shape.len() == 2 { shape[0] } else { fan_in };
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || dist.sample(&mut rng))
            };
            entries.push((name, arr));
        }
        Ok(WeightSet { version: WEIGHTS_VERSION.to_string(), entries })
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn entries(&self) -> &[(String, Arr)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// New set with the same names, values produced per entry.
    pub fn map<F: FnMut(&str, &Arr) -> Arr>(&self, mut f: F) -> WeightSet {
        WeightSet {
            version: self.version.clone(),
            entries: self.entries.iter().map(|(n, a)| (n.clone(), f(n, a))).collect(),
        }
    }

    pub fn zeros_like(&self) -> WeightSet {
        self.map(|_, a| ArrayD::zeros(a.raw_dim()))
    }

    /// Check that the set carries exactly the arrays `spec` expects.
    pub fn matches(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.expected_shapes();
        if expected.len() != self.entries.len() {
            return Err(Error::Structure(format!(
                "weight count mismatch: expected {}, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for (name, shape) in &expected {
            match self.get(name) {
                None => return Err(Error::Structure(format!("missing weight {name}"))),
                Some(a) if a.shape() != shape.as_slice() => {
                    return Err(Error::Structure(format!(
                        "weight {name} has shape {:?}, expected {:?}",
                        a.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// A weight set staged onto a tape as leaf nodes.
pub struct StagedNet {
    pub spec: NetworkSpec,
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl StagedNet {
    pub fn stage(tape: &mut Tape, spec: &NetworkSpec, ws: &WeightSet) -> Result<Self> {
        ws.matches(spec)?;
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (name, arr) in ws.entries() {
            vars.insert(name.clone(), tape.leaf(arr.clone()));
            order.push(name.clone());
        }
        Ok(StagedNet { spec: spec.clone(), vars, order })
    }

    fn v(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Gather this net's parameter gradients (zeros where untouched).
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> WeightSet {
        let entries = self
            .order
            .iter()
            .map(|name| {
                let var = self.vars[name];
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(tape.value(var).raw_dim()));
                (name.clone(), g)
            })
            .collect();
        WeightSet { version: WEIGHTS_VERSION.to_string(), entries }
    }
}

fn check_input(tape: &Tape, x: Var, spec: &NetworkSpec, exact_size: bool) -> Result<()> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Structure("network input must be rank 4".into()));
    }
    if shape[1] != spec.channels {
        return Err(Error::Structure(format!(
            "input has {} channels, spec expects {}",
            shape[1], spec.channels
        )));
    }
    if shape[2] != shape[3] {
        return Err(Error::Structure("input must be square".into()));
    }
    if exact_size && shape[2] != spec.input_size {
        return Err(Error::Structure(format!(
            "input size {} does not match spec input_size {}",
            shape[2], spec.input_size
        )));
    }
    Ok(())
}

/// Residual translation network. Shape preserving; output squashed to [0,1].
/// Dropout masks are drawn from `seed` in train mode (generator kind only).
pub fn generator_forward_taped(
    tape: &mut Tape,
    net: &StagedNet,
    x: Var,
    mode: Mode,
    seed: u64,
) -> Result<Var> {
    if !matches!(net.spec.kind, NetKind::Generator | NetKind::InverseGenerator) {
        return Err(Error::Structure("generator_forward requires a generator spec".into()));
    }
    check_input(tape, x, &net.spec, false)?;
    let spec = &net.spec;
    let dropout = matches!(spec.kind, NetKind::Generator)
        && matches!(mode, Mode::Train)
        && spec.dropout_keep < 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut h = tape.conv2d(x, net.v("conv_in.w"), net.v("conv_in.b"), 1, 1);
    h = tape.elu(h);
    for i in 0..spec.num_residual_blocks {
        let mut r = tape.conv2d(h, net.v(&format!("res{i}.conv1.w")), net.v(&format!("res{i}.conv1.b")), 1, 1);
        r = tape.elu(r);
        r = tape.conv2d(r, net.v(&format!("res{i}.conv2.w")), net.v(&format!("res{i}.conv2.b")), 1, 1);
        h = tape.add(h, r);
        if dropout {
            let keep = spec.dropout_keep;
            let shape = tape.value(h).raw_dim();
            let mask = ArrayD::from_shape_simple_fn(shape, || {
                if rng.gen_bool(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            h = tape.mul_mask(h, mask);
        }
    }
    let mut y = tape.conv2d(h, net.v("conv_out.w"), net.v("conv_out.b"), 1, 1);
    if spec.use_skip {
        // logit-like input skip: zero weights reduce the net to sigmoid(4x-2)
        let xs = tape.scale(x, 4.0);
        let shape = tape.value(xs).raw_dim();
        let shift = tape.leaf(ArrayD::from_elem(shape, -2.0));
        let xs = tape.add(xs, shift);
        y = tape.add(y, xs);
    }
    Ok(tape.sigmoid(y))
}

/// Autoencoder discriminator: strided encoder to a dense bottleneck, decoder
/// back to the input shape.
pub fn autoencode_taped(tape: &mut Tape, net: &StagedNet, x: Var) -> Result<Var> {
    if net.spec.kind != NetKind::AutoencoderDiscriminator {
        return Err(Error::Structure("autoencode requires a discriminator spec".into()));
    }
    check_input(tape, x, &net.spec, true)?;
    let spec = &net.spec;
    let f = spec.base_channels;
    let downs = spec.num_downsamples();

    let mut h = tape.conv2d(x, net.v("enc0.w"), net.v("enc0.b"), 1, 1);
    h = tape.elu(h);
    let mut sizes = vec![spec.input_size];
    let mut size = spec.input_size;
    let mut ch = f;
    for i in 0..downs {
        h = tape.conv2d(h, net.v(&format!("enc{}.w", i + 1)), net.v(&format!("enc{}.b", i + 1)), 2, 1);
        h = tape.elu(h);
        ch = 2 * f;
        size = half(size);
        sizes.push(size);
    }
    let flat = tape.flatten(h);
    let code = tape.dense(flat, net.v("fc_enc.w"), net.v("fc_enc.b"));
    let mut d = tape.dense(code, net.v("fc_dec.w"), net.v("fc_dec.b"));
    d = tape.elu(d);
    let mut h = tape.unflatten(d, ch, size, size);
    for i in (0..downs).rev() {
        h = tape.upsample2x(h);
        let target = sizes[i];
        let cur = tape.value(h).shape()[2];
        if cur != target {
            h = tape.crop_center(h, target, target);
        }
        h = tape.conv2d(h, net.v(&format!("dec{i}.w")), net.v(&format!("dec{i}.b")), 1, 1);
        h = tape.elu(h);
    }
    let y = tape.conv2d(h, net.v("out.w"), net.v("out.b"), 1, 1);
    Ok(tape.sigmoid(y))
}

/// Embedding network: strided conv trunk, dense projection, unit-norm rows.
pub fn embed_taped(tape: &mut Tape, net: &StagedNet, x: Var) -> Result<Var> {
    if net.spec.kind != NetKind::Embedder {
        return Err(Error::Structure("embed requires an embedder spec".into()));
    }
    check_input(tape, x, &net.spec, true)?;
    let mut h = tape.conv2d(x, net.v("conv0.w"), net.v("conv0.b"), 1, 1);
    h = tape.elu(h);
    h = tape.conv2d(h, net.v("conv1.w"), net.v("conv1.b"), 2, 1);
    h = tape.elu(h);
    h = tape.conv2d(h, net.v("conv2.w"), net.v("conv2.b"), 2, 1);
    h = tape.elu(h);
    let flat = tape.flatten(h);
    let e = tape.dense(flat, net.v("fc.w"), net.v("fc.b"));
    Ok(tape.l2_normalize_rows(e, 1e-12))
}

/// Scale applied to normalized embeddings before the softmax head during
/// embedder pretraining.
pub const HEAD_SCALE: f64 = 16.0;

/// Embedding plus classification logits (pretraining only).
pub fn embed_logits_taped(
    tape: &mut Tape,
    net: &StagedNet,
    head_w: Var,
    head_b: Var,
    x: Var,
) -> Result<(Var, Var)> {
    let emb = embed_taped(tape, net, x)?;
    let scaled = tape.scale(emb, HEAD_SCALE);
    let logits = tape.dense(scaled, head_w, head_b);
    Ok((emb, logits))
}

fn batch_to_arr(x: &ImageBatch) -> Arr {
    x.pixels.clone().into_dyn()
}

fn arr_to_batch(a: &Arr, domain: DomainTag, labels: Vec<u32>) -> ImageBatch {
    let pixels = a.clone().into_dimensionality().expect("rank-4 output");
    ImageBatch { pixels, domain, labels }
}

/// One-shot generator evaluation outside a training step.
pub fn generator_forward(
    x: &ImageBatch,
    w: &WeightSet,
    spec: &NetworkSpec,
    mode: Mode,
    seed: u64,
) -> Result<ImageBatch> {
    x.validate()?;
    let mut tape = Tape::new();
    let net = StagedNet::stage(&mut tape, spec, w)?;
    let xv = tape.leaf(batch_to_arr(x));
    let y = generator_forward_taped(&mut tape, &net, xv, mode, seed)?;
    let tag = match spec.kind {
        NetKind::InverseGenerator => DomainTag::Synthetic,
        _ => DomainTag::Generated,
    };
    Ok(arr_to_batch(tape.value(y), tag, x.labels.clone()))
}

/// One-shot autoencoder evaluation.
pub fn autoencode(x: &ImageBatch, w: &WeightSet, spec: &NetworkSpec) -> Result<ImageBatch> {
    x.validate()?;
    let mut tape = Tape::new();
    let net = StagedNet::stage(&mut tape, spec, w)?;
    let xv = tape.leaf(batch_to_arr(x));
    let y = autoencode_taped(&mut tape, &net, xv)?;
    Ok(arr_to_batch(tape.value(y), x.domain, x.labels.clone()))
}

/// One-shot embedding: one unit-norm row per image.
pub fn embed(x: &ImageBatch, w: &WeightSet, spec: &NetworkSpec) -> Result<Array2<f64>> {
    x.validate()?;
    let mut tape = Tape::new();
    let net = StagedNet::stage(&mut tape, spec, w)?;
    let xv = tape.leaf(batch_to_arr(x));
    let e = embed_taped(&mut tape, &net, xv)?;
    Ok(tape.value(e).clone().into_dimensionality().expect("rank-2 embeddings"))
}
