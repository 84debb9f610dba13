//! Minimal feed-forward network engine: dense and embedding layers, softmax
//! cross-entropy training with Adam, and exact parameter-count
//! introspection.
//!
//! Three architectures are built on top of it:
//!
//! - [`build_sn`]: pose (6 inputs) -> `N_h` hidden layers -> one probability
//!   per `(AP beam, UT beam)` pair
//! - [`build_net1`]: location (3 inputs) -> hidden layers -> one probability
//!   per AP beam
//! - [`build_net2`]: pose plus an embedded AP beam index, concatenated to a
//!   width-`n_h` hidden vector -> probability per panel (or per UT beam)
//!
//! All arithmetic is 64-bit and single threaded, so training is bit
//! reproducible for a given seed.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

// ── Layers ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Fully connected layer `y = W x + b`, weights row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Lookup table mapping a beam index to a learned point in `R^dim`.
/// No bias, no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    pub table: Vec<f64>,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingLayer {
    pub fn new(vocab: usize, dim: usize) -> Self {
        EmbeddingLayer {
            table: vec![0.0; vocab * dim],
            vocab,
            dim,
        }
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.table[index * self.dim..(index + 1) * self.dim]
    }

    pub fn parameter_count(&self) -> usize {
        self.table.len()
    }
}

/// First stage of the network before the dense trunk.
#[derive(Debug, Clone, PartialEq)]
pub enum InputStage {
    /// Features feed the trunk directly.
    Direct,
    /// Two branches: a linear dense map of the features and an embedding of
    /// the AP beam index, concatenated and passed through one relu.
    Merge {
        dense: DenseLayer,
        embedding: EmbeddingLayer,
    },
}

/// A layered model: optional merge stage plus a dense trunk ending in a
/// softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub input: InputStage,
    pub trunk: Vec<DenseLayer>,
    pub feature_dim: usize,
}

impl MlpModel {
    /// Model made purely of dense layers on top of the feature vector.
    pub fn from_dense_layers(feature_dim: usize, trunk: Vec<DenseLayer>) -> Result<Self> {
        if trunk.is_empty() {
            return Err(Error::InvalidArgument("trunk must not be empty".into()));
        }
        if trunk[0].in_dim != feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "first layer takes {} inputs, features have {feature_dim}",
                trunk[0].in_dim
            )));
        }
        Ok(MlpModel {
            input: InputStage::Direct,
            trunk,
            feature_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.trunk.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Whether the model consumes an AP beam index next to its features.
    pub fn wants_index(&self) -> bool {
        matches!(self.input, InputStage::Merge { .. })
    }

    /// Exact number of trainable parameters.
    pub fn parameter_count(&self) -> usize {
        let stage = match &self.input {
            InputStage::Direct => 0,
            InputStage::Merge { dense, embedding } => {
                dense.parameter_count() + embedding.parameter_count()
            }
        };
        stage + self.trunk.iter().map(|l| l.parameter_count()).sum::<usize>()
    }

    /// Width of the vector entering the trunk.
    fn trunk_in_dim(&self) -> usize {
        match &self.input {
            InputStage::Direct => self.feature_dim,
            InputStage::Merge { dense, embedding } => dense.out_dim + embedding.dim,
        }
    }

    /// Borrow every parameter block in canonical order.
    fn param_blocks(&self) -> Vec<&[f64]> {
        let mut blocks: Vec<&[f64]> = Vec::new();
        if let InputStage::Merge { dense, embedding } = &self.input {
            blocks.push(&dense.w);
            blocks.push(&dense.b);
            blocks.push(&embedding.table);
        }
        for l in &self.trunk {
            blocks.push(&l.w);
            blocks.push(&l.b);
        }
        blocks
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut blocks: Vec<&mut [f64]> = Vec::new();
        if let InputStage::Merge { dense, embedding } = &mut self.input {
            blocks.push(&mut dense.w);
            blocks.push(&mut dense.b);
            blocks.push(&mut embedding.table);
        }
        for l in &mut self.trunk {
            blocks.push(&mut l.w);
            blocks.push(&mut l.b);
        }
        blocks
    }

    /// He-uniform initialization of all weights (biases zero, embedding rows
    /// small uniform). Deterministic for a given seed.
    pub fn init_he_uniform(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn init_dense(l: &mut DenseLayer, rng: &mut ChaCha8Rng) {
            let bound = (6.0 / l.in_dim as f64).sqrt();
            for w in l.w.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            l.b.fill(0.0);
        }
        if let InputStage::Merge { dense, embedding } = &mut self.input {
            init_dense(dense, &mut rng);
            for v in embedding.table.iter_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        for l in &mut self.trunk {
            init_dense(l, &mut rng);
        }
    }

    /// Forward pass to a probability vector (softmax output).
    pub fn forward(&self, features: &[f64], index: Option<usize>) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(self, 1);
        self.forward_batch(features, index.map(|i| vec![i as u32]).as_deref(), 1, &mut ws)?;
        let out = ws.acts.last().unwrap().clone();
        Ok(out)
    }

    /// Batched forward pass; activations land in the workspace.
    /// `acts.last()` holds softmax probabilities row-major `[batch, out]`.
    fn forward_batch(
        &self,
        features: &[f64],
        indices: Option<&[u32]>,
        batch: usize,
        ws: &mut Workspace,
    ) -> Result<()> {
        if features.len() != batch * self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature buffer holds {} values, expected {}",
                features.len(),
                batch * self.feature_dim
            )));
        }
        match &self.input {
            InputStage::Direct => {
                ws.acts[0][..batch * self.feature_dim].copy_from_slice(features);
            }
            InputStage::Merge { dense, embedding } => {
                let idx = indices.ok_or_else(|| {
                    Error::DimensionMismatch("model expects an AP beam index input".into())
                })?;
                if idx.len() != batch {
                    return Err(Error::DimensionMismatch(
                        "index buffer length differs from batch".into(),
                    ));
                }
                let width = dense.out_dim + embedding.dim;
                for r in 0..batch {
                    let x = &features[r * self.feature_dim..(r + 1) * self.feature_dim];
                    let beam = idx[r] as usize;
                    if beam >= embedding.vocab {
                        return Err(Error::DimensionMismatch(format!(
                            "beam index {beam} out of vocabulary {}",
                            embedding.vocab
                        )));
                    }
                    let row = &mut ws.acts[0][r * width..(r + 1) * width];
                    for (o, cell) in row[..dense.out_dim].iter_mut().enumerate() {
                        *cell = dot(&dense.w[o * dense.in_dim..(o + 1) * dense.in_dim], x)
                            + dense.b[o];
                    }
                    row[dense.out_dim..].copy_from_slice(embedding.row(beam));
                    for cell in row.iter_mut() {
                        if *cell < 0.0 {
                            *cell = 0.0;
                        }
                    }
                }
            }
        }

        let mut in_dim = self.trunk_in_dim();
        for (k, layer) in self.trunk.iter().enumerate() {
            debug_assert_eq!(layer.in_dim, in_dim);
            let (prev, next) = ws.acts.split_at_mut(k + 1);
            let x = &prev[k][..batch * in_dim];
            let y = &mut next[0][..batch * layer.out_dim];
            dense_forward(x, batch, layer, y);
            in_dim = layer.out_dim;
        }

        // Softmax on the final activations.
        let out_dim = self.output_dim();
        let last = ws.acts.last_mut().unwrap();
        for r in 0..batch {
            softmax_in_place(&mut last[r * out_dim..(r + 1) * out_dim]);
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dense_forward(x: &[f64], batch: usize, layer: &DenseLayer, y: &mut [f64]) {
    let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
    for r in 0..batch {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for (o, cell) in yr.iter_mut().enumerate() {
            let mut v = dot(&layer.w[o * in_dim..(o + 1) * in_dim], xr) + layer.b[o];
            if layer.activation == Activation::Relu && v < 0.0 {
                v = 0.0;
            }
            *cell = v;
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Scratch activations sized for a model and batch.
struct Workspace {
    /// acts[0] is the trunk input, acts[k+1] the output of trunk layer k.
    acts: Vec<Vec<f64>>,
    batch: usize,
}

impl Workspace {
    fn new(model: &MlpModel, batch: usize) -> Self {
        let mut acts = vec![vec![0.0; batch * model.trunk_in_dim()]];
        for l in &model.trunk {
            acts.push(vec![0.0; batch * l.out_dim]);
        }
        Workspace { acts, batch }
    }
}

// ── Architectures ───────────────────────────────────────────────────────────

/// Single-network beam-pair classifier: 6 pose inputs, `n_h_layers` hidden
/// relu layers of width `width`, and a softmax over all `n_ap * n_ut` beam
/// pairs (pair `(i, j)` maps to class `i * n_ut + j`).
pub fn build_sn(n_ap: usize, n_ut: usize, n_h_layers: usize, width: usize) -> MlpModel {
    let mut trunk = vec![DenseLayer::new(6, width, Activation::Relu)];
    for _ in 1..n_h_layers {
        trunk.push(DenseLayer::new(width, width, Activation::Relu));
    }
    trunk.push(DenseLayer::new(width, n_ap * n_ut, Activation::Linear));
    MlpModel {
        input: InputStage::Direct,
        trunk,
        feature_dim: 6,
    }
}

/// Location-only AP beam ranker: 3 inputs, softmax over AP beams.
pub fn build_net1(n_ap: usize, n_h_layers: usize, width: usize) -> MlpModel {
    let mut trunk = vec![DenseLayer::new(3, width, Activation::Relu)];
    for _ in 1..n_h_layers {
        trunk.push(DenseLayer::new(width, width, Activation::Relu));
    }
    trunk.push(DenseLayer::new(width, n_ap, Activation::Linear));
    MlpModel {
        input: InputStage::Direct,
        trunk,
        feature_dim: 3,
    }
}

/// Conditional net: pose branch (6 -> width/2, linear, with bias) merged
/// with an AP-beam embedding (vocabulary `n_ap`, width/2), relu after the
/// concatenation, then `n_h_layers - 1` hidden layers and a softmax over
/// `out_dim` classes (panels or UT beams).
pub fn build_net2(
    n_ap: usize,
    out_dim: usize,
    n_h_layers: usize,
    width: usize,
) -> Result<MlpModel> {
    if width % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "hidden width {width} must be even to split the merge stage"
        )));
    }
    let half = width / 2;
    let mut trunk = Vec::new();
    for _ in 1..n_h_layers {
        trunk.push(DenseLayer::new(width, width, Activation::Relu));
    }
    trunk.push(DenseLayer::new(width, out_dim, Activation::Linear));
    Ok(MlpModel {
        input: InputStage::Merge {
            dense: DenseLayer::new(6, half, Activation::Linear),
            embedding: EmbeddingLayer::new(n_ap, half),
        },
        trunk,
        feature_dim: 6,
    })
}

// ── Feature scaling ─────────────────────────────────────────────────────────

/// Affine map of raw features onto `[-1, 1]` per coordinate, stored with
/// the trained model so inference applies the training-time scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Scaler {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Scaler { lo, hi }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
            .collect()
    }
}

/// A model bundled with its input scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: MlpModel,
    pub scaler: Scaler,
}

impl TrainedModel {
    /// Forward pass on raw (unscaled) features.
    pub fn infer(&self, raw_features: &[f64], index: Option<usize>) -> Result<Vec<f64>> {
        self.net.forward(&self.scaler.apply(raw_features), index)
    }
}

// ── Gradients and training ──────────────────────────────────────────────────

/// Per-block gradient buffers aligned with the model's canonical parameter
/// block order.
struct Gradients {
    blocks: Vec<Vec<f64>>,
}

impl Gradients {
    fn new(model: &MlpModel) -> Self {
        Gradients {
            blocks: model.param_blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn zero(&mut self) {
        for b in &mut self.blocks {
            b.fill(0.0);
        }
    }
}

/// Mean cross-entropy of softmax outputs against integer labels.
fn batch_loss(probs: &[f64], out_dim: usize, labels: &[u32]) -> f64 {
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let p = probs[r * out_dim + label as usize].max(1e-300);
        loss -= p.ln();
    }
    loss / labels.len() as f64
}

/// Backward pass for one batch; gradients of the mean cross-entropy are
/// accumulated into `grads` (caller zeroes them).
fn backward_batch(
    model: &MlpModel,
    features: &[f64],
    indices: Option<&[u32]>,
    labels: &[u32],
    ws: &Workspace,
    grads: &mut Gradients,
) {
    let batch = labels.len();
    let out_dim = model.output_dim();
    let inv_batch = 1.0 / batch as f64;

    // d(mean CE)/d(logits) = (softmax - onehot) / batch.
    let probs = ws.acts.last().unwrap();
    let mut dz: Vec<f64> = probs[..batch * out_dim].to_vec();
    for (r, &label) in labels.iter().enumerate() {
        dz[r * out_dim + label as usize] -= 1.0;
    }
    for v in dz.iter_mut() {
        *v *= inv_batch;
    }

    // Trunk blocks sit after any merge-stage blocks.
    let trunk_block0 = match &model.input {
        InputStage::Direct => 0,
        InputStage::Merge { .. } => 3,
    };

    for k in (0..model.trunk.len()).rev() {
        let layer = &model.trunk[k];
        let x = &ws.acts[k][..batch * layer.in_dim];
        {
            let dw = &mut grads.blocks[trunk_block0 + 2 * k];
            let db = &mut grads.blocks[trunk_block0 + 2 * k + 1];
            for r in 0..batch {
                let xr = &x[r * layer.in_dim..(r + 1) * layer.in_dim];
                let dzr = &dz[r * layer.out_dim..(r + 1) * layer.out_dim];
                for (o, &g) in dzr.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, xr, &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim]);
                    }
                    db[o] += g;
                }
            }
        }
        let stop = k == 0 && matches!(model.input, InputStage::Direct);
        if stop {
            break;
        }
        // da_prev = dz * W, then through the relu of the producing stage.
        let mut da = vec![0.0; batch * layer.in_dim];
        for r in 0..batch {
            let dzr = &dz[r * layer.out_dim..(r + 1) * layer.out_dim];
            let dar = &mut da[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (o, &g) in dzr.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim], dar);
                }
            }
        }
        let producing_relu = if k == 0 {
            // Input stage: Direct never reaches here; Merge applies relu.
            true
        } else {
            model.trunk[k - 1].activation == Activation::Relu
        };
        if producing_relu {
            for (d, &a) in da.iter_mut().zip(&x[..batch * layer.in_dim]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        dz = da;
    }

    if let InputStage::Merge { dense, embedding } = &model.input {
        // dz now holds the gradient at the (post-relu) merged vector.
        let idx = indices.expect("merge model trained without indices");
        let width = dense.out_dim + embedding.dim;
        let (dw, rest) = grads.blocks.split_at_mut(1);
        let (db, rest) = rest.split_at_mut(1);
        let dtable = &mut rest[0];
        for r in 0..batch {
            let x = &features[r * model.feature_dim..(r + 1) * model.feature_dim];
            let dzr = &dz[r * width..(r + 1) * width];
            for (o, &g) in dzr[..dense.out_dim].iter().enumerate() {
                if g != 0.0 {
                    axpy(g, x, &mut dw[0][o * dense.in_dim..(o + 1) * dense.in_dim]);
                }
                db[0][o] += g;
            }
            let beam = idx[r] as usize;
            axpy(
                1.0,
                &dzr[dense.out_dim..],
                &mut dtable[beam * embedding.dim..(beam + 1) * embedding.dim],
            );
        }
    }
}

/// Training inputs: flat feature rows, optional per-sample AP beam index,
/// and integer class labels.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub features: Vec<f64>,
    pub dim: usize,
    pub indices: Option<Vec<u32>>,
    pub labels: Vec<u32>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs, on the validation split.
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            val_fraction: 0.1,
        }
    }
}

/// Per-epoch losses; `val_loss` is NaN when the dataset is too small to
/// carve out a validation split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_train_loss: f64,
    pub curve: Vec<EpochStats>,
}

impl TrainReport {
    /// Write the loss curve as `epoch,train_loss,val_loss` CSV.
    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for s in &self.curve {
            writeln!(w, "{},{},{}", s.epoch, s.train_loss, s.val_loss)?;
        }
        Ok(())
    }
}

/// Train a model with Adam on softmax cross-entropy.
///
/// Weights are He-initialized from `seed`; shuffling, the validation split
/// and every update are single threaded and seeded, so the same call is bit
/// reproducible. Early stopping tracks the validation loss and restores the
/// best snapshot.
pub fn train(
    model: &mut MlpModel,
    data: &TrainData,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    if data.features.len() != n * data.dim || data.dim != model.feature_dim {
        return Err(Error::DimensionMismatch(
            "feature matrix does not match model input".into(),
        ));
    }
    let out_dim = model.output_dim();
    if data.labels.iter().any(|&l| l as usize >= out_dim) {
        return Err(Error::InvalidArgument("label out of range".into()));
    }
    if model.wants_index() != data.indices.is_some() {
        return Err(Error::DimensionMismatch(
            "index inputs do not match the architecture".into(),
        ));
    }

    model.init_he_uniform(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::channel::derive_seed(seed, 0x7261_696e));

    // Validation split.
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let val_n = ((n as f64) * hyper.val_fraction).floor() as usize;
    let (val_ids, train_ids) = order.split_at(val_n);
    let mut train_ids: Vec<usize> = train_ids.to_vec();
    let val_ids: Vec<usize> = val_ids.to_vec();

    let mut grads = Gradients::new(model);
    let mut adam_m = Gradients::new(model);
    let mut adam_v = Gradients::new(model);
    let mut adam_t = 0u64;

    let batch_cap = hyper.batch_size.min(train_ids.len()).max(1);
    let mut ws = Workspace::new(model, batch_cap);
    let mut feat_buf = vec![0.0; batch_cap * data.dim];
    let mut idx_buf: Vec<u32> = vec![0; batch_cap];
    let mut label_buf: Vec<u32> = vec![0; batch_cap];

    let mut curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_weights: Option<Vec<Vec<f64>>> = None;
    let mut stall = 0usize;
    let mut final_train_loss = f64::NAN;

    for epoch in 0..hyper.max_epochs {
        shuffle(&mut train_ids, &mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in train_ids.chunks(batch_cap) {
            let b = chunk.len();
            gather(data, chunk, &mut feat_buf, &mut idx_buf, &mut label_buf);
            let idx_opt = data.indices.as_ref().map(|_| &idx_buf[..b]);
            if b != ws.batch {
                ws = Workspace::new(model, b);
            }
            model.forward_batch(&feat_buf[..b * data.dim], idx_opt, b, &mut ws)?;
            loss_sum +=
                batch_loss(ws.acts.last().unwrap(), out_dim, &label_buf[..b]) * b as f64;
            seen += b;
            grads.zero();
            backward_batch(
                model,
                &feat_buf[..b * data.dim],
                idx_opt,
                &label_buf[..b],
                &ws,
                &mut grads,
            );
            adam_t += 1;
            adam_step(model, &grads, &mut adam_m, &mut adam_v, adam_t, hyper);
        }
        let train_loss = loss_sum / seen as f64;
        final_train_loss = train_loss;

        let val_loss = if val_ids.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(model, data, &val_ids)?
        };
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        if !val_ids.is_empty() {
            if val_loss < best_val - 1e-12 {
                best_val = val_loss;
                best_weights = Some(
                    model
                        .param_blocks()
                        .iter()
                        .map(|b| b.to_vec())
                        .collect(),
                );
                stall = 0;
            } else {
                stall += 1;
                if stall >= hyper.patience {
                    break;
                }
            }
        }
    }

    if let Some(best) = best_weights {
        for (dst, src) in model.param_blocks_mut().into_iter().zip(best) {
            dst.copy_from_slice(&src);
        }
    }
    Ok(TrainReport {
        final_train_loss,
        curve,
    })
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

fn gather(
    data: &TrainData,
    ids: &[usize],
    feat: &mut [f64],
    idx: &mut [u32],
    labels: &mut [u32],
) {
    for (r, &id) in ids.iter().enumerate() {
        feat[r * data.dim..(r + 1) * data.dim]
            .copy_from_slice(&data.features[id * data.dim..(id + 1) * data.dim]);
        if let Some(indices) = &data.indices {
            idx[r] = indices[id];
        }
        labels[r] = data.labels[id];
    }
}

fn evaluate_loss(model: &MlpModel, data: &TrainData, ids: &[usize]) -> Result<f64> {
    let out_dim = model.output_dim();
    let mut ws = Workspace::new(model, ids.len().min(512).max(1));
    let mut feat = vec![0.0; ws.batch * data.dim];
    let mut idx = vec![0u32; ws.batch];
    let mut labels = vec![0u32; ws.batch];
    let mut loss_sum = 0.0;
    for chunk in ids.chunks(ws.batch) {
        let b = chunk.len();
        gather(data, chunk, &mut feat, &mut idx, &mut labels);
        if b != ws.batch {
            ws = Workspace::new(model, b);
        }
        let idx_opt = data.indices.as_ref().map(|_| &idx[..b]);
        model.forward_batch(&feat[..b * data.dim], idx_opt, b, &mut ws)?;
        loss_sum += batch_loss(ws.acts.last().unwrap(), out_dim, &labels[..b]) * b as f64;
    }
    Ok(loss_sum / ids.len() as f64)
}

fn adam_step(
    model: &mut MlpModel,
    grads: &Gradients,
    m: &mut Gradients,
    v: &mut Gradients,
    t: u64,
    hyper: &TrainHyper,
) {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for ((params, g), (mb, vb)) in model
        .param_blocks_mut()
        .into_iter()
        .zip(&grads.blocks)
        .zip(m.blocks.iter_mut().zip(v.blocks.iter_mut()))
    {
        for k in 0..params.len() {
            let gk = g[k];
            mb[k] = hyper.beta1 * mb[k] + (1.0 - hyper.beta1) * gk;
            vb[k] = hyper.beta2 * vb[k] + (1.0 - hyper.beta2) * gk * gk;
            let m_hat = mb[k] / bc1;
            let v_hat = vb[k] / bc2;
            params[k] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
}

// ── Gradient checking ───────────────────────────────────────────────────────

/// Compare analytic gradients against central finite differences on every
/// parameter; returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
///
/// Intended for small models (<= 1e4 parameters).
pub fn grad_check(
    model: &mut MlpModel,
    features: &[f64],
    index: Option<usize>,
    label: u32,
) -> Result<f64> {
    const STEP: f64 = 1e-6;
    let idx_vec = index.map(|i| vec![i as u32]);
    let labels = [label];

    let mut ws = Workspace::new(model, 1);
    model.forward_batch(features, idx_vec.as_deref(), 1, &mut ws)?;
    let mut grads = Gradients::new(model);
    backward_batch(model, features, idx_vec.as_deref(), &labels, &ws, &mut grads);

    let loss_of = |m: &MlpModel| -> Result<f64> {
        let mut ws = Workspace::new(m, 1);
        m.forward_batch(features, idx_vec.as_deref(), 1, &mut ws)?;
        Ok(batch_loss(ws.acts.last().unwrap(), m.output_dim(), &labels))
    };

    let n_blocks = grads.blocks.len();
    let mut worst: f64 = 0.0;
    for b in 0..n_blocks {
        for k in 0..grads.blocks[b].len() {
            let orig = model.param_blocks()[b][k];
            model.param_blocks_mut()[b][k] = orig + STEP;
            let plus = loss_of(model)?;
            model.param_blocks_mut()[b][k] = orig - STEP;
            let minus = loss_of(model)?;
            model.param_blocks_mut()[b][k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads.blocks[b][k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

// ── Model files ─────────────────────────────────────────────────────────────

const MODEL_MAGIC: &[u8; 5] = b"BMLP1";

/// Serialize a trained model (scaler + layers + 64-bit weights) in the
/// little-endian `BMLP1` container.
pub fn save_model<W: Write>(model: &TrainedModel, mut w: W) -> Result<()> {
    fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn write_dense<W: Write>(w: &mut W, l: &DenseLayer) -> Result<()> {
        w.write_all(&(l.in_dim as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim as u32).to_le_bytes())?;
        w.write_all(&[match l.activation {
            Activation::Relu => 0u8,
            Activation::Linear => 1u8,
        }])?;
        write_f64s(w, &l.w)?;
        write_f64s(w, &l.b)
    }

    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(model.scaler.lo.len() as u32).to_le_bytes())?;
    write_f64s(&mut w, &model.scaler.lo)?;
    write_f64s(&mut w, &model.scaler.hi)?;
    match &model.net.input {
        InputStage::Direct => w.write_all(&[0u8])?,
        InputStage::Merge { dense, embedding } => {
            w.write_all(&[1u8])?;
            write_dense(&mut w, dense)?;
            w.write_all(&(embedding.vocab as u32).to_le_bytes())?;
            w.write_all(&(embedding.dim as u32).to_le_bytes())?;
            write_f64s(&mut w, &embedding.table)?;
        }
    }
    w.write_all(&(model.net.feature_dim as u32).to_le_bytes())?;
    w.write_all(&(model.net.trunk.len() as u32).to_le_bytes())?;
    for l in &model.net.trunk {
        write_dense(&mut w, l)?;
    }
    Ok(())
}

/// Load a model saved by [`save_model`].
pub fn load_model<R: Read>(mut r: R) -> Result<TrainedModel> {
    fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }
    fn read_dense<R: Read>(r: &mut R) -> Result<DenseLayer> {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let activation = match read_u8(r)? {
            0 => Activation::Relu,
            1 => Activation::Linear,
            other => return Err(Error::Format(format!("unknown activation tag {other}"))),
        };
        Ok(DenseLayer {
            w: read_f64s(r, in_dim * out_dim)?,
            b: read_f64s(r, out_dim)?,
            in_dim,
            out_dim,
            activation,
        })
    }

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("bad magic, expected BMLP1".into()));
    }
    let scaler_dim = read_u32(&mut r)? as usize;
    let lo = read_f64s(&mut r, scaler_dim)?;
    let hi = read_f64s(&mut r, scaler_dim)?;
    let input = match read_u8(&mut r)? {
        0 => InputStage::Direct,
        1 => {
            let dense = read_dense(&mut r)?;
            let vocab = read_u32(&mut r)? as usize;
            let dim = read_u32(&mut r)? as usize;
            let table = read_f64s(&mut r, vocab * dim)?;
            InputStage::Merge {
                dense,
                embedding: EmbeddingLayer { table, vocab, dim },
            }
        }
        other => return Err(Error::Format(format!("unknown input stage tag {other}"))),
    };
    let feature_dim = read_u32(&mut r)? as usize;
    let n_trunk = read_u32(&mut r)? as usize;
    let mut trunk = Vec::with_capacity(n_trunk);
    for _ in 0..n_trunk {
        trunk.push(read_dense(&mut r)?);
    }
    Ok(TrainedModel {
        net: MlpModel {
            input,
            trunk,
            feature_dim,
        },
        scaler: Scaler::new(lo, hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_closed_forms() {
        assert_eq!(build_sn(64, 20, 5, 128).parameter_count(), 232_064);
        assert_eq!(build_net1(64, 5, 128).parameter_count(), 74_816);
        assert_eq!(build_net2(64, 5, 5, 128).unwrap().parameter_count(), 71_237);
        assert_eq!(build_net2(64, 20, 5, 128).unwrap().parameter_count(), 73_172);
        assert_eq!(build_sn(1, 1, 1, 1).parameter_count(), 9);
        assert_eq!(build_net1(1, 1, 1).parameter_count(), 6);
    }

    #[test]
    fn parameter_counts_match_formulas_for_random_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let n_h = rng.gen_range(1..6usize);
            let w2 = 2 * rng.gen_range(1..40usize);
            let n_ap = rng.gen_range(1..80usize);
            let n_ut = rng.gen_range(1..30usize);
            let n_p = rng.gen_range(1..8usize);

            let sn = 7 * w2 + (n_h - 1) * (w2 + 1) * w2 + (w2 + 1) * n_ut * n_ap;
            assert_eq!(build_sn(n_ap, n_ut, n_h, w2).parameter_count(), sn);

            let net1 = 4 * w2 + (n_h - 1) * (w2 + 1) * w2 + (w2 + 1) * n_ap;
            assert_eq!(build_net1(n_ap, n_h, w2).parameter_count(), net1);

            let net2 = (7 + n_ap) * w2 / 2 + (n_h - 1) * (w2 + 1) * w2 + (w2 + 1) * n_p;
            assert_eq!(
                build_net2(n_ap, n_p, n_h, w2).unwrap().parameter_count(),
                net2
            );
        }
    }

    #[test]
    fn odd_width_net2_is_rejected() {
        assert!(build_net2(8, 3, 2, 7).is_err());
    }

    #[test]
    fn zero_initialized_model_outputs_uniform() {
        let model = build_sn(4, 3, 2, 8);
        let probs = model.forward(&[0.1, -0.2, 0.3, 0.4, -0.5, 0.6], None).unwrap();
        assert_eq!(probs.len(), 12);
        for p in probs {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_outputs_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..1000 {
            let mut model = build_net1(5, 2, 7);
            model.init_he_uniform(trial);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = model.forward(&x, None).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut z: Vec<f64> = (0..10).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut a = z.clone();
            softmax_in_place(&mut a);
            for v in z.iter_mut() {
                *v += 3.7;
            }
            softmax_in_place(&mut z);
            for (x, y) in a.iter().zip(&z) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn net2_distinguishes_beam_indices() {
        let mut model = build_net2(6, 4, 3, 8).unwrap();
        model.init_he_uniform(99);
        let x = [0.2, -0.1, 0.4, 0.0, 0.3, -0.6];
        let p0 = model.forward(&x, Some(0)).unwrap();
        let p1 = model.forward(&x, Some(1)).unwrap();
        assert!(p0.iter().zip(&p1).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn net1_ignores_orientation_by_construction() {
        // Location-only input: the architecture has no orientation inputs,
        // so the same location always maps to the same output.
        let mut model = build_net1(6, 2, 8);
        model.init_he_uniform(1);
        let a = model.forward(&[0.1, 0.2, 0.3], None).unwrap();
        let b = model.forward(&[0.1, 0.2, 0.3], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.feature_dim, 3);
    }

    fn preactivation_magnitudes(model: &MlpModel, x: &[f64], index: Option<usize>) -> f64 {
        // Smallest |pre-activation| over all relu units, to keep gradient
        // checks away from the kink.
        let mut min_abs = f64::INFINITY;
        let mut ws = Workspace::new(model, 1);
        model
            .forward_batch(x, index.map(|i| vec![i as u32]).as_deref(), 1, &mut ws)
            .unwrap();
        match &model.input {
            InputStage::Merge { dense, embedding } => {
                for o in 0..dense.out_dim {
                    let z = dot(&dense.w[o * dense.in_dim..(o + 1) * dense.in_dim], x)
                        + dense.b[o];
                    min_abs = min_abs.min(z.abs());
                }
                if let Some(i) = index {
                    for v in embedding.row(i) {
                        min_abs = min_abs.min(v.abs());
                    }
                }
            }
            InputStage::Direct => {}
        }
        let mut a_prev = ws.acts[0].clone();
        for l in &model.trunk {
            let mut z = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                z[o] = dot(&l.w[o * l.in_dim..(o + 1) * l.in_dim], &a_prev) + l.b[o];
            }
            if l.activation == Activation::Relu {
                for v in &z {
                    min_abs = min_abs.min(v.abs());
                }
            }
            a_prev = z
                .iter()
                .map(|&v| if l.activation == Activation::Relu { v.max(0.0) } else { v })
                .collect();
        }
        min_abs
    }

    #[test]
    fn grad_check_dense_net() {
        // 6 -> 8 -> 4 relu net; seed chosen so every relu pre-activation is
        // well away from the kink.
        let x = [0.3, -0.7, 0.5, 0.2, -0.4, 0.8];
        let mut chosen = None;
        for seed in 0..50u64 {
            let mut model = MlpModel::from_dense_layers(
                6,
                vec![
                    DenseLayer::new(6, 8, Activation::Relu),
                    DenseLayer::new(8, 4, Activation::Linear),
                ],
            )
            .unwrap();
            model.init_he_uniform(seed);
            if preactivation_magnitudes(&model, &x, None) > 1e-3 {
                chosen = Some(model);
                break;
            }
        }
        let mut model = chosen.expect("no kink-free seed found");
        let err = grad_check(&mut model, &x, None, 2).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn grad_check_merge_net() {
        let x = [0.3, -0.7, 0.5, 0.2, -0.4, 0.8];
        let mut chosen = None;
        for seed in 0..50u64 {
            let mut model = build_net2(4, 3, 2, 8).unwrap();
            model.init_he_uniform(seed);
            if preactivation_magnitudes(&model, &x, Some(1)) > 1e-3 {
                chosen = Some(model);
                break;
            }
        }
        let mut model = chosen.expect("no kink-free seed found");
        let err = grad_check(&mut model, &x, Some(1), 2).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn embedding_gradient_touches_only_indexed_row() {
        let mut model = build_net2(5, 3, 2, 6).unwrap();
        model.init_he_uniform(4);
        let x = [0.3, -0.7, 0.5, 0.2, -0.4, 0.8];
        let mut ws = Workspace::new(&model, 1);
        let idx = vec![2u32];
        model.forward_batch(&x, Some(&idx), 1, &mut ws).unwrap();
        let mut grads = Gradients::new(&model);
        backward_batch(&model, &x, Some(&idx), &[1], &ws, &mut grads);
        let table_grad = &grads.blocks[2];
        let dim = 3;
        for row in 0..5 {
            let slice = &table_grad[row * dim..(row + 1) * dim];
            if row == 2 {
                assert!(slice.iter().any(|&g| g != 0.0));
            } else {
                assert!(slice.iter().all(|&g| g == 0.0));
            }
        }
    }

    fn toy_two_class_data(n: usize, seed: u64) -> TrainData {
        // Linearly separable in 2D.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.gen_range(0..2u32);
            let offset = if label == 0 { -1.0 } else { 1.0 };
            features.push(offset + rng.gen_range(-0.4..0.4));
            features.push(offset + rng.gen_range(-0.4..0.4));
            labels.push(label);
        }
        TrainData {
            features,
            dim: 2,
            indices: None,
            labels,
        }
    }

    #[test]
    fn separable_toy_problem_reaches_high_accuracy() {
        let data = toy_two_class_data(200, 5);
        let mut model = MlpModel::from_dense_layers(
            2,
            vec![
                DenseLayer::new(2, 8, Activation::Relu),
                DenseLayer::new(8, 2, Activation::Linear),
            ],
        )
        .unwrap();
        let hyper = TrainHyper {
            max_epochs: 200,
            ..TrainHyper::default()
        };
        train(&mut model, &data, &hyper, 1).unwrap();
        let mut correct = 0;
        for k in 0..data.len() {
            let p = model
                .forward(&data.features[2 * k..2 * k + 2], None)
                .unwrap();
            let pred = if p[1] > p[0] { 1 } else { 0 };
            if pred == data.labels[k] {
                correct += 1;
            }
        }
        assert!(correct as f64 >= 0.99 * data.len() as f64, "{correct}/200");
    }

    #[test]
    fn convex_toy_loss_is_non_increasing() {
        // Single linear layer + softmax is convex; full-batch Adam should
        // descend monotonically (1e-9 slack).
        let data = toy_two_class_data(64, 9);
        let mut model = MlpModel::from_dense_layers(
            2,
            vec![DenseLayer::new(2, 2, Activation::Linear)],
        )
        .unwrap();
        let hyper = TrainHyper {
            batch_size: 64,
            max_epochs: 60,
            val_fraction: 0.0,
            ..TrainHyper::default()
        };
        let report = train(&mut model, &data, &hyper, 3).unwrap();
        for pair in report.curve.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-9,
                "loss increased: {} -> {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    #[test]
    fn first_epoch_improves_on_paper_scale_sn() {
        // Architecture at the full 232k-parameter size, tiny random set.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 128;
        let data = TrainData {
            features: (0..6 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            dim: 6,
            indices: None,
            labels: (0..n).map(|_| rng.gen_range(0..1280u32)).collect(),
        };
        let mut model = build_sn(64, 20, 5, 128);
        let hyper = TrainHyper {
            max_epochs: 1,
            val_fraction: 0.0,
            ..TrainHyper::default()
        };
        // Loss at zero init is exactly ln(K); one epoch must beat it.
        let init_loss = (1280f64).ln();
        let report = train(&mut model, &data, &hyper, 7).unwrap();
        assert!(report.final_train_loss < init_loss);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = toy_two_class_data(100, 21);
        let hyper = TrainHyper {
            max_epochs: 30,
            ..TrainHyper::default()
        };
        let mut run = || {
            let mut model = MlpModel::from_dense_layers(
                2,
                vec![
                    DenseLayer::new(2, 6, Activation::Relu),
                    DenseLayer::new(6, 2, Activation::Linear),
                ],
            )
            .unwrap();
            train(&mut model, &data, &hyper, 42).unwrap();
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = TrainData {
            features: Vec::new(),
            dim: 2,
            indices: None,
            labels: Vec::new(),
        };
        let mut model =
            MlpModel::from_dense_layers(2, vec![DenseLayer::new(2, 2, Activation::Linear)])
                .unwrap();
        assert!(matches!(
            train(&mut model, &data, &TrainHyper::default(), 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let mut model = build_net2(6, 4, 3, 8).unwrap();
        model.init_he_uniform(77);
        let trained = TrainedModel {
            net: model,
            scaler: Scaler::new(vec![0.0; 6], vec![1.0; 6]),
        };
        let mut buf = Vec::new();
        save_model(&trained, &mut buf).unwrap();
        let loaded = load_model(&buf[..]).unwrap();
        assert_eq!(loaded, trained);
        assert!(load_model(&buf[..buf.len() - 3]).is_err());
        assert!(load_model(&b"BOGUS"[..]).is_err());
    }

    #[test]
    fn curve_csv_layout() {
        let report = TrainReport {
            final_train_loss: 0.5,
            curve: vec![
                EpochStats { epoch: 0, train_loss: 1.0, val_loss: 1.1 },
                EpochStats { epoch: 1, train_loss: 0.5, val_loss: 0.6 },
            ],
        };
        let mut buf = Vec::new();
        report.write_curve_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,train_loss,val_loss\n0,1,1.1\n1,0.5,0.6\n");
    }
}
