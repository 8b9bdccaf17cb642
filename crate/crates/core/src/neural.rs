//! Feed-forward contact decoder with exact reverse-mode gradients.
//!
//! The decoder maps a 15-value flux delta to contact location and force through
//! six affine layers `15 → 200 → 200 → 40 → 200 → 200 → out`. The output of the
//! third layer is the 40-dimensional bottleneck feature on which the triplet loss
//! acts. Inputs are standardized with statistics stored in the model; outputs are
//! returned in physical units (mm, N).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Indentation, Triplet};
use crate::error::{Error, Result};
use crate::field_sim::{FluxVector, FLUX_DIM};

pub const INPUT_DIM: usize = FLUX_DIM;
pub const FEATURE_DIM: usize = 40;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MSKMODEL";
const CHECKPOINT_VERSION: u32 = 1;

/// What the decoder predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// (x, y, Fz)
    NormalForce,
    /// (x, y, Fx, Fy, Fz)
    FullForce,
}

impl OutputKind {
    pub fn dim(self) -> usize {
        match self {
            OutputKind::NormalForce => 3,
            OutputKind::FullForce => 5,
        }
    }

    pub fn force_dim(self) -> usize {
        self.dim() - 2
    }

    pub fn target(self, s: &Indentation) -> Vec<f64> {
        let [x, y] = s.location;
        match self {
            OutputKind::NormalForce => vec![x, y, s.force[2]],
            OutputKind::FullForce => vec![x, y, s.force[0], s.force[1], s.force[2]],
        }
    }
}

/// Layer widths and activation placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `dims[i] → dims[i + 1]` is affine layer `i`.
    pub dims: Vec<usize>,
    /// ReLU after layer `i`.
    pub relu: Vec<bool>,
    /// Index of the layer whose (activated) output is the feature vector.
    pub feature_layer: usize,
}

impl Architecture {
    /// The decoder. With `relu_feature_layers` the second and third layers also get ReLU.
    pub fn decoder(output: OutputKind, relu_feature_layers: bool) -> Self {
        let r = relu_feature_layers;
        Self {
            dims: vec![INPUT_DIM, 200, 200, FEATURE_DIM, 200, 200, output.dim()],
            relu: vec![true, r, r, true, true, false],
            feature_layer: 2,
        }
    }

    pub fn new(dims: Vec<usize>, relu: Vec<bool>, feature_layer: usize) -> Result<Self> {
        let a = Self {
            dims,
            relu,
            feature_layer,
        };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.relu.len() != self.dims.len() - 1 {
            return Err(Error::InvalidParameter("architecture needs len(relu) == len(dims) - 1".into()));
        }
        if self.feature_layer >= self.dims.len() - 1 {
            return Err(Error::InvalidParameter("feature layer out of range".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidParameter("zero-width layer".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.dims[self.feature_layer + 1]
    }
}

/// Affine layer `z = a · W + b` with `W` stored as (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Per-feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    /// Column means and SDs of `rows`; constant columns get SD 1.
    pub fn fit(rows: ArrayView2<'_, f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mean = rows.sum_axis(Axis(0)) / n;
        let sd = rows
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, m)| {
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                let s = v.sqrt();
                if s > 1e-12 * m.abs().max(1e-300) && s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.to_vec(),
            sd,
        }
    }

    pub fn apply(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for (mut col, (m, s)) in out.axis_iter_mut(Axis(1)).zip(self.mean.iter().zip(&self.sd)) {
            col.mapv_inplace(|x| (x - m) / s);
        }
        out
    }

    pub fn invert(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for (mut col, (m, s)) in out.axis_iter_mut(Axis(1)).zip(self.mean.iter().zip(&self.sd)) {
            col.mapv_inplace(|x| x * s + m);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub arch: Architecture,
    pub layers: Vec<Dense>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    pub output: Option<OutputKind>,
}

/// Decoded contact in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub location: [f64; 2],
    /// `[Fz]` or `[Fx, Fy, Fz]`, N.
    pub force: Vec<f64>,
}

impl Prediction {
    fn from_row(row: &[f64]) -> Self {
        Self {
            location: [row[0], row[1]],
            force: row[2..].to_vec(),
        }
    }
}

/// Activations kept for the backward pass.
struct ForwardCache {
    /// `inputs[i]` feeds layer `i`; the last entry is the network output.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each computed layer.
    pre: Vec<Array2<f64>>,
}

impl MlpModel {
    /// Fan-in scaled uniform init: bound `√(6/fan_in)` before ReLU, `√(3/fan_in)` otherwise; zero biases.
    pub fn new(arch: Architecture, output: Option<OutputKind>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if let Some(o) = output {
            if o.dim() != arch.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: o.dim(),
                    got: arch.output_dim(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..arch.n_layers())
            .map(|i| {
                let (fan_in, fan_out) = (arch.dims[i], arch.dims[i + 1]);
                let gain = if arch.relu[i] { 6.0 } else { 3.0 };
                let bound = (gain / fan_in as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            input_norm: Normalizer::identity(arch.input_dim()),
            output_norm: Normalizer::identity(arch.output_dim()),
            arch,
            layers,
            output,
        })
    }

    pub fn decoder(output: OutputKind, relu_feature_layers: bool, seed: u64) -> Self {
        Self::new(Architecture::decoder(output, relu_feature_layers), Some(output), seed)
            .expect("decoder architecture is valid")
    }

    /// Fit input and output standardization on labeled samples.
    pub fn fit_normalizers(&mut self, samples: &[Indentation]) -> Result<()> {
        let out = self.output_kind()?;
        if samples.is_empty() {
            return Err(Error::EmptyInput("normalizer samples"));
        }
        self.input_norm = Normalizer::fit(flux_matrix(samples.iter().map(|s| &s.flux_delta)).view());
        self.output_norm = Normalizer::fit(target_matrix(samples, out).view());
        Ok(())
    }

    pub fn output_kind(&self) -> Result<OutputKind> {
        self.output
            .ok_or_else(|| Error::InvalidParameter("model has no physical output kind".into()))
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Run layers `0..upto` on normalized inputs.
    fn forward_cached(&self, x_norm: Array2<f64>, upto: usize) -> ForwardCache {
        let mut inputs = Vec::with_capacity(upto + 1);
        let mut pre = Vec::with_capacity(upto);
        inputs.push(x_norm);
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            let mut z = inputs[i].dot(&layer.weights);
            z += &layer.bias;
            let a = if self.arch.relu[i] { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
            inputs.push(a);
        }
        ForwardCache { inputs, pre }
    }

    fn forward_plain(&self, mut a: Array2<f64>, from: usize, upto: usize) -> Array2<f64> {
        for (i, layer) in self.layers[from..upto].iter().enumerate() {
            let mut z = a.dot(&layer.weights);
            z += &layer.bias;
            if self.arch.relu[from + i] {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Raw network output (normalized target space) for raw flux rows.
    pub fn forward_raw(&self, flux: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&flux)?;
        Ok(self.forward_plain(self.input_norm.apply(flux), 0, self.arch.n_layers()))
    }

    /// Physical outputs for a batch of raw flux rows.
    pub fn predict_batch(&self, flux: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.output_norm.invert(self.forward_raw(flux)?.view()))
    }

    pub fn forward(&self, flux_delta: &[f64]) -> Result<Prediction> {
        let x = ArrayView2::from_shape((1, flux_delta.len()), flux_delta).expect("row view");
        let y = self.predict_batch(x)?;
        Ok(Prediction::from_row(y.row(0).as_slice().unwrap()))
    }

    pub fn predict_all<'a>(&self, flux: impl IntoIterator<Item = &'a FluxVector>) -> Result<Vec<Prediction>> {
        let y = self.predict_batch(flux_matrix(flux).view())?;
        Ok(y.rows().into_iter().map(|r| Prediction::from_row(&r.to_vec())).collect())
    }

    /// Bottleneck features for a batch of raw flux rows.
    pub fn feat_batch(&self, flux: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&flux)?;
        Ok(self.forward_plain(self.input_norm.apply(flux), 0, self.arch.feature_layer + 1))
    }

    pub fn feat(&self, flux_delta: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, flux_delta.len()), flux_delta).expect("row view");
        Ok(self.feat_batch(x)?.row(0).to_vec())
    }

    /// Physical outputs computed from a feature vector alone.
    pub fn head(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.arch.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.feature_dim(),
                got: features.ncols(),
            });
        }
        let raw = self.forward_plain(features.to_owned(), self.arch.feature_layer + 1, self.arch.n_layers());
        Ok(self.output_norm.invert(raw.view()))
    }

    /// Backpropagate from injected output gradients.
    ///
    /// `d_output` is dL/d(network output) when the full net ran; `d_feature` is
    /// dL/d(feature) and may be injected alone when only the feature layers ran.
    fn backward(
        &self,
        cache: &ForwardCache,
        d_output: Option<Array2<f64>>,
        d_feature: Option<Array2<f64>>,
        grads: &mut Gradients,
    ) {
        let top = cache.pre.len();
        let feat_out = self.arch.feature_layer + 1;
        let mut delta = d_output;
        for l in (0..top).rev() {
            if l + 1 == feat_out {
                if let Some(df) = &d_feature {
                    delta = Some(match delta {
                        Some(d) => d + df,
                        None => df.clone(),
                    });
                }
            }
            let Some(mut dz) = delta.take() else {
                continue;
            };
            if self.arch.relu[l] {
                Zip::from(&mut dz).and(&cache.pre[l]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.weights[l] += &cache.inputs[l].t().dot(&dz);
            grads.biases[l] += &dz.sum_axis(Axis(0));
            if l > 0 {
                delta = Some(dz.dot(&self.layers[l].weights.t()));
            }
        }
    }

    /// Add `scale · grads` to the parameters.
    pub fn apply_update(&mut self, update: &Gradients, scale: f64) {
        for (layer, (w, b)) in self.layers.iter_mut().zip(update.weights.iter().zip(&update.biases)) {
            layer.weights.scaled_add(scale, w);
            layer.bias.scaled_add(scale, b);
        }
    }

    /// Flattened parameter vector (layer by layer, weights row-major then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            arch: self.arch.clone(),
            output: self.output,
            layout: "input_norm.mean, input_norm.sd, output_norm.mean, output_norm.sd, then per layer W (in x out, row-major) and b; f64 little-endian".into(),
        })?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * (self.n_params() + 64));
        let norms = [
            &self.input_norm.mean,
            &self.input_norm.sd,
            &self.output_norm.mean,
            &self.output_norm.sd,
        ];
        for v in norms.into_iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.params_flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut fixed = [0u8; 16];
        r.read_exact(&mut fixed)?;
        if &fixed[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("model checkpoint", "bad magic"));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("model checkpoint", format!("unsupported version {version}")));
        }
        let mut header = vec![0u8; u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let mut model = MlpModel::new(header.arch, header.output, 0)?;
        let (din, dout) = (model.arch.input_dim(), model.arch.output_dim());
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let expected = 8 * (2 * din + 2 * dout + model.n_params());
        if body.len() != expected {
            return Err(Error::format(
                "model checkpoint",
                format!("body has {} bytes, architecture needs {expected}", body.len()),
            ));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (norms, params) = vals.split_at(2 * din + 2 * dout);
        model.input_norm = Normalizer {
            mean: norms[..din].to_vec(),
            sd: norms[din..2 * din].to_vec(),
        };
        model.output_norm = Normalizer {
            mean: norms[2 * din..2 * din + dout].to_vec(),
            sd: norms[2 * din + dout..].to_vec(),
        };
        model.set_params_flat(params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    output: Option<OutputKind>,
    layout: String,
}

/// Gradient (or any parameter-shaped quantity) for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: model.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn scaled_add(&mut self, scale: f64, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|v| *v == 0.0)
    }
}

/// Raw flux rows with physical targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl LabeledBatch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Indentation>, output: OutputKind) -> Self {
        let samples: Vec<&Indentation> = samples.into_iter().collect();
        Self {
            inputs: flux_matrix(samples.iter().map(|s| &s.flux_delta)),
            targets: target_matrix_refs(&samples, output),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Raw flux rows for anchors, positives, negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchor: Array2<f64>,
    pub positive: Array2<f64>,
    pub negative: Array2<f64>,
}

impl TripletBatch {
    pub fn from_triplets<'a>(triplets: impl IntoIterator<Item = &'a Triplet>) -> Self {
        let t: Vec<&Triplet> = triplets.into_iter().collect();
        Self {
            anchor: flux_matrix(t.iter().map(|t| &t.anchor)),
            positive: flux_matrix(t.iter().map(|t| &t.positive)),
            negative: flux_matrix(t.iter().map(|t| &t.negative)),
        }
    }

    pub fn len(&self) -> usize {
        self.anchor.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.nrows() == 0
    }

    fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &[self.anchor.view(), self.positive.view(), self.negative.view()])
            .expect("triplet parts share width")
    }
}

/// A weighted sum of an L2 term and any number of triplet terms.
#[derive(Debug, Clone, Default)]
pub struct Objective<'a> {
    pub labeled: Option<&'a LabeledBatch>,
    /// Per-output-component weights of the L2 loss; empty means all ones.
    pub l2_weights: &'a [f64],
    pub triplets: Vec<(&'a TripletBatch, f64)>,
}

impl<'a> Objective<'a> {
    pub fn l2(batch: &'a LabeledBatch) -> Self {
        Self {
            labeled: Some(batch),
            ..Self::default()
        }
    }

    pub fn triplet(batch: &'a TripletBatch) -> Self {
        Self {
            triplets: vec![(batch, 1.0)],
            ..Self::default()
        }
    }

    pub fn with_triplets(mut self, batch: &'a TripletBatch, weight: f64) -> Self {
        self.triplets.push((batch, weight));
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l2: f64,
    /// Unweighted triplet losses summed over triplet terms.
    pub triplet: f64,
    pub total: f64,
}

/// Mean over the batch of per-sample squared-error sums.
pub fn l2_loss(predictions: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<f64> {
    weighted_l2(predictions, labels, &[])
}

fn weighted_l2(predictions: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>, weights: &[f64]) -> Result<f64> {
    if predictions.dim() != labels.dim() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if predictions.nrows() == 0 {
        return Err(Error::EmptyInput("l2 batch"));
    }
    let mut sum = 0.0;
    for (p, l) in predictions.rows().into_iter().zip(labels.rows()) {
        for (c, (a, b)) in p.iter().zip(l.iter()).enumerate() {
            sum += weights.get(c).copied().unwrap_or(1.0) * (a - b).powi(2);
        }
    }
    Ok(sum / predictions.nrows() as f64)
}

/// Hinge on squared feature distances with zero margin: `max(0, ‖a−p‖² − ‖a−n‖²)`.
pub fn triplet_hinge(anchor: &[f64], positive: &[f64], negative: &[f64]) -> f64 {
    let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (d(anchor, positive) - d(anchor, negative)).max(0.0)
}

/// Triplet loss of one flux triplet under `model`.
pub fn triplet_loss(model: &MlpModel, anchor: &[f64], positive: &[f64], negative: &[f64]) -> Result<f64> {
    Ok(triplet_hinge(&model.feat(anchor)?, &model.feat(positive)?, &model.feat(negative)?))
}

/// Loss value and exact gradients of `objective`.
pub fn loss_and_gradients(model: &MlpModel, objective: &Objective<'_>) -> Result<(LossBreakdown, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    let mut out = LossBreakdown::default();
    if let Some(batch) = objective.labeled {
        if batch.is_empty() {
            return Err(Error::EmptyInput("labeled batch"));
        }
        model.check_input(&batch.inputs.view())?;
        if batch.targets.ncols() != model.arch.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.arch.output_dim(),
                got: batch.targets.ncols(),
            });
        }
        let cache = model.forward_cached(model.input_norm.apply(batch.inputs.view()), model.arch.n_layers());
        let raw = cache.inputs.last().unwrap();
        let pred = model.output_norm.invert(raw.view());
        out.l2 = weighted_l2(pred.view(), batch.targets.view(), objective.l2_weights)?;
        out.total += out.l2;
        let n = batch.len() as f64;
        let mut d = pred - &batch.targets;
        for (c, mut col) in d.axis_iter_mut(Axis(1)).enumerate() {
            let w = objective.l2_weights.get(c).copied().unwrap_or(1.0);
            let scale = 2.0 * w * model.output_norm.sd[c] / n;
            col.mapv_inplace(|v| v * scale);
        }
        model.backward(&cache, Some(d), None, &mut grads);
    }
    for (batch, weight) in &objective.triplets {
        if batch.is_empty() {
            continue;
        }
        let (loss, d_feat, cache) = triplet_terms(model, batch)?;
        out.triplet += loss;
        out.total += weight * loss;
        if *weight != 0.0 {
            model.backward(&cache, None, Some(d_feat * *weight), &mut grads);
        }
    }
    Ok((out, grads))
}

fn triplet_terms(model: &MlpModel, batch: &TripletBatch) -> Result<(f64, Array2<f64>, ForwardCache)> {
    let stacked = batch.stacked();
    model.check_input(&stacked.view())?;
    let b = batch.len();
    let cache = model.forward_cached(model.input_norm.apply(stacked.view()), model.arch.feature_layer + 1);
    let f = cache.inputs.last().unwrap();
    let (fa, fp, fneg) = (f.slice(s![..b, ..]), f.slice(s![b..2 * b, ..]), f.slice(s![2 * b.., ..]));
    let mut d = Array2::zeros(f.raw_dim());
    let mut loss = 0.0;
    let inv = 1.0 / b as f64;
    for i in 0..b {
        let (a, p, n) = (fa.row(i), fp.row(i), fneg.row(i));
        let ap = &a - &p;
        let an = &a - &n;
        let h = ap.dot(&ap) - an.dot(&an);
        if h > 0.0 {
            loss += h;
            // d/da = 2(n − p), d/dp = −2(a − p), d/dn = 2(a − n)
            d.row_mut(i).assign(&((&n - &p) * (2.0 * inv)));
            d.row_mut(b + i).assign(&(&ap * (-2.0 * inv)));
            d.row_mut(2 * b + i).assign(&(&an * (2.0 * inv)));
        }
    }
    Ok((loss * inv, d, cache))
}

/// Loss value only.
pub fn objective_loss(model: &MlpModel, objective: &Objective<'_>) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    if let Some(batch) = objective.labeled {
        let pred = model.predict_batch(batch.inputs.view())?;
        out.l2 = weighted_l2(pred.view(), batch.targets.view(), objective.l2_weights)?;
        out.total += out.l2;
    }
    for (batch, weight) in &objective.triplets {
        if batch.is_empty() {
            continue;
        }
        let (loss, _, _) = triplet_terms(model, batch)?;
        out.triplet += loss;
        out.total += weight * loss;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate at the end of training as a fraction of the start (cosine schedule).
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Weight of the triplet term when triplet regularization is on.
    pub triplet_weight: f64,
    /// Per-output L2 weights; empty means unit weights.
    pub loss_weights: Vec<f64>,
    /// Put ReLU after the second and third layers too.
    pub relu_feature_layers: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            final_lr_fraction: 0.05,
            batch_size: 256,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            triplet_weight: 1.0,
            loss_weights: Vec::new(),
            relu_feature_layers: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::InvalidParameter("batch_size and epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.triplet_weight >= 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0, triplet_weight >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, progress: f64) -> f64 {
        let f = self.final_lr_fraction;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos());
        self.learning_rate * (f + (1.0 - f) * cos)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(model: &MlpModel, config: &TrainConfig) -> Self {
        Self {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    /// One update; layers with `frozen[i]` set keep their parameters.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64, frozen: &[bool]) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = lr * c2.sqrt() / c1;
        let eps_hat = eps * c2.sqrt();
        for (i, layer) in model.layers.iter_mut().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            Zip::from(&mut layer.weights)
                .and(&mut self.m.weights[i])
                .and(&mut self.v.weights[i])
                .and(&grads.weights[i])
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step * *m / (v.sqrt() + eps_hat);
                });
            Zip::from(&mut layer.bias)
                .and(&mut self.m.biases[i])
                .and(&mut self.v.biases[i])
                .and(&grads.biases[i])
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step * *m / (v.sqrt() + eps_hat);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_triplet: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["epoch", "train_loss", "train_triplet", "valid_loss"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_triplet.to_string(),
                e.valid_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws same-sensor triplets from labeled samples, ordered by true contact distance.
#[derive(Debug, Clone)]
pub struct LabeledTripletSampler {
    /// Sample indices grouped by sensor.
    groups: Vec<Vec<usize>>,
    /// Group of each sample.
    group_of: Vec<usize>,
}

impl LabeledTripletSampler {
    pub fn new(samples: &[Indentation]) -> Self {
        let mut ids: Vec<&str> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_of = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let g = match ids.iter().position(|id| *id == s.sensor_id) {
                Some(g) => g,
                None => {
                    ids.push(&s.sensor_id);
                    groups.push(Vec::new());
                    ids.len() - 1
                }
            };
            groups[g].push(i);
            group_of.push(g);
        }
        Self { groups, group_of }
    }

    /// One triplet per anchor index.
    pub fn sample<R: Rng + ?Sized>(&self, samples: &[Indentation], anchors: &[usize], rng: &mut R) -> TripletBatch {
        let mut trips = Vec::with_capacity(anchors.len());
        for &a in anchors {
            let group = &self.groups[self.group_of[a]];
            if group.len() < 3 {
                continue;
            }
            let xa = samples[a].location;
            for _ in 0..32 {
                let j = group[rng.random_range(0..group.len())];
                let k = group[rng.random_range(0..group.len())];
                let dist = |i: usize| {
                    let x = samples[i].location;
                    (x[0] - xa[0]).hypot(x[1] - xa[1])
                };
                let (dj, dk) = (dist(j), dist(k));
                if j == a || k == a || j == k || dj == dk {
                    continue;
                }
                let (p, n) = if dj < dk { (j, k) } else { (k, j) };
                trips.push(Triplet {
                    anchor: samples[a].flux_delta,
                    positive: samples[p].flux_delta,
                    negative: samples[n].flux_delta,
                });
                break;
            }
        }
        TripletBatch::from_triplets(&trips)
    }
}

/// Minibatch training of `model` on labeled samples.
///
/// With `labeled_triplets` the objective adds `triplet_weight ×` the triplet loss
/// over same-sensor triplets drawn from each batch. Normalizers are left as they
/// are; call [`MlpModel::fit_normalizers`] first for a fresh model.
pub fn train(
    mut model: MlpModel,
    samples: &[Indentation],
    validation: &[Indentation],
    config: &TrainConfig,
    labeled_triplets: bool,
) -> Result<(MlpModel, TrainLog)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    let output = model.output_kind()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EA1_0000);
    let mut adam = Adam::new(&model, config);
    let sampler = labeled_triplets.then(|| LabeledTripletSampler::new(samples));
    let valid_batch = (!validation.is_empty()).then(|| LabeledBatch::from_samples(validation, output));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_trip, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = LabeledBatch::from_samples(chunk.iter().map(|&i| &samples[i]), output);
            let trip = sampler.as_ref().map(|s| s.sample(samples, chunk, &mut rng));
            let mut objective = Objective {
                labeled: Some(&batch),
                l2_weights: &config.loss_weights,
                triplets: Vec::new(),
            };
            if let Some(t) = &trip {
                objective = objective.with_triplets(t, config.triplet_weight);
            }
            let (loss, grads) = loss_and_gradients(&model, &objective)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let lr = config.lr_at(step as f64 / total_steps);
            adam.step(&mut model, &grads, lr, &[]);
            sum += loss.l2 * chunk.len() as f64;
            sum_trip += loss.triplet * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let valid_loss = match &valid_batch {
            Some(b) => Some(objective_loss(&model, &Objective { labeled: Some(b), l2_weights: &config.loss_weights, triplets: Vec::new() })?.l2),
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / seen as f64,
            train_triplet: sum_trip / seen as f64,
            valid_loss,
        });
    }
    Ok((model, log))
}

/// Fresh decoder with normalizers fit on `samples`, then [`train`].
pub fn fit_decoder(
    samples: &[Indentation],
    validation: &[Indentation],
    output: OutputKind,
    config: &TrainConfig,
    labeled_triplets: bool,
) -> Result<(MlpModel, TrainLog)> {
    let mut model = MlpModel::decoder(output, config.relu_feature_layers, config.seed);
    model.fit_normalizers(samples)?;
    train(model, samples, validation, config, labeled_triplets)
}

pub fn flux_matrix<'a>(rows: impl IntoIterator<Item = &'a FluxVector>) -> Array2<f64> {
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.iter().copied()).collect();
    let n = flat.len() / FLUX_DIM;
    Array2::from_shape_vec((n, FLUX_DIM), flat).expect("rows have FLUX_DIM columns")
}

pub fn target_matrix(samples: &[Indentation], output: OutputKind) -> Array2<f64> {
    target_matrix_refs(&samples.iter().collect::<Vec<_>>(), output)
}

fn target_matrix_refs(samples: &[&Indentation], output: OutputKind) -> Array2<f64> {
    let flat: Vec<f64> = samples.iter().flat_map(|s| output.target(s)).collect();
    Array2::from_shape_vec((samples.len(), output.dim()), flat).expect("targets have output width")
}
