//! The ladder network itself: a declarative spec of layer sizes and map
//! kinds, a flat parameter store with named blocks, clean/corrupted forward
//! passes, per-layer backward kernels, and the five-parameter scalar denoiser.
//!
//! Decoder maps at layers below the top combine a lateral input (the
//! corrupted activation of the same layer) with the reconstruction coming
//! from the layer above; the top map sees only its lateral input.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{standard_normal_matrix, Prng};
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_columns, DenseMatrix};

/// Encoder map from layer l-1 to layer l.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// h_out = W h_in.
    Linear,
    /// One-hidden-layer perceptron with softplus units:
    /// h_out = Wb softplus(Wa h_in + ba) + bb.
    SoftplusMlp { hidden: usize },
}

/// Decoder map producing the reconstruction of layer l.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Top-layer map g_i(h) = a_i h_i + b_i tanh(h_i); consumes only the
    /// lateral input.
    #[serde(alias = "top_tanh_gain")]
    TanhGain,
    /// Top-layer map g_i(h) = a_i h_i.
    ScalarGain,
    /// g_i = sigmoid(A_i hhat_above + b_i) * h_i: the optimal Gaussian gain
    /// rewritten as a connection strength modulated from the layer above.
    SigmoidGate,
    /// g = A hhat_above + B h: linear top-down plus linear lateral shortcut.
    LinearLateral,
}

impl DecoderKind {
    fn needs_top_down(self) -> bool {
        matches!(self, DecoderKind::SigmoidGate | DecoderKind::LinearLateral)
    }
}

/// Input corruption level: one std for all dimensions, one per dimension, or
/// a factor of each dimension's sample std (resolved against a dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorruptSigma {
    Scalar(f64),
    PerDim(Vec<f64>),
    StdFactor { std_factor: f64 },
}

impl CorruptSigma {
    /// Concrete per-dimension noise stds. `StdFactor` must have been resolved
    /// against data first.
    pub fn resolve(&self, d: usize) -> Result<Vec<f64>> {
        match self {
            CorruptSigma::Scalar(s) => {
                if *s < 0.0 {
                    return Err(Error::arg(format!("negative corruption std {s}")));
                }
                Ok(vec![*s; d])
            }
            CorruptSigma::PerDim(v) => {
                if v.len() != d {
                    return Err(Error::dim(format!(
                        "sigma_corrupt has {} entries for input dimension {d}",
                        v.len()
                    )));
                }
                if let Some(s) = v.iter().find(|s| **s < 0.0) {
                    return Err(Error::arg(format!("negative corruption std {s}")));
                }
                Ok(v.clone())
            }
            CorruptSigma::StdFactor { .. } => Err(Error::Spec(
                "std_factor corruption must be resolved against a dataset before use".into(),
            )),
        }
    }
}

/// Declarative description of a ladder network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    /// Layer sizes d_0..d_L; d_0 is the input dimension.
    pub layer_dims: Vec<usize>,
    /// Encoder kinds for layers 1..=L.
    pub encoders: Vec<EncoderKind>,
    /// Decoder kinds for layers 0..=L (last entry is the top map).
    pub decoders: Vec<DecoderKind>,
    /// Reconstruction-cost weights for layers 1..=L.
    pub alpha: Vec<f64>,
    /// Initial decorrelation weight (adjusted per layer during training).
    pub beta0: f64,
    /// Initial zero-mean weight (tracks beta during training).
    pub gamma0: f64,
    /// Input corruption level.
    pub sigma_corrupt: CorruptSigma,
    /// Smallest-eigenvalue floor targeted by the beta controller.
    #[serde(default = "default_eig_floor")]
    pub eig_floor: f64,
}

fn default_eig_floor() -> f64 {
    0.7
}

impl LadderSpec {
    /// Number of hidden layers L.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Spec("need at least one hidden layer".into()));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Spec("zero-sized layer".into()));
        }
        let l = self.num_layers();
        if self.encoders.len() != l {
            return Err(Error::Spec(format!(
                "{} encoder kinds for {l} layers",
                self.encoders.len()
            )));
        }
        if self.decoders.len() != l + 1 {
            return Err(Error::Spec(format!(
                "{} decoder kinds for layers 0..={l}",
                self.decoders.len()
            )));
        }
        if self.decoders[l].needs_top_down() {
            return Err(Error::Spec(format!(
                "{:?} cannot sit at the top layer: there is no layer above it",
                self.decoders[l]
            )));
        }
        for (idx, kind) in self.decoders.iter().enumerate().take(l) {
            if !kind.needs_top_down() {
                return Err(Error::Spec(format!(
                    "{kind:?} at layer {idx} would ignore the reconstruction from above; \
                     only the top layer may use a gain-only map"
                )));
            }
        }
        if self.alpha.len() != l {
            return Err(Error::Spec(format!(
                "{} alpha weights for {l} layers",
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|&a| a < 0.0) || self.beta0 < 0.0 || self.gamma0 < 0.0 {
            return Err(Error::Spec("cost weights must be nonnegative".into()));
        }
        if let Some(hidden) = self.encoders.iter().find_map(|e| match e {
            EncoderKind::SoftplusMlp { hidden } if *hidden == 0 => Some(hidden),
            _ => None,
        }) {
            return Err(Error::Spec(format!("MLP with {hidden} hidden units")));
        }
        if !(self.eig_floor > 0.0 && self.eig_floor < 1.0) {
            return Err(Error::Spec(format!(
                "eig_floor {} outside (0, 1)",
                self.eig_floor
            )));
        }
        match &self.sigma_corrupt {
            CorruptSigma::StdFactor { std_factor } if *std_factor < 0.0 => {
                return Err(Error::Spec("negative std_factor".into()));
            }
            CorruptSigma::StdFactor { .. } => {}
            other => {
                other.resolve(self.input_dim())?;
            }
        }
        Ok(())
    }

    /// Per-dimension corruption stds; `StdFactor` must be resolved first.
    pub fn sigma_vec(&self) -> Result<Vec<f64>> {
        self.sigma_corrupt.resolve(self.input_dim())
    }

    /// Replace a `StdFactor` corruption policy by the concrete per-dimension
    /// stds of the given observations.
    pub fn with_resolved_sigma(&self, x: &DenseMatrix) -> Result<LadderSpec> {
        let mut spec = self.clone();
        if let CorruptSigma::StdFactor { std_factor } = &self.sigma_corrupt {
            if x.rows() != self.input_dim() {
                return Err(Error::dim(
                    "sigma resolution data does not match the input dimension",));
            }
            let t = x.cols() as f64;
            let sigmas: Vec<f64> = (0..x.rows())
                .map(|i| {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / t;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
                    std_factor * var.sqrt()
                })
                .collect();
            spec.sigma_corrupt = CorruptSigma::PerDim(sigmas);
        }
        Ok(spec)
    }
}

/// One named parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Layout of all parameter blocks for a given spec: blocks tile the flat
/// vector exactly, in a fixed documented order (encoders bottom-up, then
/// decoders top-down).
#[derive(Debug, Clone)]
pub struct ParamIndex {
    blocks: Vec<BlockInfo>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamIndex {
    pub fn for_spec(spec: &LadderSpec) -> Result<ParamIndex> {
        spec.validate()?;
        let l = spec.num_layers();
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |blocks: &mut Vec<BlockInfo>, name: String, rows: usize, cols: usize| {
            blocks.push(BlockInfo {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        for layer in 1..=l {
            let d_in = spec.layer_dims[layer - 1];
            let d_out = spec.layer_dims[layer];
            match spec.encoders[layer - 1] {
                EncoderKind::Linear => push(&mut blocks, format!("enc{layer}.w"), d_out, d_in),
                EncoderKind::SoftplusMlp { hidden } => {
                    push(&mut blocks, format!("enc{layer}.wa"), hidden, d_in);
                    push(&mut blocks, format!("enc{layer}.ba"), hidden, 1);
                    push(&mut blocks, format!("enc{layer}.wb"), d_out, hidden);
                    push(&mut blocks, format!("enc{layer}.bb"), d_out, 1);
                }
            }
        }
        for layer in (0..=l).rev() {
            let d = spec.layer_dims[layer];
            match spec.decoders[layer] {
                DecoderKind::TanhGain => {
                    push(&mut blocks, format!("dec{layer}.a"), d, 1);
                    push(&mut blocks, format!("dec{layer}.b"), d, 1);
                }
                DecoderKind::ScalarGain => push(&mut blocks, format!("dec{layer}.a"), d, 1),
                DecoderKind::SigmoidGate => {
                    let d_above = spec.layer_dims[layer + 1];
                    push(&mut blocks, format!("dec{layer}.gate_w"), d, d_above);
                    push(&mut blocks, format!("dec{layer}.gate_b"), d, 1);
                }
                DecoderKind::LinearLateral => {
                    let d_above = spec.layer_dims[layer + 1];
                    push(&mut blocks, format!("dec{layer}.top"), d, d_above);
                    push(&mut blocks, format!("dec{layer}.lat"), d, d);
                }
            }
        }
        let by_name = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.clone(), i))
            .collect();
        Ok(ParamIndex {
            blocks,
            by_name,
            total: offset,
        })
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Result<&BlockInfo> {
        self.by_name
            .get(name)
            .map(|&i| &self.blocks[i])
            .ok_or_else(|| Error::Spec(format!("unknown parameter block '{name}'")))
    }

    /// Name of the block containing a flat coordinate.
    pub fn block_of_coord(&self, coord: usize) -> Option<&BlockInfo> {
        self.blocks
            .iter()
            .find(|b| coord >= b.offset && coord < b.offset + b.len())
    }
}

/// Flat 64-bit parameter vector plus the block index describing it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub index: ParamIndex,
    flat: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(index: ParamIndex) -> Self {
        let flat = vec![0.0; index.total_len()];
        ParamStore { index, flat }
    }

    pub fn from_flat(index: ParamIndex, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != index.total_len() {
            return Err(Error::dim(format!(
                "flat parameter vector has {} entries, layout needs {}",
                flat.len(),
                index.total_len()
            )));
        }
        Ok(ParamStore { index, flat })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let b = self.index.block(name)?;
        Ok(&self.flat[b.offset..b.offset + b.len()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let b = self.index.block(name)?.clone();
        Ok(&mut self.flat[b.offset..b.offset + b.len()])
    }

    /// Copy of a block as a matrix.
    pub fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        let b = self.index.block(name)?;
        DenseMatrix::new(
            b.rows,
            b.cols,
            self.flat[b.offset..b.offset + b.len()].to_vec(),
        )
    }

    pub fn set_block(&mut self, name: &str, m: &DenseMatrix) -> Result<()> {
        let b = self.index.block(name)?;
        if b.rows != m.rows() || b.cols != m.cols() {
            return Err(Error::dim(format!(
                "block '{name}' is {}x{}, got {}x{}",
                b.rows,
                b.cols,
                m.rows(),
                m.cols()
            )));
        }
        let (off, len) = (b.offset, b.len());
        self.flat[off..off + len].copy_from_slice(m.data());
        Ok(())
    }
}

/// Initialize parameters: linear encoders get orthonormal maps (QR of a
/// Gaussian draw), MLP weights are Gaussian scaled by 1/sqrt(fan_in), decoder
/// matrices start at zero and gains at one half. Starting from "reconstruct
/// nothing through the decoder" keeps the copy-through solution out of the
/// initial basin; with whitened inputs the initial representations are
/// decorrelated by construction.
pub fn init_params(spec: &LadderSpec, rng: &mut Prng) -> Result<ParamStore> {
    let index = ParamIndex::for_spec(spec)?;
    let mut params = ParamStore::zeros(index);
    let l = spec.num_layers();
    for layer in 1..=l {
        let d_in = spec.layer_dims[layer - 1];
        let d_out = spec.layer_dims[layer];
        match spec.encoders[layer - 1] {
            EncoderKind::Linear => {
                let w = if d_out <= d_in {
                    let g = standard_normal_matrix(d_in, d_out, rng);
                    orthonormal_columns(&g)?.transpose()
                } else {
                    let g = standard_normal_matrix(d_out, d_in, rng);
                    orthonormal_columns(&g)?
                };
                params.set_block(&format!("enc{layer}.w"), &w)?;
            }
            EncoderKind::SoftplusMlp { hidden } => {
                let mut wa = standard_normal_matrix(hidden, d_in, rng);
                wa.scale(1.0 / (d_in as f64).sqrt());
                params.set_block(&format!("enc{layer}.wa"), &wa)?;
                let mut wb = standard_normal_matrix(d_out, hidden, rng);
                wb.scale(1.0 / (hidden as f64).sqrt());
                params.set_block(&format!("enc{layer}.wb"), &wb)?;
            }
        }
    }
    for layer in (0..=l).rev() {
        match spec.decoders[layer] {
            DecoderKind::TanhGain | DecoderKind::ScalarGain => {
                for v in params.slice_mut(&format!("dec{layer}.a"))? {
                    *v = 0.5;
                }
            }
            DecoderKind::SigmoidGate | DecoderKind::LinearLateral => {}
        }
    }
    Ok(params)
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-layer cache of the MLP forward pass needed for its backward pass.
pub(crate) struct MlpCache {
    /// softplus(Wa h + ba), hidden x T.
    u: DenseMatrix,
    /// sigmoid(Wa h + ba) = d softplus / dz, hidden x T.
    sig: DenseMatrix,
}

pub(crate) enum EncoderCache {
    Linear,
    Mlp(MlpCache),
}

/// Forward pass of encoder layer `layer` (1-based).
pub(crate) fn encoder_layer_forward(
    layer: usize,
    params: &ParamStore,
    spec: &LadderSpec,
    h_in: &DenseMatrix,
) -> Result<(DenseMatrix, EncoderCache)> {
    match spec.encoders[layer - 1] {
        EncoderKind::Linear => {
            let w = params.matrix(&format!("enc{layer}.w"))?;
            Ok((w.matmul(h_in)?, EncoderCache::Linear))
        }
        EncoderKind::SoftplusMlp { .. } => {
            let wa = params.matrix(&format!("enc{layer}.wa"))?;
            let ba = params.slice(&format!("enc{layer}.ba"))?.to_vec();
            let wb = params.matrix(&format!("enc{layer}.wb"))?;
            let bb = params.slice(&format!("enc{layer}.bb"))?.to_vec();
            let mut z = wa.matmul(h_in)?;
            for i in 0..z.rows() {
                let b = ba[i];
                for v in z.row_mut(i) {
                    *v += b;
                }
            }
            let mut u = DenseMatrix::zeros(z.rows(), z.cols());
            let mut sig = DenseMatrix::zeros(z.rows(), z.cols());
            for i in 0..z.rows() {
                let zrow = z.row(i);
                let urow_sig: Vec<(f64, f64)> =
                    zrow.iter().map(|&x| (softplus(x), sigmoid(x))).collect();
                for (j, (uv, sv)) in urow_sig.into_iter().enumerate() {
                    u.set(i, j, uv);
                    sig.set(i, j, sv);
                }
            }
            let mut out = wb.matmul(&u)?;
            for i in 0..out.rows() {
                let b = bb[i];
                for v in out.row_mut(i) {
                    *v += b;
                }
            }
            Ok((out, EncoderCache::Mlp(MlpCache { u, sig })))
        }
    }
}

fn add_to_block(grad: &mut ParamStore, name: &str, delta: &DenseMatrix) -> Result<()> {
    let slot = grad.slice_mut(name)?;
    if slot.len() != delta.data().len() {
        return Err(Error::dim(format!("gradient block '{name}' size mismatch")));
    }
    for (g, d) in slot.iter_mut().zip(delta.data()) {
        *g += d;
    }
    Ok(())
}

fn add_row_sums_to_block(grad: &mut ParamStore, name: &str, m: &DenseMatrix) -> Result<()> {
    let slot = grad.slice_mut(name)?;
    if slot.len() != m.rows() {
        return Err(Error::dim(format!("gradient block '{name}' size mismatch")));
    }
    for (i, g) in slot.iter_mut().enumerate() {
        *g += m.row(i).iter().sum::<f64>();
    }
    Ok(())
}

/// Backward pass of encoder layer `layer`: accumulates parameter gradients
/// and optionally returns the gradient with respect to the layer input.
pub(crate) fn encoder_layer_backward(
    layer: usize,
    params: &ParamStore,
    spec: &LadderSpec,
    h_in: &DenseMatrix,
    cache: &EncoderCache,
    d_out: &DenseMatrix,
    grad: &mut ParamStore,
    want_d_input: bool,
) -> Result<Option<DenseMatrix>> {
    match (&spec.encoders[layer - 1], cache) {
        (EncoderKind::Linear, EncoderCache::Linear) => {
            add_to_block(grad, &format!("enc{layer}.w"), &d_out.matmul_transb(h_in)?)?;
            if want_d_input {
                let w = params.matrix(&format!("enc{layer}.w"))?;
                Ok(Some(w.matmul_transa(d_out)?))
            } else {
                Ok(None)
            }
        }
        (EncoderKind::SoftplusMlp { .. }, EncoderCache::Mlp(c)) => {
            add_to_block(grad, &format!("enc{layer}.wb"), &d_out.matmul_transb(&c.u)?)?;
            add_row_sums_to_block(grad, &format!("enc{layer}.bb"), d_out)?;
            let wb = params.matrix(&format!("enc{layer}.wb"))?;
            let mut dz = wb.matmul_transa(d_out)?;
            for (v, s) in dz.data_mut().iter_mut().zip(c.sig.data()) {
                *v *= s;
            }
            add_to_block(grad, &format!("enc{layer}.wa"), &dz.matmul_transb(h_in)?)?;
            add_row_sums_to_block(grad, &format!("enc{layer}.ba"), &dz)?;
            if want_d_input {
                let wa = params.matrix(&format!("enc{layer}.wa"))?;
                Ok(Some(wa.matmul_transa(&dz)?))
            } else {
                Ok(None)
            }
        }
        _ => Err(Error::Spec("encoder cache kind mismatch".into())),
    }
}

pub(crate) enum DecoderCache {
    /// tanh of the lateral input.
    TanhGain(DenseMatrix),
    ScalarGain,
    /// sigmoid(gate_w hhat_above + gate_b).
    SigmoidGate(DenseMatrix),
    LinearLateral,
}

/// Forward pass of decoder layer `layer`; `top_down` must be present exactly
/// when the kind consumes it.
pub(crate) fn decoder_layer_forward(
    layer: usize,
    params: &ParamStore,
    spec: &LadderSpec,
    lateral: &DenseMatrix,
    top_down: Option<&DenseMatrix>,
) -> Result<(DenseMatrix, DecoderCache)> {
    let kind = spec.decoders[layer];
    if kind.needs_top_down() != top_down.is_some() {
        return Err(Error::Spec(format!(
            "decoder {kind:?} at layer {layer}: top-down input {}",
            if top_down.is_some() {
                "given but unused"
            } else {
                "missing"
            }
        )));
    }
    match kind {
        DecoderKind::TanhGain => {
            let a = params.slice(&format!("dec{layer}.a"))?.to_vec();
            let b = params.slice(&format!("dec{layer}.b"))?.to_vec();
            let mut t = lateral.clone();
            for v in t.data_mut() {
                *v = v.tanh();
            }
            let mut out = DenseMatrix::zeros(lateral.rows(), lateral.cols());
            for i in 0..lateral.rows() {
                let (ai, bi) = (a[i], b[i]);
                let lrow = lateral.row(i);
                let trow = t.row(i);
                let orow = out.row_mut(i);
                for j in 0..lrow.len() {
                    orow[j] = ai * lrow[j] + bi * trow[j];
                }
            }
            Ok((out, DecoderCache::TanhGain(t)))
        }
        DecoderKind::ScalarGain => {
            let a = params.slice(&format!("dec{layer}.a"))?.to_vec();
            let mut out = lateral.clone();
            for i in 0..out.rows() {
                let ai = a[i];
                for v in out.row_mut(i) {
                    *v *= ai;
                }
            }
            Ok((out, DecoderCache::ScalarGain))
        }
        DecoderKind::SigmoidGate => {
            let above = top_down.expect("checked above");
            let gw = params.matrix(&format!("dec{layer}.gate_w"))?;
            let gb = params.slice(&format!("dec{layer}.gate_b"))?.to_vec();
            let mut z = gw.matmul(above)?;
            for i in 0..z.rows() {
                let b = gb[i];
                for v in z.row_mut(i) {
                    *v = sigmoid(*v + b);
                }
            }
            let mut out = lateral.clone();
            for (v, s) in out.data_mut().iter_mut().zip(z.data()) {
                *v *= s;
            }
            Ok((out, DecoderCache::SigmoidGate(z)))
        }
        DecoderKind::LinearLateral => {
            let above = top_down.expect("checked above");
            let top = params.matrix(&format!("dec{layer}.top"))?;
            let lat = params.matrix(&format!("dec{layer}.lat"))?;
            let mut out = top.matmul(above)?;
            out.axpy(1.0, &lat.matmul(lateral)?)?;
            Ok((out, DecoderCache::LinearLateral))
        }
    }
}

/// Backward pass of decoder layer `layer`: accumulates parameter gradients
/// and returns gradients with respect to the lateral and top-down inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_layer_backward(
    layer: usize,
    params: &ParamStore,
    spec: &LadderSpec,
    lateral: &DenseMatrix,
    top_down: Option<&DenseMatrix>,
    cache: &DecoderCache,
    d_out: &DenseMatrix,
    grad: &mut ParamStore,
    want_d_lateral: bool,
) -> Result<(Option<DenseMatrix>, Option<DenseMatrix>)> {
    match (spec.decoders[layer], cache) {
        (DecoderKind::TanhGain, DecoderCache::TanhGain(t)) => {
            let a = params.slice(&format!("dec{layer}.a"))?.to_vec();
            let b = params.slice(&format!("dec{layer}.b"))?.to_vec();
            {
                let da = grad.slice_mut(&format!("dec{layer}.a"))?;
                for i in 0..lateral.rows() {
                    da[i] += d_out
                        .row(i)
                        .iter()
                        .zip(lateral.row(i))
                        .map(|(d, l)| d * l)
                        .sum::<f64>();
                }
            }
            {
                let db = grad.slice_mut(&format!("dec{layer}.b"))?;
                for i in 0..lateral.rows() {
                    db[i] += d_out
                        .row(i)
                        .iter()
                        .zip(t.row(i))
                        .map(|(d, tv)| d * tv)
                        .sum::<f64>();
                }
            }
            let d_lat = want_d_lateral.then(|| {
                let mut m = DenseMatrix::zeros(lateral.rows(), lateral.cols());
                for i in 0..lateral.rows() {
                    let (ai, bi) = (a[i], b[i]);
                    let drow = d_out.row(i);
                    let trow = t.row(i);
                    let mrow = m.row_mut(i);
                    for j in 0..drow.len() {
                        mrow[j] = drow[j] * (ai + bi * (1.0 - trow[j] * trow[j]));
                    }
                }
                m
            });
            Ok((d_lat, None))
        }
        (DecoderKind::ScalarGain, DecoderCache::ScalarGain) => {
            let a = params.slice(&format!("dec{layer}.a"))?.to_vec();
            {
                let da = grad.slice_mut(&format!("dec{layer}.a"))?;
                for i in 0..lateral.rows() {
                    da[i] += d_out
                        .row(i)
                        .iter()
                        .zip(lateral.row(i))
                        .map(|(d, l)| d * l)
                        .sum::<f64>();
                }
            }
            let d_lat = want_d_lateral.then(|| {
                let mut m = d_out.clone();
                for i in 0..m.rows() {
                    let ai = a[i];
                    for v in m.row_mut(i) {
                        *v *= ai;
                    }
                }
                m
            });
            Ok((d_lat, None))
        }
        (DecoderKind::SigmoidGate, DecoderCache::SigmoidGate(s)) => {
            let above = top_down
                .ok_or_else(|| Error::Spec("sigmoid gate backward needs the top-down input".into()))?;
            // dz = d_out . lateral . s (1 - s)
            let mut dz = d_out.clone();
            for ((v, l), sv) in dz
                .data_mut()
                .iter_mut()
                .zip(lateral.data())
                .zip(s.data())
            {
                *v *= l * sv * (1.0 - sv);
            }
            add_to_block(grad, &format!("dec{layer}.gate_w"), &dz.matmul_transb(above)?)?;
            add_row_sums_to_block(grad, &format!("dec{layer}.gate_b"), &dz)?;
            let gw = params.matrix(&format!("dec{layer}.gate_w"))?;
            let d_above = gw.matmul_transa(&dz)?;
            let d_lat = want_d_lateral.then(|| {
                let mut m = d_out.clone();
                for (v, sv) in m.data_mut().iter_mut().zip(s.data()) {
                    *v *= sv;
                }
                m
            });
            Ok((d_lat, Some(d_above)))
        }
        (DecoderKind::LinearLateral, DecoderCache::LinearLateral) => {
            let above = top_down
                .ok_or_else(|| Error::Spec("linear lateral backward needs the top-down input".into()))?;
            add_to_block(grad, &format!("dec{layer}.top"), &d_out.matmul_transb(above)?)?;
            add_to_block(grad, &format!("dec{layer}.lat"), &d_out.matmul_transb(lateral)?)?;
            let top = params.matrix(&format!("dec{layer}.top"))?;
            let d_above = top.matmul_transa(d_out)?;
            let d_lat = if want_d_lateral {
                let lat = params.matrix(&format!("dec{layer}.lat"))?;
                Some(lat.matmul_transa(d_out)?)
            } else {
                None
            };
            Ok((d_lat, Some(d_above)))
        }
        _ => Err(Error::Spec("decoder cache kind mismatch".into())),
    }
}

pub(crate) struct EncodeTrace {
    /// h[0] is the input; h[l] the activation of layer l.
    pub h: Vec<DenseMatrix>,
    /// Cache per layer 1..=L (index 0 unused placeholder).
    pub caches: Vec<EncoderCache>,
}

pub(crate) fn encode_trace(
    params: &ParamStore,
    spec: &LadderSpec,
    x: &DenseMatrix,
) -> Result<EncodeTrace> {
    if x.rows() != spec.input_dim() {
        return Err(Error::dim(format!(
            "encode: input has {} rows, spec expects {}",
            x.rows(),
            spec.input_dim()
        )));
    }
    let l = spec.num_layers();
    let mut h = Vec::with_capacity(l + 1);
    let mut caches = Vec::with_capacity(l);
    h.push(x.clone());
    for layer in 1..=l {
        let (out, cache) = encoder_layer_forward(layer, params, spec, &h[layer - 1])?;
        h.push(out);
        caches.push(cache);
    }
    Ok(EncodeTrace { h, caches })
}

/// Clean (or corrupted, depending on the input) encoder pass: activations
/// h^(0)..h^(L) with h^(0) = x.
pub fn encode(params: &ParamStore, spec: &LadderSpec, x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
    spec.validate()?;
    Ok(encode_trace(params, spec, x)?.h)
}

pub(crate) struct DecodeTrace {
    /// h_hat[l] is the reconstruction of layer l; h_hat[0] the input one.
    pub h_hat: Vec<DenseMatrix>,
    pub caches: Vec<DecoderCache>,
}

pub(crate) fn decode_trace(
    params: &ParamStore,
    spec: &LadderSpec,
    h_tilde: &[DenseMatrix],
) -> Result<DecodeTrace> {
    let l = spec.num_layers();
    if h_tilde.len() != l + 1 {
        return Err(Error::dim(format!(
            "decode: {} activations for {} layers",
            h_tilde.len(),
            l + 1
        )));
    }
    let mut h_hat: Vec<Option<DenseMatrix>> = vec![None; l + 1];
    let mut caches: Vec<Option<DecoderCache>> = (0..=l).map(|_| None).collect();
    let (top, top_cache) = decoder_layer_forward(l, params, spec, &h_tilde[l], None)?;
    h_hat[l] = Some(top);
    caches[l] = Some(top_cache);
    for layer in (0..l).rev() {
        let above = h_hat[layer + 1].as_ref().expect("filled in order");
        let (out, cache) = decoder_layer_forward(layer, params, spec, &h_tilde[layer], Some(above))?;
        h_hat[layer] = Some(out);
        caches[layer] = Some(cache);
    }
    Ok(DecodeTrace {
        h_hat: h_hat.into_iter().map(|m| m.expect("filled")).collect(),
        caches: caches.into_iter().map(|c| c.expect("filled")).collect(),
    })
}

/// Decoder pass over corrupted activations: reconstructions
/// hhat^(L)..hhat^(0), returned indexed by layer (0 first).
pub fn decode(
    params: &ParamStore,
    spec: &LadderSpec,
    h_tilde: &[DenseMatrix],
) -> Result<Vec<DenseMatrix>> {
    spec.validate()?;
    Ok(decode_trace(params, spec, h_tilde)?.h_hat)
}

/// The five-parameter scalar denoiser
/// `xhat = xi1 xt + xi2 tanh(xi3 xt + xi4) + xi5`, applied elementwise.
pub fn scalar_denoiser(xi: &[f64; 5], x_tilde: &[f64]) -> Vec<f64> {
    x_tilde
        .iter()
        .map(|&v| xi[0] * v + xi[1] * (xi[2] * v + xi[3]).tanh() + xi[4])
        .collect()
}

/// The closed-form optimal denoiser for a Gaussian signal under Gaussian
/// corruption: a scalar gain of sigma_x^2 / (sigma_x^2 + sigma_n^2).
pub fn gauss_optimal_denoiser(sigma_x: f64, sigma_n: f64, x_tilde: &[f64]) -> Result<Vec<f64>> {
    if sigma_x <= 0.0 || sigma_n <= 0.0 {
        return Err(Error::arg(format!(
            "gauss_optimal_denoiser needs positive stds, got {sigma_x}, {sigma_n}"
        )));
    }
    let gain = sigma_x * sigma_x / (sigma_x * sigma_x + sigma_n * sigma_n);
    Ok(x_tilde.iter().map(|&v| gain * v).collect())
}

/// On-disk model checkpoint. Parameters survive a JSON roundtrip exactly, so
/// a reloaded model reproduces costs bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: LadderSpec,
    pub seed: u64,
    pub flat_params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(spec: &LadderSpec, seed: u64, params: &ParamStore) -> Self {
        Checkpoint {
            version: 1,
            spec: spec.clone(),
            seed,
            flat_params: params.flat().to_vec(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(LadderSpec, u64, ParamStore)> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != 1 {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let index = ParamIndex::for_spec(&ckpt.spec)?;
        let params = ParamStore::from_flat(index, ckpt.flat_params)?;
        Ok((ckpt.spec, ckpt.seed, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng_from_seed;
    use crate::linalg::covariance;

    pub(crate) fn ica_like_spec() -> LadderSpec {
        LadderSpec {
            layer_dims: vec![15, 11],
            encoders: vec![EncoderKind::Linear],
            decoders: vec![DecoderKind::LinearLateral, DecoderKind::TanhGain],
            alpha: vec![0.0],
            beta0: 1.0,
            gamma0: 1.0,
            sigma_corrupt: CorruptSigma::Scalar(0.5),
            eig_floor: 0.7,
        }
    }

    #[test]
    fn param_blocks_tile_exactly() {
        let spec = LadderSpec {
            layer_dims: vec![16, 16, 10],
            encoders: vec![
                EncoderKind::Linear,
                EncoderKind::SoftplusMlp { hidden: 50 },
            ],
            decoders: vec![
                DecoderKind::LinearLateral,
                DecoderKind::SigmoidGate,
                DecoderKind::ScalarGain,
            ],
            alpha: vec![1.0, 1.0],
            beta0: 1.0,
            gamma0: 1.0,
            sigma_corrupt: CorruptSigma::Scalar(0.5),
            eig_floor: 0.7,
        };
        let index = ParamIndex::for_spec(&spec).unwrap();
        let mut covered = vec![false; index.total_len()];
        for b in index.blocks() {
            for i in b.offset..b.offset + b.len() {
                assert!(!covered[i], "blocks overlap at {i}");
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "gap in parameter layout");
        // Write-through then read-back.
        let mut params = ParamStore::zeros(index);
        let m = DenseMatrix::from_fn(16, 10, |i, j| (i * 10 + j) as f64);
        params.set_block("dec1.gate_w", &m).unwrap();
        assert_eq!(params.matrix("dec1.gate_w").unwrap().data(), m.data());
    }

    #[test]
    fn validate_rejects_gate_at_top() {
        let mut spec = ica_like_spec();
        spec.decoders = vec![DecoderKind::LinearLateral, DecoderKind::SigmoidGate];
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn validate_rejects_gain_below_top() {
        let mut spec = ica_like_spec();
        spec.decoders = vec![DecoderKind::TanhGain, DecoderKind::TanhGain];
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn init_linear_encoder_rows_orthonormal() {
        let spec = ica_like_spec();
        let params = init_params(&spec, &mut rng_from_seed(1)).unwrap();
        let w = params.matrix("enc1.w").unwrap();
        let wwt = w.matmul_transb(&w).unwrap();
        let err = wwt
            .sub(&DenseMatrix::identity(11))
            .unwrap()
            .max_abs();
        assert!(err < 1e-10, "W W^T off identity by {err}");
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ica_like_spec();
        let a = init_params(&spec, &mut rng_from_seed(9)).unwrap();
        let b = init_params(&spec, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a.flat(), b.flat());
    }

    #[test]
    fn white_input_stays_white_under_orthonormal_map() {
        let mut rng = rng_from_seed(2);
        let x = standard_normal_matrix(15, 10_000, &mut rng);
        let (z, _) = crate::linalg::pca_whiten(&x).unwrap();
        let spec = ica_like_spec();
        let params = init_params(&spec, &mut rng).unwrap();
        let h = encode(&params, &spec, &z).unwrap();
        let cov = covariance(&h[1], true).unwrap();
        let err = cov.sub(&DenseMatrix::identity(11)).unwrap().max_abs();
        assert!(err < 1e-6, "cov(h1) off identity by {err}");
    }

    #[test]
    fn encode_identity_weight_passes_through() {
        let mut spec = ica_like_spec();
        spec.layer_dims = vec![3, 3];
        let index = ParamIndex::for_spec(&spec).unwrap();
        let mut params = ParamStore::zeros(index);
        params
            .set_block("enc1.w", &DenseMatrix::identity(3))
            .unwrap();
        let x = DenseMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let h = encode(&params, &spec, &x).unwrap();
        assert_eq!(h[1].data(), x.data());
    }

    #[test]
    fn softplus_of_zero_propagates_ln2() {
        // One hidden unit, wa = 0, ba = 0, wb = 1, bb = 0 -> output ln 2.
        let spec = LadderSpec {
            layer_dims: vec![1, 1],
            encoders: vec![EncoderKind::SoftplusMlp { hidden: 1 }],
            decoders: vec![DecoderKind::LinearLateral, DecoderKind::ScalarGain],
            alpha: vec![1.0],
            beta0: 0.0,
            gamma0: 0.0,
            sigma_corrupt: CorruptSigma::Scalar(0.0),
            eig_floor: 0.7,
        };
        let index = ParamIndex::for_spec(&spec).unwrap();
        let mut params = ParamStore::zeros(index);
        params
            .set_block("enc1.wb", &DenseMatrix::new(1, 1, vec![1.0]).unwrap())
            .unwrap();
        let x = DenseMatrix::zeros(1, 3);
        let h = encode(&params, &spec, &x).unwrap();
        for v in h[1].data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_constant_bias_output() {
        let spec = LadderSpec {
            layer_dims: vec![2, 3],
            encoders: vec![EncoderKind::SoftplusMlp { hidden: 4 }],
            decoders: vec![DecoderKind::LinearLateral, DecoderKind::ScalarGain],
            alpha: vec![1.0],
            beta0: 0.0,
            gamma0: 0.0,
            sigma_corrupt: CorruptSigma::Scalar(0.0),
            eig_floor: 0.7,
        };
        let index = ParamIndex::for_spec(&spec).unwrap();
        let mut params = ParamStore::zeros(index);
        let c = 2.5;
        for v in params.slice_mut("enc1.bb").unwrap() {
            *v = c;
        }
        let x = DenseMatrix::from_fn(2, 5, |i, j| (i * j) as f64);
        let h = encode(&params, &spec, &x).unwrap();
        assert!(h[1].data().iter().all(|&v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn decode_copy_through_shortcut() {
        // LinearLateral with top = 0, lat = I copies the corrupted input.
        let spec = ica_like_spec();
        let mut params = init_params(&spec, &mut rng_from_seed(3)).unwrap();
        params
            .set_block("dec0.lat", &DenseMatrix::identity(15))
            .unwrap();
        let mut rng = rng_from_seed(4);
        let x = standard_normal_matrix(15, 50, &mut rng);
        let h = encode(&params, &spec, &x).unwrap();
        let hat = decode(&params, &spec, &h).unwrap();
        assert!(hat[0].sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn decode_gate_at_zero_halves_lateral() {
        let spec = LadderSpec {
            layer_dims: vec![4, 4, 2],
            encoders: vec![EncoderKind::Linear, EncoderKind::Linear],
            decoders: vec![
                DecoderKind::LinearLateral,
                DecoderKind::SigmoidGate,
                DecoderKind::ScalarGain,
            ],
            alpha: vec![1.0, 1.0],
            beta0: 0.0,
            gamma0: 0.0,
            sigma_corrupt: CorruptSigma::Scalar(0.0),
            eig_floor: 0.7,
        };
        let params = init_params(&spec, &mut rng_from_seed(5)).unwrap();
        let mut rng = rng_from_seed(6);
        let x = standard_normal_matrix(4, 30, &mut rng);
        let h = encode(&params, &spec, &x).unwrap();
        let hat = decode(&params, &spec, &h).unwrap();
        // Gate weights start at zero, so sigma(0) = 1/2 times the lateral.
        let mut expect = h[1].clone();
        expect.scale(0.5);
        assert!(hat[1].sub(&expect).unwrap().max_abs() < 1e-12);
        // Gate output never exceeds the lateral in magnitude.
        for (o, l) in hat[1].data().iter().zip(h[1].data()) {
            assert!(o.abs() <= l.abs() + 1e-15);
        }
    }

    #[test]
    fn decode_tanh_gain_at_default() {
        let spec = ica_like_spec();
        let params = init_params(&spec, &mut rng_from_seed(7)).unwrap();
        let mut rng = rng_from_seed(8);
        let x = standard_normal_matrix(15, 20, &mut rng);
        let h = encode(&params, &spec, &x).unwrap();
        let hat = decode(&params, &spec, &h).unwrap();
        // a = 0.5, b = 0 -> top reconstruction is half the lateral.
        let mut expect = h[1].clone();
        expect.scale(0.5);
        assert!(hat[1].sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn corruption_free_paths_agree() {
        let mut spec = ica_like_spec();
        spec.sigma_corrupt = CorruptSigma::Scalar(0.0);
        let params = init_params(&spec, &mut rng_from_seed(9)).unwrap();
        let mut rng = rng_from_seed(10);
        let x = standard_normal_matrix(15, 40, &mut rng);
        let sigma = spec.sigma_vec().unwrap();
        let noise = standard_normal_matrix(15, 40, &mut rng);
        let xt = crate::data::corrupt_with(&x, &sigma, &noise).unwrap();
        let clean = encode(&params, &spec, &x).unwrap();
        let corr = encode(&params, &spec, &xt).unwrap();
        for (a, b) in clean.iter().zip(&corr) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn scalar_denoiser_values() {
        assert!((scalar_denoiser(&[0.5, 0.0, 1.0, 0.0, 0.0], &[2.0])[0] - 1.0).abs() < 1e-15);
        assert!(scalar_denoiser(&[0.0, 1.0, 1.0, 0.0, 0.0], &[0.0])[0].abs() < 1e-15);
        let v = scalar_denoiser(&[0.0, 1.0, 1.0, 0.0, 0.0], &[1.0])[0];
        assert!((v - 1.0f64.tanh()).abs() < 1e-12);
        assert!((v - 0.76159).abs() < 1e-4);
    }

    #[test]
    fn gauss_denoiser_values() {
        let half = gauss_optimal_denoiser(1.0, 1.0, &[2.0]).unwrap();
        assert!((half[0] - 1.0).abs() < 1e-15);
        let near_one = gauss_optimal_denoiser(1.0, 1e-9, &[3.0]).unwrap();
        assert!((near_one[0] - 3.0).abs() < 1e-9);
        let five = gauss_optimal_denoiser(1.0, 2.0, &[5.0]).unwrap();
        assert!((five[0] - 1.0).abs() < 1e-12);
        assert!(gauss_optimal_denoiser(0.0, 1.0, &[1.0]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let spec = ica_like_spec();
        let params = init_params(&spec, &mut rng_from_seed(11)).unwrap();
        let dir = std::env::temp_dir().join("ladderlab_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        Checkpoint::new(&spec, 11, &params).save(&path).unwrap();
        let (spec2, seed, params2) = Checkpoint::load(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(seed, 11);
        assert_eq!(params2.flat(), params.flat());
        std::fs::remove_dir_all(&dir).ok();
    }
}
