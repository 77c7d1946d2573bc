//! Embedding network: stacked LSTM layers (optionally bidirectional), a
//! time-distributed dense head with tanh, and per-bin L2 normalization.
//! Provides batch and streaming forward passes plus binary model files.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::FramingConfig;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 6] = b"DCSEP1";
pub const MODEL_VERSION: u16 = 1;

const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

/// One gate's affine map: `units x in_dim` input weights, `units x units`
/// recurrent weights, `units` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

/// One LSTM layer for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub cell: GateParams,
    pub output: GateParams,
}

impl LstmLayerParams {
    pub fn units(&self) -> usize {
        self.input.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.input.w.ncols()
    }

    fn gates(&self) -> [&GateParams; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }

    /// One recurrence step. Gate values are returned for callers that need
    /// them for backpropagation; plain inference discards them.
    ///
    /// i = sigmoid(Wi x + Ui h + bi), f, o likewise; g = tanh(Wg x + Ug h + bg);
    /// c' = f*c + i*g; h' = o * tanh(c').
    pub fn step(
        &self,
        x: ArrayView1<f64>,
        h: &Array1<f64>,
        c: &Array1<f64>,
    ) -> Result<StepValues> {
        let affine = |g: &GateParams| {
            let mut z = g.w.dot(&x);
            z += &g.u.dot(h);
            z += &g.b;
            z
        };
        let i = affine(&self.input).mapv(sigmoid);
        let f = affine(&self.forget).mapv(sigmoid);
        let g = affine(&self.cell).mapv(f64::tanh);
        let o = affine(&self.output).mapv(sigmoid);
        let c_new = &f * c + &i * &g;
        let h_new = &o * &c_new.mapv(f64::tanh);
        if h_new.iter().any(|v| !v.is_finite()) || c_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                tensor: "lstm".into(),
                detail: "non-finite activation".into(),
            });
        }
        Ok(StepValues {
            i,
            f,
            g,
            o,
            c: c_new,
            h: h_new,
        })
    }
}

/// Everything one LSTM step produces.
#[derive(Debug, Clone)]
pub struct StepValues {
    pub i: Array1<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub o: Array1<f64>,
    pub c: Array1<f64>,
    pub h: Array1<f64>,
}

/// Full parameter set. Immutable during inference; `layers_bwd` is empty
/// for unidirectional networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LstmLayerParams>,
    pub layers_bwd: Vec<LstmLayerParams>,
    /// `(embed_dim * num_bins) x hidden_width`.
    pub dense_w: Array2<f64>,
    pub dense_b: Array1<f64>,
    /// Per-frequency input normalization, length `num_bins`.
    pub feat_mean: Array1<f64>,
    pub feat_std: Array1<f64>,
    pub framing: FramingConfig,
    pub embed_dim: usize,
}

impl NetworkParams {
    pub fn bidirectional(&self) -> bool {
        !self.layers_bwd.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn units(&self) -> usize {
        self.layers[0].units()
    }

    pub fn num_bins(&self) -> usize {
        self.framing.num_bins()
    }

    /// Width of the dense input: last layer's output, both directions.
    pub fn hidden_width(&self) -> usize {
        self.units() * if self.bidirectional() { 2 } else { 1 }
    }

    /// Input width of layer `l`.
    fn layer_in_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.num_bins()
        } else {
            self.hidden_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        if !self.layers_bwd.is_empty() && self.layers_bwd.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} backward layers for {} forward layers",
                self.layers_bwd.len(),
                self.layers.len()
            )));
        }
        let units = self.units();
        let check_layer = |layer: &LstmLayerParams, l: usize, dir: &str| -> Result<()> {
            let in_dim = self.layer_in_dim(l);
            for (gate, name) in layer.gates().iter().zip(GATE_NAMES) {
                let tensor = format!("layer{l}.{dir}.{name}");
                if gate.w.dim() != (units, in_dim)
                    || gate.u.dim() != (units, units)
                    || gate.b.len() != units
                {
                    return Err(Error::Shape(format!(
                        "{tensor}: W {:?}, U {:?}, b {} (expected ({units}, {in_dim}), ({units}, {units}), {units})",
                        gate.w.dim(),
                        gate.u.dim(),
                        gate.b.len()
                    )));
                }
                for arr in [&gate.w, &gate.u] {
                    if arr.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric {
                            tensor,
                            detail: "non-finite weight".into(),
                        });
                    }
                }
                if gate.b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        tensor,
                        detail: "non-finite bias".into(),
                    });
                }
            }
            Ok(())
        };
        for (l, layer) in self.layers.iter().enumerate() {
            check_layer(layer, l, "fwd")?;
        }
        for (l, layer) in self.layers_bwd.iter().enumerate() {
            check_layer(layer, l, "bwd")?;
        }
        let out_dim = self.embed_dim * self.num_bins();
        if self.dense_w.dim() != (out_dim, self.hidden_width()) || self.dense_b.len() != out_dim {
            return Err(Error::Shape(format!(
                "dense: W {:?}, b {} (expected ({out_dim}, {}), {out_dim})",
                self.dense_w.dim(),
                self.dense_b.len(),
                self.hidden_width()
            )));
        }
        for (arr, name) in [(&self.feat_mean, "feat.mean"), (&self.feat_std, "feat.std")] {
            if arr.len() != self.num_bins() {
                return Err(Error::Shape(format!(
                    "{name} has length {}, expected {}",
                    arr.len(),
                    self.num_bins()
                )));
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    tensor: name.into(),
                    detail: "non-finite value".into(),
                });
            }
        }
        if self.dense_w.iter().any(|v| !v.is_finite())
            || self.dense_b.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Numeric {
                tensor: "dense".into(),
                detail: "non-finite value".into(),
            });
        }
        if self.feat_std.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig("feat_std entries must be positive".into()));
        }
        Ok(())
    }
}

/// Per-stream recurrent state: hidden and cell vectors per layer
/// (forward direction only; streaming rejects bidirectional networks).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Array1<f64>>,
    pub c: Vec<Array1<f64>>,
}

impl LstmState {
    pub fn zeros(params: &NetworkParams) -> Self {
        let units = params.units();
        Self {
            h: vec![Array1::zeros(units); params.num_layers()],
            c: vec![Array1::zeros(units); params.num_layers()],
        }
    }
}

/// Per-bin embeddings for a spectrogram: row `t * num_bins + f` holds the
/// unit-norm embedding of bin (t, f).
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub num_frames: usize,
    pub num_bins: usize,
    pub embed_dim: usize,
}

impl EmbeddingMatrix {
    pub fn row(&self, t: usize, f: usize) -> ArrayView1<'_, f64> {
        self.rows.row(t * self.num_bins + f)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fresh parameters with uniform weights in +-1/sqrt(fan_in), forget-gate
/// bias 1, other biases 0, identity feature normalization.
pub fn init_params(
    framing: FramingConfig,
    embed_dim: usize,
    num_layers: usize,
    units: usize,
    bidirectional: bool,
    seed: u64,
) -> Result<NetworkParams> {
    if embed_dim == 0 || num_layers == 0 || units == 0 {
        return Err(Error::InvalidConfig(
            "embed_dim, num_layers and units must all be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_bins = framing.num_bins();
    let hidden_width = units * if bidirectional { 2 } else { 1 };
    let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let s = 1.0 / (cols as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
    };
    let make_layer = |in_dim: usize, rng: &mut ChaCha8Rng| {
        let gate = |forget: bool, rng: &mut ChaCha8Rng| GateParams {
            w: uniform(units, in_dim, rng),
            u: uniform(units, units, rng),
            b: Array1::from_elem(units, if forget { 1.0 } else { 0.0 }),
        };
        LstmLayerParams {
            input: gate(false, rng),
            forget: gate(true, rng),
            cell: gate(false, rng),
            output: gate(false, rng),
        }
    };
    let in_dims: Vec<usize> =
        (0..num_layers).map(|l| if l == 0 { num_bins } else { hidden_width }).collect();
    let layers: Vec<_> = in_dims.iter().map(|&d| make_layer(d, &mut rng)).collect();
    let layers_bwd: Vec<_> = if bidirectional {
        in_dims.iter().map(|&d| make_layer(d, &mut rng)).collect()
    } else {
        Vec::new()
    };
    let out_dim = embed_dim * num_bins;
    let params = NetworkParams {
        layers,
        layers_bwd,
        dense_w: uniform(out_dim, hidden_width, &mut rng),
        dense_b: Array1::zeros(out_dim),
        feat_mean: Array1::zeros(num_bins),
        feat_std: Array1::ones(num_bins),
        framing,
        embed_dim,
    };
    params.validate()?;
    Ok(params)
}

pub(crate) fn normalize_features(params: &NetworkParams, features: &Array2<f64>) -> Array2<f64> {
    let mut x = features.clone();
    for mut row in x.rows_mut() {
        for f in 0..row.len() {
            row[f] = (row[f] - params.feat_mean[f]) / params.feat_std[f];
        }
    }
    x
}

/// Dense head for one frame: tanh(dense) reshaped to `num_bins` rows of
/// `embed_dim`, each L2-normalized. A row that is exactly zero becomes e1.
/// Returns (tanh activations, per-bin norms, embedding rows).
pub(crate) fn embed_frame(
    params: &NetworkParams,
    hidden: ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
    let num_bins = params.num_bins();
    let d = params.embed_dim;
    let mut a = params.dense_w.dot(&hidden);
    a += &params.dense_b;
    a.mapv_inplace(f64::tanh);
    let mut norms = Array1::zeros(num_bins);
    let mut rows = Array2::zeros((num_bins, d));
    for f in 0..num_bins {
        let u = a.slice(ndarray::s![f * d..(f + 1) * d]);
        let n = u.dot(&u).sqrt();
        norms[f] = n;
        let mut out = rows.row_mut(f);
        if n == 0.0 {
            out[0] = 1.0;
        } else {
            for k in 0..d {
                out[k] = u[k] / n;
            }
        }
    }
    (a, norms, rows)
}

fn check_features(params: &NetworkParams, features: &Array2<f64>) -> Result<()> {
    if features.ncols() != params.num_bins() {
        return Err(Error::Shape(format!(
            "features have {} bins, network expects {}",
            features.ncols(),
            params.num_bins()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::Shape("empty feature sequence".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature".into()));
    }
    Ok(())
}

/// Run one direction of one layer over the whole sequence.
/// Output row t corresponds to input row t regardless of direction.
fn run_layer(
    layer: &LstmLayerParams,
    xs: &Array2<f64>,
    reverse: bool,
    trace: Option<&mut LayerTrace>,
) -> Result<(Array2<f64>, StepValues)> {
    let t_len = xs.nrows();
    let units = layer.units();
    let mut h = Array1::zeros(units);
    let mut c = Array1::zeros(units);
    let mut out = Array2::zeros((t_len, units));
    let mut last = None;
    let mut trace = trace;
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let v = layer.step(xs.row(t), &h, &c)?;
        out.row_mut(t).assign(&v.h);
        if let Some(tr) = trace.as_deref_mut() {
            tr.i.row_mut(t).assign(&v.i);
            tr.f.row_mut(t).assign(&v.f);
            tr.g.row_mut(t).assign(&v.g);
            tr.o.row_mut(t).assign(&v.o);
            tr.c.row_mut(t).assign(&v.c);
        }
        h = v.h.clone();
        c = v.c.clone();
        last = Some(v);
    }
    Ok((out, last.expect("nonempty sequence")))
}

/// Recorded activations of one layer direction, row-indexed by time.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub i: Array2<f64>,
    pub f: Array2<f64>,
    pub g: Array2<f64>,
    pub o: Array2<f64>,
    pub c: Array2<f64>,
}

impl LayerTrace {
    fn zeros(t_len: usize, units: usize) -> Self {
        Self {
            i: Array2::zeros((t_len, units)),
            f: Array2::zeros((t_len, units)),
            g: Array2::zeros((t_len, units)),
            o: Array2::zeros((t_len, units)),
            c: Array2::zeros((t_len, units)),
        }
    }
}

/// Everything the backward pass needs from a batch forward pass.
#[derive(Debug)]
pub(crate) struct ForwardTrace {
    /// Input to each layer, time-indexed: element 0 is the normalized
    /// features, element l > 0 the (concatenated) output of layer l-1.
    pub layer_inputs: Vec<Array2<f64>>,
    /// `[layer][direction]`; direction 1 present only when bidirectional.
    pub layers: Vec<Vec<LayerTrace>>,
    /// Per-direction hidden outputs, same shape as layers.
    pub hidden: Vec<Vec<Array2<f64>>>,
    /// tanh activations of the dense head, `T x (embed_dim * num_bins)`.
    pub a: Array2<f64>,
    /// Pre-normalization row norms, `T x num_bins` (0 marks a zero row).
    pub norms: Array2<f64>,
    pub emb: EmbeddingMatrix,
}

pub(crate) fn forward_trace(
    params: &NetworkParams,
    features: &Array2<f64>,
) -> Result<ForwardTrace> {
    check_features(params, features)?;
    let t_len = features.nrows();
    let num_bins = params.num_bins();
    let d = params.embed_dim;
    let mut layer_inputs = vec![normalize_features(params, features)];
    let mut layers = Vec::new();
    let mut hidden = Vec::new();
    for l in 0..params.num_layers() {
        let xs = layer_inputs.last().unwrap();
        let mut dir_traces = Vec::new();
        let mut dir_hidden = Vec::new();
        let mut tr = LayerTrace::zeros(t_len, params.units());
        let (h_fwd, _) = run_layer(&params.layers[l], xs, false, Some(&mut tr))?;
        dir_traces.push(tr);
        if params.bidirectional() {
            let mut tr = LayerTrace::zeros(t_len, params.units());
            let (h_bwd, _) = run_layer(&params.layers_bwd[l], xs, true, Some(&mut tr))?;
            dir_traces.push(tr);
            let mut cat = Array2::zeros((t_len, params.hidden_width()));
            cat.slice_mut(ndarray::s![.., ..params.units()]).assign(&h_fwd);
            cat.slice_mut(ndarray::s![.., params.units()..]).assign(&h_bwd);
            dir_hidden.push(h_fwd);
            dir_hidden.push(h_bwd);
            layer_inputs.push(cat);
        } else {
            layer_inputs.push(h_fwd.clone());
            dir_hidden.push(h_fwd);
        }
        layers.push(dir_traces);
        hidden.push(dir_hidden);
    }
    let dense_in = layer_inputs.last().unwrap();
    let mut a = Array2::zeros((t_len, d * num_bins));
    let mut norms = Array2::zeros((t_len, num_bins));
    let mut rows = Array2::zeros((t_len * num_bins, d));
    for t in 0..t_len {
        let (at, nt, vt) = embed_frame(params, dense_in.row(t));
        a.row_mut(t).assign(&at);
        norms.row_mut(t).assign(&nt);
        rows.slice_mut(ndarray::s![t * num_bins..(t + 1) * num_bins, ..])
            .assign(&vt);
    }
    Ok(ForwardTrace {
        layer_inputs,
        layers,
        hidden,
        a,
        norms,
        emb: EmbeddingMatrix {
            rows,
            num_frames: t_len,
            num_bins,
            embed_dim: d,
        },
    })
}

/// Embed a whole feature sequence (frames x bins log-magnitudes).
pub fn forward_batch(params: &NetworkParams, features: &Array2<f64>) -> Result<EmbeddingMatrix> {
    check_features(params, features)?;
    let t_len = features.nrows();
    let num_bins = params.num_bins();
    let mut xs = normalize_features(params, features);
    for l in 0..params.num_layers() {
        let (h_fwd, _) = run_layer(&params.layers[l], &xs, false, None)?;
        if params.bidirectional() {
            let (h_bwd, _) = run_layer(&params.layers_bwd[l], &xs, true, None)?;
            let mut cat = Array2::zeros((t_len, params.hidden_width()));
            cat.slice_mut(ndarray::s![.., ..params.units()]).assign(&h_fwd);
            cat.slice_mut(ndarray::s![.., params.units()..]).assign(&h_bwd);
            xs = cat;
        } else {
            xs = h_fwd;
        }
    }
    let mut rows = Array2::zeros((t_len * num_bins, params.embed_dim));
    for t in 0..t_len {
        let (_, _, vt) = embed_frame(params, xs.row(t));
        rows.slice_mut(ndarray::s![t * num_bins..(t + 1) * num_bins, ..])
            .assign(&vt);
    }
    Ok(EmbeddingMatrix {
        rows,
        num_frames: t_len,
        num_bins,
        embed_dim: params.embed_dim,
    })
}

/// Embed a single frame, advancing the stream state. Output rows are the
/// `num_bins x embed_dim` embeddings of this frame, identical to the
/// corresponding rows of [`forward_batch`] over the same prefix.
pub fn forward_streaming(
    params: &NetworkParams,
    frame: ArrayView1<f64>,
    state: &mut LstmState,
) -> Result<Array2<f64>> {
    if params.bidirectional() {
        return Err(Error::UnsupportedMode(
            "bidirectional network cannot run frame-by-frame".into(),
        ));
    }
    if frame.len() != params.num_bins() {
        return Err(Error::Shape(format!(
            "frame has {} bins, network expects {}",
            frame.len(),
            params.num_bins()
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature".into()));
    }
    if state.h.len() != params.num_layers() {
        return Err(Error::Shape(format!(
            "state has {} layers, network has {}",
            state.h.len(),
            params.num_layers()
        )));
    }
    let mut x = Array1::from_iter(frame.iter().copied());
    for f in 0..x.len() {
        x[f] = (x[f] - params.feat_mean[f]) / params.feat_std[f];
    }
    for l in 0..params.num_layers() {
        let v = params.layers[l].step(x.view(), &state.h[l], &state.c[l])?;
        state.h[l] = v.h;
        state.c[l] = v.c;
        x = state.h[l].clone();
    }
    let (_, _, rows) = embed_frame(params, x.view());
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Model file format
//
// Little-endian throughout:
//   magic "DCSEP1", version u16,
//   config: window_len u32, hop_len u32, fft_size u32, embed_dim u32,
//           num_layers u32, units u32, bidirectional u8,
//   tensor count u32, then per tensor:
//     name (u16 length + UTF-8), rank u8, dims (u64 each),
//     zero padding to the next 8-byte boundary, payload f64s.

fn tensor_layout(
    num_layers: usize,
    units: usize,
    bidirectional: bool,
    embed_dim: usize,
    num_bins: usize,
    hidden_width: usize,
) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in 0..num_layers {
        let in_dim = if l == 0 { num_bins } else { hidden_width };
        let dirs: &[&str] = if bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
        for dir in dirs {
            for gate in GATE_NAMES {
                out.push((format!("layer{l}.{dir}.{gate}.W"), vec![units, in_dim]));
                out.push((format!("layer{l}.{dir}.{gate}.U"), vec![units, units]));
                out.push((format!("layer{l}.{dir}.{gate}.b"), vec![units]));
            }
        }
    }
    out.push(("dense.W".into(), vec![embed_dim * num_bins, hidden_width]));
    out.push(("dense.b".into(), vec![embed_dim * num_bins]));
    out.push(("feat.mean".into(), vec![num_bins]));
    out.push(("feat.std".into(), vec![num_bins]));
    out
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &mut dyn Iterator<Item = f64>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    while buf.len() % 8 != 0 {
        buf.push(0);
    }
    let mut count = 0usize;
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
        count += 1;
    }
    debug_assert_eq!(count, dims.iter().product::<usize>(), "{name}");
}

pub fn save_model(params: &NetworkParams, path: &Path) -> Result<()> {
    params.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [
        params.framing.window_len,
        params.framing.hop_len,
        params.framing.fft_size,
        params.embed_dim,
        params.num_layers(),
        params.units(),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(params.bidirectional() as u8);
    let layout = tensor_layout(
        params.num_layers(),
        params.units(),
        params.bidirectional(),
        params.embed_dim,
        params.num_bins(),
        params.hidden_width(),
    );
    buf.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for (name, dims) in &layout {
        let mut it: Box<dyn Iterator<Item = f64>> = match tensor_ref(params, name) {
            TensorRef::Mat(m) => Box::new(m.iter().copied()),
            TensorRef::Vec(v) => Box::new(v.iter().copied()),
        };
        push_tensor(&mut buf, name, dims, &mut it);
    }
    // Write-then-rename so a crash never leaves a partial model behind.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

enum TensorRef<'a> {
    Mat(&'a Array2<f64>),
    Vec(&'a Array1<f64>),
}

fn tensor_ref<'a>(params: &'a NetworkParams, name: &str) -> TensorRef<'a> {
    match name {
        "dense.W" => return TensorRef::Mat(&params.dense_w),
        "dense.b" => return TensorRef::Vec(&params.dense_b),
        "feat.mean" => return TensorRef::Vec(&params.feat_mean),
        "feat.std" => return TensorRef::Vec(&params.feat_std),
        _ => {}
    }
    let mut parts = name.split('.');
    let layer: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("layer"))
        .and_then(|p| p.parse().ok())
        .expect("layout names are well-formed");
    let dir = parts.next().expect("dir");
    let gate_name = parts.next().expect("gate");
    let kind = parts.next().expect("kind");
    let layer = if dir == "fwd" {
        &params.layers[layer]
    } else {
        &params.layers_bwd[layer]
    };
    let gate = match gate_name {
        "input" => &layer.input,
        "forget" => &layer.forget,
        "cell" => &layer.cell,
        "output" => &layer.output,
        _ => unreachable!("layout gate name"),
    };
    match kind {
        "W" => TensorRef::Mat(&gate.w),
        "U" => TensorRef::Mat(&gate.u),
        "b" => TensorRef::Vec(&gate.b),
        _ => unreachable!("layout tensor kind"),
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("file ends inside {what}"),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn align8(&mut self, what: &str) -> Result<()> {
        let skip = (8 - self.pos % 8) % 8;
        self.take(skip, what)?;
        Ok(())
    }
}

pub fn load_model(path: &Path) -> Result<NetworkParams> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { data: &data, pos: 0 };
    let magic = r.take(MODEL_MAGIC.len(), "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, not a model file".into(),
        });
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let window_len = r.u32("config")? as usize;
    let hop_len = r.u32("config")? as usize;
    let fft_size = r.u32("config")? as usize;
    let embed_dim = r.u32("config")? as usize;
    let num_layers = r.u32("config")? as usize;
    let units = r.u32("config")? as usize;
    let bidirectional = match r.take(1, "config")?[0] {
        0 => false,
        1 => true,
        v => {
            return Err(Error::Format {
                offset: (r.pos - 1) as u64,
                detail: format!("bidirectional flag must be 0 or 1, got {v}"),
            })
        }
    };
    let framing = FramingConfig::new(window_len, hop_len, fft_size)?;
    if num_layers == 0 || units == 0 || embed_dim == 0 {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: "config counts must be positive".into(),
        });
    }
    let num_bins = framing.num_bins();
    let hidden_width = units * if bidirectional { 2 } else { 1 };
    let layout = tensor_layout(num_layers, units, bidirectional, embed_dim, num_bins, hidden_width);
    let expected: HashMap<&str, &[usize]> =
        layout.iter().map(|(n, d)| (n.as_str(), d.as_slice())).collect();

    let count = r.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(Error::Format {
            offset: (r.pos - 4) as u64,
            detail: format!("{count} tensors, config implies {}", layout.len()),
        });
    }
    let mut tensors: HashMap<String, Vec<f64>> = HashMap::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let name_len = r.u16("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: start,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let dims_expected = *expected.get(name.as_str()).ok_or_else(|| Error::Format {
            offset: start,
            detail: format!("unexpected tensor {name:?}"),
        })?;
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("tensor dims")? as usize);
        }
        if dims != dims_expected {
            return Err(Error::Format {
                offset: start,
                detail: format!("tensor {name} has dims {dims:?}, expected {dims_expected:?}"),
            });
        }
        r.align8("tensor padding")?;
        let payload = r.f64s(dims.iter().product(), &format!("tensor {name} payload"))?;
        if tensors.insert(name.clone(), payload).is_some() {
            return Err(Error::Format {
                offset: start,
                detail: format!("duplicate tensor {name}"),
            });
        }
    }
    if r.pos != data.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes", data.len() - r.pos),
        });
    }

    let mut make_layer = |l: usize, dir: &str, in_dim: usize| -> LstmLayerParams {
        let mut gate = |g: &str| GateParams {
            w: Array2::from_shape_vec(
                (units, in_dim),
                tensors.remove(&format!("layer{l}.{dir}.{g}.W")).expect("checked"),
            )
            .expect("dims checked"),
            u: Array2::from_shape_vec(
                (units, units),
                tensors.remove(&format!("layer{l}.{dir}.{g}.U")).expect("checked"),
            )
            .expect("dims checked"),
            b: Array1::from_vec(
                tensors.remove(&format!("layer{l}.{dir}.{g}.b")).expect("checked"),
            ),
        };
        LstmLayerParams {
            input: gate("input"),
            forget: gate("forget"),
            cell: gate("cell"),
            output: gate("output"),
        }
    };
    let in_dim = |l: usize| if l == 0 { num_bins } else { hidden_width };
    let layers: Vec<_> = (0..num_layers).map(|l| make_layer(l, "fwd", in_dim(l))).collect();
    let layers_bwd: Vec<_> = if bidirectional {
        (0..num_layers).map(|l| make_layer(l, "bwd", in_dim(l))).collect()
    } else {
        Vec::new()
    };
    let params = NetworkParams {
        layers,
        layers_bwd,
        dense_w: Array2::from_shape_vec(
            (embed_dim * num_bins, hidden_width),
            tensors.remove("dense.W").expect("checked"),
        )
        .expect("dims checked"),
        dense_b: Array1::from_vec(tensors.remove("dense.b").expect("checked")),
        feat_mean: Array1::from_vec(tensors.remove("feat.mean").expect("checked")),
        feat_std: Array1::from_vec(tensors.remove("feat.std").expect("checked")),
        framing,
        embed_dim,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_framing() -> FramingConfig {
        // 9 bins keeps hand-checkable sizes.
        FramingConfig::new(8, 4, 16).unwrap()
    }

    fn tiny_params(bidirectional: bool, seed: u64) -> NetworkParams {
        init_params(tiny_framing(), 4, 2, 6, bidirectional, seed).unwrap()
    }

    fn zero_layer(units: usize, in_dim: usize) -> LstmLayerParams {
        let gate = || GateParams {
            w: Array2::zeros((units, in_dim)),
            u: Array2::zeros((units, units)),
            b: Array1::zeros(units),
        };
        LstmLayerParams {
            input: gate(),
            forget: gate(),
            cell: gate(),
            output: gate(),
        }
    }

    #[test]
    fn zero_weights_step_outputs_zero() {
        let layer = zero_layer(3, 5);
        let x = Array1::from_vec(vec![1.0, -2.0, 0.5, 3.0, -1.0]);
        let v = layer
            .step(x.view(), &Array1::zeros(3), &Array1::zeros(3))
            .unwrap();
        // Gates sit at sigmoid(0) = 0.5 but the candidate is tanh(0) = 0.
        for k in 0..3 {
            assert_eq!(v.i[k], 0.5);
            assert_eq!(v.f[k], 0.5);
            assert_eq!(v.g[k], 0.0);
            assert_eq!(v.c[k], 0.0);
            assert_eq!(v.h[k], 0.0);
        }
    }

    #[test]
    fn single_unit_step_matches_hand_computation() {
        // i = sigmoid(0.5*0.7 + 0.25*0.1 + 0.1)  = sigmoid(0.475)
        // f = sigmoid(-0.3*0.7 + 0.2*0.1 - 0.1)  = sigmoid(-0.29)
        // g = tanh(0.8*0.7 - 0.5*0.1 + 0.2)      = tanh(0.71)
        // o = sigmoid(1.0*0.7 + 0.3*0.1 - 0.2)   = sigmoid(0.53)
        // c' = f*(-0.2) + i*g, h' = o*tanh(c')
        let mk = |w: f64, u: f64, b: f64| GateParams {
            w: Array2::from_elem((1, 1), w),
            u: Array2::from_elem((1, 1), u),
            b: Array1::from_elem(1, b),
        };
        let layer = LstmLayerParams {
            input: mk(0.5, 0.25, 0.1),
            forget: mk(-0.3, 0.2, -0.1),
            cell: mk(0.8, -0.5, 0.2),
            output: mk(1.0, 0.3, -0.2),
        };
        let v = layer
            .step(
                Array1::from_elem(1, 0.7).view(),
                &Array1::from_elem(1, 0.1),
                &Array1::from_elem(1, -0.2),
            )
            .unwrap();
        assert_abs_diff_eq!(v.i[0], 0.616_567, epsilon = 1e-6);
        assert_abs_diff_eq!(v.f[0], 0.428_004, epsilon = 1e-6);
        assert_abs_diff_eq!(v.g[0], 0.610_677, epsilon = 1e-6);
        assert_abs_diff_eq!(v.o[0], 0.629_483, epsilon = 1e-6);
        assert_abs_diff_eq!(v.c[0], 0.290_922, epsilon = 1e-6);
        assert_abs_diff_eq!(v.h[0], 0.178_133, epsilon = 1e-6);
    }

    #[test]
    fn forget_bias_alone_cannot_create_cell_state() {
        let mut layer = zero_layer(2, 3);
        layer.forget.b.fill(5.0);
        let v = layer
            .step(
                Array1::zeros(3).view(),
                &Array1::zeros(2),
                &Array1::zeros(2),
            )
            .unwrap();
        assert_eq!(v.c, Array1::<f64>::zeros(2));
        assert_eq!(v.h, Array1::<f64>::zeros(2));
    }

    #[test]
    fn zero_network_embeds_every_bin_as_e1() {
        let mut p = tiny_params(false, 1);
        let units = p.units();
        for layer in &mut p.layers {
            *layer = zero_layer(units, layer.in_dim());
        }
        let p = NetworkParams {
            dense_w: Array2::zeros(p.dense_w.dim()),
            dense_b: Array1::zeros(p.dense_b.len()),
            ..p
        };
        let features = Array2::from_elem((5, p.num_bins()), 0.3);
        let emb = forward_batch(&p, &features).unwrap();
        for row in emb.rows.rows() {
            assert_eq!(row[0], 1.0);
            assert!(row.iter().skip(1).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embedding_rows_are_unit_norm() {
        for bidir in [false, true] {
            let p = tiny_params(bidir, 7);
            let features = Array2::from_shape_fn((12, p.num_bins()), |(t, f)| {
                ((t * 31 + f * 17) as f64 * 0.7).sin()
            });
            let emb = forward_batch(&p, &features).unwrap();
            assert_eq!(emb.rows.nrows(), 12 * p.num_bins());
            for row in emb.rows.rows() {
                assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn forward_batch_is_deterministic() {
        let p = tiny_params(true, 3);
        let features = Array2::from_shape_fn((9, p.num_bins()), |(t, f)| {
            ((t + 2 * f) as f64).cos()
        });
        let a = forward_batch(&p, &features).unwrap();
        let b = forward_batch(&p, &features).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn forward_batch_rejects_bad_features() {
        let p = tiny_params(false, 4);
        let wrong = Array2::zeros((5, p.num_bins() + 1));
        assert!(matches!(forward_batch(&p, &wrong), Err(Error::Shape(_))));
        let mut nan = Array2::zeros((5, p.num_bins()));
        nan[(2, 3)] = f64::NAN;
        assert!(matches!(forward_batch(&p, &nan), Err(Error::Data(_))));
        let empty = Array2::zeros((0, p.num_bins()));
        assert!(forward_batch(&p, &empty).is_err());
    }

    #[test]
    fn palindromic_input_gives_time_symmetric_embeddings() {
        // One bidirectional layer with identical weights in both directions
        // and a dense head that treats the two halves identically. On a
        // palindromic sequence the reverse pass retraces the forward pass,
        // so embeddings at t and T-1-t coincide.
        let mut p = init_params(tiny_framing(), 4, 1, 6, true, 11).unwrap();
        p.layers_bwd = p.layers.clone();
        let h = p.units();
        let half = p.dense_w.slice(ndarray::s![.., ..h]).to_owned();
        p.dense_w.slice_mut(ndarray::s![.., h..]).assign(&half);
        let t_len = 9;
        let features = Array2::from_shape_fn((t_len, p.num_bins()), |(t, f)| {
            let t_sym = t.min(t_len - 1 - t);
            ((t_sym * 13 + f * 5) as f64 * 0.3).sin()
        });
        let emb = forward_batch(&p, &features).unwrap();
        for t in 0..t_len {
            for f in 0..p.num_bins() {
                let a = emb.row(t, f);
                let b = emb.row(t_len - 1 - t, f);
                for k in 0..p.embed_dim {
                    assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn streaming_matches_batch_exactly() {
        let p = tiny_params(false, 9);
        let t_len = 50;
        let features = Array2::from_shape_fn((t_len, p.num_bins()), |(t, f)| {
            ((t * 7 + f * 3) as f64 * 0.11).sin() * 2.0
        });
        let batch = forward_batch(&p, &features).unwrap();
        let mut state = LstmState::zeros(&p);
        for t in 0..t_len {
            let rows = forward_streaming(&p, features.row(t), &mut state).unwrap();
            for f in 0..p.num_bins() {
                for k in 0..p.embed_dim {
                    let diff = (rows[(f, k)] - batch.row(t, f)[k]).abs();
                    assert!(diff < 1e-12, "t={t} f={f} k={k} diff={diff}");
                }
            }
        }
        // Stream state after T steps equals the batch recurrence state.
        let trace = forward_trace(&p, &features).unwrap();
        for l in 0..p.num_layers() {
            let h_last = trace.hidden[l][0].row(t_len - 1);
            let c_last = trace.layers[l][0].c.row(t_len - 1);
            for k in 0..p.units() {
                assert_eq!(state.h[l][k], h_last[k]);
                assert_eq!(state.c[l][k], c_last[k]);
            }
        }
    }

    #[test]
    fn streaming_rejects_bidirectional() {
        let p = tiny_params(true, 5);
        let mut state = LstmState {
            h: vec![Array1::zeros(p.units()); p.num_layers()],
            c: vec![Array1::zeros(p.units()); p.num_layers()],
        };
        let frame = Array1::zeros(p.num_bins());
        assert!(matches!(
            forward_streaming(&p, frame.view(), &mut state),
            Err(Error::UnsupportedMode(_))
        ));
    }

    #[test]
    fn trace_agrees_with_batch() {
        let p = tiny_params(true, 13);
        let features = Array2::from_shape_fn((8, p.num_bins()), |(t, f)| {
            ((t * 3 + f) as f64 * 0.2).cos()
        });
        let batch = forward_batch(&p, &features).unwrap();
        let trace = forward_trace(&p, &features).unwrap();
        assert_eq!(batch.rows, trace.emb.rows);
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (bidir, seed) in [(false, 21u64), (true, 22)] {
            let mut p = tiny_params(bidir, seed);
            p.feat_mean = Array1::from_shape_fn(p.num_bins(), |f| f as f64 * 0.1 - 0.4);
            p.feat_std = Array1::from_shape_fn(p.num_bins(), |f| 1.0 + f as f64 * 0.01);
            let path = dir.path().join(format!("m{bidir}.bin"));
            save_model(&p, &path).unwrap();
            let q = load_model(&path).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&tiny_params(false, 1), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&tiny_params(false, 2), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
        std::fs::write(&path, [bytes.clone(), vec![0u8; 16]].concat()).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn future_version_is_rejected_explicitly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&tiny_params(false, 3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6..8].copy_from_slice(&9u16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::UnsupportedVersion { found, supported }) => {
                assert_eq!(found, 9);
                assert_eq!(supported, 1);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn init_rejects_degenerate_sizes() {
        let f = tiny_framing();
        assert!(init_params(f, 0, 2, 6, false, 0).is_err());
        assert!(init_params(f, 4, 0, 6, false, 0).is_err());
        assert!(init_params(f, 4, 2, 0, false, 0).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = tiny_params(true, 42);
        let b = tiny_params(true, 42);
        let c = tiny_params(true, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn validate_catches_bad_feat_std() {
        let mut p = tiny_params(false, 6);
        p.feat_std[3] = 0.0;
        assert!(p.validate().is_err());
        p.feat_std[3] = -1.0;
        assert!(p.validate().is_err());
    }
}
