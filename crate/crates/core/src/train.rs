//! Training: the clustering objective over embeddings, analytic gradients,
//! backpropagation through time, Adam, sequence chunking, and the fit loop
//! with curriculum and early stopping.

use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{log_magnitude, stft, vad_mask, ComplexSpectrogram, FramingConfig, VadMask, Waveform};
use crate::error::{Error, Result};
use crate::net::{
    forward_batch, forward_trace, init_params, EmbeddingMatrix, GateParams, LstmLayerParams,
    NetworkParams,
};

/// Per-bin source assignment: row `t * num_bins + f` is one-hot over
/// sources, chosen by largest magnitude (ties to the lower source index).
#[derive(Debug, Clone, PartialEq)]
pub struct IdealBinaryMask {
    pub y: Array2<f64>,
    pub num_frames: usize,
    pub num_bins: usize,
}

impl IdealBinaryMask {
    pub fn num_sources(&self) -> usize {
        self.y.ncols()
    }
}

pub fn ideal_binary_mask(sources: &[ComplexSpectrogram]) -> Result<IdealBinaryMask> {
    if sources.is_empty() {
        return Err(Error::Shape("need at least one source".into()));
    }
    let dim = sources[0].bins.dim();
    for s in &sources[1..] {
        if s.bins.dim() != dim {
            return Err(Error::Shape(format!(
                "source spectrogram dims {:?} differ from {:?}",
                s.bins.dim(),
                dim
            )));
        }
    }
    let (t_len, num_bins) = dim;
    let mut y = Array2::zeros((t_len * num_bins, sources.len()));
    for t in 0..t_len {
        for f in 0..num_bins {
            let mut winner = 0;
            let mut best = sources[0].bins[(t, f)].norm();
            for (c, s) in sources.iter().enumerate().skip(1) {
                let m = s.bins[(t, f)].norm();
                if m > best {
                    best = m;
                    winner = c;
                }
            }
            y[(t * num_bins + f, winner)] = 1.0;
        }
    }
    Ok(IdealBinaryMask {
        y,
        num_frames: t_len,
        num_bins,
    })
}

/// Loss value plus how many bins actually contributed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcLoss {
    pub value: f64,
    pub active_rows: usize,
}

impl DcLoss {
    /// True when every bin was below the activity threshold and the loss
    /// defaulted to zero.
    pub fn no_active_bins(&self) -> bool {
        self.active_rows == 0
    }
}

fn check_alignment(v: &EmbeddingMatrix, y: &IdealBinaryMask, vad: &VadMask) -> Result<()> {
    if v.num_frames != y.num_frames || v.num_bins != y.num_bins {
        return Err(Error::Shape(format!(
            "embeddings cover {}x{} bins, mask covers {}x{}",
            v.num_frames, v.num_bins, y.num_frames, y.num_bins
        )));
    }
    if vad.active.dim() != (v.num_frames, v.num_bins) {
        return Err(Error::Shape(format!(
            "activity mask is {:?}, embeddings cover {}x{}",
            vad.active.dim(),
            v.num_frames,
            v.num_bins
        )));
    }
    Ok(())
}

fn active_rows(v: &EmbeddingMatrix, y: &IdealBinaryMask, vad: &VadMask) -> (Array2<f64>, Array2<f64>) {
    let n_active = vad.num_active();
    let mut va = Array2::zeros((n_active, v.embed_dim));
    let mut ya = Array2::zeros((n_active, y.num_sources()));
    let mut r = 0;
    for t in 0..v.num_frames {
        for f in 0..v.num_bins {
            if vad.active[(t, f)] {
                va.row_mut(r).assign(&v.rows.row(t * v.num_bins + f));
                ya.row_mut(r).assign(&y.y.row(t * v.num_bins + f));
                r += 1;
            }
        }
    }
    (va, ya)
}

/// Clustering objective: squared Frobenius distance between the embedding
/// affinity and the mask affinity, computed through the small Gram matrices
/// and normalized by the active-bin count squared. Bins below the activity
/// threshold are excluded entirely.
pub fn dc_loss(v: &EmbeddingMatrix, y: &IdealBinaryMask, vad: &VadMask) -> Result<DcLoss> {
    check_alignment(v, y, vad)?;
    let (va, ya) = active_rows(v, y, vad);
    let na = va.nrows();
    if na == 0 {
        return Ok(DcLoss {
            value: 0.0,
            active_rows: 0,
        });
    }
    let vv = va.t().dot(&va);
    let vy = va.t().dot(&ya);
    let yy = ya.t().dot(&ya);
    let sq = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>();
    let value = (sq(&vv) - 2.0 * sq(&vy) + sq(&yy)) / (na as f64 * na as f64);
    Ok(DcLoss {
        value,
        active_rows: na,
    })
}

/// Reference implementation materializing both affinity matrices. Test
/// oracle only; quadratic in the number of active bins.
pub fn dc_loss_naive(v: &EmbeddingMatrix, y: &IdealBinaryMask, vad: &VadMask) -> Result<DcLoss> {
    check_alignment(v, y, vad)?;
    let (va, ya) = active_rows(v, y, vad);
    let na = va.nrows();
    if na == 0 {
        return Ok(DcLoss {
            value: 0.0,
            active_rows: 0,
        });
    }
    debug_assert!(na <= 2000, "oracle is quadratic, keep instances small");
    let diff = va.dot(&va.t()) - ya.dot(&ya.t());
    let value = diff.iter().map(|x| x * x).sum::<f64>() / (na as f64 * na as f64);
    Ok(DcLoss {
        value,
        active_rows: na,
    })
}

/// Gradient of [`dc_loss`] with respect to the embedding rows:
/// `4 (V V^T V - Y Y^T V) / n^2` on active rows, zero elsewhere.
pub fn dc_loss_grad(v: &EmbeddingMatrix, y: &IdealBinaryMask, vad: &VadMask) -> Result<Array2<f64>> {
    check_alignment(v, y, vad)?;
    let (va, ya) = active_rows(v, y, vad);
    let na = va.nrows();
    let mut grad = Array2::zeros(v.rows.dim());
    if na == 0 {
        return Ok(grad);
    }
    let vv = va.t().dot(&va);
    let yv = ya.t().dot(&va);
    let ga = (va.dot(&vv) - ya.dot(&yv)) * (4.0 / (na as f64 * na as f64));
    let mut r = 0;
    for t in 0..v.num_frames {
        for f in 0..v.num_bins {
            if vad.active[(t, f)] {
                grad.row_mut(t * v.num_bins + f).assign(&ga.row(r));
                r += 1;
            }
        }
    }
    Ok(grad)
}

/// Gradients for every trainable tensor; gate gradients reuse the
/// parameter layout. Feature statistics are not trained.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LstmLayerParams>,
    pub layers_bwd: Vec<LstmLayerParams>,
    pub dense_w: Array2<f64>,
    pub dense_b: Array1<f64>,
}

fn zero_gate(units: usize, in_dim: usize) -> GateParams {
    GateParams {
        w: Array2::zeros((units, in_dim)),
        u: Array2::zeros((units, units)),
        b: Array1::zeros(units),
    }
}

fn zero_layer_like(layer: &LstmLayerParams) -> LstmLayerParams {
    let (units, in_dim) = (layer.units(), layer.in_dim());
    LstmLayerParams {
        input: zero_gate(units, in_dim),
        forget: zero_gate(units, in_dim),
        cell: zero_gate(units, in_dim),
        output: zero_gate(units, in_dim),
    }
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params.layers.iter().map(zero_layer_like).collect(),
            layers_bwd: params.layers_bwd.iter().map(zero_layer_like).collect(),
            dense_w: Array2::zeros(params.dense_w.dim()),
            dense_b: Array1::zeros(params.dense_b.len()),
        }
    }

    fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in self.layers.iter().chain(self.layers_bwd.iter()) {
            for gate in [&layer.input, &layer.forget, &layer.cell, &layer.output] {
                out.push(gate.w.as_slice().expect("standard layout"));
                out.push(gate.u.as_slice().expect("standard layout"));
                out.push(gate.b.as_slice().expect("standard layout"));
            }
        }
        out.push(self.dense_w.as_slice().expect("standard layout"));
        out.push(self.dense_b.as_slice().expect("standard layout"));
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut().chain(self.layers_bwd.iter_mut()) {
            for gate in [
                &mut layer.input,
                &mut layer.forget,
                &mut layer.cell,
                &mut layer.output,
            ] {
                out.push(gate.w.as_slice_mut().expect("standard layout"));
                out.push(gate.u.as_slice_mut().expect("standard layout"));
                out.push(gate.b.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.dense_w.as_slice_mut().expect("standard layout"));
        out.push(self.dense_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.flat_mut().into_iter().zip(other.flat()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.flat_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.flat()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale down so the global norm does not exceed `max_norm`.
    pub fn clip_to(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}

fn flat_params_mut(p: &mut NetworkParams) -> Vec<&mut [f64]> {
    let mut out = Vec::new();
    for layer in p.layers.iter_mut().chain(p.layers_bwd.iter_mut()) {
        for gate in [
            &mut layer.input,
            &mut layer.forget,
            &mut layer.cell,
            &mut layer.output,
        ] {
            out.push(gate.w.as_slice_mut().expect("standard layout"));
            out.push(gate.u.as_slice_mut().expect("standard layout"));
            out.push(gate.b.as_slice_mut().expect("standard layout"));
        }
    }
    out.push(p.dense_w.as_slice_mut().expect("standard layout"));
    out.push(p.dense_b.as_slice_mut().expect("standard layout"));
    out
}

/// First and second moment estimates, flat per trainable tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let mut params = params.clone();
        let sizes: Vec<usize> = flat_params_mut(&mut params).iter().map(|s| s.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Standard Adam with bias correction.
pub fn adam_update(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let tensors = flat_params_mut(params);
    let gtensors = grads.flat();
    if tensors.len() != state.m.len() || tensors.len() != gtensors.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, network has {}, gradients have {}",
            state.m.len(),
            tensors.len(),
            gtensors.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in tensors
        .into_iter()
        .zip(gtensors)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() {
            return Err(Error::Shape("gradient tensor size mismatch".into()));
        }
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// BPTT through one layer direction. `dh_ext` is the loss gradient arriving
/// at this direction's outputs; returns gate-parameter gradients and the
/// gradient with respect to the layer inputs.
fn backward_layer(
    layer: &LstmLayerParams,
    tr: &crate::net::LayerTrace,
    xs: &Array2<f64>,
    hs: &Array2<f64>,
    dh_ext: &Array2<f64>,
    reverse: bool,
) -> (LstmLayerParams, Array2<f64>) {
    let t_len = xs.nrows();
    let units = layer.units();
    let mut grads = zero_layer_like(layer);
    let mut dxs = Array2::zeros(xs.dim());
    let mut dh_rec = Array1::<f64>::zeros(units);
    let mut dc_rec = Array1::<f64>::zeros(units);
    let zeros = Array1::<f64>::zeros(units);
    let order: Vec<usize> = if reverse {
        (0..t_len).collect()
    } else {
        (0..t_len).rev().collect()
    };
    let mut di_pre = Array1::zeros(units);
    let mut df_pre = Array1::zeros(units);
    let mut dg_pre = Array1::zeros(units);
    let mut do_pre = Array1::zeros(units);
    for &t in &order {
        let prev = if reverse {
            if t + 1 < t_len {
                Some(t + 1)
            } else {
                None
            }
        } else {
            t.checked_sub(1)
        };
        let h_prev = prev.map(|p| hs.row(p).to_owned()).unwrap_or_else(|| zeros.clone());
        let c_prev = prev.map(|p| tr.c.row(p).to_owned()).unwrap_or_else(|| zeros.clone());
        let mut dc_next = Array1::zeros(units);
        for k in 0..units {
            let i = tr.i[(t, k)];
            let f = tr.f[(t, k)];
            let g = tr.g[(t, k)];
            let o = tr.o[(t, k)];
            let tc = tr.c[(t, k)].tanh();
            let dh = dh_ext[(t, k)] + dh_rec[k];
            let dc_tot = dh * o * (1.0 - tc * tc) + dc_rec[k];
            do_pre[k] = dh * tc * o * (1.0 - o);
            di_pre[k] = dc_tot * g * i * (1.0 - i);
            dg_pre[k] = dc_tot * i * (1.0 - g * g);
            df_pre[k] = dc_tot * c_prev[k] * f * (1.0 - f);
            dc_next[k] = dc_tot * f;
        }
        dc_rec = dc_next;
        let x_row = xs.row(t).insert_axis(Axis(0));
        let h_row = h_prev.view().insert_axis(Axis(0));
        let mut dx = Array1::zeros(xs.ncols());
        dh_rec.fill(0.0);
        for (gate, dpre) in [
            (&mut grads.input, &di_pre),
            (&mut grads.forget, &df_pre),
            (&mut grads.cell, &dg_pre),
            (&mut grads.output, &do_pre),
        ] {
            let d_col = dpre.view().insert_axis(Axis(1));
            general_mat_mul(1.0, &d_col, &x_row, 1.0, &mut gate.w);
            general_mat_mul(1.0, &d_col, &h_row, 1.0, &mut gate.u);
            gate.b += dpre;
        }
        for (gp, dpre) in [
            (&layer.input, &di_pre),
            (&layer.forget, &df_pre),
            (&layer.cell, &dg_pre),
            (&layer.output, &do_pre),
        ] {
            dx += &gp.w.t().dot(dpre);
            dh_rec += &gp.u.t().dot(dpre);
        }
        dxs.row_mut(t).assign(&dx);
    }
    (grads, dxs)
}

/// Full backward pass: loss on the embeddings, then the chain rule through
/// L2 normalization, tanh, the dense head, and every LSTM layer. Returns
/// the loss alongside the gradients so callers need one forward pass only.
pub fn backward(
    params: &NetworkParams,
    features: &Array2<f64>,
    y: &IdealBinaryMask,
    vad: &VadMask,
) -> Result<(DcLoss, Gradients)> {
    let trace = forward_trace(params, features)?;
    let loss = dc_loss(&trace.emb, y, vad)?;
    let g_rows = dc_loss_grad(&trace.emb, y, vad)?;
    let t_len = features.nrows();
    let num_bins = params.num_bins();
    let d = params.embed_dim;
    let mut grads = Gradients::zeros_like(params);

    let dense_in = trace.layer_inputs.last().expect("at least the features");
    let mut dh_top = Array2::zeros((t_len, params.hidden_width()));
    for t in 0..t_len {
        let mut da = Array1::zeros(d * num_bins);
        for f in 0..num_bins {
            let n = trace.norms[(t, f)];
            if n == 0.0 {
                continue;
            }
            let v = trace.emb.rows.row(t * num_bins + f);
            let gr = g_rows.row(t * num_bins + f);
            let radial = v.dot(&gr);
            for k in 0..d {
                da[f * d + k] = (gr[k] - v[k] * radial) / n;
            }
        }
        let a_t = trace.a.row(t);
        let dz = Array1::from_shape_fn(d * num_bins, |j| da[j] * (1.0 - a_t[j] * a_t[j]));
        let dz_col = dz.view().insert_axis(Axis(1));
        let in_row = dense_in.row(t).insert_axis(Axis(0));
        general_mat_mul(1.0, &dz_col, &in_row, 1.0, &mut grads.dense_w);
        grads.dense_b += &dz;
        dh_top.row_mut(t).assign(&params.dense_w.t().dot(&dz));
    }

    let units = params.units();
    let mut dh = dh_top;
    for l in (0..params.num_layers()).rev() {
        let xs = &trace.layer_inputs[l];
        if params.bidirectional() {
            let dfwd = dh.slice(s![.., ..units]).to_owned();
            let dbwd = dh.slice(s![.., units..]).to_owned();
            let (g_f, dx_f) = backward_layer(
                &params.layers[l],
                &trace.layers[l][0],
                xs,
                &trace.hidden[l][0],
                &dfwd,
                false,
            );
            let (g_b, dx_b) = backward_layer(
                &params.layers_bwd[l],
                &trace.layers[l][1],
                xs,
                &trace.hidden[l][1],
                &dbwd,
                true,
            );
            grads.layers[l] = g_f;
            grads.layers_bwd[l] = g_b;
            dh = dx_f + dx_b;
        } else {
            let (g_f, dx_f) = backward_layer(
                &params.layers[l],
                &trace.layers[l][0],
                xs,
                &trace.hidden[l][0],
                &dh,
                false,
            );
            grads.layers[l] = g_f;
            dh = dx_f;
        }
    }

    for (l, layer) in grads.layers.iter().enumerate() {
        for (gate, name) in [
            (&layer.input, "input"),
            (&layer.forget, "forget"),
            (&layer.cell, "cell"),
            (&layer.output, "output"),
        ] {
            if gate.w.iter().chain(gate.u.iter()).chain(gate.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    tensor: format!("layer{l}.fwd.{name}"),
                    detail: "non-finite gradient".into(),
                });
            }
        }
    }
    if grads.dense_w.iter().chain(grads.dense_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            tensor: "dense".into(),
            detail: "non-finite gradient".into(),
        });
    }
    Ok((loss, grads))
}

/// One fixed-length training item cut from an utterance.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: Array2<f64>,
    pub y: IdealBinaryMask,
    pub vad: VadMask,
}

/// Cut aligned features/mask/activity into non-overlapping `seq_len`-frame
/// chunks; a final shorter remainder is dropped.
pub fn chunk_sequences(
    features: &Array2<f64>,
    y: &IdealBinaryMask,
    vad: &VadMask,
    seq_len: usize,
) -> Result<Vec<TrainItem>> {
    if seq_len < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence length {seq_len} must be at least 2"
        )));
    }
    let t_len = features.nrows();
    let num_bins = features.ncols();
    if y.num_frames != t_len || y.num_bins != num_bins || vad.active.dim() != (t_len, num_bins) {
        return Err(Error::Shape(
            "features, mask and activity must cover the same bins".into(),
        ));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + seq_len <= t_len {
        let end = start + seq_len;
        out.push(TrainItem {
            features: features.slice(s![start..end, ..]).to_owned(),
            y: IdealBinaryMask {
                y: y.y.slice(s![start * num_bins..end * num_bins, ..]).to_owned(),
                num_frames: seq_len,
                num_bins,
            },
            vad: VadMask {
                active: vad.active.slice(s![start..end, ..]).to_owned(),
                threshold_db: vad.threshold_db,
            },
        });
        start = end;
    }
    Ok(out)
}

/// One mixture with its ground-truth sources, all equal length.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub mixture: Waveform,
    pub sources: [Waveform; 2],
}

#[derive(Debug, Clone)]
pub struct TrainCorpus {
    pub train: Vec<TrainExample>,
    pub val: Vec<TrainExample>,
}

/// Network shape plus optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub units: usize,
    pub bidirectional: bool,
    pub seq_len_stage1: usize,
    pub seq_len_stage2: usize,
    /// Train a second stage on longer sequences, resuming from the best
    /// stage-1 weights.
    pub curriculum: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub patience_epochs: usize,
    pub vad_threshold_db: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for a given frame geometry.
    pub fn new(framing: FramingConfig) -> Self {
        Self {
            window_len: framing.window_len,
            hop_len: framing.hop_len,
            fft_size: framing.fft_size,
            embed_dim: 16,
            num_layers: 2,
            units: 64,
            bidirectional: false,
            seq_len_stage1: 100,
            seq_len_stage2: 200,
            curriculum: false,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            patience_epochs: 30,
            vad_threshold_db: 40.0,
            max_epochs: 100,
            seed: 0,
        }
    }

    pub fn framing(&self) -> Result<FramingConfig> {
        FramingConfig::new(self.window_len, self.hop_len, self.fft_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.framing()?;
        if self.embed_dim == 0 || self.num_layers == 0 || self.units == 0 {
            return Err(Error::InvalidConfig(
                "embed_dim, num_layers and units must all be positive".into(),
            ));
        }
        if self.seq_len_stage1 < 2 || (self.curriculum && self.seq_len_stage2 < 2) {
            return Err(Error::InvalidConfig("sequence lengths must be at least 2".into()));
        }
        if self.patience_epochs < 1 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::InvalidConfig(
                "batch_size and max_epochs must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be finite".into()));
        }
        for (b, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if !(self.vad_threshold_db.is_finite() && self.vad_threshold_db > 0.0) {
            return Err(Error::InvalidConfig("vad threshold must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    /// Absent for the pre-training evaluation record of each stage.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub seconds: f64,
    pub best_flag: bool,
}

#[derive(Debug)]
pub struct FitResult {
    pub params: NetworkParams,
    pub log: Vec<EpochRecord>,
}

fn prepare_items(
    examples: &[TrainExample],
    framing: &FramingConfig,
    vad_threshold_db: f64,
    seq_len: usize,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for (k, ex) in examples.iter().enumerate() {
        if ex.sources.iter().any(|s| s.len() != ex.mixture.len()) {
            return Err(Error::Shape(format!(
                "example {k}: mixture and sources must have equal length"
            )));
        }
        let mix = stft(&ex.mixture, framing)?;
        let features = log_magnitude(&mix);
        let vad = vad_mask(&mix, vad_threshold_db)?;
        let srcs = [stft(&ex.sources[0], framing)?, stft(&ex.sources[1], framing)?];
        let y = ideal_binary_mask(&srcs)?;
        items.extend(chunk_sequences(&features, &y, &vad, seq_len)?);
    }
    Ok(items)
}

/// Per-frequency mean and standard deviation of the log-magnitude features
/// over the whole training set.
fn feature_stats(examples: &[TrainExample], framing: &FramingConfig) -> Result<(Array1<f64>, Array1<f64>)> {
    let num_bins = framing.num_bins();
    let mut sum = Array1::<f64>::zeros(num_bins);
    let mut sumsq = Array1::<f64>::zeros(num_bins);
    let mut frames = 0usize;
    for ex in examples {
        let features = log_magnitude(&stft(&ex.mixture, framing)?);
        frames += features.nrows();
        for row in features.rows() {
            for f in 0..num_bins {
                sum[f] += row[f];
                sumsq[f] += row[f] * row[f];
            }
        }
    }
    let n = frames as f64;
    let mean = sum / n;
    let std = Array1::from_shape_fn(num_bins, |f| {
        (sumsq[f] / n - mean[f] * mean[f]).max(0.0).sqrt().max(1e-6)
    });
    Ok((mean, std))
}

fn validation_loss(params: &NetworkParams, items: &[TrainItem]) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        let emb = forward_batch(params, &item.features)?;
        total += dc_loss(&emb, &item.y, &item.vad)?.value;
    }
    Ok(total / items.len() as f64)
}

struct StageOutcome {
    best: NetworkParams,
    epochs_run: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: usize,
    epoch_base: usize,
    start: NetworkParams,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<EpochRecord>,
) -> Result<StageOutcome> {
    let mut current = start;
    let mut opt = AdamState::new(&current);
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;

    let t0 = Instant::now();
    let val0 = validation_loss(&current, val_items)?;
    log.push(EpochRecord {
        epoch: epoch_base,
        stage,
        train_loss: None,
        val_loss: val0,
        seconds: t0.elapsed().as_secs_f64(),
        best_flag: false,
    });

    let mut epochs_run = 0;
    for e in 1..=config.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc = Gradients::zeros_like(&current);
            for &idx in batch {
                let item = &train_items[idx];
                let (loss, grads) = backward(&current, &item.features, &item.y, &item.vad)?;
                loss_sum += loss.value;
                acc.add_assign(&grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            if let Some(limit) = config.grad_clip {
                acc.clip_to(limit);
            }
            adam_update(
                &mut current,
                &acc,
                &mut opt,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.eps,
            )?;
        }
        let train_loss = loss_sum / train_items.len() as f64;
        let val = validation_loss(&current, val_items)?;
        let is_best = val < best_val;
        if is_best {
            best_val = val;
            best = current.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.push(EpochRecord {
            epoch: epoch_base + e,
            stage,
            train_loss: Some(train_loss),
            val_loss: val,
            seconds: t0.elapsed().as_secs_f64(),
            best_flag: is_best,
        });
        epochs_run = e;
        if since_best >= config.patience_epochs {
            break;
        }
    }
    Ok(StageOutcome { best, epochs_run })
}

/// Train from scratch: compute feature statistics, run stage 1 on short
/// sequences with early stopping, optionally run a second stage on longer
/// sequences from the best stage-1 weights, and return the weights with the
/// lowest validation loss.
pub fn fit(corpus: &TrainCorpus, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidConfig("training corpus is empty".into()));
    }
    if corpus.val.is_empty() {
        return Err(Error::InvalidConfig("validation corpus is empty".into()));
    }
    let framing = config.framing()?;
    let mut params = init_params(
        framing,
        config.embed_dim,
        config.num_layers,
        config.units,
        config.bidirectional,
        config.seed,
    )?;
    let (mean, std) = feature_stats(&corpus.train, &framing)?;
    params.feat_mean = mean;
    params.feat_std = std;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let mut log = Vec::new();

    let train1 = prepare_items(&corpus.train, &framing, config.vad_threshold_db, config.seq_len_stage1)?;
    let val1 = prepare_items(&corpus.val, &framing, config.vad_threshold_db, config.seq_len_stage1)?;
    if train1.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no training chunks: every utterance is shorter than {} frames",
            config.seq_len_stage1
        )));
    }
    if val1.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no validation chunks: every utterance is shorter than {} frames",
            config.seq_len_stage1
        )));
    }
    let stage1 = run_stage(1, 0, params, &train1, &val1, config, &mut rng, &mut log)?;
    let mut final_params = stage1.best;

    if config.curriculum {
        let train2 = prepare_items(&corpus.train, &framing, config.vad_threshold_db, config.seq_len_stage2)?;
        let val2 = prepare_items(&corpus.val, &framing, config.vad_threshold_db, config.seq_len_stage2)?;
        if train2.is_empty() || val2.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no second-stage chunks: utterances are shorter than {} frames",
                config.seq_len_stage2
            )));
        }
        let stage2 = run_stage(
            2,
            stage1.epochs_run + 1,
            final_params,
            &train2,
            &val2,
            config,
            &mut rng,
            &mut log,
        )?;
        final_params = stage2.best;
    }
    Ok(FitResult {
        params: final_params,
        log,
    })
}
