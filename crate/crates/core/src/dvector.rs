//! d-vector network: stacked LSTM layers with tanh projection, a final linear
//! transform on the last frame, and L2 normalization.
//!
//! Per layer and frame, with `x` the layer input and `r` the previous
//! projected output:
//!
//! ```text
//! [i f g o] = [sig sig tanh sig](W [x; r_prev] + b)
//! c = f * c_prev + i * g
//! h = o * tanh(c)
//! r = tanh(P h)
//! ```
//!
//! No peephole connections. All arithmetic is in `f64`.

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng::SplitMix64;

/// Norm tolerance accepted by consumers of embeddings.
pub const EMBEDDING_NORM_TOLERANCE: f64 = 1e-4;
pub const INITIAL_GE2E_SCALE: f64 = 10.0;
pub const INITIAL_GE2E_OFFSET: f64 = -5.0;
const TAG_INIT: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub num_layers: usize,
    pub cells: usize,
    pub projection_dim: usize,
    pub output_dim: usize,
}

impl NetworkSpec {
    /// Small-footprint text-dependent model (235,072 parameters).
    pub const TD: NetworkSpec = NetworkSpec {
        input_dim: 80,
        num_layers: 3,
        cells: 128,
        projection_dim: 64,
        output_dim: 64,
    };

    /// Text-independent model (1,274,496 parameters).
    pub const TI: NetworkSpec = NetworkSpec {
        input_dim: 80,
        num_layers: 3,
        cells: 384,
        projection_dim: 128,
        output_dim: 128,
    };

    /// Desk-scale stand-ins with the same topology, for synthetic features.
    pub fn td_small(input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            num_layers: 2,
            cells: 16,
            projection_dim: 8,
            output_dim: 8,
        }
    }

    pub fn ti_small(input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            num_layers: 2,
            cells: 24,
            projection_dim: 12,
            output_dim: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.num_layers == 0
            || self.cells == 0
            || self.projection_dim == 0
            || self.output_dim == 0
        {
            return Err(Error::Invalid(format!(
                "network dimensions must all be positive: {self:?}"
            )));
        }
        if self.output_dim != self.projection_dim {
            return Err(Error::Invalid(format!(
                "output_dim {} must equal projection_dim {}",
                self.output_dim, self.projection_dim
            )));
        }
        Ok(())
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.projection_dim
        }
    }

    /// Multiply-accumulates of all gate and projection matrices for one frame.
    pub fn macs_per_frame(&self) -> u64 {
        let (c, p) = (self.cells as u64, self.projection_dim as u64);
        (0..self.num_layers)
            .map(|l| {
                let i = self.layer_input_dim(l) as u64;
                4 * c * (i + p) + p * c
            })
            .sum()
    }

    pub fn param_count(&self) -> u64 {
        let (c, p, out) = (
            self.cells as u64,
            self.projection_dim as u64,
            self.output_dim as u64,
        );
        let layers: u64 = (0..self.num_layers)
            .map(|l| {
                let i = self.layer_input_dim(l) as u64;
                4 * c * (i + p) + 4 * c + p * c
            })
            .sum();
        layers + out * p + out
    }

    /// Matrix flops (2 per multiply-accumulate) to embed `frames` frames.
    /// Elementwise nonlinearities are not counted.
    pub fn flops_per_utterance(&self, frames: usize) -> Result<u64> {
        if frames == 0 {
            return Err(Error::Invalid("flop count needs at least one frame".into()));
        }
        Ok(2 * frames as u64 * self.macs_per_frame()
            + 2 * (self.output_dim * self.projection_dim) as u64)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x` for `x` split across two contiguous pieces.
    fn mul_vec2(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        debug_assert_eq!(a.len() + b.len(), self.cols);
        let split = a.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, x) in row[..split].iter().zip(a) {
                acc += w * x;
            }
            for (w, x) in row[split..].iter().zip(b) {
                acc += w * x;
            }
            *o = acc;
        }
    }

    fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        self.mul_vec2(x, &[], out)
    }

    /// `out += self^T * y`.
    fn mul_t_vec_add(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self += y * [a; b]^T`.
    fn add_outer2(&mut self, y: &[f64], a: &[f64], b: &[f64]) {
        let cols = self.cols;
        let split = a.len();
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (w, x) in row[..split].iter_mut().zip(a) {
                *w += yr * x;
            }
            for (w, x) in row[split..].iter_mut().zip(b) {
                *w += yr * x;
            }
        }
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One LSTM-with-projection layer. Gate rows are stacked as input, forget,
/// cell candidate, output, each block `cells` rows tall.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmpLayer {
    pub gates: Matrix,
    pub bias: Vec<f64>,
    pub projection: Matrix,
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub spec: NetworkSpec,
    pub layers: Vec<LstmpLayer>,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
    /// GE2E similarity scale `w`.
    pub ge2e_scale: f64,
    /// GE2E similarity offset `b`.
    pub ge2e_offset: f64,
}

/// Gradients share the parameter layout.
pub type Gradients = Parameters;

impl Parameters {
    pub fn zeros(spec: NetworkSpec) -> Self {
        let (c, p) = (spec.cells, spec.projection_dim);
        let layers = (0..spec.num_layers)
            .map(|l| LstmpLayer {
                gates: Matrix::zeros(4 * c, spec.layer_input_dim(l) + p),
                bias: vec![0.0; 4 * c],
                projection: Matrix::zeros(p, c),
            })
            .collect();
        Self {
            spec,
            layers,
            output: Matrix::zeros(spec.output_dim, p),
            output_bias: vec![0.0; spec.output_dim],
            ge2e_scale: 0.0,
            ge2e_offset: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec)
    }

    /// Every parameter array in a fixed order; GE2E scalars come last.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * self.layers.len() + 4);
        for l in &self.layers {
            out.push(&l.gates.data);
            out.push(&l.bias);
            out.push(&l.projection.data);
        }
        out.push(&self.output.data);
        out.push(&self.output_bias);
        out.push(std::slice::from_ref(&self.ge2e_scale));
        out.push(std::slice::from_ref(&self.ge2e_offset));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.layers.len() + 4);
        for l in &mut self.layers {
            out.push(&mut l.gates.data);
            out.push(&mut l.bias);
            out.push(&mut l.projection.data);
        }
        out.push(&mut self.output.data);
        out.push(&mut self.output_bias);
        out.push(std::slice::from_mut(&mut self.ge2e_scale));
        out.push(std::slice::from_mut(&mut self.ge2e_offset));
        out
    }

    /// Total scalar count, including the two GE2E scalars.
    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Mutable access to the `index`-th scalar in [`Parameters::slices`] order.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for s in self.slices_mut() {
            if index < s.len() {
                return &mut s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn scalar(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to single precision, as stored in checkpoints.
    pub fn round_to_f32(&mut self) {
        for s in self.slices_mut() {
            for v in s {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Glorot-uniform bound for a `fan_out x fan_in` matrix.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fresh parameters: Glorot-uniform weights drawn per matrix (each gate block
/// separately), zero biases except forget gates at 1, GE2E `w = 10, b = -5`.
pub fn init_network(spec: NetworkSpec, seed: u64) -> Result<Parameters> {
    spec.validate()?;
    let mut rng = SplitMix64::stream(seed, &[TAG_INIT]);
    let mut params = Parameters::zeros(spec);
    let (c, p) = (spec.cells, spec.projection_dim);
    let mut fill = |values: &mut [f64], bound: f64| {
        for v in values {
            *v = rng.uniform(-bound, bound);
        }
    };
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let fan_in = spec.layer_input_dim(l) + p;
        let bound = init_bound(fan_in, c);
        for gate in 0..4 {
            let block = &mut layer.gates.data[gate * c * fan_in..(gate + 1) * c * fan_in];
            fill(block, bound);
        }
        layer.bias[c..2 * c].fill(1.0);
        fill(&mut layer.projection.data, init_bound(c, p));
    }
    fill(&mut params.output.data, init_bound(p, spec.output_dim));
    params.ge2e_scale = INITIAL_GE2E_SCALE;
    params.ge2e_offset = INITIAL_GE2E_OFFSET;
    Ok(params)
}

/// Largest |value| in each weight matrix with its Glorot bound, for checks.
pub fn weight_bounds(params: &Parameters) -> Vec<(f64, f64)> {
    let spec = params.spec;
    let (c, p) = (spec.cells, spec.projection_dim);
    let mut out = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        out.push((layer.gates.max_abs(), init_bound(spec.layer_input_dim(l) + p, c)));
        out.push((layer.projection.max_abs(), init_bound(c, p)));
    }
    out.push((params.output.max_abs(), init_bound(p, spec.output_dim)));
    out
}

/// Unit-L2-norm speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values`; fails on a zero or non-finite vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        if norm == 0.0 {
            return Err(Error::DegenerateEnrollment);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps an already unit-norm vector, checking the norm contract.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if !((norm - 1.0).abs() <= EMBEDDING_NORM_TOLERANCE) {
            return Err(Error::Contract(norm));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
struct LayerTrace {
    inputs: Vec<f64>,
    /// Post-activation gates per frame, `[i f g o]`, `4 * cells` wide.
    gates: Vec<f64>,
    cells: Vec<f64>,
    cell_tanh: Vec<f64>,
    hidden: Vec<f64>,
    projected: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    frames: usize,
    layers: Vec<LayerTrace>,
    /// Final linear output before normalization.
    pub raw_output: Vec<f64>,
    pub embedding: EmbeddingVector,
}

fn check_input(params: &Parameters, features: &FeatureSequence) -> Result<()> {
    if features.dim() != params.spec.input_dim {
        return Err(Error::Shape(format!(
            "features have dim {}, network expects {}",
            features.dim(),
            params.spec.input_dim
        )));
    }
    if features.frames() == 0 {
        return Err(Error::Length("embedding needs at least one frame".into()));
    }
    if !features.is_finite() {
        return Err(Error::Numeric("non-finite input features".into()));
    }
    Ok(())
}

/// Forward pass keeping everything needed by [`backward_embedding`].
pub fn forward_trace(params: &Parameters, features: &FeatureSequence) -> Result<ForwardTrace> {
    check_input(params, features)?;
    let spec = params.spec;
    let (c, p, frames) = (spec.cells, spec.projection_dim, features.frames());
    let mut layers = Vec::with_capacity(spec.num_layers);
    let mut input = features.data().to_vec();
    let mut z = vec![0.0; 4 * c];

    for layer in &params.layers {
        let in_dim = layer.gates.cols - p;
        let mut tr = LayerTrace {
            inputs: input,
            gates: vec![0.0; frames * 4 * c],
            cells: vec![0.0; frames * c],
            cell_tanh: vec![0.0; frames * c],
            hidden: vec![0.0; frames * c],
            projected: vec![0.0; frames * p],
        };
        let zero_r = vec![0.0; p];
        let zero_c = vec![0.0; c];
        let mut u = vec![0.0; p];
        for t in 0..frames {
            let x = &tr.inputs[t * in_dim..(t + 1) * in_dim];
            let r_prev = if t == 0 {
                &zero_r[..]
            } else {
                &tr.projected[(t - 1) * p..t * p]
            };
            layer.gates.mul_vec2(x, r_prev, &mut z);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let g = &mut tr.gates[t * 4 * c..(t + 1) * 4 * c];
            for k in 0..c {
                g[k] = sigmoid(z[k]);
                g[c + k] = sigmoid(z[c + k]);
                g[2 * c + k] = z[2 * c + k].tanh();
                g[3 * c + k] = sigmoid(z[3 * c + k]);
            }
            for k in 0..c {
                let c_prev = if t == 0 {
                    zero_c[k]
                } else {
                    tr.cells[(t - 1) * c + k]
                };
                let cell = g[c + k] * c_prev + g[k] * g[2 * c + k];
                let ct = cell.tanh();
                tr.cells[t * c + k] = cell;
                tr.cell_tanh[t * c + k] = ct;
                tr.hidden[t * c + k] = g[3 * c + k] * ct;
            }
            layer
                .projection
                .mul_vec(&tr.hidden[t * c..(t + 1) * c], &mut u);
            for (r, v) in tr.projected[t * p..(t + 1) * p].iter_mut().zip(&u) {
                *r = v.tanh();
            }
        }
        input = tr.projected.clone();
        layers.push(tr);
    }

    let last = &layers.last().expect("at least one layer").projected[(frames - 1) * p..];
    let mut raw_output = vec![0.0; spec.output_dim];
    params.output.mul_vec(last, &mut raw_output);
    for (y, b) in raw_output.iter_mut().zip(&params.output_bias) {
        *y += b;
    }
    if !raw_output.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite network output".into()));
    }
    let embedding = EmbeddingVector::normalized(raw_output.clone()).map_err(|e| match e {
        Error::DegenerateEnrollment => Error::Numeric("network output has zero norm".into()),
        other => other,
    })?;
    Ok(ForwardTrace {
        frames,
        layers,
        raw_output,
        embedding,
    })
}

pub fn forward_embedding(params: &Parameters, features: &FeatureSequence) -> Result<EmbeddingVector> {
    forward_trace(params, features).map(|t| t.embedding)
}

/// Accumulates into `grads` the gradient of a loss whose derivative with
/// respect to the embedding is `d_embedding`. GE2E scalars are untouched.
pub fn backward_embedding(
    params: &Parameters,
    trace: &ForwardTrace,
    d_embedding: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let spec = params.spec;
    let (c, p, frames) = (spec.cells, spec.projection_dim, trace.frames);

    // Through y / |y|.
    let norm = l2(&trace.raw_output);
    let e = trace.embedding.values();
    let proj: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
    let d_raw: Vec<f64> = e
        .iter()
        .zip(d_embedding)
        .map(|(ei, gi)| (gi - ei * proj) / norm)
        .collect();

    let top = trace.layers.last().expect("at least one layer");
    let last_r = &top.projected[(frames - 1) * p..];
    grads.output.add_outer2(&d_raw, last_r, &[]);
    for (gb, d) in grads.output_bias.iter_mut().zip(&d_raw) {
        *gb += d;
    }

    // Gradient arriving at each layer's projected outputs from above.
    let mut d_out = vec![0.0; frames * p];
    params
        .output
        .mul_t_vec_add(&d_raw, &mut d_out[(frames - 1) * p..]);

    let mut dz = vec![0.0; 4 * c];
    let mut d_h = vec![0.0; c];
    let mut d_u = vec![0.0; p];
    for (l, (layer, tr)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let in_dim = layer.gates.cols - p;
        let g_layer = &mut grads.layers[l];
        let mut d_in = vec![0.0; frames * in_dim];
        let mut d_r_rec = vec![0.0; p];
        let mut d_c_next = vec![0.0; c];
        let mut d_xr = vec![0.0; in_dim + p];
        let zero_r = vec![0.0; p];

        for t in (0..frames).rev() {
            let r = &tr.projected[t * p..(t + 1) * p];
            for k in 0..p {
                let dr = d_out[t * p + k] + d_r_rec[k];
                d_u[k] = dr * (1.0 - r[k] * r[k]);
            }
            let h = &tr.hidden[t * c..(t + 1) * c];
            g_layer.projection.add_outer2(&d_u, h, &[]);
            d_h.fill(0.0);
            layer.projection.mul_t_vec_add(&d_u, &mut d_h);

            let g = &tr.gates[t * 4 * c..(t + 1) * 4 * c];
            for k in 0..c {
                let (gi, gf, gg, go) = (g[k], g[c + k], g[2 * c + k], g[3 * c + k]);
                let ct = tr.cell_tanh[t * c + k];
                let c_prev = if t == 0 { 0.0 } else { tr.cells[(t - 1) * c + k] };
                let d_o = d_h[k] * ct;
                let d_c = d_c_next[k] + d_h[k] * go * (1.0 - ct * ct);
                dz[k] = d_c * gg * gi * (1.0 - gi);
                dz[c + k] = d_c * c_prev * gf * (1.0 - gf);
                dz[2 * c + k] = d_c * gi * (1.0 - gg * gg);
                dz[3 * c + k] = d_o * go * (1.0 - go);
                d_c_next[k] = d_c * gf;
            }
            if !dz.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in layer {l} at frame {t}"
                )));
            }

            let x = &tr.inputs[t * in_dim..(t + 1) * in_dim];
            let r_prev = if t == 0 {
                &zero_r[..]
            } else {
                &tr.projected[(t - 1) * p..t * p]
            };
            g_layer.gates.add_outer2(&dz, x, r_prev);
            for (gb, d) in g_layer.bias.iter_mut().zip(&dz) {
                *gb += d;
            }
            d_xr.fill(0.0);
            layer.gates.mul_t_vec_add(&dz, &mut d_xr);
            d_in[t * in_dim..(t + 1) * in_dim].copy_from_slice(&d_xr[..in_dim]);
            d_r_rec.copy_from_slice(&d_xr[in_dim..]);
        }
        d_out = d_in;
    }
    Ok(())
}
