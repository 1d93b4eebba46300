//! Small dense networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`NetLayout`], so the
//! optimizer, the EMA update, checkpoints and the gradient checker can all
//! treat a network as a plain vector.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::error::{check_dim, Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    /// Adds the layer input to its output; requires `in_dim == out_dim`.
    pub residual: bool,
    w_off: usize,
    b_off: usize,
}

impl LayerSpec {
    fn weight<'a>(&self, values: &'a [f64]) -> ArrayView2<'a, f64> {
        let len = self.out_dim * self.in_dim;
        ArrayView2::from_shape((self.out_dim, self.in_dim), &values[self.w_off..self.w_off + len])
            .expect("layout offsets are consistent")
    }

    fn bias<'a>(&self, values: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&values[self.b_off..self.b_off + self.out_dim])
    }

    fn weight_mut<'a>(&self, values: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let len = self.out_dim * self.in_dim;
        ArrayViewMut2::from_shape(
            (self.out_dim, self.in_dim),
            &mut values[self.w_off..self.w_off + len],
        )
        .expect("layout offsets are consistent")
    }
}

/// Learned lookup table spliced into the input row at column `at`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpec {
    pub rows: usize,
    pub dim: usize,
    pub at: usize,
    off: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetLayout {
    /// Columns supplied by the caller (everything except the embedding).
    pub dense_in: usize,
    pub embedding: Option<EmbeddingSpec>,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<LayerSpec>,
    /// Linear projection of the full input added to the last hidden layer.
    pub skip: Option<LayerSpec>,
    pub param_count: usize,
}

/// Shape description used to build a [`NetLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub dense_in: usize,
    /// `(rows, dim, at)` of an optional learned embedding table.
    pub embedding: Option<(usize, usize, usize)>,
    pub hidden: Vec<usize>,
    pub out: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub residual: bool,
    pub input_skip: bool,
}

impl NetLayout {
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        let mut off = 0usize;
        let embedding = match spec.embedding {
            Some((rows, dim, at)) => {
                if at > spec.dense_in {
                    return Err(Error::Invalid(format!(
                        "embedding column {at} beyond dense input {}",
                        spec.dense_in
                    )));
                }
                let e = EmbeddingSpec { rows, dim, at, off };
                off += rows * dim;
                Some(e)
            }
            None => None,
        };
        let full_in = spec.dense_in + embedding.as_ref().map_or(0, |e| e.dim);

        let mut push = |in_dim: usize, out_dim: usize, activation, layer_norm, residual| {
            if residual && in_dim != out_dim {
                return Err(Error::Invalid(format!(
                    "residual layer needs matching widths, got {in_dim} -> {out_dim}"
                )));
            }
            let w_off = off;
            let b_off = w_off + in_dim * out_dim;
            off = b_off + out_dim;
            Ok(LayerSpec {
                in_dim,
                out_dim,
                activation,
                layer_norm,
                residual,
                w_off,
                b_off,
            })
        };

        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut width = full_in;
        for &h in &spec.hidden {
            let residual = spec.residual && width == h;
            layers.push(push(width, h, spec.activation, spec.layer_norm, residual)?);
            width = h;
        }
        let skip = if spec.input_skip && !spec.hidden.is_empty() {
            Some(push(full_in, width, Activation::Identity, false, false)?)
        } else {
            None
        };
        layers.push(push(width, spec.out, Activation::Identity, false, false)?);

        Ok(Self {
            dense_in: spec.dense_in,
            embedding,
            layers,
            skip,
            param_count: off,
        })
    }

    pub fn full_in(&self) -> usize {
        self.dense_in + self.embedding.as_ref().map_or(0, |e| e.dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Width of the last hidden layer (the feature map).
    pub fn feature_dim(&self) -> usize {
        if self.hidden_count() == 0 {
            self.full_in()
        } else {
            self.layers[self.hidden_count() - 1].out_dim
        }
    }

    fn compose(&self, dense: &Array2<f64>, labels: Option<&[usize]>, values: &[f64]) -> Result<Array2<f64>> {
        check_dim(self.dense_in, dense.ncols())?;
        let Some(e) = &self.embedding else {
            return Ok(dense.clone());
        };
        let labels = labels.ok_or_else(|| Error::Invalid("network needs condition labels".into()))?;
        check_dim(dense.nrows(), labels.len())?;
        let mut out = Array2::zeros((dense.nrows(), self.full_in()));
        out.slice_mut(s![.., ..e.at]).assign(&dense.slice(s![.., ..e.at]));
        out.slice_mut(s![.., e.at + e.dim..])
            .assign(&dense.slice(s![.., e.at..]));
        for (r, &label) in labels.iter().enumerate() {
            if label >= e.rows {
                return Err(Error::Index {
                    index: label,
                    lo: 0,
                    hi: e.rows - 1,
                });
            }
            let row = &values[e.off + label * e.dim..e.off + (label + 1) * e.dim];
            out.slice_mut(s![r, e.at..e.at + e.dim])
                .assign(&ArrayView1::from(row));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    /// Through the output layer.
    Full,
    /// Stop at the last hidden layer.
    Features,
}

#[derive(Debug, Clone)]
struct LayerTape {
    normed: Array2<f64>,
    inv_std: Option<Array1<f64>>,
    out: Array2<f64>,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layout: Arc<NetLayout>,
    input: Array2<f64>,
    labels: Option<Vec<usize>>,
    layers: Vec<LayerTape>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        match self.layers.last() {
            Some(l) => &l.out,
            None => &self.input,
        }
    }

    pub fn into_output(mut self) -> Array2<f64> {
        match self.layers.pop() {
            Some(l) => l.out,
            None => self.input,
        }
    }
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Flat, same layout as the parameters. Empty when not requested.
    pub params: Vec<f64>,
    /// Gradient w.r.t. the caller-supplied dense columns.
    pub input: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    layout: Arc<NetLayout>,
    pub values: Vec<f64>,
}

impl NetParams {
    pub fn zeros(layout: NetLayout) -> Self {
        let n = layout.param_count;
        Self {
            layout: Arc::new(layout),
            values: vec![0.0; n],
        }
    }

    /// Uniform fan-in initialization. The output layer is zeroed when
    /// `zero_output` is set so the network starts as the zero map.
    pub fn init<R: Rng + ?Sized>(layout: NetLayout, rng: &mut R, zero_output: bool) -> Self {
        let mut p = Self::zeros(layout);
        let layout = p.layout.clone();
        if let Some(e) = &layout.embedding {
            for v in &mut p.values[e.off..e.off + e.rows * e.dim] {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let out_idx = layout.layers.len() - 1;
        for (idx, l) in layout.layers.iter().chain(layout.skip.iter()).enumerate() {
            if idx == out_idx && zero_output {
                continue;
            }
            let bound = (3.0 / l.in_dim as f64).sqrt();
            for v in &mut p.values[l.w_off..l.b_off] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn from_values(layout: NetLayout, values: Vec<f64>) -> Result<Self> {
        check_dim(layout.param_count, values.len())?;
        Ok(Self {
            layout: Arc::new(layout),
            values,
        })
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn same_shape(&self, other: &NetParams) -> bool {
        self.layout == other.layout
    }

    /// Row `row` of the embedding table, if there is one.
    pub fn embedding_row(&self, row: usize) -> Option<&[f64]> {
        let e = self.layout.embedding.as_ref()?;
        (row < e.rows).then(|| &self.values[e.off + row * e.dim..e.off + (row + 1) * e.dim])
    }

    /// Order-sensitive checksum of the raw bits.
    pub fn checksum(&self) -> u64 {
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    pub fn forward(&self, dense: &Array2<f64>, labels: Option<&[usize]>, depth: Depth) -> Result<Tape> {
        let layout = &self.layout;
        let input = layout.compose(dense, labels, &self.values)?;
        let n_layers = match depth {
            Depth::Full => layout.layers.len(),
            Depth::Features => layout.hidden_count(),
        };
        let last_hidden = layout.hidden_count().checked_sub(1);
        let mut tapes: Vec<LayerTape> = Vec::with_capacity(n_layers);

        for (idx, l) in layout.layers[..n_layers].iter().enumerate() {
            let h = tapes.last().map_or(&input, |t| &t.out);
            let mut a = h.dot(&l.weight(&self.values).t());
            a += &l.bias(&self.values);
            let inv_std = if l.layer_norm {
                Some(layer_norm_rows(&mut a))
            } else {
                None
            };
            let mut out = a.mapv(|x| l.activation.apply(x));
            if l.residual {
                out += h;
            }
            if Some(idx) == last_hidden {
                if let Some(sk) = &layout.skip {
                    general_mat_mul(1.0, &input, &sk.weight(&self.values).t(), 1.0, &mut out);
                    out += &sk.bias(&self.values);
                }
            }
            tapes.push(LayerTape {
                normed: a,
                inv_std,
                out,
            });
        }

        Ok(Tape {
            layout: self.layout.clone(),
            input,
            labels: labels.map(|l| l.to_vec()),
            layers: tapes,
        })
    }

    /// Reverse pass of `sum(output * upstream)`.
    pub fn backward(&self, tape: &Tape, upstream: &Array2<f64>, param_grads: bool) -> Result<Gradients> {
        if !Arc::ptr_eq(&tape.layout, &self.layout) && *tape.layout != *self.layout {
            return Err(Error::TapeMismatch);
        }
        let out = tape.output();
        if out.dim() != upstream.dim() {
            return Err(Error::Dimension {
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let layout = &self.layout;
        let mut grads = if param_grads {
            vec![0.0; layout.param_count]
        } else {
            Vec::new()
        };
        let last_hidden = layout.hidden_count().checked_sub(1);
        let mut g = upstream.clone();
        let mut input_extra: Option<Array2<f64>> = None;

        for idx in (0..tape.layers.len()).rev() {
            let l = &layout.layers[idx];
            let lt = &tape.layers[idx];
            let h_in = if idx == 0 {
                &tape.input
            } else {
                &tape.layers[idx - 1].out
            };

            if Some(idx) == last_hidden {
                if let Some(sk) = &layout.skip {
                    if param_grads {
                        general_mat_mul(1.0, &g.t(), &tape.input, 1.0, &mut sk.weight_mut(&mut grads));
                        add_col_sums(&mut grads[sk.b_off..sk.b_off + sk.out_dim], &g);
                    }
                    input_extra = Some(g.dot(&sk.weight(&self.values)));
                }
            }

            let mut da = &g * &lt.normed.mapv(|x| l.activation.derivative(x));
            if let Some(inv_std) = &lt.inv_std {
                layer_norm_backward(&mut da, &lt.normed, inv_std);
            }
            if param_grads {
                general_mat_mul(1.0, &da.t(), h_in, 1.0, &mut l.weight_mut(&mut grads));
                add_col_sums(&mut grads[l.b_off..l.b_off + l.out_dim], &da);
            }
            let mut dh = da.dot(&l.weight(&self.values));
            if l.residual {
                dh += &g;
            }
            g = dh;
        }
        if let Some(extra) = input_extra {
            g += &extra;
        }

        let input = match &layout.embedding {
            None => g,
            Some(e) => {
                if param_grads {
                    let labels = tape.labels.as_ref().ok_or(Error::TapeMismatch)?;
                    for (r, &label) in labels.iter().enumerate() {
                        let dst = &mut grads[e.off + label * e.dim..e.off + (label + 1) * e.dim];
                        for (d, v) in dst.iter_mut().zip(g.slice(s![r, e.at..e.at + e.dim])) {
                            *d += v;
                        }
                    }
                }
                let mut dense = Array2::zeros((g.nrows(), layout.dense_in));
                dense.slice_mut(s![.., ..e.at]).assign(&g.slice(s![.., ..e.at]));
                dense
                    .slice_mut(s![.., e.at..])
                    .assign(&g.slice(s![.., e.at + e.dim..]));
                dense
            }
        };
        Ok(Gradients {
            params: grads,
            input,
        })
    }

    /// Single-row convenience wrapper around [`NetParams::forward`].
    pub fn forward_one(&self, dense: ArrayView1<f64>, label: Option<usize>) -> Result<Array1<f64>> {
        let x = dense.to_owned().insert_axis(Axis(0));
        let labels = label.map(|l| vec![l]);
        let out = self.forward(&x, labels.as_deref(), Depth::Full)?.into_output();
        Ok(out.row(0).to_owned())
    }
}

fn layer_norm_rows(a: &mut Array2<f64>) -> Array1<f64> {
    let n = a.ncols() as f64;
    let mut inv = Array1::zeros(a.nrows());
    for (mut row, inv_std) in a.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        *inv_std = 1.0 / (var + LN_EPS).sqrt();
        let k = *inv_std;
        row.mapv_inplace(|x| (x - mean) * k);
    }
    inv
}

fn layer_norm_backward(dy: &mut Array2<f64>, y: &Array2<f64>, inv_std: &Array1<f64>) {
    let n = dy.ncols() as f64;
    for ((mut d, yr), &k) in dy.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
        let mean_d = d.sum() / n;
        let mean_dy = d.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
        d.zip_mut_with(&yr, |dv, &yv| *dv = k * (*dv - mean_d - yv * mean_dy));
    }
}

fn add_col_sums(dst: &mut [f64], m: &Array2<f64>) {
    for row in m.rows() {
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Sinusoidal features `[sin(x f_k) .., cos(x f_k) ..]` with geometric frequencies.
pub fn sinusoidal(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (x * freq).sin();
        out[half + k] = (x * freq).cos();
    }
    out
}

/// Conditioning label: a class or the null (unconditional) token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Class(usize),
    Null,
}

impl Cond {
    pub fn row(self, classes: usize) -> usize {
        match self {
            Cond::Class(k) => k,
            Cond::Null => classes,
        }
    }
}

/// Input layout of a conditioned epsilon network: `[z | t | c | w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondNetSpec {
    pub latent_dim: usize,
    pub t_dim: usize,
    pub classes: usize,
    pub c_dim: usize,
    /// Zero for networks that take no guidance-scale input.
    pub w_dim: usize,
    pub width: usize,
    pub depth: usize,
}

pub const OMEGA_EMBED_SCALE: f64 = 100.0;

impl CondNetSpec {
    pub fn teacher(latent_dim: usize, classes: usize) -> Self {
        Self {
            latent_dim,
            t_dim: 16,
            classes,
            c_dim: 8,
            w_dim: 0,
            width: 128,
            depth: 3,
        }
    }

    pub fn with_omega(self, w_dim: usize) -> Self {
        Self { w_dim, ..self }
    }

    pub fn layout(&self) -> NetLayout {
        NetLayout::new(&MlpSpec {
            dense_in: self.latent_dim + self.t_dim + self.w_dim,
            embedding: Some((self.classes + 1, self.c_dim, self.latent_dim + self.t_dim)),
            hidden: vec![self.width; self.depth],
            out: self.latent_dim,
            activation: Activation::Silu,
            layer_norm: false,
            residual: false,
            input_skip: true,
        })
        .expect("conditioned layout is well formed")
    }

    /// Dense input rows `[z | embed(t) | embed(w)]` and embedding labels.
    pub fn encode(&self, z: &Array2<f64>, t: &[usize], w: &[f64], cond: &[Cond]) -> Result<(Array2<f64>, Vec<usize>)> {
        check_dim(self.latent_dim, z.ncols())?;
        let b = z.nrows();
        check_dim(b, t.len())?;
        check_dim(b, cond.len())?;
        if self.w_dim > 0 {
            check_dim(b, w.len())?;
        }
        let mut x = Array2::zeros((b, self.latent_dim + self.t_dim + self.w_dim));
        x.slice_mut(s![.., ..self.latent_dim]).assign(z);
        for r in 0..b {
            let te = sinusoidal(t[r] as f64, self.t_dim);
            x.slice_mut(s![r, self.latent_dim..self.latent_dim + self.t_dim])
                .assign(&ArrayView1::from(&te));
            if self.w_dim > 0 {
                let we = sinusoidal(w[r] * OMEGA_EMBED_SCALE, self.w_dim);
                x.slice_mut(s![r, self.latent_dim + self.t_dim..])
                    .assign(&ArrayView1::from(&we));
            }
        }
        let labels = cond.iter().map(|c| c.row(self.classes)).collect();
        Ok((x, labels))
    }
}

/// Epsilon network conditioned on timestep, class and (optionally) guidance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNet {
    pub spec: CondNetSpec,
    pub params: NetParams,
}

impl CondNet {
    pub fn init<R: Rng + ?Sized>(spec: CondNetSpec, rng: &mut R) -> Self {
        let params = NetParams::init(spec.layout(), rng, true);
        Self { spec, params }
    }

    pub fn from_params(spec: CondNetSpec, params: NetParams) -> Result<Self> {
        if *params.layout() != spec.layout() {
            return Err(Error::Invalid("parameter layout does not match network spec".into()));
        }
        Ok(Self { spec, params })
    }

    /// Copy of a teacher network extended with a zero-initialized
    /// guidance-scale input of width `w_dim`.
    pub fn student_from_teacher(teacher: &CondNet, w_dim: usize) -> Self {
        let spec = teacher.spec.with_omega(w_dim);
        let mut params = NetParams::zeros(spec.layout());
        let tl = teacher.params.layout().clone();
        let sl = params.layout().clone();
        if let (Some(te), Some(se)) = (&tl.embedding, &sl.embedding) {
            let n = te.rows * te.dim;
            params.values[se.off..se.off + n]
                .copy_from_slice(&teacher.params.values[te.off..te.off + n]);
        }
        let pairs = tl
            .layers
            .iter()
            .zip(&sl.layers)
            .chain(tl.skip.iter().zip(sl.skip.iter()));
        for (t, s) in pairs {
            let tw = t.weight(&teacher.params.values);
            let mut sw = s.weight_mut(&mut params.values);
            // extra trailing input columns (the guidance embedding) stay zero
            sw.slice_mut(s![.., ..t.in_dim]).assign(&tw);
            params.values[s.b_off..s.b_off + s.out_dim]
                .copy_from_slice(&teacher.params.values[t.b_off..t.b_off + t.out_dim]);
        }
        Self { spec, params }
    }

    pub fn forward(&self, z: &Array2<f64>, t: &[usize], w: &[f64], cond: &[Cond], depth: Depth) -> Result<Tape> {
        let (x, labels) = self.spec.encode(z, t, w, cond)?;
        self.params.forward(&x, Some(&labels), depth)
    }

    pub fn predict(&self, z: &Array2<f64>, t: &[usize], w: &[f64], cond: &[Cond]) -> Result<Array2<f64>> {
        Ok(self.forward(z, t, w, cond, Depth::Full)?.into_output())
    }

    /// Backward pass; the returned input gradient is restricted to `z`.
    pub fn backward(&self, tape: &Tape, upstream: &Array2<f64>, param_grads: bool) -> Result<Gradients> {
        let mut g = self.params.backward(tape, upstream, param_grads)?;
        g.input = g.input.slice(s![.., ..self.spec.latent_dim]).to_owned();
        Ok(g)
    }
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over `samples` randomly chosen coordinates.
///
/// `loss` returns the scalar loss and its analytic gradient.
pub fn grad_check<F, R>(params: &[f64], mut loss: F, h: f64, samples: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let (l0, analytic) = loss(params);
    if !l0.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            step: 0,
        });
    }
    check_dim(params.len(), analytic.len())?;
    let n = params.len();
    let coords: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..n)).collect()
    };
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let (lp, _) = loss(&p);
        p[i] = orig - h;
        let (lm, _) = loss(&p);
        p[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: i,
            });
        }
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
