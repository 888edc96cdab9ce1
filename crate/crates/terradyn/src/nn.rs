//! Minimal trainable network stack: parameter layout over one flat vector,
//! dense layers, LSTM cells, and Adam.
//!
//! All weights live in a single `Vec<f64>` described by a [`ParamLayout`].
//! Layer specs hold offsets into that vector, which gives every layer two
//! interchangeable forward paths: a plain `f64` one for simulation and
//! evaluation, and a tape-bound one for training.

use crate::tape::{gemm, Tape, VVar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Learning-rate group of a parameter entry. Physics constants train at a
/// reduced rate relative to network weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Physics,
    Network,
}

#[derive(Clone, Copy, Debug)]
enum InitKind {
    /// Uniform in +-scale/sqrt(fan_in).
    Uniform { fan_in: usize, scale: f64 },
    Zero,
    /// Zero bias with the forget-gate block set to +1.
    LstmBias { hidden: usize },
    /// Values supplied by the caller (physics constants).
    External,
}

#[derive(Clone, Debug)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    init: InitKind,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Offset and shape of one named tensor within the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct SliceRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl SliceRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn view<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.offset..self.offset + self.len()]
    }
}

/// Describes how a flat parameter vector is carved into named tensors.
/// Registration order is the canonical serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<SliceRef> {
        self.entries.iter().find(|e| e.name == name).map(|e| SliceRef {
            offset: e.offset,
            rows: e.rows,
            cols: e.cols,
        })
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup, init: InitKind) -> SliceRef {
        assert!(rows > 0 && cols > 0, "empty layout entry {name}");
        assert!(self.find(name).is_none(), "duplicate layout entry {name}");
        let offset = self.total;
        self.entries.push(LayoutEntry { name: name.to_string(), offset, rows, cols, group, init });
        self.total += rows * cols;
        SliceRef { offset, rows, cols }
    }

    /// Register a block of externally supplied physics constants.
    pub fn physics(&mut self, name: &str, len: usize) -> SliceRef {
        self.push(name, len, 1, ParamGroup::Physics, InitKind::External)
    }

    pub fn dense(&mut self, name: &str, in_dim: usize, out_dim: usize, act: Activation) -> DenseSpec {
        self.dense_scaled(name, in_dim, out_dim, act, 1.0)
    }

    /// Dense layer whose weight initialization is shrunk by `scale`; used for
    /// output heads that should start near zero.
    pub fn dense_scaled(
        &mut self,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        scale: f64,
    ) -> DenseSpec {
        let w = self.push(
            &format!("{name}.w"),
            out_dim,
            in_dim,
            ParamGroup::Network,
            InitKind::Uniform { fan_in: in_dim, scale },
        );
        let b = self.push(&format!("{name}.b"), out_dim, 1, ParamGroup::Network, InitKind::Zero);
        DenseSpec { w, b, act, in_dim, out_dim }
    }

    pub fn lstm(&mut self, name: &str, in_dim: usize, hidden: usize) -> LstmSpec {
        let wx = self.push(
            &format!("{name}.wx"),
            4 * hidden,
            in_dim,
            ParamGroup::Network,
            InitKind::Uniform { fan_in: in_dim, scale: 1.0 },
        );
        let wh = self.push(
            &format!("{name}.wh"),
            4 * hidden,
            hidden,
            ParamGroup::Network,
            InitKind::Uniform { fan_in: hidden, scale: 1.0 },
        );
        let b = self.push(&format!("{name}.b"), 4 * hidden, 1, ParamGroup::Network, InitKind::LstmBias { hidden });
        LstmSpec { wx, wh, b, in_dim, hidden }
    }

    /// Allocate and initialize a parameter vector. Network weights are drawn
    /// uniformly in +-scale/sqrt(fan_in) from a seeded stream in registration
    /// order; physics entries are left at zero for the caller to fill.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.total];
        for e in &self.entries {
            match e.init {
                InitKind::Uniform { fan_in, scale } => {
                    let bound = scale / (fan_in as f64).sqrt();
                    for v in &mut theta[e.offset..e.offset + e.len()] {
                        *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
                    }
                }
                InitKind::Zero | InitKind::External => {}
                InitKind::LstmBias { hidden } => {
                    for v in &mut theta[e.offset + hidden..e.offset + 2 * hidden] {
                        *v = 1.0;
                    }
                }
            }
        }
        theta
    }

    /// Per-parameter learning-rate multipliers: 1 for network weights,
    /// `physics_mult` for physics constants.
    pub fn lr_scales(&self, physics_mult: f64) -> Vec<f64> {
        let mut s = vec![0.0; self.total];
        for e in &self.entries {
            let m = match e.group {
                ParamGroup::Physics => physics_mult,
                ParamGroup::Network => 1.0,
            };
            s[e.offset..e.offset + e.len()].fill(m);
        }
        s
    }
}

/// Fully-connected layer backed by slices of the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct DenseSpec {
    pub w: SliceRef,
    pub b: SliceRef,
    pub act: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseSpec {
    /// Plain forward pass on one column vector.
    pub fn forward_f64(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        self.forward_batch_f64(theta, x, 1, out);
    }

    /// Forward pass on `n` column vectors stored column-major.
    pub fn forward_batch_f64(&self, theta: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
        assert_eq!(x.len(), self.in_dim * n);
        assert_eq!(out.len(), self.out_dim * n);
        let w = self.w.view(theta);
        let b = self.b.view(theta);
        gemm(
            self.out_dim, self.in_dim, n,
            1.0,
            w, self.in_dim as isize, 1,
            x, 1, self.in_dim as isize,
            0.0,
            out, 1, self.out_dim as isize,
        );
        for j in 0..n {
            for i in 0..self.out_dim {
                let v = out[j * self.out_dim + i] + b[i];
                out[j * self.out_dim + i] = match self.act {
                    Activation::Tanh => v.tanh(),
                    Activation::Identity => v,
                };
            }
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, theta: &[f64]) -> BoundDense<'t> {
        BoundDense {
            w: tape.param_slice(theta, self.w.offset, self.w.len()),
            b: tape.param_slice(theta, self.b.offset, self.b.len()),
            act: self.act,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        }
    }
}

/// Dense layer with its weights registered on a tape.
#[derive(Clone, Copy)]
pub struct BoundDense<'t> {
    w: VVar<'t>,
    b: VVar<'t>,
    act: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl<'t> BoundDense<'t> {
    /// Forward over `n` column vectors packed column-major in `x`.
    pub fn forward(&self, x: VVar<'t>, n: usize) -> VVar<'t> {
        assert_eq!(x.len(), self.in_dim * n);
        let y = self.w.matmul(x, self.out_dim, self.in_dim, n).add_cols(self.b, self.out_dim, n);
        match self.act {
            Activation::Tanh => y.tanh(),
            Activation::Identity => y,
        }
    }
}

/// LSTM cell backed by slices of the flat parameter vector. Gate blocks are
/// packed row-wise in the order input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmSpec {
    pub wx: SliceRef,
    pub wh: SliceRef,
    pub b: SliceRef,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmSpec {
    /// One recurrence step in plain `f64`. `scratch` must hold 4*hidden.
    pub fn step_f64(
        &self,
        theta: &[f64],
        x: &[f64],
        h: &mut [f64],
        c: &mut [f64],
        scratch: &mut [f64],
    ) {
        let hn = self.hidden;
        assert_eq!(x.len(), self.in_dim);
        assert!(h.len() == hn && c.len() == hn && scratch.len() == 4 * hn);
        let wx = self.wx.view(theta);
        let wh = self.wh.view(theta);
        let b = self.b.view(theta);
        for (i, z) in scratch.iter_mut().enumerate() {
            let mut acc = b[i];
            let wxr = &wx[i * self.in_dim..(i + 1) * self.in_dim];
            for (xv, wv) in x.iter().zip(wxr) {
                acc += xv * wv;
            }
            let whr = &wh[i * hn..(i + 1) * hn];
            for (hv, wv) in h.iter().zip(whr) {
                acc += hv * wv;
            }
            *z = acc;
        }
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for k in 0..hn {
            let i_g = sigmoid(scratch[k]);
            let f_g = sigmoid(scratch[hn + k]);
            let g_g = scratch[2 * hn + k].tanh();
            let o_g = sigmoid(scratch[3 * hn + k]);
            c[k] = f_g * c[k] + i_g * g_g;
            h[k] = o_g * c[k].tanh();
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, theta: &[f64]) -> BoundLstm<'t> {
        BoundLstm {
            wx: tape.param_slice(theta, self.wx.offset, self.wx.len()),
            wh: tape.param_slice(theta, self.wh.offset, self.wh.len()),
            b: tape.param_slice(theta, self.b.offset, self.b.len()),
            in_dim: self.in_dim,
            hidden: self.hidden,
        }
    }
}

/// LSTM cell with its weights registered on a tape.
#[derive(Clone, Copy)]
pub struct BoundLstm<'t> {
    wx: VVar<'t>,
    wh: VVar<'t>,
    b: VVar<'t>,
    in_dim: usize,
    hidden: usize,
}

impl<'t> BoundLstm<'t> {
    pub fn step(&self, x: VVar<'t>, h: VVar<'t>, c: VVar<'t>) -> (VVar<'t>, VVar<'t>) {
        assert_eq!(x.len(), self.in_dim);
        let hn = self.hidden;
        let z = self.wx.matmul(x, 4 * hn, self.in_dim, 1)
            + self.wh.matmul(h, 4 * hn, hn, 1)
            + self.b;
        let i_g = z.slice(0, hn).sigmoid();
        let f_g = z.slice(hn, hn).sigmoid();
        let g_g = z.slice(2 * hn, hn).tanh();
        let o_g = z.slice(3 * hn, hn).sigmoid();
        let c_next = f_g * c + i_g * g_g;
        let h_next = o_g * c_next.tanh();
        (h_next, c_next)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer state: first/second moment estimates per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, cfg }
    }

    /// Standard bias-corrected Adam update. `lr_scale` applies a per-parameter
    /// multiplier to the base learning rate.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr_scale: &[f64]) {
        assert!(theta.len() == self.m.len() && grad.len() == self.m.len());
        assert_eq!(lr_scale.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.cfg.beta1.powf(t);
        let c2 = 1.0 - self.cfg.beta2.powf(t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g;
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= self.cfg.lr * lr_scale[i] * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
    }
}
