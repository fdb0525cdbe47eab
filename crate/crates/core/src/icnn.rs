//! Input convex neural network: one convex mode of the mixture.
//!
//! ```text
//! h₁ = σ(V₁x + b₁)
//! h_k = σ(V_k x + W_k h_{k−1} + b_k)      k = 2 … N−1
//! y  = V_N x + W_N h_{N−1} + b_N
//! ```
//!
//! with σ = softplus (convex, non-decreasing) and every `W_k ≥ 0`, which
//! makes `y` convex in `x`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamStore, Real, ScalarField, SliceId, Tape, Var};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcnnConfig {
    pub input_dim: usize,
    pub n_hidden_layers: usize,
    pub hidden_width: usize,
}

impl IcnnConfig {
    pub fn new(input_dim: usize, n_hidden_layers: usize, hidden_width: usize) -> Self {
        Self { input_dim, n_hidden_layers, hidden_width }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.n_hidden_layers == 0 || self.hidden_width == 0 {
            return Err(ModelError::Config(format!("all ICNN dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    /// Trainable scalars in one mode.
    pub fn param_count(&self) -> usize {
        let (d, w, l) = (self.input_dim, self.hidden_width, self.n_hidden_layers);
        let first = d * w + w;
        let hidden = (l - 1) * (d * w + w * w + w);
        let out = d + w + 1;
        first + hidden + out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnLayer {
    /// Input skip weights, `out × input_dim`.
    pub v: Array2<f64>,
    /// Hidden-to-hidden weights, `out × prev_width`; absent on the first layer.
    pub w: Option<Array2<f64>>,
    pub b: Array1<f64>,
}

impl IcnnLayer {
    fn out_dim(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnParams {
    pub config: IcnnConfig,
    pub layers: Vec<IcnnLayer>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

impl IcnnParams {
    /// Fan-in scaled uniform initialization; `W` is drawn from
    /// `[0, √(1/fan_in))` so the non-negativity constraint holds from the start.
    pub fn init(config: IcnnConfig, rng: &mut impl Rng) -> Self {
        let d = config.input_dim;
        let width = config.hidden_width;
        let n_layers = config.n_hidden_layers + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let out = if k + 1 == n_layers { 1 } else { width };
            let prev = if k == 0 { 0 } else { width };
            let bound = (1.0 / (d + prev) as f64).sqrt();
            let v = uniform(rng, out, d, -bound, bound);
            let w = (k > 0).then(|| uniform(rng, out, prev, 0.0, bound));
            let b = Array1::from_shape_fn(out, |_| rng.gen_range(-bound..bound));
            layers.push(IcnnLayer { v, w, b });
        }
        Self { config, layers }
    }

    pub fn from_seed(config: IcnnConfig, seed: u64) -> Self {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// All-zero network of the given shape.
    pub fn zeros(config: IcnnConfig) -> Self {
        let n_layers = config.n_hidden_layers + 1;
        let layers = (0..n_layers)
            .map(|k| {
                let out = if k + 1 == n_layers { 1 } else { config.hidden_width };
                IcnnLayer {
                    v: Array2::zeros((out, config.input_dim)),
                    w: (k > 0).then(|| Array2::zeros((out, config.hidden_width))),
                    b: Array1::zeros(out),
                }
            })
            .collect();
        Self { config, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.v.len() + l.w.as_ref().map_or(0, |w| w.len()) + l.b.len())
            .sum()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Dimension { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        Ok(self.eval(x))
    }

    /// `∇ₓy` by the closed-form recursion
    /// `G₁ = diag(σ′)V₁`, `G_k = diag(σ′)(V_k + W_k G_{k−1})`, `∇y = V_N + W_N G_{N−1}`.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        let d = x.len();
        let mut h: Vec<f64> = Vec::new();
        let mut g: Vec<f64> = Vec::new(); // width × d, row-major
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let out = layer.out_dim();
            let mut z = vec![0.0; out];
            let mut gk = vec![0.0; out * d];
            for i in 0..out {
                let mut zi = layer.b[i];
                for j in 0..d {
                    zi += layer.v[[i, j]] * x[j];
                    gk[i * d + j] = layer.v[[i, j]];
                }
                if let Some(w) = &layer.w {
                    for (m, hm) in h.iter().enumerate() {
                        let wim = w[[i, m]];
                        zi += wim * hm;
                        for j in 0..d {
                            gk[i * d + j] += wim * g[m * d + j];
                        }
                    }
                }
                z[i] = zi;
            }
            if k == last {
                return Ok(gk);
            }
            for i in 0..out {
                let s = sigmoid(z[i]);
                for j in 0..d {
                    gk[i * d + j] *= s;
                }
            }
            h = z.iter().map(|&v| crate::autodiff::softplus(v)).collect();
            g = gk;
        }
        unreachable!("an ICNN always has an output layer")
    }

    /// Clamps every hidden weight `W_k` to be non-negative.
    pub fn project_nonnegative(&mut self) {
        for layer in &mut self.layers {
            if let Some(w) = &mut layer.w {
                w.mapv_inplace(|v| v.max(0.0));
            }
        }
    }

    pub fn is_projected(&self) -> bool {
        self.layers.iter().all(|l| l.w.as_ref().is_none_or(|w| w.iter().all(|&v| v >= 0.0)))
    }

    /// Appends this mode's tensors to `store` under `prefix`.
    pub fn push_into(&self, store: &mut ParamStore, prefix: &str) -> IcnnSlices {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let v = store.push(format!("{prefix}.V{}", k + 1), l.v.nrows(), l.v.ncols(), l.v.as_slice().unwrap());
                let w = l.w.as_ref().map(|w| {
                    let w = w.as_standard_layout();
                    store.push(format!("{prefix}.W{}", k + 1), w.nrows(), w.ncols(), w.as_slice().unwrap())
                });
                let b = store.push(format!("{prefix}.b{}", k + 1), 1, l.b.len(), l.b.as_slice().unwrap());
                LayerSlices { v, w, b }
            })
            .collect();
        IcnnSlices { layers }
    }

    /// Rebuilds a mode from the slices written by [`IcnnParams::push_into`].
    pub fn from_store(config: IcnnConfig, store: &ParamStore, slices: &IcnnSlices) -> Self {
        let layers = slices
            .layers
            .iter()
            .map(|ls| IcnnLayer {
                v: store.view(ls.v).to_owned(),
                w: ls.w.map(|w| store.view(w).to_owned()),
                b: Array1::from(store.get(ls.b).to_vec()),
            })
            .collect();
        Self { config, layers }
    }
}

impl ScalarField for IcnnParams {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn eval<T: Real>(&self, x: &[T]) -> T {
        let mut h: Vec<T> = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let out = layer.out_dim();
            let mut next = Vec::with_capacity(out);
            for i in 0..out {
                let mut z = T::constant(layer.b[i]);
                for (j, &xj) in x.iter().enumerate() {
                    z += xj * layer.v[[i, j]];
                }
                if let Some(w) = &layer.w {
                    for (m, &hm) in h.iter().enumerate() {
                        z += hm * w[[i, m]];
                    }
                }
                next.push(if k == last { z } else { z.softplus() });
            }
            h = next;
        }
        h[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSlices {
    pub v: SliceId,
    pub w: Option<SliceId>,
    pub b: SliceId,
}

/// Location of one mode's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnSlices {
    pub layers: Vec<LayerSlices>,
}

/// Direction along which a tangent is propagated through the network.
#[derive(Debug, Clone, Copy)]
pub enum Tangent {
    /// Unit vector along input coordinate `j`.
    Coordinate(usize),
    /// One direction per sample, an `n × input_dim` node.
    PerSample(Var),
}

impl IcnnSlices {
    /// Hidden-weight slices; the targets of the non-negativity projection.
    pub fn hidden_weights(&self) -> impl Iterator<Item = SliceId> + '_ {
        self.layers.iter().filter_map(|l| l.w)
    }

    /// Batched forward pass, `x: n × d → n × 1`.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        self.forward_tape_with_tangents(tape, x, &[]).0
    }

    /// Batched forward pass that also propagates directional derivatives
    /// `∇ₓy · t` for each requested tangent, all as differentiable nodes.
    pub fn forward_tape_with_tangents(&self, tape: &mut Tape<'_>, x: Var, tangents: &[Tangent]) -> (Var, Vec<Var>) {
        let last = self.layers.len() - 1;
        let mut h: Option<Var> = None;
        let mut t: Vec<Var> = Vec::with_capacity(tangents.len());
        for (k, ls) in self.layers.iter().enumerate() {
            let v = tape.param(ls.v);
            let b = tape.param(ls.b);
            let mut z = tape.matmul_nt(x, v);
            let w = ls.w.map(|w| tape.param(w));
            if let (Some(w), Some(hp)) = (w, h) {
                let hw = tape.matmul_nt(hp, w);
                z = tape.add(z, hw);
            }
            z = tape.add(z, b);

            let mut t_next = Vec::with_capacity(tangents.len());
            for (ti, tan) in tangents.iter().enumerate() {
                let mut dz = match *tan {
                    Tangent::Coordinate(j) => {
                        let col = tape.column(v, j);
                        tape.transpose(col)
                    }
                    Tangent::PerSample(dir) => tape.matmul_nt(dir, v),
                };
                if let Some(w) = w {
                    let tw = tape.matmul_nt(t[ti], w);
                    dz = tape.add(dz, tw);
                }
                t_next.push(dz);
            }

            if k == last {
                return (z, t_next);
            }
            let slope = tape.sigmoid(z);
            t = t_next.into_iter().map(|dz| tape.mul(slope, dz)).collect();
            h = Some(tape.softplus(z));
        }
        unreachable!("an ICNN always has an output layer")
    }
}
