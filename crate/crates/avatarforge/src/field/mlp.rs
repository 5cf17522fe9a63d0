//! Small fully-connected networks with hand-rolled differentiation.
//!
//! Two coupled derivative paths are supported:
//!
//! * **value path** — plain forward, reverse accumulation of parameter
//!   gradients (used for color supervision and SDF-only losses);
//! * **tangent path** — a forward pass that additionally carries three
//!   directional derivatives of every activation (yielding the spatial
//!   gradient of the output), plus a reverse pass through that augmented
//!   computation. The reverse-over-forward composition yields parameter
//!   gradients of losses that depend on the spatial SDF gradient (surface
//!   normals, eikonal regularization), i.e. mixed second derivatives.
//!
//! Tapes are caller-owned so per-thread workspaces can be reused across
//! many point evaluations without allocation.

/// Elementwise nonlinearity applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    /// `ln(1 + exp(beta x)) / beta`; smooth everywhere, near-ReLU for
    /// large beta, with well-defined second derivatives for the tangent
    /// reverse pass.
    Softplus { beta: f32 },
    Sigmoid,
}

impl Activation {
    #[inline]
    fn value(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::Softplus { beta } => {
                let bx = beta * x;
                if bx > 30.0 {
                    x + (-bx).exp().ln_1p() / beta
                } else {
                    bx.exp().ln_1p() / beta
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// First derivative at pre-activation `x`.
    #[inline]
    fn d1(self, x: f32) -> f32 {
        match self {
            Activation::Linear => 1.0,
            Activation::Softplus { beta } => sigmoid(beta * x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Second derivative at pre-activation `x`.
    #[inline]
    fn d2(self, x: f32) -> f32 {
        match self {
            Activation::Linear => 0.0,
            Activation::Softplus { beta } => {
                let s = sigmoid(beta * x);
                beta * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer, weights row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    #[inline]
    fn apply(&self, x: &[f32], out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            let mut acc = self.b[i];
            for (wj, xj) in row.iter().zip(x) {
                acc += wj * xj;
            }
            *o = acc;
        }
    }

    /// out = W x (no bias): tangents propagate through the linear part only.
    #[inline]
    fn apply_linear(&self, x: &[f32], out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            let mut acc = 0.0;
            for (wj, xj) in row.iter().zip(x) {
                acc += wj * xj;
            }
            *o = acc;
        }
    }

    /// out = W^T g.
    #[inline]
    fn apply_transposed(&self, g: &[f32], out: &mut [f32]) {
        out.fill(0.0);
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            for (oj, wj) in out.iter_mut().zip(row) {
                *oj += gi * wj;
            }
        }
    }
}

/// Multi-layer perceptron: `dims.len() - 1` dense layers, `hidden_act`
/// between layers and `output_act` on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden_act: Activation,
    pub output_act: Activation,
}

/// Caller-owned scratch holding every intermediate needed for the reverse
/// passes of one point evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    x: Vec<f32>,
    xt: Vec<f32>,
    z: Vec<Vec<f32>>,
    h: Vec<Vec<f32>>,
    zt: Vec<Vec<f32>>,
    ht: Vec<Vec<f32>>,
    // reverse-pass scratch, sized to the widest layer
    ga: Vec<f32>,
    gat: Vec<f32>,
    gz: Vec<f32>,
    gzt: Vec<f32>,
    swap_a: Vec<f32>,
    swap_at: Vec<f32>,
}

impl Tape {
    fn prepare(&mut self, mlp: &Mlp) {
        let n = mlp.layers.len();
        let max_dim = mlp
            .layers
            .iter()
            .map(|l| l.out_dim.max(l.in_dim))
            .max()
            .unwrap_or(0);
        self.z.resize(n, Vec::new());
        self.h.resize(n, Vec::new());
        self.zt.resize(n, Vec::new());
        self.ht.resize(n, Vec::new());
        for (i, l) in mlp.layers.iter().enumerate() {
            self.z[i].resize(l.out_dim, 0.0);
            self.h[i].resize(l.out_dim, 0.0);
            self.zt[i].resize(3 * l.out_dim, 0.0);
            self.ht[i].resize(3 * l.out_dim, 0.0);
        }
        self.ga.resize(max_dim, 0.0);
        self.gat.resize(3 * max_dim, 0.0);
        self.gz.resize(max_dim, 0.0);
        self.gzt.resize(3 * max_dim, 0.0);
        self.swap_a.resize(max_dim, 0.0);
        self.swap_at.resize(3 * max_dim, 0.0);
    }
}

impl Mlp {
    /// Layers of the given dims with zeroed parameters.
    pub fn zeros(dims: &[usize], hidden_act: Activation, output_act: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self {
            layers,
            hidden_act,
            output_act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// Append all parameters (per layer: weights then biases) to `out`.
    pub fn flatten_into(&self, out: &mut Vec<f32>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    /// Read parameters back from `flat`, returning the number consumed.
    pub fn unflatten_from(&mut self, flat: &[f32]) -> usize {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        off
    }

    #[inline]
    fn act_for_layer(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_act
        } else {
            self.hidden_act
        }
    }

    /// Plain forward pass; output is written to `out`.
    pub fn forward(&self, x: &[f32], tape: &mut Tape, out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(out.len(), self.out_dim());
        tape.prepare(self);
        tape.x.clear();
        tape.x.extend_from_slice(x);
        for li in 0..self.layers.len() {
            let layer = &self.layers[li];
            let mut z = std::mem::take(&mut tape.z[li]);
            let mut h = std::mem::take(&mut tape.h[li]);
            {
                let input: &[f32] = if li == 0 { &tape.x } else { &tape.h[li - 1] };
                layer.apply(input, &mut z);
            }
            let act = self.act_for_layer(li);
            for (hv, zv) in h.iter_mut().zip(z.iter()) {
                *hv = act.value(*zv);
            }
            tape.z[li] = z;
            tape.h[li] = h;
        }
        out.copy_from_slice(tape.h.last().unwrap());
    }

    /// Forward pass carrying three directional derivatives of the input.
    ///
    /// `xt` holds the tangent columns row-major (`3 * in_dim`); on return
    /// `out_tan` holds the three directional derivatives of each output
    /// (`3 * out_dim`, row-major by direction).
    pub fn forward_with_tangents(
        &self,
        x: &[f32],
        xt: &[f32],
        tape: &mut Tape,
        out: &mut [f32],
        out_tan: &mut [f32],
    ) {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(xt.len(), 3 * self.in_dim());
        debug_assert_eq!(out_tan.len(), 3 * self.out_dim());
        tape.prepare(self);
        tape.x.clear();
        tape.x.extend_from_slice(x);
        tape.xt.clear();
        tape.xt.extend_from_slice(xt);
        for li in 0..self.layers.len() {
            let layer = &self.layers[li];
            let mut z = std::mem::take(&mut tape.z[li]);
            let mut zt = std::mem::take(&mut tape.zt[li]);
            let mut h = std::mem::take(&mut tape.h[li]);
            let mut ht = std::mem::take(&mut tape.ht[li]);
            {
                let (input, input_t): (&[f32], &[f32]) = if li == 0 {
                    (&tape.x, &tape.xt)
                } else {
                    (&tape.h[li - 1], &tape.ht[li - 1])
                };
                layer.apply(input, &mut z);
                for k in 0..3 {
                    layer.apply_linear(
                        &input_t[k * layer.in_dim..(k + 1) * layer.in_dim],
                        &mut zt[k * layer.out_dim..(k + 1) * layer.out_dim],
                    );
                }
            }
            let act = self.act_for_layer(li);
            let m = layer.out_dim;
            for i in 0..m {
                h[i] = act.value(z[i]);
                let d = act.d1(z[i]);
                for k in 0..3 {
                    ht[k * m + i] = d * zt[k * m + i];
                }
            }
            tape.z[li] = z;
            tape.zt[li] = zt;
            tape.h[li] = h;
            tape.ht[li] = ht;
        }
        out.copy_from_slice(tape.h.last().unwrap());
        out_tan.copy_from_slice(tape.ht.last().unwrap());
    }

    /// Reverse pass for [`Mlp::forward`].
    ///
    /// `g_out` is dL/d(output); parameter gradients are accumulated into
    /// `grads` (same layout as [`Mlp::flatten_into`]).
    pub fn backward(&self, tape: &mut Tape, g_out: &[f32], grads: &mut [f32]) {
        debug_assert_eq!(g_out.len(), self.out_dim());
        debug_assert_eq!(grads.len(), self.n_params());
        let n = self.layers.len();
        tape.ga[..self.out_dim()].copy_from_slice(g_out);
        let mut grad_off = self.n_params();
        for li in (0..n).rev() {
            let layer = &self.layers[li];
            let act = self.act_for_layer(li);
            for i in 0..layer.out_dim {
                tape.gz[i] = act.d1(tape.z[li][i]) * tape.ga[i];
            }
            grad_off -= layer.n_params();
            let (gw, gb) =
                grads[grad_off..grad_off + layer.n_params()].split_at_mut(layer.w.len());
            let input: &[f32] = if li == 0 { &tape.x } else { &tape.h[li - 1] };
            for i in 0..layer.out_dim {
                let gzi = tape.gz[i];
                if gzi != 0.0 {
                    let row = &mut gw[i * layer.in_dim..(i + 1) * layer.in_dim];
                    for (g, xv) in row.iter_mut().zip(input) {
                        *g += gzi * xv;
                    }
                }
                gb[i] += gzi;
            }
            if li > 0 {
                layer.apply_transposed(&tape.gz[..layer.out_dim], &mut tape.swap_a[..layer.in_dim]);
                tape.ga[..layer.in_dim].copy_from_slice(&tape.swap_a[..layer.in_dim]);
            }
        }
    }

    /// Reverse pass for [`Mlp::forward_with_tangents`].
    ///
    /// `g_out` is dL/d(output value) and `g_out_tan` is dL/d(output
    /// tangents) (`3 * out_dim`, row-major by direction). Accumulates
    /// parameter gradients of a loss that depends on both the output and
    /// its spatial derivatives — this is where activation second
    /// derivatives enter.
    pub fn backward_with_tangents(
        &self,
        tape: &mut Tape,
        g_out: &[f32],
        g_out_tan: &[f32],
        grads: &mut [f32],
    ) {
        debug_assert_eq!(g_out.len(), self.out_dim());
        debug_assert_eq!(g_out_tan.len(), 3 * self.out_dim());
        debug_assert_eq!(grads.len(), self.n_params());
        let n = self.layers.len();
        let od = self.out_dim();
        tape.ga[..od].copy_from_slice(g_out);
        tape.gat[..3 * od].copy_from_slice(g_out_tan);
        let mut grad_off = self.n_params();
        for li in (0..n).rev() {
            let layer = &self.layers[li];
            let act = self.act_for_layer(li);
            let m = layer.out_dim;
            for i in 0..m {
                let d1 = act.d1(tape.z[li][i]);
                let d2 = act.d2(tape.z[li][i]);
                let mut gz = d1 * tape.ga[i];
                for k in 0..3 {
                    let gat = tape.gat[k * m + i];
                    tape.gzt[k * m + i] = d1 * gat;
                    gz += d2 * tape.zt[li][k * m + i] * gat;
                }
                tape.gz[i] = gz;
            }
            grad_off -= layer.n_params();
            let (gw, gb) =
                grads[grad_off..grad_off + layer.n_params()].split_at_mut(layer.w.len());
            let (input, input_t): (&[f32], &[f32]) = if li == 0 {
                (&tape.x, &tape.xt)
            } else {
                (&tape.h[li - 1], &tape.ht[li - 1])
            };
            for i in 0..m {
                let row = &mut gw[i * layer.in_dim..(i + 1) * layer.in_dim];
                let gzi = tape.gz[i];
                if gzi != 0.0 {
                    for (g, xv) in row.iter_mut().zip(input) {
                        *g += gzi * xv;
                    }
                }
                for k in 0..3 {
                    let gzti = tape.gzt[k * m + i];
                    if gzti != 0.0 {
                        let tcol = &input_t[k * layer.in_dim..(k + 1) * layer.in_dim];
                        for (g, tv) in row.iter_mut().zip(tcol) {
                            *g += gzti * tv;
                        }
                    }
                }
                gb[i] += gzi;
            }
            if li > 0 {
                layer.apply_transposed(&tape.gz[..m], &mut tape.swap_a[..layer.in_dim]);
                for k in 0..3 {
                    let (gzt_all, swap_at) = (&tape.gzt, &mut tape.swap_at);
                    layer.apply_transposed(
                        &gzt_all[k * m..k * m + m],
                        &mut swap_at[k * layer.in_dim..(k + 1) * layer.in_dim],
                    );
                }
                tape.ga[..layer.in_dim].copy_from_slice(&tape.swap_a[..layer.in_dim]);
                tape.gat[..3 * layer.in_dim].copy_from_slice(&tape.swap_at[..3 * layer.in_dim]);
            }
        }
    }
}
