//! Plain, highway and residual LSTM steps with exact reverse passes.
//!
//! Dimensions: `n` memory cells, `k` layer inputs, `m` layer outputs (the
//! projection width). The shared core is the peephole LSTM with a recurrent
//! projection:
//!
//! ```text
//! i = σ(W_xi x + W_hi h' + p_ci ⊙ c' + b_i)
//! f = σ(W_xf x + W_hf h' + p_cf ⊙ c' + b_f)
//! g = tanh(W_xc x + W_hc h' + b_c)
//! c = f ⊙ c' + i ⊙ g
//! o = σ(W_xo x + W_ho h' + p_co ⊙ c + b_o)      (peeks at the new cell)
//! h = W_p (o ⊙ tanh c)
//! ```
//!
//! The highway layer adds `d ⊙ c_below` to the cell update, with the depth
//! gate `d = σ(W_xd x + p_cd_same ⊙ c' + p_cd_below ⊙ c_below + b_d)`.
//!
//! The residual layer moves the output gate behind the projection and adds
//! the layer input there: `m = W_p tanh c`, `h = ō ⊙ (m + s)` with
//! `s = x` or `s = W_h x`; the unscaled variant is `h = ō ⊙ m + s`. The gate
//! `ō` lives in output space. When `n == m` it is `o` itself; otherwise `o`
//! is resampled onto the `m` outputs by area-weighted averaging (see
//! [`pool_gate`]), which keeps the parameter count equal to the plain layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init_uniform, sigmoid_scalar, Matrix, Vector};
use crate::params::{mat, mat_mut, vec_mut, vec_ref, ParamSet, TensorMut, TensorRef, TensorRole};

/// How a residual layer feeds its input into the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShortcutKind {
    /// `s = x`; requires `k == m`.
    Identity,
    /// `s = W_h x` with a learnable `m × k` matrix.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Plain,
    Highway,
    Residual { scaled: bool, shortcut: ShortcutKind },
}

/// Shape contract of one recurrent layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.m == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be positive (n={}, k={}, m={})",
                self.n, self.k, self.m
            )));
        }
        if let LayerKind::Residual {
            shortcut: ShortcutKind::Identity,
            ..
        } = self.kind
        {
            if self.k != self.m {
                return Err(Error::Config(format!(
                    "identity shortcut needs input dim == output dim, got k={} m={}",
                    self.k, self.m
                )));
            }
        }
        Ok(())
    }

    /// Declared tensors, in the order [`ParamSet::tensors`] yields them.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, TensorRole, (usize, usize))> {
        use TensorRole::*;
        let (n, k, m) = (self.n, self.k, self.m);
        let mut shapes = vec![
            ("w_xi", Weight, (n, k)),
            ("w_xf", Weight, (n, k)),
            ("w_xc", Weight, (n, k)),
            ("w_xo", Weight, (n, k)),
            ("w_hi", Weight, (n, m)),
            ("w_hf", Weight, (n, m)),
            ("w_hc", Weight, (n, m)),
            ("w_ho", Weight, (n, m)),
            ("p_ci", Peephole, (n, 1)),
            ("p_cf", Peephole, (n, 1)),
            ("p_co", Peephole, (n, 1)),
            ("b_i", Bias, (n, 1)),
            ("b_f", Bias, (n, 1)),
            ("b_c", Bias, (n, 1)),
            ("b_o", Bias, (n, 1)),
            ("w_p", Weight, (m, n)),
        ];
        match self.kind {
            LayerKind::Plain => {}
            LayerKind::Highway => shapes.extend([
                ("w_xd", Weight, (n, k)),
                ("p_cd_same", Peephole, (n, 1)),
                ("p_cd_below", Peephole, (n, 1)),
                ("b_d", Bias, (n, 1)),
            ]),
            LayerKind::Residual { shortcut, .. } => {
                if shortcut == ShortcutKind::Projection {
                    shapes.push(("w_h", Weight, (m, k)));
                }
            }
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, _, (r, c))| r * c).sum()
    }
}

/// Learnable tensors shared by every cell kind.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCoreParams {
    pub w_xi: Matrix,
    pub w_xf: Matrix,
    pub w_xc: Matrix,
    pub w_xo: Matrix,
    pub w_hi: Matrix,
    pub w_hf: Matrix,
    pub w_hc: Matrix,
    pub w_ho: Matrix,
    pub p_ci: Vector,
    pub p_cf: Vector,
    pub p_co: Vector,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_c: Vector,
    pub b_o: Vector,
    pub w_p: Matrix,
}

impl LstmCoreParams {
    pub fn zeros(n: usize, k: usize, m: usize) -> Self {
        LstmCoreParams {
            w_xi: Matrix::zeros(n, k),
            w_xf: Matrix::zeros(n, k),
            w_xc: Matrix::zeros(n, k),
            w_xo: Matrix::zeros(n, k),
            w_hi: Matrix::zeros(n, m),
            w_hf: Matrix::zeros(n, m),
            w_hc: Matrix::zeros(n, m),
            w_ho: Matrix::zeros(n, m),
            p_ci: Vector::zeros(n),
            p_cf: Vector::zeros(n),
            p_co: Vector::zeros(n),
            b_i: Vector::zeros(n),
            b_f: Vector::zeros(n),
            b_c: Vector::zeros(n),
            b_o: Vector::zeros(n),
            w_p: Matrix::zeros(m, n),
        }
    }

    /// `(n, k, m)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w_xi.rows(), self.w_xi.cols(), self.w_p.rows())
    }

    fn tensors(&self) -> Vec<TensorRef<'_>> {
        use TensorRole::*;
        vec![
            mat("w_xi", Weight, &self.w_xi),
            mat("w_xf", Weight, &self.w_xf),
            mat("w_xc", Weight, &self.w_xc),
            mat("w_xo", Weight, &self.w_xo),
            mat("w_hi", Weight, &self.w_hi),
            mat("w_hf", Weight, &self.w_hf),
            mat("w_hc", Weight, &self.w_hc),
            mat("w_ho", Weight, &self.w_ho),
            vec_ref("p_ci", Peephole, &self.p_ci),
            vec_ref("p_cf", Peephole, &self.p_cf),
            vec_ref("p_co", Peephole, &self.p_co),
            vec_ref("b_i", Bias, &self.b_i),
            vec_ref("b_f", Bias, &self.b_f),
            vec_ref("b_c", Bias, &self.b_c),
            vec_ref("b_o", Bias, &self.b_o),
            mat("w_p", Weight, &self.w_p),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        use TensorRole::*;
        vec![
            mat_mut("w_xi", Weight, &mut self.w_xi),
            mat_mut("w_xf", Weight, &mut self.w_xf),
            mat_mut("w_xc", Weight, &mut self.w_xc),
            mat_mut("w_xo", Weight, &mut self.w_xo),
            mat_mut("w_hi", Weight, &mut self.w_hi),
            mat_mut("w_hf", Weight, &mut self.w_hf),
            mat_mut("w_hc", Weight, &mut self.w_hc),
            mat_mut("w_ho", Weight, &mut self.w_ho),
            vec_mut("p_ci", Peephole, &mut self.p_ci),
            vec_mut("p_cf", Peephole, &mut self.p_cf),
            vec_mut("p_co", Peephole, &mut self.p_co),
            vec_mut("b_i", Bias, &mut self.b_i),
            vec_mut("b_f", Bias, &mut self.b_f),
            vec_mut("b_c", Bias, &mut self.b_c),
            vec_mut("b_o", Bias, &mut self.b_o),
            mat_mut("w_p", Weight, &mut self.w_p),
        ]
    }
}

/// Depth gate of a highway layer (layers 2 and up).
#[derive(Debug, Clone, PartialEq)]
pub struct HighwayExtras {
    pub w_xd: Matrix,
    /// Peephole on this layer's previous cell.
    pub p_cd_same: Vector,
    /// Peephole on the lower layer's current cell.
    pub p_cd_below: Vector,
    pub b_d: Vector,
}

impl HighwayExtras {
    pub fn zeros(n: usize, k: usize) -> Self {
        HighwayExtras {
            w_xd: Matrix::zeros(n, k),
            p_cd_same: Vector::zeros(n),
            p_cd_below: Vector::zeros(n),
            b_d: Vector::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    Identity,
    Projection(Matrix),
}

impl Shortcut {
    pub fn kind(&self) -> ShortcutKind {
        match self {
            Shortcut::Identity => ShortcutKind::Identity,
            Shortcut::Projection(_) => ShortcutKind::Projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualExtras {
    pub shortcut: Shortcut,
    /// `true`: `h = ō ⊙ (m + s)`; `false`: `h = ō ⊙ m + s`.
    pub scaled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerExtras {
    None,
    Highway(HighwayExtras),
    Residual(ResidualExtras),
}

/// All learnable tensors of one recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub core: LstmCoreParams,
    pub extras: LayerExtras,
}

impl LayerParams {
    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let LayerSpec { kind, n, k, m } = spec;
        let extras = match kind {
            LayerKind::Plain => LayerExtras::None,
            LayerKind::Highway => LayerExtras::Highway(HighwayExtras::zeros(n, k)),
            LayerKind::Residual { scaled, shortcut } => LayerExtras::Residual(ResidualExtras {
                shortcut: match shortcut {
                    ShortcutKind::Identity => Shortcut::Identity,
                    ShortcutKind::Projection => Shortcut::Projection(Matrix::zeros(m, k)),
                },
                scaled,
            }),
        };
        Ok(LayerParams {
            core: LstmCoreParams::zeros(n, k, m),
            extras,
        })
    }

    /// Weights and peepholes uniform in `[-scale, scale]`, biases zero except
    /// the forget-gate bias, which starts at 1.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = LayerParams::zeros(spec)?;
        for t in p.tensors_mut() {
            match t.role {
                TensorRole::Weight | TensorRole::Peephole => {
                    let (r, c) = t.shape;
                    t.data.copy_from_slice(init_uniform(r, c, scale, rng).as_slice());
                }
                TensorRole::Bias if t.name == "b_f" => t.data.fill(1.0),
                TensorRole::Bias => {}
            }
        }
        Ok(p)
    }

    pub fn kind(&self) -> LayerKind {
        match &self.extras {
            LayerExtras::None => LayerKind::Plain,
            LayerExtras::Highway(_) => LayerKind::Highway,
            LayerExtras::Residual(r) => LayerKind::Residual {
                scaled: r.scaled,
                shortcut: r.shortcut.kind(),
            },
        }
    }

    pub fn spec(&self) -> LayerSpec {
        let (n, k, m) = self.core.dims();
        LayerSpec {
            kind: self.kind(),
            n,
            k,
            m,
        }
    }

    /// Runs the step matching this layer's kind. `c_below` is required for
    /// highway layers and ignored otherwise.
    pub fn step(
        &self,
        x: &Vector,
        prev: &CellState,
        c_below: Option<&Vector>,
    ) -> Result<(CellState, StepCache)> {
        match &self.extras {
            LayerExtras::None => plain_step(&self.core, x, prev),
            LayerExtras::Highway(hw) => {
                let c_below = c_below.ok_or_else(|| {
                    Error::dim("highway_step", "highway layer needs the lower layer's cell")
                })?;
                highway_step(&self.core, hw, x, prev, c_below)
            }
            LayerExtras::Residual(res) => residual_step(&self.core, res, x, prev),
        }
    }

    pub fn initial_state(&self) -> CellState {
        let (n, _, m) = self.core.dims();
        CellState::zeros(n, m)
    }
}

impl ParamSet for LayerParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.core.tensors();
        match &self.extras {
            LayerExtras::None => {}
            LayerExtras::Highway(hw) => out.extend([
                mat("w_xd", TensorRole::Weight, &hw.w_xd),
                vec_ref("p_cd_same", TensorRole::Peephole, &hw.p_cd_same),
                vec_ref("p_cd_below", TensorRole::Peephole, &hw.p_cd_below),
                vec_ref("b_d", TensorRole::Bias, &hw.b_d),
            ]),
            LayerExtras::Residual(res) => {
                if let Shortcut::Projection(w_h) = &res.shortcut {
                    out.push(mat("w_h", TensorRole::Weight, w_h));
                }
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = self.core.tensors_mut();
        match &mut self.extras {
            LayerExtras::None => {}
            LayerExtras::Highway(hw) => out.extend([
                mat_mut("w_xd", TensorRole::Weight, &mut hw.w_xd),
                vec_mut("p_cd_same", TensorRole::Peephole, &mut hw.p_cd_same),
                vec_mut("p_cd_below", TensorRole::Peephole, &mut hw.p_cd_below),
                vec_mut("b_d", TensorRole::Bias, &mut hw.b_d),
            ]),
            LayerExtras::Residual(res) => {
                if let Shortcut::Projection(w_h) = &mut res.shortcut {
                    out.push(mat_mut("w_h", TensorRole::Weight, w_h));
                }
            }
        }
        out
    }
}

/// Recurrent state of one layer: memory cell `c` (length n) and output `h`
/// (length m).
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub c: Vector,
    pub h: Vector,
}

impl CellState {
    pub fn zeros(n: usize, m: usize) -> Self {
        CellState {
            c: Vector::zeros(n),
            h: Vector::zeros(m),
        }
    }
}

/// Everything the reverse pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    spec: LayerSpec,
    pub x: Vector,
    pub c_prev: Vector,
    pub h_prev: Vector,
    pub c_below: Option<Vector>,
    pub i: Vector,
    pub f: Vector,
    /// tanh candidate.
    pub g: Vector,
    pub o: Vector,
    pub d: Option<Vector>,
    pub c: Vector,
    pub tanh_c: Vector,
    /// `o ⊙ tanh c` for plain/highway, `tanh c` for residual.
    pub r: Vector,
    /// Residual only: projection output `W_p r`.
    pub m: Option<Vector>,
    /// Residual only: output-space gate `ō`.
    pub gate_out: Option<Vector>,
    /// Residual only: shortcut term `s`.
    pub s: Option<Vector>,
    pub h: Vector,
}

impl StepCache {
    pub fn spec(&self) -> LayerSpec {
        self.spec
    }
}

/// Gradients flowing out of one step into its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBackward {
    pub d_x: Vector,
    pub d_h_prev: Vector,
    pub d_c_prev: Vector,
    /// Highway only: gradient into the lower layer's cell.
    pub d_c_below: Option<Vector>,
}

/// Area-weighted resampling of a length-`n` gate onto `m` outputs.
///
/// Output `j` covers `[j/m, (j+1)/m)` of the unit interval and averages the
/// cell gates whose intervals `[i/n, (i+1)/n)` overlap it, weighted by
/// overlap. Rows sum to one, so the result stays in (0, 1); for `n == m`
/// the map is the identity and values are copied exactly.
pub fn pool_gate(o: &[f64], m: usize) -> Vec<f64> {
    let n = o.len();
    if n == m {
        return o.to_vec();
    }
    let mut out = vec![0.0; m];
    for (j, q) in out.iter_mut().enumerate() {
        for_each_overlap(n, m, j, |i, w| *q += w * o[i]);
    }
    out
}

/// Transpose of [`pool_gate`]: scatters an output-space gradient back onto
/// the `n` cell gates.
pub fn pool_gate_backward(d_q: &[f64], n: usize) -> Vec<f64> {
    let m = d_q.len();
    if n == m {
        return d_q.to_vec();
    }
    let mut out = vec![0.0; n];
    for (j, &dq) in d_q.iter().enumerate() {
        for_each_overlap(n, m, j, |i, w| out[i] += w * dq);
    }
    out
}

fn for_each_overlap(n: usize, m: usize, j: usize, mut f: impl FnMut(usize, f64)) {
    // In units of 1/(n·m): output j spans [j·n, (j+1)·n), input i spans [i·m, (i+1)·m).
    let (lo, hi) = (j * n, (j + 1) * n);
    let first = lo / m;
    let last = (hi - 1) / m;
    for i in first..=last.min(n - 1) {
        let overlap = hi.min((i + 1) * m).saturating_sub(lo.max(i * m));
        if overlap > 0 {
            f(i, overlap as f64 / n as f64);
        }
    }
}

fn check_step_inputs(
    op: &'static str,
    core: &LstmCoreParams,
    x: &Vector,
    prev: &CellState,
) -> Result<(usize, usize, usize)> {
    let (n, k, m) = core.dims();
    if x.len() != k {
        return Err(Error::dim(op, format!("input has length {}, layer expects {k}", x.len())));
    }
    if prev.c.len() != n || prev.h.len() != m {
        return Err(Error::dim(
            op,
            format!(
                "previous state has c/h lengths {}/{}, layer expects {n}/{m}",
                prev.c.len(),
                prev.h.len()
            ),
        ));
    }
    Ok((n, k, m))
}

/// Pre-activation `W_x x + W_h h' + b`.
fn preact(w_x: &Matrix, x: &[f64], w_h: &Matrix, h_prev: &[f64], b: &Vector) -> Vec<f64> {
    let mut a = b.as_slice().to_vec();
    w_x.mul_acc(x, &mut a);
    w_h.mul_acc(h_prev, &mut a);
    a
}

struct CoreForward {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    d: Option<Vec<f64>>,
    c: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Gates, cell update and output gate; shared by every kind.
fn core_forward(
    core: &LstmCoreParams,
    x: &[f64],
    prev: &CellState,
    depth: Option<(&HighwayExtras, &[f64])>,
) -> CoreForward {
    let c_prev = prev.c.as_slice();
    let h_prev = prev.h.as_slice();

    let mut i = preact(&core.w_xi, x, &core.w_hi, h_prev, &core.b_i);
    let mut f = preact(&core.w_xf, x, &core.w_hf, h_prev, &core.b_f);
    let mut g = preact(&core.w_xc, x, &core.w_hc, h_prev, &core.b_c);
    for j in 0..i.len() {
        i[j] = sigmoid_scalar(i[j] + core.p_ci[j] * c_prev[j]);
        f[j] = sigmoid_scalar(f[j] + core.p_cf[j] * c_prev[j]);
        g[j] = g[j].tanh();
    }

    let d = depth.map(|(hw, c_below)| {
        let mut a = hw.b_d.as_slice().to_vec();
        hw.w_xd.mul_acc(x, &mut a);
        a.iter_mut()
            .enumerate()
            .for_each(|(j, v)| {
                *v = sigmoid_scalar(*v + hw.p_cd_same[j] * c_prev[j] + hw.p_cd_below[j] * c_below[j])
            });
        a
    });

    let mut c: Vec<f64> = (0..i.len()).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    if let (Some(d), Some((_, c_below))) = (&d, depth) {
        for j in 0..c.len() {
            c[j] += d[j] * c_below[j];
        }
    }

    let mut o = preact(&core.w_xo, x, &core.w_ho, h_prev, &core.b_o);
    for j in 0..o.len() {
        o[j] = sigmoid_scalar(o[j] + core.p_co[j] * c[j]);
    }
    let tanh_c = c.iter().map(|v| v.tanh()).collect();

    CoreForward {
        i,
        f,
        g,
        d,
        c,
        o,
        tanh_c,
    }
}

/// Plain peephole LSTM step with output projection.
pub fn plain_step(
    core: &LstmCoreParams,
    x: &Vector,
    prev: &CellState,
) -> Result<(CellState, StepCache)> {
    let (n, k, m) = check_step_inputs("plain_step", core, x, prev)?;
    let fw = core_forward(core, x.as_slice(), prev, None);
    projected_output(
        LayerSpec {
            kind: LayerKind::Plain,
            n,
            k,
            m,
        },
        core,
        x,
        prev,
        None,
        fw,
    )
}

/// LSTM step whose cell also receives the lower layer's cell through the
/// depth gate.
pub fn highway_step(
    core: &LstmCoreParams,
    extras: &HighwayExtras,
    x: &Vector,
    prev: &CellState,
    c_below: &Vector,
) -> Result<(CellState, StepCache)> {
    let (n, k, m) = check_step_inputs("highway_step", core, x, prev)?;
    if c_below.len() != n {
        return Err(Error::dim(
            "highway_step",
            format!("lower cell has length {}, layer has {n} cells", c_below.len()),
        ));
    }
    if extras.w_xd.shape() != (n, k) || extras.b_d.len() != n {
        return Err(Error::dim("highway_step", "depth-gate tensors do not match the core"));
    }
    let fw = core_forward(core, x.as_slice(), prev, Some((extras, c_below.as_slice())));
    projected_output(
        LayerSpec {
            kind: LayerKind::Highway,
            n,
            k,
            m,
        },
        core,
        x,
        prev,
        Some(c_below.clone()),
        fw,
    )
}

fn projected_output(
    spec: LayerSpec,
    core: &LstmCoreParams,
    x: &Vector,
    prev: &CellState,
    c_below: Option<Vector>,
    fw: CoreForward,
) -> Result<(CellState, StepCache)> {
    let r: Vec<f64> = fw.o.iter().zip(&fw.tanh_c).map(|(o, t)| o * t).collect();
    let mut h = vec![0.0; spec.m];
    core.w_p.mul_acc(&r, &mut h);
    let state = CellState {
        c: Vector::from(fw.c.clone()),
        h: Vector::from(h),
    };
    let cache = StepCache {
        spec,
        x: x.clone(),
        c_prev: prev.c.clone(),
        h_prev: prev.h.clone(),
        c_below,
        i: fw.i.into(),
        f: fw.f.into(),
        g: fw.g.into(),
        o: fw.o.into(),
        d: fw.d.map(Vector::from),
        c: fw.c.into(),
        tanh_c: fw.tanh_c.into(),
        r: r.into(),
        m: None,
        gate_out: None,
        s: None,
        h: state.h.clone(),
    };
    Ok((state, cache))
}

/// LSTM step with a spatial shortcut added to the projection output.
pub fn residual_step(
    core: &LstmCoreParams,
    extras: &ResidualExtras,
    x: &Vector,
    prev: &CellState,
) -> Result<(CellState, StepCache)> {
    let (n, k, m) = check_step_inputs("residual_step", core, x, prev)?;
    let s: Vec<f64> = match &extras.shortcut {
        Shortcut::Identity => {
            if k != m {
                return Err(Error::Config(format!(
                    "identity shortcut needs input dim == output dim, got k={k} m={m}"
                )));
            }
            x.as_slice().to_vec()
        }
        Shortcut::Projection(w_h) => {
            if w_h.shape() != (m, k) {
                return Err(Error::dim(
                    "residual_step",
                    format!("W_h is {}x{}, expected {m}x{k}", w_h.rows(), w_h.cols()),
                ));
            }
            let mut s = vec![0.0; m];
            w_h.mul_acc(x.as_slice(), &mut s);
            s
        }
    };

    let fw = core_forward(core, x.as_slice(), prev, None);
    let r = fw.tanh_c.clone();
    let mut proj = vec![0.0; m];
    core.w_p.mul_acc(&r, &mut proj);
    let q = pool_gate(&fw.o, m);
    let h: Vec<f64> = (0..m)
        .map(|j| {
            if extras.scaled {
                q[j] * (proj[j] + s[j])
            } else {
                q[j] * proj[j] + s[j]
            }
        })
        .collect();

    let state = CellState {
        c: Vector::from(fw.c.clone()),
        h: Vector::from(h),
    };
    let cache = StepCache {
        spec: LayerSpec {
            kind: LayerKind::Residual {
                scaled: extras.scaled,
                shortcut: extras.shortcut.kind(),
            },
            n,
            k,
            m,
        },
        x: x.clone(),
        c_prev: prev.c.clone(),
        h_prev: prev.h.clone(),
        c_below: None,
        i: fw.i.into(),
        f: fw.f.into(),
        g: fw.g.into(),
        o: fw.o.into(),
        d: None,
        c: fw.c.into(),
        tanh_c: fw.tanh_c.into(),
        r: r.into(),
        m: Some(proj.into()),
        gate_out: Some(q.into()),
        s: Some(s.into()),
        h: state.h.clone(),
    };
    Ok((state, cache))
}

/// Exact reverse pass of one step.
///
/// `d_h` is ∂L/∂h for this step's output and `d_c_in` the gradient reaching
/// this step's cell from outside (the next timestep, and for highway stacks
/// the layer above). Parameter gradients are added into `grads`, which must
/// mirror `params`.
pub fn step_backward(
    params: &LayerParams,
    cache: &StepCache,
    d_h: &Vector,
    d_c_in: &Vector,
    grads: &mut LayerParams,
) -> Result<StepBackward> {
    let spec = params.spec();
    if spec != cache.spec {
        return Err(Error::CacheMismatch(format!(
            "cache recorded {:?}, params are {:?}",
            cache.spec, spec
        )));
    }
    if grads.spec() != spec {
        return Err(Error::CacheMismatch(format!(
            "gradient buffer is {:?}, params are {:?}",
            grads.spec(),
            spec
        )));
    }
    let LayerSpec { n, k, m, .. } = spec;
    if d_h.len() != m || d_c_in.len() != n {
        return Err(Error::dim(
            "step_backward",
            format!("upstream d_h/d_c have lengths {}/{}, expected {m}/{n}", d_h.len(), d_c_in.len()),
        ));
    }

    let core = &params.core;
    let x = cache.x.as_slice();
    let h_prev = cache.h_prev.as_slice();
    let c_prev = cache.c_prev.as_slice();
    let (i, f, g, o, c, tc) = (
        cache.i.as_slice(),
        cache.f.as_slice(),
        cache.g.as_slice(),
        cache.o.as_slice(),
        cache.c.as_slice(),
        cache.tanh_c.as_slice(),
    );

    let mut d_x = vec![0.0; k];
    let mut d_h_prev = vec![0.0; m];

    // Output stage: yields ∂L/∂o and ∂L/∂tanh(c).
    let (d_o, d_tc) = match (&params.extras, &mut grads.extras) {
        (LayerExtras::Residual(res), LayerExtras::Residual(res_grad)) => {
            let proj = cache.m.as_ref().expect("residual cache").as_slice();
            let q = cache.gate_out.as_ref().expect("residual cache").as_slice();
            let s = cache.s.as_ref().expect("residual cache").as_slice();
            let dh = d_h.as_slice();
            let mut d_q = vec![0.0; m];
            let mut d_m = vec![0.0; m];
            let mut d_s = vec![0.0; m];
            for j in 0..m {
                if res.scaled {
                    d_q[j] = dh[j] * (proj[j] + s[j]);
                    d_m[j] = dh[j] * q[j];
                    d_s[j] = dh[j] * q[j];
                } else {
                    d_q[j] = dh[j] * proj[j];
                    d_m[j] = dh[j] * q[j];
                    d_s[j] = dh[j];
                }
            }
            match (&res.shortcut, &mut res_grad.shortcut) {
                (Shortcut::Identity, _) => {
                    for j in 0..k {
                        d_x[j] += d_s[j];
                    }
                }
                (Shortcut::Projection(w_h), Shortcut::Projection(gw_h)) => {
                    gw_h.outer_acc(&d_s, x);
                    w_h.tr_mul_acc(&d_s, &mut d_x);
                }
                _ => unreachable!("spec equality guarantees matching shortcuts"),
            }
            grads.core.w_p.outer_acc(&d_m, cache.r.as_slice());
            let mut d_r = vec![0.0; n];
            core.w_p.tr_mul_acc(&d_m, &mut d_r);
            (pool_gate_backward(&d_q, n), d_r)
        }
        _ => {
            grads.core.w_p.outer_acc(d_h.as_slice(), cache.r.as_slice());
            let mut d_r = vec![0.0; n];
            core.w_p.tr_mul_acc(d_h.as_slice(), &mut d_r);
            let d_o = (0..n).map(|j| d_r[j] * tc[j]).collect::<Vec<_>>();
            let d_tc = (0..n).map(|j| d_r[j] * o[j]).collect::<Vec<_>>();
            (d_o, d_tc)
        }
    };

    // Output gate, which peeks at the new cell.
    let da_o: Vec<f64> = (0..n).map(|j| d_o[j] * o[j] * (1.0 - o[j])).collect();
    let d_c: Vec<f64> = (0..n)
        .map(|j| d_c_in[j] + d_tc[j] * (1.0 - tc[j] * tc[j]) + da_o[j] * core.p_co[j])
        .collect();

    // Cell update.
    let mut d_c_prev: Vec<f64> = (0..n).map(|j| d_c[j] * f[j]).collect();
    let da_i: Vec<f64> = (0..n).map(|j| d_c[j] * g[j] * i[j] * (1.0 - i[j])).collect();
    let da_f: Vec<f64> = (0..n).map(|j| d_c[j] * c_prev[j] * f[j] * (1.0 - f[j])).collect();
    let da_g: Vec<f64> = (0..n).map(|j| d_c[j] * i[j] * (1.0 - g[j] * g[j])).collect();
    for j in 0..n {
        d_c_prev[j] += da_i[j] * core.p_ci[j] + da_f[j] * core.p_cf[j];
    }

    let gc = &mut grads.core;
    for (a, gw_x, gw_h, gb, w_x, w_h) in [
        (&da_i, &mut gc.w_xi, &mut gc.w_hi, &mut gc.b_i, &core.w_xi, &core.w_hi),
        (&da_f, &mut gc.w_xf, &mut gc.w_hf, &mut gc.b_f, &core.w_xf, &core.w_hf),
        (&da_g, &mut gc.w_xc, &mut gc.w_hc, &mut gc.b_c, &core.w_xc, &core.w_hc),
        (&da_o, &mut gc.w_xo, &mut gc.w_ho, &mut gc.b_o, &core.w_xo, &core.w_ho),
    ] {
        gw_x.outer_acc(a, x);
        gw_h.outer_acc(a, h_prev);
        for (b, v) in gb.as_mut_slice().iter_mut().zip(a.iter()) {
            *b += v;
        }
        w_x.tr_mul_acc(a, &mut d_x);
        w_h.tr_mul_acc(a, &mut d_h_prev);
    }
    for j in 0..n {
        gc.p_ci[j] += da_i[j] * c_prev[j];
        gc.p_cf[j] += da_f[j] * c_prev[j];
        gc.p_co[j] += da_o[j] * c[j];
    }

    let d_c_below = match (&params.extras, &mut grads.extras) {
        (LayerExtras::Highway(hw), LayerExtras::Highway(hw_grad)) => {
            let d = cache.d.as_ref().expect("highway cache").as_slice();
            let c_below = cache.c_below.as_ref().expect("highway cache").as_slice();
            let da_d: Vec<f64> = (0..n).map(|j| d_c[j] * c_below[j] * d[j] * (1.0 - d[j])).collect();
            let mut d_cb = vec![0.0; n];
            for j in 0..n {
                d_cb[j] = d_c[j] * d[j] + da_d[j] * hw.p_cd_below[j];
                d_c_prev[j] += da_d[j] * hw.p_cd_same[j];
                hw_grad.p_cd_same[j] += da_d[j] * c_prev[j];
                hw_grad.p_cd_below[j] += da_d[j] * c_below[j];
                hw_grad.b_d[j] += da_d[j];
            }
            hw_grad.w_xd.outer_acc(&da_d, x);
            hw.w_xd.tr_mul_acc(&da_d, &mut d_x);
            Some(Vector::from(d_cb))
        }
        _ => None,
    };

    Ok(StepBackward {
        d_x: d_x.into(),
        d_h_prev: d_h_prev.into(),
        d_c_prev: d_c_prev.into(),
        d_c_below,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn v(x: &[f64]) -> Vector {
        Vector::from(x.to_vec())
    }

    fn scalar_core() -> LstmCoreParams {
        let mut core = LstmCoreParams::zeros(1, 1, 1);
        core.w_p = Matrix::identity(1);
        core
    }

    #[test]
    fn plain_scalar_trace() {
        let prev = CellState {
            c: v(&[1.0]),
            h: v(&[0.0]),
        };
        let (state, cache) = plain_step(&scalar_core(), &v(&[0.0]), &prev).unwrap();
        assert_eq!(cache.i[0], 0.5);
        assert_eq!(cache.f[0], 0.5);
        assert_eq!(cache.o[0], 0.5);
        assert_eq!(state.c[0], 0.5);
        assert!((state.h[0] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((state.h[0] - 0.231059).abs() < 1e-6);
    }

    #[test]
    fn all_zero_layer_is_a_fixed_point() {
        let core = LstmCoreParams::zeros(3, 2, 2);
        let (state, _) = plain_step(&core, &v(&[0.7, -1.3]), &CellState::zeros(3, 2)).unwrap();
        assert_eq!(state, CellState::zeros(3, 2));
    }

    #[test]
    fn open_forget_gate_preserves_memory() {
        let mut rng = seeded(5);
        let spec = LayerSpec {
            kind: LayerKind::Plain,
            n: 3,
            k: 2,
            m: 2,
        };
        let mut layer = LayerParams::init(spec, 0.5, &mut rng).unwrap();
        layer.core.b_f = Vector::filled(3, 40.0);
        layer.core.b_i = Vector::filled(3, -40.0);
        let prev = CellState {
            c: v(&[0.3, -0.8, 1.1]),
            h: v(&[0.2, 0.1]),
        };
        let (state, _) = layer.step(&v(&[0.5, -0.5]), &prev, None).unwrap();
        for j in 0..3 {
            assert!((state.c[j] - prev.c[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn highway_scalar_trace() {
        let core = scalar_core();
        let hw = HighwayExtras::zeros(1, 1);
        let prev = CellState {
            c: v(&[1.0]),
            h: v(&[0.0]),
        };
        let (state, cache) = highway_step(&core, &hw, &v(&[0.0]), &prev, &v(&[2.0])).unwrap();
        assert_eq!(cache.d.as_ref().unwrap()[0], 0.5);
        assert_eq!(state.c[0], 1.5);
        assert!((state.h[0] - 0.5 * 1.5f64.tanh()).abs() < 1e-15);
        assert!((state.h[0] - 0.452574).abs() < 1e-6);
    }

    fn random_highway(seed: u64) -> LayerParams {
        let spec = LayerSpec {
            kind: LayerKind::Highway,
            n: 3,
            k: 2,
            m: 2,
        };
        LayerParams::init(spec, 0.5, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn closed_depth_gate_degenerates_to_plain() {
        let mut layer = random_highway(3);
        if let LayerExtras::Highway(hw) = &mut layer.extras {
            hw.b_d = Vector::filled(3, -40.0);
        }
        let prev = CellState {
            c: v(&[0.4, -0.2, 0.9]),
            h: v(&[0.3, -0.6]),
        };
        let x = v(&[1.0, -0.4]);
        let (hw_state, _) = layer.step(&x, &prev, Some(&v(&[0.5, 0.5, -0.5]))).unwrap();
        let (plain_state, _) = plain_step(&layer.core, &x, &prev).unwrap();
        for j in 0..3 {
            assert!((hw_state.c[j] - plain_state.c[j]).abs() < 1e-12);
        }
        for j in 0..2 {
            assert!((hw_state.h[j] - plain_state.h[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn open_depth_gate_copies_lower_cell() {
        let mut layer = random_highway(4);
        layer.core.b_f = Vector::filled(3, -40.0);
        layer.core.b_i = Vector::filled(3, -40.0);
        if let LayerExtras::Highway(hw) = &mut layer.extras {
            hw.b_d = Vector::filled(3, 40.0);
        }
        let c_below = v(&[0.5, -1.5, 0.25]);
        let prev = CellState {
            c: v(&[0.4, -0.2, 0.9]),
            h: v(&[0.3, -0.6]),
        };
        let (state, _) = layer.step(&v(&[1.0, -0.4]), &prev, Some(&c_below)).unwrap();
        for j in 0..3 {
            assert!((state.c[j] - c_below[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn highway_rejects_wrong_lower_cell() {
        let layer = random_highway(1);
        let err = layer
            .step(&v(&[1.0, 0.0]), &CellState::zeros(3, 2), Some(&v(&[1.0])))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(layer.step(&v(&[1.0, 0.0]), &CellState::zeros(3, 2), None).is_err());
    }

    fn scalar_residual(scaled: bool) -> (LstmCoreParams, ResidualExtras) {
        (
            LstmCoreParams::zeros(1, 1, 1),
            ResidualExtras {
                shortcut: Shortcut::Identity,
                scaled,
            },
        )
    }

    #[test]
    fn residual_scalar_traces() {
        let (core, res) = scalar_residual(true);
        let (state, cache) = residual_step(&core, &res, &v(&[0.8]), &CellState::zeros(1, 1)).unwrap();
        assert_eq!(cache.o[0], 0.5);
        assert!((state.h[0] - 0.4).abs() < 1e-15);

        let (core, res) = scalar_residual(false);
        let (state, _) = residual_step(&core, &res, &v(&[0.8]), &CellState::zeros(1, 1)).unwrap();
        assert!((state.h[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn identity_shortcut_matches_explicit_identity_bitwise() {
        let spec = LayerSpec {
            kind: LayerKind::Residual {
                scaled: true,
                shortcut: ShortcutKind::Identity,
            },
            n: 3,
            k: 2,
            m: 2,
        };
        let layer = LayerParams::init(spec, 0.5, &mut seeded(8)).unwrap();
        let mut explicit = layer.clone();
        explicit.extras = LayerExtras::Residual(ResidualExtras {
            shortcut: Shortcut::Projection(Matrix::identity(2)),
            scaled: true,
        });
        let prev = CellState {
            c: v(&[0.1, 0.2, -0.3]),
            h: v(&[-0.5, 0.25]),
        };
        let x = v(&[0.9, -1.7]);
        let (a, _) = layer.step(&x, &prev, None).unwrap();
        let (b, _) = explicit.step(&x, &prev, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_shortcut_requires_matching_dims() {
        let spec = LayerSpec {
            kind: LayerKind::Residual {
                scaled: true,
                shortcut: ShortcutKind::Identity,
            },
            n: 3,
            k: 4,
            m: 2,
        };
        assert!(matches!(LayerParams::zeros(spec), Err(Error::Config(_))));
        let core = LstmCoreParams::zeros(3, 4, 2);
        let res = ResidualExtras {
            shortcut: Shortcut::Identity,
            scaled: true,
        };
        let err = residual_step(&core, &res, &Vector::zeros(4), &CellState::zeros(3, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn pooled_gate_rows_sum_to_one() {
        // n=3 onto m=2: rows [2/3, 1/3, 0] and [0, 1/3, 2/3].
        let q = pool_gate(&[0.3, 0.6, 0.9], 2);
        assert!((q[0] - (0.2 + 0.2)).abs() < 1e-15);
        assert!((q[1] - (0.2 + 0.6)).abs() < 1e-15);
        let ones = pool_gate(&[1.0; 7], 3);
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let ones = pool_gate(&[1.0; 2], 5);
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-15));
        // Halving: each output averages two adjacent cells.
        assert_eq!(pool_gate(&[0.2, 0.4, 0.6, 0.8], 2), vec![0.30000000000000004, 0.7]);
    }

    #[test]
    fn pooled_gate_backward_is_the_transpose() {
        for (n, m) in [(3, 2), (5, 3), (2, 5), (4, 4), (7, 3)] {
            let o: Vec<f64> = (0..n).map(|i| 0.1 + 0.07 * i as f64).collect();
            let dq: Vec<f64> = (0..m).map(|j| 1.0 - 0.3 * j as f64).collect();
            let lhs: f64 = pool_gate(&o, m).iter().zip(&dq).map(|(a, b)| a * b).sum();
            let rhs: f64 = pool_gate_backward(&dq, n).iter().zip(&o).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-14, "n={n} m={m}");
        }
    }

    #[test]
    fn tensor_shapes_match_constructed_layers() {
        let kinds = [
            LayerKind::Plain,
            LayerKind::Highway,
            LayerKind::Residual {
                scaled: true,
                shortcut: ShortcutKind::Projection,
            },
            LayerKind::Residual {
                scaled: false,
                shortcut: ShortcutKind::Identity,
            },
        ];
        for kind in kinds {
            let spec = LayerSpec { kind, n: 5, k: 3, m: 3 };
            let layer = LayerParams::zeros(spec).unwrap();
            let declared: Vec<_> = spec
                .tensor_shapes()
                .into_iter()
                .map(|(name, _, shape)| (name.to_string(), shape))
                .collect();
            assert_eq!(layer.signature(), declared);
            assert_eq!(layer.num_scalars(), spec.num_params());
            assert_eq!(layer.spec(), spec);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = random_highway(12);
        let prev = CellState {
            c: v(&[0.1, 0.2, -0.3]),
            h: v(&[-0.5, 0.25]),
        };
        let (_, cache) = layer.step(&v(&[0.3, 0.1]), &prev, Some(&v(&[1.0, -1.0, 0.5]))).unwrap();
        let mut grads = layer.zeros_like();
        let back = step_backward(&layer, &cache, &Vector::zeros(2), &Vector::zeros(3), &mut grads).unwrap();
        assert!(grads.tensors().iter().all(|t| t.data.iter().all(|&g| g == 0.0)));
        assert!(back.d_x.iter().chain(back.d_h_prev.iter()).all(|&g| g == 0.0));
        assert!(back.d_c_prev.iter().all(|&g| g == 0.0));
        assert!(back.d_c_below.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let layer = random_highway(1);
        let (_, cache) = plain_step(&layer.core, &v(&[0.3, 0.1]), &CellState::zeros(3, 2)).unwrap();
        let mut grads = layer.zeros_like();
        let err = step_backward(&layer, &cache, &Vector::zeros(2), &Vector::zeros(3), &mut grads).unwrap_err();
        assert!(matches!(err, Error::CacheMismatch(_)));
    }
}
