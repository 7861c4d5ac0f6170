//! Query-key-context (tri-) attention.
//!
//! Every query `q` is scored against every (key, context) pair, giving an
//! `I x J` grid `F(q, k_i, c_j)`. The grid is normalised with one softmax
//! over all `I * J` cells, each cell carries a contextual value
//! `v^c_(i,j)` built from `v_i` and `c_j`, and the output embedding is
//! `q_new^c = sum_ij alpha_ij v^c_(i,j)`.
//!
//! Grids and weights are vectorised with `m = i * J + j` (0-based), the same
//! order [`mode3_matricize`] uses for the fibers of the contextual values, so
//! `q_new^c = V^c alpha^c` holds entry for entry.

use serde::{Deserialize, Serialize};

use crate::bi::{softmax_backward, softmax_in_place};
use crate::error::{invalid, shape, Error, Result};
use crate::init::{uniform_matrix, uniform_tensor, Rng64};
use crate::tensor::{
    axpy, dot, identity_tensor, mode3_matricize, n_mode_product_matrix, Matrix, Tensor3, Vector,
};

/// Largest `D` for which the full `D x D x D` trilinear weight is allowed.
pub const MAX_FULL_TRILINEAR_DIM: usize = 32;

/// Contextual relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriVariant {
    /// `p^T tanh(W q + U k_i + H c_j)`
    #[serde(rename = "tadd")]
    TAdd,
    /// `<q, k_i, c_j>`
    Tdp,
    /// `<q, k_i, c_j> / sqrt(D)`
    Tsdp,
    /// `W x1 q^T x2 k_i^T x3 c_j^T` with a full weight tensor.
    TriliFull,
    /// `<W q, U k_i, H c_j>`
    TriliEcon,
}

impl TriVariant {
    pub const ALL: [TriVariant; 5] = [
        TriVariant::TAdd,
        TriVariant::Tdp,
        TriVariant::Tsdp,
        TriVariant::TriliFull,
        TriVariant::TriliEcon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TriVariant::TAdd => "tadd",
            TriVariant::Tdp => "tdp",
            TriVariant::Tsdp => "tsdp",
            TriVariant::TriliFull => "trili-full",
            TriVariant::TriliEcon => "trili-econ",
        }
    }

    /// The query-key score this variant degrades to without context.
    pub fn bi_counterpart(self) -> crate::bi::BiVariant {
        use crate::bi::BiVariant;
        match self {
            TriVariant::TAdd => BiVariant::Add,
            TriVariant::Tdp => BiVariant::Dp,
            TriVariant::Tsdp => BiVariant::Sdp,
            TriVariant::TriliFull | TriVariant::TriliEcon => BiVariant::Bili,
        }
    }

    /// Value integration that matches the score family.
    pub fn default_integration(self) -> ValueIntegration {
        match self {
            TriVariant::TAdd => ValueIntegration::Additive,
            TriVariant::Tdp | TriVariant::Tsdp => ValueIntegration::Multiplicative,
            TriVariant::TriliFull | TriVariant::TriliEcon => ValueIntegration::Bilinear,
        }
    }
}

impl std::fmt::Display for TriVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TriVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TriVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }
}

/// How values are fused with context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueIntegration {
    /// `v_i + c_j`
    #[serde(rename = "add", alias = "additive")]
    Additive,
    /// `v_i * c_j` (Hadamard)
    #[serde(rename = "mul", alias = "multiplicative")]
    Multiplicative,
    /// `(U' v_i) * (H' c_j)`
    #[serde(rename = "bili", alias = "bilinear")]
    Bilinear,
}

impl ValueIntegration {
    pub const ALL: [ValueIntegration; 3] = [
        ValueIntegration::Additive,
        ValueIntegration::Multiplicative,
        ValueIntegration::Bilinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ValueIntegration::Additive => "add",
            ValueIntegration::Multiplicative => "mul",
            ValueIntegration::Bilinear => "bili",
        }
    }
}

impl std::fmt::Display for ValueIntegration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ValueIntegration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ValueIntegration::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown integration {s:?}")))
    }
}

/// Learnable parameters of a tri-attention layer.
///
/// * `TAdd`: `w`, `u`, `h` (`D' x D`) and `p` (`D'`).
/// * `TriliEcon`: `w`, `u`, `h` (`D x D`).
/// * `TriliFull`: `wt` (`D x D x D`, indexed query, key, context).
/// * `Bilinear` integration: `u_val`, `h_val` (`D x D`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriParams {
    pub w: Option<Matrix>,
    pub u: Option<Matrix>,
    pub h: Option<Matrix>,
    pub p: Option<Vector>,
    pub wt: Option<Tensor3>,
    pub u_val: Option<Matrix>,
    pub h_val: Option<Matrix>,
}

fn need<'a, T>(x: &'a Option<T>, what: &str) -> Result<&'a T> {
    x.as_ref().ok_or_else(|| invalid(format!("missing parameter {what}")))
}

fn need_shape(m: &Matrix, what: &str, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(shape(format!(
            "{what} is {}x{}, expected {}x{}",
            m.rows(),
            m.cols(),
            want.0,
            want.1
        )));
    }
    Ok(())
}

impl TriParams {
    pub fn none() -> Self {
        Self::default()
    }

    /// Fan-in uniform initialisation (zero `p`) of every block the pair needs.
    /// Hidden widths default to `D`.
    pub fn init(
        variant: TriVariant,
        integration: ValueIntegration,
        d: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let mut p = Self::none();
        match variant {
            TriVariant::TAdd => {
                p.w = Some(uniform_matrix(rng, d, d, d));
                p.u = Some(uniform_matrix(rng, d, d, d));
                p.h = Some(uniform_matrix(rng, d, d, d));
                p.p = Some(Vector::zeros(d));
            }
            TriVariant::TriliEcon => {
                p.w = Some(uniform_matrix(rng, d, d, d));
                p.u = Some(uniform_matrix(rng, d, d, d));
                p.h = Some(uniform_matrix(rng, d, d, d));
            }
            TriVariant::TriliFull => {
                check_full_dim(d)?;
                p.wt = Some(uniform_tensor(rng, [d, d, d], d));
            }
            TriVariant::Tdp | TriVariant::Tsdp => {}
        }
        if integration == ValueIntegration::Bilinear {
            p.u_val = Some(uniform_matrix(rng, d, d, d));
            p.h_val = Some(uniform_matrix(rng, d, d, d));
        }
        Ok(p)
    }

    pub fn validate(&self, variant: TriVariant, integration: ValueIntegration, d: usize) -> Result<()> {
        match variant {
            TriVariant::TAdd => {
                let p = need(&self.p, "p")?;
                let hidden = p.len();
                need_shape(need(&self.w, "W")?, "W", (hidden, d))?;
                need_shape(need(&self.u, "U")?, "U", (hidden, d))?;
                need_shape(need(&self.h, "H")?, "H", (hidden, d))?;
            }
            TriVariant::TriliEcon => {
                let w = need(&self.w, "W")?;
                let hidden = w.rows();
                need_shape(w, "W", (hidden, d))?;
                need_shape(need(&self.u, "U")?, "U", (hidden, d))?;
                need_shape(need(&self.h, "H")?, "H", (hidden, d))?;
            }
            TriVariant::TriliFull => {
                check_full_dim(d)?;
                let wt = need(&self.wt, "Wt")?;
                if wt.dims() != [d, d, d] {
                    return Err(shape(format!("Wt is {:?}, expected [{d}, {d}, {d}]", wt.dims())));
                }
            }
            TriVariant::Tdp | TriVariant::Tsdp => {}
        }
        if integration == ValueIntegration::Bilinear {
            need_shape(need(&self.u_val, "U'")?, "U'", (d, d))?;
            need_shape(need(&self.h_val, "H'")?, "H'", (d, d))?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let zm = |m: &Option<Matrix>| m.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()));
        Self {
            w: zm(&self.w),
            u: zm(&self.u),
            h: zm(&self.h),
            p: self.p.as_ref().map(|v| Vector::zeros(v.len())),
            wt: self.wt.as_ref().map(|t| Tensor3::zeros(t.dims())),
            u_val: zm(&self.u_val),
            h_val: zm(&self.h_val),
        }
    }

    /// Named flat views of every present block, in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = Vec::new();
        let mats = [("W", &self.w), ("U", &self.u), ("H", &self.h)];
        for (name, m) in mats {
            if let Some(m) = m {
                out.push((name, m.as_slice()));
            }
        }
        if let Some(p) = &self.p {
            out.push(("p", p.as_slice()));
        }
        if let Some(t) = &self.wt {
            out.push(("Wt", t.as_slice()));
        }
        if let Some(m) = &self.u_val {
            out.push(("U'", m.as_slice()));
        }
        if let Some(m) = &self.h_val {
            out.push(("H'", m.as_slice()));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::new();
        if let Some(m) = &mut self.w {
            out.push(("W", m.as_mut_slice()));
        }
        if let Some(m) = &mut self.u {
            out.push(("U", m.as_mut_slice()));
        }
        if let Some(m) = &mut self.h {
            out.push(("H", m.as_mut_slice()));
        }
        if let Some(p) = &mut self.p {
            out.push(("p", p.as_mut_slice()));
        }
        if let Some(t) = &mut self.wt {
            out.push(("Wt", t.as_mut_slice()));
        }
        if let Some(m) = &mut self.u_val {
            out.push(("U'", m.as_mut_slice()));
        }
        if let Some(m) = &mut self.h_val {
            out.push(("H'", m.as_mut_slice()));
        }
        out
    }
}

fn check_full_dim(d: usize) -> Result<()> {
    if d > MAX_FULL_TRILINEAR_DIM {
        return Err(Error::Capacity(format!(
            "full trilinear weight needs D <= {MAX_FULL_TRILINEAR_DIM}, got D = {d}"
        )));
    }
    Ok(())
}

/// Unnormalised scores `F(q, k_i, c_j)` for one query, row-major `I x J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!("score grid {rows}x{cols} with {} entries", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Softmax-normalised grid `A^c`; `as_slice` is `vec(A^c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnWeights {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttnWeights {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Keys, values and context prepared once and shared by many queries.
pub(crate) struct TriPlan<'a> {
    variant: TriVariant,
    integration: ValueIntegration,
    params: &'a TriParams,
    d: usize,
    keys: &'a [Vec<f64>],
    values: &'a [Vec<f64>],
    ctx: &'a [Vec<f64>],
    /// `U k_i` (TAdd, TriliEcon).
    key_proj: Vec<Vec<f64>>,
    /// `H c_j` (TAdd, TriliEcon).
    ctx_proj: Vec<Vec<f64>>,
    /// `U' v_i` (Bilinear integration).
    val_proj: Vec<Vec<f64>>,
    /// `H' c_j` (Bilinear integration).
    ctx_val_proj: Vec<Vec<f64>>,
}

pub(crate) struct TriQuery {
    /// `vec(A^c)`.
    pub alpha: Vec<f64>,
    /// `W q` (TAdd, TriliEcon).
    query_proj: Vec<f64>,
    /// `tanh(W q + U k_i + H c_j)` at `(i * J + j) * D' + r` (TAdd).
    hidden: Vec<f64>,
    /// `Wt x1 q^T` as a `D x D` slab, `[b * D + c]` (TriliFull).
    slab: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) struct TriAccum {
    pub d_keys: Vec<Vec<f64>>,
    pub d_values: Vec<Vec<f64>>,
    pub d_ctx: Vec<Vec<f64>>,
    d_key_proj: Vec<Vec<f64>>,
    d_ctx_proj: Vec<Vec<f64>>,
    d_val_proj: Vec<Vec<f64>>,
    d_ctx_val_proj: Vec<Vec<f64>>,
    pub d_params: TriParams,
}

fn zeros_like_cols(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    cols.iter().map(|c| vec![0.0; c.len()]).collect()
}

impl<'a> TriPlan<'a> {
    pub fn new(
        variant: TriVariant,
        integration: ValueIntegration,
        keys: &'a [Vec<f64>],
        values: &'a [Vec<f64>],
        ctx: &'a [Vec<f64>],
        params: &'a TriParams,
        d: usize,
    ) -> Result<Self> {
        if keys.is_empty() || ctx.is_empty() {
            return Err(invalid("tri-attention needs at least one key and one context vector"));
        }
        if keys.len() != values.len() {
            return Err(shape(format!("{} keys but {} values", keys.len(), values.len())));
        }
        if keys.iter().chain(values).chain(ctx).any(|c| c.len() != d) {
            return Err(shape(format!("key, value and context columns must have length {d}")));
        }
        params.validate(variant, integration, d)?;
        let project = |m: &Option<Matrix>, cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let m = m.as_ref().expect("validated");
            cols.iter().map(|c| m.matvec_unchecked(c)).collect()
        };
        let (key_proj, ctx_proj) = match variant {
            TriVariant::TAdd | TriVariant::TriliEcon => {
                (project(&params.u, keys), project(&params.h, ctx))
            }
            _ => (Vec::new(), Vec::new()),
        };
        let (val_proj, ctx_val_proj) = match integration {
            ValueIntegration::Bilinear => (project(&params.u_val, values), project(&params.h_val, ctx)),
            _ => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            variant,
            integration,
            params,
            d,
            keys,
            values,
            ctx,
            key_proj,
            ctx_proj,
            val_proj,
            ctx_val_proj,
        })
    }

    fn scale(&self) -> f64 {
        match self.variant {
            TriVariant::Tsdp => 1.0 / (self.d as f64).sqrt(),
            _ => 1.0,
        }
    }

    /// Fills `scores` (length `I * J`) and returns the cached intermediates.
    fn score_into(&self, q: &[f64], scores: &mut [f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let nj = self.ctx.len();
        let mut query_proj = Vec::new();
        let mut hidden = Vec::new();
        let mut slab = Vec::new();
        match self.variant {
            TriVariant::Tdp | TriVariant::Tsdp => {
                let s = self.scale();
                let mut t = vec![0.0; self.d];
                for (i, k) in self.keys.iter().enumerate() {
                    for ((ti, a), b) in t.iter_mut().zip(q).zip(k) {
                        *ti = a * b;
                    }
                    for (j, c) in self.ctx.iter().enumerate() {
                        scores[i * nj + j] = s * dot(&t, c);
                    }
                }
            }
            TriVariant::TriliEcon => {
                query_proj = self.params.w.as_ref().expect("validated").matvec_unchecked(q);
                let mut t = vec![0.0; query_proj.len()];
                for (i, uk) in self.key_proj.iter().enumerate() {
                    for ((ti, a), b) in t.iter_mut().zip(&query_proj).zip(uk) {
                        *ti = a * b;
                    }
                    for (j, hc) in self.ctx_proj.iter().enumerate() {
                        scores[i * nj + j] = dot(&t, hc);
                    }
                }
            }
            TriVariant::TriliFull => {
                let d = self.d;
                let wt = self.params.wt.as_ref().expect("validated").as_slice();
                slab = vec![0.0; d * d];
                for (a, &qa) in q.iter().enumerate() {
                    axpy(qa, &wt[a * d * d..(a + 1) * d * d], &mut slab);
                }
                let mut r = vec![0.0; d];
                for (i, k) in self.keys.iter().enumerate() {
                    r.iter_mut().for_each(|x| *x = 0.0);
                    for (b, &kb) in k.iter().enumerate() {
                        axpy(kb, &slab[b * d..(b + 1) * d], &mut r);
                    }
                    for (j, c) in self.ctx.iter().enumerate() {
                        scores[i * nj + j] = dot(&r, c);
                    }
                }
            }
            TriVariant::TAdd => {
                query_proj = self.params.w.as_ref().expect("validated").matvec_unchecked(q);
                let p = self.params.p.as_ref().expect("validated").as_slice();
                let width = p.len();
                hidden = vec![0.0; self.keys.len() * nj * width];
                let mut base = vec![0.0; width];
                for (i, uk) in self.key_proj.iter().enumerate() {
                    for ((b, x), y) in base.iter_mut().zip(&query_proj).zip(uk) {
                        *b = x + y;
                    }
                    for (j, hc) in self.ctx_proj.iter().enumerate() {
                        let cell = i * nj + j;
                        let h = &mut hidden[cell * width..(cell + 1) * width];
                        let mut s = 0.0;
                        for r in 0..width {
                            let t = (base[r] + hc[r]).tanh();
                            h[r] = t;
                            s += p[r] * t;
                        }
                        scores[cell] = s;
                    }
                }
            }
        }
        (query_proj, hidden, slab)
    }

    pub fn scores(&self, q: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.keys.len() * self.ctx.len()];
        self.score_into(q, &mut s);
        s
    }

    pub fn forward(&self, q: &[f64]) -> TriQuery {
        let (ni, nj) = (self.keys.len(), self.ctx.len());
        let mut alpha = vec![0.0; ni * nj];
        let (query_proj, hidden, slab) = self.score_into(q, &mut alpha);
        softmax_in_place(&mut alpha);
        let out = self.combine(&alpha);
        TriQuery {
            alpha,
            query_proj,
            hidden,
            slab,
            out,
        }
    }

    /// `sum_ij alpha_ij v^c_(i,j)`, factorised per integration.
    fn combine(&self, alpha: &[f64]) -> Vec<f64> {
        let nj = self.ctx.len();
        let mut out = vec![0.0; self.d];
        match self.integration {
            ValueIntegration::Additive => {
                let mut col_sums = vec![0.0; nj];
                for (i, v) in self.values.iter().enumerate() {
                    let row = &alpha[i * nj..(i + 1) * nj];
                    axpy(row.iter().sum(), v, &mut out);
                    for (cs, a) in col_sums.iter_mut().zip(row) {
                        *cs += a;
                    }
                }
                for (c, cs) in self.ctx.iter().zip(&col_sums) {
                    axpy(*cs, c, &mut out);
                }
            }
            ValueIntegration::Multiplicative | ValueIntegration::Bilinear => {
                let (vals, ctx) = self.value_factors();
                let mut mix = vec![0.0; self.d];
                for (i, v) in vals.iter().enumerate() {
                    mix.iter_mut().for_each(|x| *x = 0.0);
                    for (c, a) in ctx.iter().zip(&alpha[i * nj..(i + 1) * nj]) {
                        axpy(*a, c, &mut mix);
                    }
                    for ((o, m), vv) in out.iter_mut().zip(&mix).zip(v) {
                        *o += m * vv;
                    }
                }
            }
        }
        out
    }

    fn value_factors(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        match self.integration {
            ValueIntegration::Bilinear => (&self.val_proj, &self.ctx_val_proj),
            _ => (self.values, self.ctx),
        }
    }

    pub fn accum(&self) -> TriAccum {
        TriAccum {
            d_keys: zeros_like_cols(self.keys),
            d_values: zeros_like_cols(self.values),
            d_ctx: zeros_like_cols(self.ctx),
            d_key_proj: zeros_like_cols(&self.key_proj),
            d_ctx_proj: zeros_like_cols(&self.ctx_proj),
            d_val_proj: zeros_like_cols(&self.val_proj),
            d_ctx_val_proj: zeros_like_cols(&self.ctx_val_proj),
            d_params: self.params.zeros_like(),
        }
    }

    /// Back-propagates `upstream = dL/d q_new^c` for one query. Returns
    /// `dL/dq`; key, value, context and parameter adjoints accumulate in
    /// `acc` and are completed by [`TriPlan::finish`].
    pub fn backward(&self, q: &[f64], cache: &TriQuery, upstream: &[f64], acc: &mut TriAccum) -> Vec<f64> {
        let (ni, nj, d) = (self.keys.len(), self.ctx.len(), self.d);
        let alpha = &cache.alpha;

        // value side
        let mut d_alpha = vec![0.0; ni * nj];
        match self.integration {
            ValueIntegration::Additive => {
                let gv: Vec<f64> = self.values.iter().map(|v| dot(upstream, v)).collect();
                let gc: Vec<f64> = self.ctx.iter().map(|c| dot(upstream, c)).collect();
                let mut col_sums = vec![0.0; nj];
                for i in 0..ni {
                    let row = &alpha[i * nj..(i + 1) * nj];
                    for j in 0..nj {
                        d_alpha[i * nj + j] = gv[i] + gc[j];
                        col_sums[j] += row[j];
                    }
                    axpy(row.iter().sum(), upstream, &mut acc.d_values[i]);
                }
                for (dc, cs) in acc.d_ctx.iter_mut().zip(&col_sums) {
                    axpy(*cs, upstream, dc);
                }
            }
            ValueIntegration::Multiplicative | ValueIntegration::Bilinear => {
                let (vals, ctx) = self.value_factors();
                let bilinear = self.integration == ValueIntegration::Bilinear;
                let mut gv = vec![0.0; d];
                let mut mix = vec![0.0; d];
                let mut ctx_mix = vec![vec![0.0; d]; nj];
                for i in 0..ni {
                    let row = &alpha[i * nj..(i + 1) * nj];
                    for ((g, u), v) in gv.iter_mut().zip(upstream).zip(&vals[i]) {
                        *g = u * v;
                    }
                    mix.iter_mut().for_each(|x| *x = 0.0);
                    for (j, c) in ctx.iter().enumerate() {
                        d_alpha[i * nj + j] = dot(&gv, c);
                        axpy(row[j], c, &mut mix);
                        axpy(row[j], &vals[i], &mut ctx_mix[j]);
                    }
                    let dst = if bilinear { &mut acc.d_val_proj[i] } else { &mut acc.d_values[i] };
                    for ((x, u), m) in dst.iter_mut().zip(upstream).zip(&mix) {
                        *x += u * m;
                    }
                }
                for (j, cm) in ctx_mix.iter().enumerate() {
                    let dst = if bilinear { &mut acc.d_ctx_val_proj[j] } else { &mut acc.d_ctx[j] };
                    for ((x, u), m) in dst.iter_mut().zip(upstream).zip(cm) {
                        *x += u * m;
                    }
                }
            }
        }

        let ds = softmax_backward(alpha, &d_alpha);
        let mut dq = vec![0.0; d];

        // score side
        match self.variant {
            TriVariant::Tdp | TriVariant::Tsdp => {
                let s = self.scale();
                let mut e = vec![0.0; d];
                let mut f = vec![vec![0.0; d]; nj];
                for (i, k) in self.keys.iter().enumerate() {
                    e.iter_mut().for_each(|x| *x = 0.0);
                    for (j, c) in self.ctx.iter().enumerate() {
                        let g = s * ds[i * nj + j];
                        axpy(g, c, &mut e);
                        axpy(g, k, &mut f[j]);
                    }
                    for r in 0..d {
                        dq[r] += k[r] * e[r];
                        acc.d_keys[i][r] += q[r] * e[r];
                    }
                }
                for (dc, fj) in acc.d_ctx.iter_mut().zip(&f) {
                    for r in 0..d {
                        dc[r] += q[r] * fj[r];
                    }
                }
            }
            TriVariant::TriliEcon => {
                let x = &cache.query_proj;
                let width = x.len();
                let mut dx = vec![0.0; width];
                let mut e = vec![0.0; width];
                let mut f = vec![vec![0.0; width]; nj];
                for (i, y) in self.key_proj.iter().enumerate() {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    for (j, z) in self.ctx_proj.iter().enumerate() {
                        let g = ds[i * nj + j];
                        axpy(g, z, &mut e);
                        axpy(g, y, &mut f[j]);
                    }
                    for r in 0..width {
                        dx[r] += y[r] * e[r];
                        acc.d_key_proj[i][r] += x[r] * e[r];
                    }
                }
                for (dz, fj) in acc.d_ctx_proj.iter_mut().zip(&f) {
                    for r in 0..width {
                        dz[r] += x[r] * fj[r];
                    }
                }
                let w = self.params.w.as_ref().expect("validated");
                acc.d_params.w.as_mut().expect("layout").add_outer(1.0, &dx, q);
                axpy(1.0, &w.matvec_t_unchecked(&dx), &mut dq);
            }
            TriVariant::TriliFull => {
                let slab = &cache.slab;
                let mut gram = vec![0.0; d * d];
                let mut e = vec![0.0; d];
                let mut f = vec![vec![0.0; d]; nj];
                for (i, k) in self.keys.iter().enumerate() {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    for (j, c) in self.ctx.iter().enumerate() {
                        let g = ds[i * nj + j];
                        axpy(g, c, &mut e);
                        axpy(g, k, &mut f[j]);
                    }
                    // gram += k_i e_i^T ; d k_i += slab e_i
                    for b in 0..d {
                        axpy(k[b], &e, &mut gram[b * d..(b + 1) * d]);
                        acc.d_keys[i][b] += dot(&slab[b * d..(b + 1) * d], &e);
                    }
                }
                // d c_j += slab^T f_j
                for (dc, fj) in acc.d_ctx.iter_mut().zip(&f) {
                    for (b, &fb) in fj.iter().enumerate() {
                        axpy(fb, &slab[b * d..(b + 1) * d], dc);
                    }
                }
                let wt = self.params.wt.as_ref().expect("validated").as_slice();
                let dwt = acc.d_params.wt.as_mut().expect("layout").as_mut_slice();
                for a in 0..d {
                    let block = a * d * d..(a + 1) * d * d;
                    dq[a] += dot(&wt[block.clone()], &gram);
                    axpy(q[a], &gram, &mut dwt[block]);
                }
            }
            TriVariant::TAdd => {
                let p = self.params.p.as_ref().expect("validated").as_slice();
                let width = p.len();
                let mut dx = vec![0.0; width];
                let mut dz = vec![0.0; width];
                let dp = acc.d_params.p.as_mut().expect("layout").as_mut_slice();
                for i in 0..ni {
                    for j in 0..nj {
                        let cell = i * nj + j;
                        let g = ds[cell];
                        if g == 0.0 {
                            continue;
                        }
                        let h = &cache.hidden[cell * width..(cell + 1) * width];
                        axpy(g, h, dp);
                        for r in 0..width {
                            dz[r] = g * p[r] * (1.0 - h[r] * h[r]);
                        }
                        axpy(1.0, &dz, &mut dx);
                        axpy(1.0, &dz, &mut acc.d_key_proj[i]);
                        axpy(1.0, &dz, &mut acc.d_ctx_proj[j]);
                    }
                }
                let w = self.params.w.as_ref().expect("validated");
                acc.d_params.w.as_mut().expect("layout").add_outer(1.0, &dx, q);
                axpy(1.0, &w.matvec_t_unchecked(&dx), &mut dq);
            }
        }
        dq
    }

    /// Chains the projected-column adjoints into keys, values, context and
    /// the projection matrices, then clears them.
    pub fn finish(&self, acc: &mut TriAccum) {
        fn chain(
            m: &Matrix,
            grad: &mut Matrix,
            cols: &[Vec<f64>],
            d_cols: &mut [Vec<f64>],
            d_proj: &mut [Vec<f64>],
        ) {
            for ((c, dc), dp) in cols.iter().zip(d_cols.iter_mut()).zip(d_proj.iter_mut()) {
                grad.add_outer(1.0, dp, c);
                axpy(1.0, &m.matvec_t_unchecked(dp), dc);
                dp.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let p = self.params;
        let g = &mut acc.d_params;
        if matches!(self.variant, TriVariant::TAdd | TriVariant::TriliEcon) {
            chain(
                p.u.as_ref().expect("validated"),
                g.u.as_mut().expect("layout"),
                self.keys,
                &mut acc.d_keys,
                &mut acc.d_key_proj,
            );
            chain(
                p.h.as_ref().expect("validated"),
                g.h.as_mut().expect("layout"),
                self.ctx,
                &mut acc.d_ctx,
                &mut acc.d_ctx_proj,
            );
        }
        if self.integration == ValueIntegration::Bilinear {
            chain(
                p.u_val.as_ref().expect("validated"),
                g.u_val.as_mut().expect("layout"),
                self.values,
                &mut acc.d_values,
                &mut acc.d_val_proj,
            );
            chain(
                p.h_val.as_ref().expect("validated"),
                g.h_val.as_mut().expect("layout"),
                self.ctx,
                &mut acc.d_ctx,
                &mut acc.d_ctx_val_proj,
            );
        }
    }
}

fn check_inputs(q_len: usize, keys: &Matrix, ctx: &Matrix) -> Result<()> {
    if keys.rows() != q_len || ctx.rows() != q_len {
        return Err(shape(format!(
            "query length {q_len}, keys {}x{}, context {}x{}: row counts must all equal D",
            keys.rows(),
            keys.cols(),
            ctx.rows(),
            ctx.cols()
        )));
    }
    if !keys.is_finite() || !ctx.is_finite() {
        return Err(invalid("non-finite key or context entries"));
    }
    Ok(())
}

/// Score grid `F(q, k_i, c_j)` for one query.
pub fn tri_score(
    variant: TriVariant,
    q: &Vector,
    keys: &Matrix,
    ctx: &Matrix,
    params: &TriParams,
) -> Result<ScoreGrid> {
    check_inputs(q.len(), keys, ctx)?;
    if !q.is_finite() {
        return Err(invalid("non-finite query entries"));
    }
    let (kc, cc) = (keys.columns(), ctx.columns());
    // Scores never read the values or the value-side parameters.
    let plan = TriPlan::new(variant, ValueIntegration::Additive, &kc, &kc, &cc, params, q.len())?;
    ScoreGrid::new(kc.len(), cc.len(), plan.scores(q.as_slice()))
}

/// Scores for every query column of `queries`: an `N x I x J` tensor.
///
/// The multilinear variants are evaluated as chained mode products
/// `W x1 Q^T x2 K^T x3 C^T` (with `W` the identity tensor for the dot-product
/// variants and `(WQ, UK, HC)` in place of `(Q, K, C)` for the economic one);
/// `TAdd` has no tensor form and is evaluated per query.
pub fn tri_score_batched(
    queries: &Matrix,
    keys: &Matrix,
    ctx: &Matrix,
    params: &TriParams,
    variant: TriVariant,
) -> Result<Tensor3> {
    let d = queries.rows();
    check_inputs(d, keys, ctx)?;
    if !queries.is_finite() {
        return Err(invalid("non-finite query entries"));
    }
    params.validate(variant, ValueIntegration::Additive, d)?;
    if d == 0 {
        return Err(invalid("D must be at least 1"));
    }
    let contract = |w: &Tensor3, q: &Matrix, k: &Matrix, c: &Matrix| -> Result<Tensor3> {
        let z = n_mode_product_matrix(w, &q.transpose(), 1)?;
        let z = n_mode_product_matrix(&z, &k.transpose(), 2)?;
        n_mode_product_matrix(&z, &c.transpose(), 3)
    };
    match variant {
        TriVariant::Tdp | TriVariant::Tsdp => {
            let mut t = contract(&identity_tensor(d)?, queries, keys, ctx)?;
            if variant == TriVariant::Tsdp {
                let s = 1.0 / (d as f64).sqrt();
                t.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            }
            Ok(t)
        }
        TriVariant::TriliFull => contract(params.wt.as_ref().expect("validated"), queries, keys, ctx),
        TriVariant::TriliEcon => {
            let w = params.w.as_ref().expect("validated");
            let u = params.u.as_ref().expect("validated");
            let h = params.h.as_ref().expect("validated");
            contract(
                &identity_tensor(w.rows())?,
                &w.matmul(queries)?,
                &u.matmul(keys)?,
                &h.matmul(ctx)?,
            )
        }
        TriVariant::TAdd => {
            let (kc, cc) = (keys.columns(), ctx.columns());
            let plan = TriPlan::new(variant, ValueIntegration::Additive, &kc, &kc, &cc, params, d)?;
            let (ni, nj) = (kc.len(), cc.len());
            let mut out = Tensor3::zeros([queries.cols(), ni, nj]);
            for (n, q) in queries.columns().iter().enumerate() {
                let s = plan.scores(q);
                out.as_mut_slice()[n * ni * nj..(n + 1) * ni * nj].copy_from_slice(&s);
            }
            Ok(out)
        }
    }
}

/// Joint softmax over all `I * J` cells of the grid.
pub fn tri_normalize(grid: &ScoreGrid) -> Result<AttnWeights> {
    if grid.data.is_empty() {
        return Err(invalid("cannot normalise an empty score grid"));
    }
    if grid.data.iter().any(|x| !x.is_finite()) {
        return Err(invalid("score grid contains non-finite entries"));
    }
    let mut data = grid.data.clone();
    softmax_in_place(&mut data);
    Ok(AttnWeights {
        rows: grid.rows,
        cols: grid.cols,
        data,
    })
}

/// Contextual value tensor (`I x J x D`) with fiber `(i, j)` equal to
/// `v^c_(i,j)`.
pub fn contextual_value(
    integration: ValueIntegration,
    values: &Matrix,
    ctx: &Matrix,
    params: &TriParams,
) -> Result<Tensor3> {
    let d = values.rows();
    if ctx.rows() != d {
        return Err(shape(format!("values have {d} rows but context has {}", ctx.rows())));
    }
    let (vc, cc) = (values.columns(), ctx.columns());
    let (vals, cvals) = match integration {
        ValueIntegration::Bilinear => {
            let u = need(&params.u_val, "U'")?;
            let h = need(&params.h_val, "H'")?;
            need_shape(u, "U'", (d, d))?;
            need_shape(h, "H'", (d, d))?;
            (
                vc.iter().map(|v| u.matvec_unchecked(v)).collect::<Vec<_>>(),
                cc.iter().map(|c| h.matvec_unchecked(c)).collect::<Vec<_>>(),
            )
        }
        _ => (vc, cc),
    };
    let add = integration == ValueIntegration::Additive;
    Ok(Tensor3::from_fn([vals.len(), cvals.len(), d], |i, j, r| {
        if add {
            vals[i][r] + cvals[j][r]
        } else {
            vals[i][r] * cvals[j][r]
        }
    }))
}

fn check_attend(q: &Vector, keys: &Matrix, values: &Matrix, ctx: &Matrix) -> Result<()> {
    check_inputs(q.len(), keys, ctx)?;
    if values.shape() != keys.shape() {
        return Err(shape(format!(
            "keys {:?} and values {:?} differ in shape",
            keys.shape(),
            values.shape()
        )));
    }
    if !q.is_finite() || !values.is_finite() {
        return Err(invalid("non-finite query or value entries"));
    }
    Ok(())
}

/// Contextual attention embedding `q_new^c`.
pub fn tri_attend(
    q: &Vector,
    keys: &Matrix,
    values: &Matrix,
    ctx: &Matrix,
    variant: TriVariant,
    integration: ValueIntegration,
    params: &TriParams,
) -> Result<Vector> {
    check_attend(q, keys, values, ctx)?;
    let (kc, vc, cc) = (keys.columns(), values.columns(), ctx.columns());
    let plan = TriPlan::new(variant, integration, &kc, &vc, &cc, params, q.len())?;
    Ok(Vector::from(plan.forward(q.as_slice()).out))
}

/// Every intermediate of one tri-attention evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct TriTrace {
    pub scores: ScoreGrid,
    pub weights: AttnWeights,
    pub values: Tensor3,
    pub embedding: Vector,
}

/// Evaluates `q_new^c = V^c alpha^c` literally: score grid, joint softmax,
/// contextual value tensor, mode-3 matricization and a matrix-vector product.
pub fn tri_attend_traced(
    q: &Vector,
    keys: &Matrix,
    values: &Matrix,
    ctx: &Matrix,
    variant: TriVariant,
    integration: ValueIntegration,
    params: &TriParams,
) -> Result<TriTrace> {
    check_attend(q, keys, values, ctx)?;
    params.validate(variant, integration, q.len())?;
    let scores = tri_score(variant, q, keys, ctx, params)?;
    let weights = tri_normalize(&scores)?;
    let vt = contextual_value(integration, values, ctx, params)?;
    let vm = mode3_matricize(&vt);
    let embedding = Vector::from(vm.matvec(weights.as_slice())?);
    Ok(TriTrace {
        scores,
        weights,
        values: vt,
        embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bi::{bi_attend, BiParams, BiVariant};
    use crate::init::{normal_matrix, normal_vector, seeded};

    fn full_params(variant: TriVariant, integration: ValueIntegration, d: usize, seed: u64) -> TriParams {
        let mut rng = seeded(seed);
        let mut p = TriParams::none();
        match variant {
            TriVariant::TAdd | TriVariant::TriliEcon => {
                p.w = Some(normal_matrix(&mut rng, d, d, 0.5));
                p.u = Some(normal_matrix(&mut rng, d, d, 0.5));
                p.h = Some(normal_matrix(&mut rng, d, d, 0.5));
                if variant == TriVariant::TAdd {
                    p.p = Some(normal_vector(&mut rng, d, 0.5));
                }
            }
            TriVariant::TriliFull => p.wt = Some(crate::init::normal_tensor(&mut rng, [d, d, d], 0.5)),
            _ => {}
        }
        if integration == ValueIntegration::Bilinear {
            p.u_val = Some(normal_matrix(&mut rng, d, d, 0.5));
            p.h_val = Some(normal_matrix(&mut rng, d, d, 0.5));
        }
        p
    }

    #[test]
    fn tdp_and_tsdp_on_ones() {
        let q = Vector::ones(3);
        let k = Matrix::filled(3, 2, 1.0);
        let c = Matrix::filled(3, 2, 1.0);
        let g = tri_score(TriVariant::Tdp, &q, &k, &c, &TriParams::none()).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 3.0));
        let g = tri_score(TriVariant::Tsdp, &q, &k, &c, &TriParams::none()).unwrap();
        assert!(g.as_slice().iter().all(|&x| (x - 3f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn full_trilinear_with_identity_is_tdp() {
        let mut rng = seeded(12);
        let d = 4;
        let q = normal_vector(&mut rng, d, 1.0);
        let k = normal_matrix(&mut rng, d, 3, 1.0);
        let c = normal_matrix(&mut rng, d, 2, 1.0);
        let p = TriParams {
            wt: Some(identity_tensor(d).unwrap()),
            ..TriParams::none()
        };
        let full = tri_score(TriVariant::TriliFull, &q, &k, &c, &p).unwrap();
        let tdp = tri_score(TriVariant::Tdp, &q, &k, &c, &TriParams::none()).unwrap();
        for (a, b) in full.as_slice().iter().zip(tdp.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_single_query_matches_per_query() {
        for v in TriVariant::ALL {
            let mut rng = seeded(30);
            let q = normal_matrix(&mut rng, 3, 1, 1.0);
            let k = normal_matrix(&mut rng, 3, 2, 1.0);
            let c = normal_matrix(&mut rng, 3, 4, 1.0);
            let p = full_params(v, ValueIntegration::Additive, 3, 31);
            let t = tri_score_batched(&q, &k, &c, &p, v).unwrap();
            let g = tri_score(v, &q.col(0), &k, &c, &p).unwrap();
            assert_eq!(t.dims(), [1, 2, 4]);
            for (a, b) in t.as_slice().iter().zip(g.as_slice()) {
                assert!((a - b).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn normalize_cases() {
        let w = tri_normalize(&ScoreGrid::new(2, 3, vec![0.7; 6]).unwrap()).unwrap();
        assert!(w.as_slice().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        let mut data = vec![0.0; 6];
        data[4] = 1000.0;
        let w = tri_normalize(&ScoreGrid::new(2, 3, data).unwrap()).unwrap();
        assert!((w.get(1, 1) - 1.0).abs() < 1e-15);
        assert!(tri_normalize(&ScoreGrid::new(0, 3, vec![]).unwrap()).is_err());
    }

    #[test]
    fn contextual_value_reductions() {
        let mut rng = seeded(2);
        let v = normal_matrix(&mut rng, 3, 2, 1.0);
        let ones = Matrix::filled(3, 4, 1.0);
        let t = contextual_value(ValueIntegration::Multiplicative, &v, &ones, &TriParams::none()).unwrap();
        let t0 = contextual_value(ValueIntegration::Additive, &v, &Matrix::zeros(3, 4), &TriParams::none()).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(t.fiber(i, j), v.col(i).as_slice());
                assert_eq!(t0.fiber(i, j), v.col(i).as_slice());
            }
        }
        let c = normal_matrix(&mut rng, 3, 4, 1.0);
        let p = TriParams {
            u_val: Some(Matrix::identity(3)),
            h_val: Some(Matrix::identity(3)),
            ..TriParams::none()
        };
        let bili = contextual_value(ValueIntegration::Bilinear, &v, &c, &p).unwrap();
        let mul = contextual_value(ValueIntegration::Multiplicative, &v, &c, &p).unwrap();
        assert!(bili.max_abs_diff(&mul) < 1e-12);
    }

    #[test]
    fn factorised_and_matricized_forms_agree() {
        for v in TriVariant::ALL {
            for integ in ValueIntegration::ALL {
                let mut rng = seeded(40);
                let d = 4;
                let q = normal_vector(&mut rng, d, 1.0);
                let k = normal_matrix(&mut rng, d, 3, 1.0);
                let val = normal_matrix(&mut rng, d, 3, 1.0);
                let c = normal_matrix(&mut rng, d, 2, 1.0);
                let p = full_params(v, integ, d, 41);
                let fast = tri_attend(&q, &k, &val, &c, v, integ, &p).unwrap();
                let trace = tri_attend_traced(&q, &k, &val, &c, v, integ, &p).unwrap();
                for r in 0..d {
                    assert!((fast[r] - trace.embedding[r]).abs() < 1e-12, "{v} {integ}");
                }
            }
        }
    }

    #[test]
    fn singleton_grid_returns_fiber() {
        let q = Vector::from(vec![1.0, -2.0]);
        let k = Matrix::new(2, 1, vec![0.5, 0.5]).unwrap();
        let v = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let c = Matrix::new(2, 1, vec![2.0, -1.0]).unwrap();
        let out = tri_attend(&q, &k, &v, &c, TriVariant::Tdp, ValueIntegration::Multiplicative, &TriParams::none()).unwrap();
        assert_eq!(out.as_slice(), &[6.0, -4.0]);
        let out = tri_attend(&q, &k, &v, &c, TriVariant::Tdp, ValueIntegration::Additive, &TriParams::none()).unwrap();
        assert_eq!(out.as_slice(), &[5.0, 3.0]);
    }

    #[test]
    fn uniform_grid_averages_fibers() {
        // q = 0 makes every TDP score zero.
        let mut rng = seeded(9);
        let q = Vector::zeros(3);
        let k = normal_matrix(&mut rng, 3, 2, 1.0);
        let v = normal_matrix(&mut rng, 3, 2, 1.0);
        let c = normal_matrix(&mut rng, 3, 3, 1.0);
        let out = tri_attend(&q, &k, &v, &c, TriVariant::Tdp, ValueIntegration::Multiplicative, &TriParams::none()).unwrap();
        let vt = contextual_value(ValueIntegration::Multiplicative, &v, &c, &TriParams::none()).unwrap();
        for r in 0..3 {
            let mean: f64 = (0..2).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| vt.get(i, j, r)).sum::<f64>() / 6.0;
            assert!((out[r] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn degrades_to_dot_product_bi_attention() {
        let mut rng = seeded(77);
        let q = normal_vector(&mut rng, 5, 1.0);
        let k = normal_matrix(&mut rng, 5, 4, 1.0);
        let v = normal_matrix(&mut rng, 5, 4, 1.0);
        let ones = Matrix::filled(5, 1, 1.0);
        let tri = tri_attend(&q, &k, &v, &ones, TriVariant::Tdp, ValueIntegration::Multiplicative, &TriParams::none()).unwrap();
        let bi = bi_attend(&q, &k, &v, BiVariant::Dp, &BiParams::none()).unwrap();
        for r in 0..5 {
            assert!((tri[r] - bi[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let q = Vector::zeros(3);
        let k = Matrix::zeros(3, 2);
        let c = Matrix::zeros(2, 2);
        assert!(matches!(tri_score(TriVariant::Tdp, &q, &k, &c, &TriParams::none()), Err(Error::Shape(_))));
        let q = Vector::zeros(33);
        let k = Matrix::zeros(33, 1);
        let c = Matrix::zeros(33, 1);
        let p = TriParams {
            wt: Some(Tensor3::zeros([33, 33, 33])),
            ..TriParams::none()
        };
        assert!(matches!(tri_score(TriVariant::TriliFull, &q, &k, &c, &p), Err(Error::Capacity(_))));
        assert!(TriParams::init(TriVariant::TriliFull, ValueIntegration::Additive, 33, &mut seeded(0)).is_err());
        let q = Vector::zeros(3);
        let k = Matrix::zeros(3, 2);
        let c = Matrix::zeros(3, 2);
        assert!(tri_score(TriVariant::TAdd, &q, &k, &c, &TriParams::none()).is_err());
        assert!(tri_attend(&q, &k, &Matrix::zeros(3, 1), &c, TriVariant::Tdp, ValueIntegration::Additive, &TriParams::none()).is_err());
    }

    #[test]
    fn names_round_trip() {
        for v in TriVariant::ALL {
            assert_eq!(v.name().parse::<TriVariant>().unwrap(), v);
        }
        for i in ValueIntegration::ALL {
            assert_eq!(i.name().parse::<ValueIntegration>().unwrap(), i);
        }
        assert!("trili".parse::<TriVariant>().is_err());
    }

    #[test]
    fn serde_names_match_display_names() {
        for v in TriVariant::ALL {
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        for g in ValueIntegration::ALL {
            assert_eq!(serde_json::to_string(&g).unwrap(), format!("\"{}\"", g.name()));
        }
        let g: ValueIntegration = serde_json::from_str("\"bilinear\"").unwrap();
        assert_eq!(g, ValueIntegration::Bilinear);
    }
}
