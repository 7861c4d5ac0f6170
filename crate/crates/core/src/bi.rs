//! Query-key (bi-) attention: four similarity functions, softmax
//! normalisation and the weighted value combination `q_new = V alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::init::{uniform_matrix, Rng64};
use crate::tensor::{axpy, dot, Matrix, Vector};

/// Query-key similarity function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiVariant {
    /// `p^T tanh(W q + U k_i)`
    Add,
    /// `q^T k_i`
    Dp,
    /// `q^T k_i / sqrt(D)`
    Sdp,
    /// `q^T W k_i`
    Bili,
}

impl BiVariant {
    pub const ALL: [BiVariant; 4] = [BiVariant::Add, BiVariant::Dp, BiVariant::Sdp, BiVariant::Bili];

    pub fn name(self) -> &'static str {
        match self {
            BiVariant::Add => "add",
            BiVariant::Dp => "dp",
            BiVariant::Sdp => "sdp",
            BiVariant::Bili => "bili",
        }
    }
}

/// Learnable parameters of a bi-attention score.
///
/// `Add` uses `w`, `u` (both `D' x D`) and `p` (`D'`); `Bili` uses `w`
/// (`D x D`); the dot-product variants use nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiParams {
    pub w: Option<Matrix>,
    pub u: Option<Matrix>,
    pub p: Option<Vector>,
}

impl BiParams {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn additive(w: Matrix, u: Matrix, p: Vector) -> Self {
        Self {
            w: Some(w),
            u: Some(u),
            p: Some(p),
        }
    }

    pub fn bilinear(w: Matrix) -> Self {
        Self {
            w: Some(w),
            ..Self::default()
        }
    }

    /// Fan-in uniform matrices and a zero `p`; hidden width of `Add` is `D`.
    pub fn init(variant: BiVariant, d: usize, rng: &mut Rng64) -> Self {
        match variant {
            BiVariant::Add => Self::additive(
                uniform_matrix(rng, d, d, d),
                uniform_matrix(rng, d, d, d),
                Vector::zeros(d),
            ),
            BiVariant::Bili => Self::bilinear(uniform_matrix(rng, d, d, d)),
            BiVariant::Dp | BiVariant::Sdp => Self::none(),
        }
    }

    pub fn validate(&self, variant: BiVariant, d: usize) -> Result<()> {
        match variant {
            BiVariant::Add => {
                let (w, u, p) = match (&self.w, &self.u, &self.p) {
                    (Some(w), Some(u), Some(p)) => (w, u, p),
                    _ => return Err(invalid("additive score needs W, U and p")),
                };
                let hidden = p.len();
                if w.shape() != (hidden, d) || u.shape() != (hidden, d) {
                    return Err(shape(format!(
                        "additive score: W {:?}, U {:?} must both be {hidden}x{d}",
                        w.shape(),
                        u.shape()
                    )));
                }
            }
            BiVariant::Bili => match &self.w {
                Some(w) if w.shape() == (d, d) => {}
                Some(w) => {
                    return Err(shape(format!(
                        "bilinear score: W is {:?}, expected {d}x{d}",
                        w.shape()
                    )))
                }
                None => return Err(invalid("bilinear score needs W")),
            },
            BiVariant::Dp | BiVariant::Sdp => {}
        }
        Ok(())
    }

    /// Zero-valued parameters with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            u: self.u.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            p: self.p.as_ref().map(|v| Vector::zeros(v.len())),
        }
    }

    /// Named flat views of every present block, in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        if let Some(w) = &self.w {
            out.push(("W", w.as_slice()));
        }
        if let Some(u) = &self.u {
            out.push(("U", u.as_slice()));
        }
        if let Some(p) = &self.p {
            out.push(("p", p.as_slice()));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.w {
            out.push(("W", w.as_mut_slice()));
        }
        if let Some(u) = &mut self.u {
            out.push(("U", u.as_mut_slice()));
        }
        if let Some(p) = &mut self.p {
            out.push(("p", p.as_mut_slice()));
        }
        out
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Backward of softmax: `ds_i = alpha_i (g_i - sum_k alpha_k g_k)`.
pub(crate) fn softmax_backward(alpha: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mean = dot(alpha, upstream);
    alpha
        .iter()
        .zip(upstream)
        .map(|(a, g)| a * (g - mean))
        .collect()
}

/// Softmax with max-subtraction.
pub fn softmax_normalize(scores: &Vector) -> Result<Vector> {
    if scores.is_empty() {
        return Err(invalid("softmax of an empty score vector"));
    }
    if !scores.is_finite() {
        return Err(invalid("softmax input contains non-finite scores"));
    }
    let mut out = scores.as_slice().to_vec();
    softmax_in_place(&mut out);
    Ok(Vector::from(out))
}

/// Keys and values prepared once for many queries.
pub(crate) struct BiPlan<'a> {
    variant: BiVariant,
    params: &'a BiParams,
    d: usize,
    keys: &'a [Vec<f64>],
    values: &'a [Vec<f64>],
    /// `U k_i` for `Add`, `W k_i` for `Bili`, empty otherwise.
    key_proj: Vec<Vec<f64>>,
}

pub(crate) struct BiQuery {
    pub alpha: Vec<f64>,
    /// `W q` for `Add`.
    query_proj: Vec<f64>,
    /// `tanh(W q + U k_i)` per key for `Add`.
    hidden: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

/// Gradient accumulators for one plan.
pub(crate) struct BiAccum {
    pub d_keys: Vec<Vec<f64>>,
    pub d_values: Vec<Vec<f64>>,
    d_key_proj: Vec<Vec<f64>>,
    pub d_params: BiParams,
}

impl<'a> BiPlan<'a> {
    pub fn new(
        variant: BiVariant,
        keys: &'a [Vec<f64>],
        values: &'a [Vec<f64>],
        params: &'a BiParams,
        d: usize,
    ) -> Result<Self> {
        if keys.is_empty() {
            return Err(invalid("attention over zero keys"));
        }
        if keys.len() != values.len() {
            return Err(shape(format!(
                "{} keys but {} values",
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().chain(values).any(|c| c.len() != d) {
            return Err(shape(format!("key/value columns must have length {d}")));
        }
        params.validate(variant, d)?;
        let key_proj = match variant {
            BiVariant::Add => {
                let u = params.u.as_ref().expect("validated");
                keys.iter().map(|k| u.matvec_unchecked(k)).collect()
            }
            BiVariant::Bili => {
                let w = params.w.as_ref().expect("validated");
                keys.iter().map(|k| w.matvec_unchecked(k)).collect()
            }
            BiVariant::Dp | BiVariant::Sdp => Vec::new(),
        };
        Ok(Self {
            variant,
            params,
            d,
            keys,
            values,
            key_proj,
        })
    }

    fn scale(&self) -> f64 {
        match self.variant {
            BiVariant::Sdp => 1.0 / (self.d as f64).sqrt(),
            _ => 1.0,
        }
    }

    /// Scores plus the intermediates the backward pass needs.
    fn score_parts(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        match self.variant {
            BiVariant::Dp | BiVariant::Sdp => {
                let s = self.scale();
                let scores = self.keys.iter().map(|k| s * dot(q, k)).collect();
                (scores, Vec::new(), Vec::new())
            }
            BiVariant::Bili => {
                let scores = self.key_proj.iter().map(|wk| dot(q, wk)).collect();
                (scores, Vec::new(), Vec::new())
            }
            BiVariant::Add => {
                let w = self.params.w.as_ref().expect("validated");
                let p = self.params.p.as_ref().expect("validated").as_slice();
                let query_proj = w.matvec_unchecked(q);
                let hidden: Vec<Vec<f64>> = self
                    .key_proj
                    .iter()
                    .map(|uk| query_proj.iter().zip(uk).map(|(a, b)| (a + b).tanh()).collect())
                    .collect();
                let scores = hidden.iter().map(|h| dot(p, h)).collect();
                (scores, query_proj, hidden)
            }
        }
    }

    pub fn scores(&self, q: &[f64]) -> Vec<f64> {
        self.score_parts(q).0
    }

    pub fn forward(&self, q: &[f64]) -> BiQuery {
        let (mut alpha, query_proj, hidden) = self.score_parts(q);
        softmax_in_place(&mut alpha);
        let mut out = vec![0.0; self.d];
        for (a, v) in alpha.iter().zip(self.values) {
            axpy(*a, v, &mut out);
        }
        BiQuery {
            alpha,
            query_proj,
            hidden,
            out,
        }
    }

    pub fn accum(&self) -> BiAccum {
        BiAccum {
            d_keys: vec![vec![0.0; self.d]; self.keys.len()],
            d_values: vec![vec![0.0; self.d]; self.values.len()],
            d_key_proj: self
                .key_proj
                .iter()
                .map(|c| vec![0.0; c.len()])
                .collect(),
            d_params: self.params.zeros_like(),
        }
    }

    /// Back-propagates `upstream = dL/d out` for one query; returns `dL/dq`
    /// and accumulates key/value/parameter adjoints into `acc`.
    pub fn backward(&self, q: &[f64], cache: &BiQuery, upstream: &[f64], acc: &mut BiAccum) -> Vec<f64> {
        let d_alpha: Vec<f64> = self.values.iter().map(|v| dot(upstream, v)).collect();
        for (a, dv) in cache.alpha.iter().zip(acc.d_values.iter_mut()) {
            axpy(*a, upstream, dv);
        }
        let ds = softmax_backward(&cache.alpha, &d_alpha);
        let mut dq = vec![0.0; self.d];
        match self.variant {
            BiVariant::Dp | BiVariant::Sdp => {
                let s = self.scale();
                for ((k, dk), &g) in self.keys.iter().zip(acc.d_keys.iter_mut()).zip(&ds) {
                    axpy(s * g, k, &mut dq);
                    axpy(s * g, q, dk);
                }
            }
            BiVariant::Bili => {
                for ((wk, dwk), &g) in self.key_proj.iter().zip(acc.d_key_proj.iter_mut()).zip(&ds) {
                    axpy(g, wk, &mut dq);
                    axpy(g, q, dwk);
                }
            }
            BiVariant::Add => {
                let w = self.params.w.as_ref().expect("validated");
                let p = self.params.p.as_ref().expect("validated").as_slice();
                let hidden_width = p.len();
                let mut dx = vec![0.0; hidden_width];
                let dp = acc.d_params.p.as_mut().expect("layout").as_mut_slice();
                for ((h, duk), &g) in cache.hidden.iter().zip(acc.d_key_proj.iter_mut()).zip(&ds) {
                    axpy(g, h, dp);
                    for r in 0..hidden_width {
                        let dz = g * p[r] * (1.0 - h[r] * h[r]);
                        dx[r] += dz;
                        duk[r] += dz;
                    }
                }
                acc.d_params
                    .w
                    .as_mut()
                    .expect("layout")
                    .add_outer(1.0, &dx, q);
                let back = w.matvec_t_unchecked(&dx);
                axpy(1.0, &back, &mut dq);
                debug_assert_eq!(cache.query_proj.len(), hidden_width);
            }
        }
        dq
    }

    /// Chains the projected-key adjoints back into keys and parameters.
    pub fn finish(&self, acc: &mut BiAccum) {
        let proj = match self.variant {
            BiVariant::Add => self.params.u.as_ref(),
            BiVariant::Bili => self.params.w.as_ref(),
            _ => None,
        };
        let Some(m) = proj else { return };
        let grad = match self.variant {
            BiVariant::Add => acc.d_params.u.as_mut(),
            _ => acc.d_params.w.as_mut(),
        }
        .expect("layout");
        for ((k, dk), dproj) in self.keys.iter().zip(acc.d_keys.iter_mut()).zip(&acc.d_key_proj) {
            grad.add_outer(1.0, dproj, k);
            axpy(1.0, &m.matvec_t_unchecked(dproj), dk);
        }
        for d in acc.d_key_proj.iter_mut() {
            d.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn check_query(q: &Vector, k: &Matrix) -> Result<()> {
    if q.len() != k.rows() {
        return Err(shape(format!(
            "query length {} but keys have {} rows",
            q.len(),
            k.rows()
        )));
    }
    if !q.is_finite() || !k.is_finite() {
        return Err(invalid("non-finite query or key entries"));
    }
    Ok(())
}

/// Relevance scores `F(q, k_i)` for every key column.
pub fn bi_score(variant: BiVariant, q: &Vector, keys: &Matrix, params: &BiParams) -> Result<Vector> {
    check_query(q, keys)?;
    let cols = keys.columns();
    let plan = BiPlan::new(variant, &cols, &cols, params, q.len())?;
    Ok(Vector::from(plan.scores(q.as_slice())))
}

/// `q_new = V softmax(F(q, K))`.
pub fn bi_attend(
    q: &Vector,
    keys: &Matrix,
    values: &Matrix,
    variant: BiVariant,
    params: &BiParams,
) -> Result<Vector> {
    check_query(q, keys)?;
    if values.shape() != keys.shape() {
        return Err(shape(format!(
            "keys {:?} and values {:?} differ in shape",
            keys.shape(),
            values.shape()
        )));
    }
    let (kc, vc) = (keys.columns(), values.columns());
    let plan = BiPlan::new(variant, &kc, &vc, params, q.len())?;
    Ok(Vector::from(plan.forward(q.as_slice()).out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{normal_matrix, normal_vector, seeded};

    fn random_params(variant: BiVariant, d: usize, seed: u64) -> BiParams {
        let mut rng = seeded(seed);
        match variant {
            BiVariant::Add => BiParams::additive(
                normal_matrix(&mut rng, d, d, 0.5),
                normal_matrix(&mut rng, d, d, 0.5),
                normal_vector(&mut rng, d, 0.5),
            ),
            BiVariant::Bili => BiParams::bilinear(normal_matrix(&mut rng, d, d, 0.5)),
            _ => BiParams::none(),
        }
    }

    // Scalar-loop reference for every variant.
    fn loop_score(variant: BiVariant, q: &Vector, k: &Matrix, p: &BiParams) -> Vec<f64> {
        let d = q.len();
        (0..k.cols())
            .map(|i| match variant {
                BiVariant::Dp => (0..d).map(|r| q[r] * k.get(r, i)).sum(),
                BiVariant::Sdp => {
                    (0..d).map(|r| q[r] * k.get(r, i)).sum::<f64>() / (d as f64).sqrt()
                }
                BiVariant::Bili => {
                    let w = p.w.as_ref().unwrap();
                    let mut s = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            s += q[a] * w.get(a, b) * k.get(b, i);
                        }
                    }
                    s
                }
                BiVariant::Add => {
                    let (w, u, pv) = (p.w.as_ref().unwrap(), p.u.as_ref().unwrap(), p.p.as_ref().unwrap());
                    let mut s = 0.0;
                    for r in 0..pv.len() {
                        let mut z = 0.0;
                        for c in 0..d {
                            z += w.get(r, c) * q[c] + u.get(r, c) * k.get(c, i);
                        }
                        s += pv[r] * z.tanh();
                    }
                    s
                }
            })
            .collect()
    }

    #[test]
    fn dot_product_scores() {
        let q = Vector::from(vec![1.0, 0.0]);
        let k = Matrix::identity(2);
        let s = bi_score(BiVariant::Dp, &q, &k, &BiParams::none()).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0]);
        let s = bi_score(BiVariant::Sdp, &q, &k, &BiParams::none()).unwrap();
        assert!((s[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn bilinear_with_identity_is_dot_product() {
        let mut rng = seeded(4);
        let q = normal_vector(&mut rng, 5, 1.0);
        let k = normal_matrix(&mut rng, 5, 4, 1.0);
        let bili = bi_score(BiVariant::Bili, &q, &k, &BiParams::bilinear(Matrix::identity(5))).unwrap();
        let dp = bi_score(BiVariant::Dp, &q, &k, &BiParams::none()).unwrap();
        for i in 0..4 {
            assert!((bili[i] - dp[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_scalar_loops() {
        let mut rng = seeded(8);
        for (n, v) in BiVariant::ALL.into_iter().enumerate() {
            let q = normal_vector(&mut rng, 4, 1.0);
            let k = normal_matrix(&mut rng, 4, 3, 1.0);
            let p = random_params(v, 4, n as u64);
            let s = bi_score(v, &q, &k, &p).unwrap();
            let r = loop_score(v, &q, &k, &p);
            for i in 0..3 {
                assert!((s[i] - r[i]).abs() < 1e-12, "{v:?}");
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_normalize(&Vector::zeros(3)).unwrap();
        assert!(s.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax_normalize(&Vector::from(vec![5.0, 1005.0])).unwrap();
        assert!(s[0] < 1e-300 && (s[1] - 1.0).abs() < 1e-15);
        assert!(softmax_normalize(&Vector::zeros(0)).is_err());
        let a = Vector::from(vec![0.3, -1.2, 2.5]);
        let b = Vector::from(vec![100.3, 98.8, 102.5]);
        let (sa, sb) = (softmax_normalize(&a).unwrap(), softmax_normalize(&b).unwrap());
        for i in 0..3 {
            assert!((sa[i] - sb[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Vector::from(vec![0.4, -2.0]);
        let k = Matrix::new(2, 1, vec![3.0, 1.0]).unwrap();
        let v = Matrix::new(2, 1, vec![-7.0, 0.5]).unwrap();
        let out = bi_attend(&q, &k, &v, BiVariant::Dp, &BiParams::none()).unwrap();
        assert_eq!(out.as_slice(), &[-7.0, 0.5]);
    }

    #[test]
    fn uniform_scores_average_values() {
        let q = Vector::zeros(2);
        let k = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = Matrix::new(2, 3, vec![1.0, 2.0, 6.0, 0.0, 3.0, 3.0]).unwrap();
        let out = bi_attend(&q, &k, &v, BiVariant::Dp, &BiParams::none()).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15);
        assert!((out[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn attend_matches_loop_oracle() {
        let mut rng = seeded(21);
        for (n, v) in BiVariant::ALL.into_iter().enumerate() {
            let q = normal_vector(&mut rng, 5, 1.0);
            let k = normal_matrix(&mut rng, 5, 4, 1.0);
            let val = normal_matrix(&mut rng, 5, 4, 1.0);
            let p = random_params(v, 5, 10 + n as u64);
            let out = bi_attend(&q, &k, &val, v, &p).unwrap();
            let s = loop_score(v, &q, &k, &p);
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for r in 0..5 {
                let want: f64 = (0..4).map(|i| e[i] / z * val.get(r, i)).sum();
                assert!((out[r] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let q = Vector::zeros(3);
        let k = Matrix::zeros(2, 2);
        assert!(matches!(
            bi_score(BiVariant::Dp, &q, &k, &BiParams::none()),
            Err(crate::Error::Shape(_))
        ));
        let mut k = Matrix::zeros(3, 2);
        k.as_mut_slice()[0] = f64::NAN;
        assert!(matches!(
            bi_score(BiVariant::Dp, &q, &k, &BiParams::none()),
            Err(crate::Error::InvalidArgument(_))
        ));
        let k = Matrix::zeros(3, 2);
        assert!(bi_score(BiVariant::Bili, &q, &k, &BiParams::none()).is_err());
        assert!(bi_attend(&q, &k, &Matrix::zeros(3, 3), BiVariant::Dp, &BiParams::none()).is_err());
    }
}
