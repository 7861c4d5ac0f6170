//! Analytic backward passes and a central-difference gradient checker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bi::{BiParams, BiPlan, BiVariant};
use crate::error::{invalid, shape, Error, Result};
use crate::init::{normal_matrix, normal_vector, normal_vec, seeded, Rng64};
use crate::tensor::{Matrix, Vector};
use crate::tri::{TriParams, TriPlan, TriVariant, ValueIntegration};

/// Gradients of `upstream^T * output` with respect to every input.
///
/// `d_c` is `None` for bi-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoints<P> {
    pub d_q: Vector,
    pub d_k: Matrix,
    pub d_v: Matrix,
    pub d_c: Option<Matrix>,
    pub d_params: P,
}

fn check_upstream(upstream: &Vector, d: usize) -> Result<()> {
    if upstream.len() != d {
        return Err(shape(format!(
            "upstream has length {}, expected {d}",
            upstream.len()
        )));
    }
    Ok(())
}

fn cols_to_matrix(cols: &[Vec<f64>], d: usize) -> Matrix {
    if cols.is_empty() {
        return Matrix::zeros(d, 0);
    }
    Matrix::from_cols(cols).expect("columns share a length")
}

pub fn tri_attend_backward(
    q: &Vector,
    keys: &Matrix,
    values: &Matrix,
    ctx: &Matrix,
    variant: TriVariant,
    integration: ValueIntegration,
    params: &TriParams,
    upstream: &Vector,
) -> Result<Adjoints<TriParams>> {
    let d = q.len();
    check_upstream(upstream, d)?;
    if keys.rows() != d || values.rows() != d || ctx.rows() != d {
        return Err(shape(format!("inputs must all have {d} rows")));
    }
    let (kc, vc, cc) = (keys.columns(), values.columns(), ctx.columns());
    let plan = TriPlan::new(variant, integration, &kc, &vc, &cc, params, d)?;
    let cache = plan.forward(q.as_slice());
    let mut acc = plan.accum();
    let dq = plan.backward(q.as_slice(), &cache, upstream.as_slice(), &mut acc);
    plan.finish(&mut acc);
    Ok(Adjoints {
        d_q: Vector::from(dq),
        d_k: cols_to_matrix(&acc.d_keys, d),
        d_v: cols_to_matrix(&acc.d_values, d),
        d_c: Some(cols_to_matrix(&acc.d_ctx, d)),
        d_params: acc.d_params,
    })
}

pub fn bi_attend_backward(
    q: &Vector,
    keys: &Matrix,
    values: &Matrix,
    variant: BiVariant,
    params: &BiParams,
    upstream: &Vector,
) -> Result<Adjoints<BiParams>> {
    let d = q.len();
    check_upstream(upstream, d)?;
    if keys.rows() != d || values.rows() != d {
        return Err(shape(format!("inputs must all have {d} rows")));
    }
    let (kc, vc) = (keys.columns(), values.columns());
    let plan = BiPlan::new(variant, &kc, &vc, params, d)?;
    let cache = plan.forward(q.as_slice());
    let mut acc = plan.accum();
    let dq = plan.backward(q.as_slice(), &cache, upstream.as_slice(), &mut acc);
    plan.finish(&mut acc);
    Ok(Adjoints {
        d_q: Vector::from(dq),
        d_k: cols_to_matrix(&acc.d_keys, d),
        d_v: cols_to_matrix(&acc.d_values, d),
        d_c: None,
        d_params: acc.d_params,
    })
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate. Coordinates are evaluated in parallel.
pub fn fd_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("step must be positive and finite, got {h}")));
    }
    (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let mut x = theta.to_vec();
            x[i] = theta[i] + h;
            let fp = f(&x);
            x[i] = theta[i] - h;
            let fm = f(&x);
            for v in [fp, fm] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        coordinate: i,
                        value: v,
                    });
                }
            }
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
/// Standard deviation of the random check inputs.
pub const INPUT_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub i: usize,
    pub j: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { d: 5, i: 3, j: 2 }
    }
}

/// Perturbation added to one analytic gradient entry before comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub block: String,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRequest {
    pub variant: TriVariant,
    pub integration: ValueIntegration,
    pub dims: Dims,
    pub seed: u64,
    pub h: f64,
    pub threshold: f64,
    pub fault: Option<Fault>,
}

impl GradcheckRequest {
    pub fn new(variant: TriVariant, integration: ValueIntegration, dims: Dims, seed: u64) -> Self {
        Self {
            variant,
            integration,
            dims,
            seed,
            h: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub variant: String,
    pub integration: String,
    pub dims: Dims,
    pub seed: u64,
    pub h: f64,
    pub threshold: f64,
    pub fault_injected: bool,
    pub blocks: Vec<BlockResult>,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A random tri-attention instance with inputs drawn from `N(0, 0.5^2)`.
#[derive(Debug, Clone)]
pub struct TriInstance {
    pub q: Vector,
    pub keys: Matrix,
    pub values: Matrix,
    pub ctx: Matrix,
    pub params: TriParams,
    pub upstream: Vector,
}

fn normal_like(rng: &mut Rng64, p: &mut TriParams) {
    for (_, block) in p.blocks_mut() {
        let fresh = normal_vec(rng, block.len(), INPUT_STD);
        block.copy_from_slice(&fresh);
    }
}

impl TriInstance {
    pub fn random(
        variant: TriVariant,
        integration: ValueIntegration,
        dims: Dims,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let Dims { d, i, j } = dims;
        if d == 0 || i == 0 || j == 0 {
            return Err(invalid("gradcheck dims must be positive"));
        }
        let mut params = TriParams::init(variant, integration, d, rng)?;
        normal_like(rng, &mut params);
        Ok(Self {
            q: normal_vector(rng, d, INPUT_STD),
            keys: normal_matrix(rng, d, i, INPUT_STD),
            values: normal_matrix(rng, d, i, INPUT_STD),
            ctx: normal_matrix(rng, d, j, INPUT_STD),
            params,
            upstream: normal_vector(rng, d, 1.0),
        })
    }

    fn block_names(&self) -> Vec<&'static str> {
        let mut names = vec!["q", "K", "V", "C"];
        names.extend(self.params.blocks().into_iter().map(|(n, _)| n));
        names
    }

    fn block(&self, name: &str) -> Vec<f64> {
        match name {
            "q" => self.q.as_slice().to_vec(),
            "K" => self.keys.as_slice().to_vec(),
            "V" => self.values.as_slice().to_vec(),
            "C" => self.ctx.as_slice().to_vec(),
            _ => self
                .params
                .blocks()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, b)| b.to_vec())
                .expect("known block"),
        }
    }

    fn block_mut(&mut self, name: &str) -> &mut [f64] {
        match name {
            "q" => self.q.as_mut_slice(),
            "K" => self.keys.as_mut_slice(),
            "V" => self.values.as_mut_slice(),
            "C" => self.ctx.as_mut_slice(),
            _ => self
                .params
                .blocks_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, b)| b)
                .expect("known block"),
        }
    }
}

fn analytic_block(adj: &Adjoints<TriParams>, name: &str) -> Vec<f64> {
    match name {
        "q" => adj.d_q.as_slice().to_vec(),
        "K" => adj.d_k.as_slice().to_vec(),
        "V" => adj.d_v.as_slice().to_vec(),
        "C" => adj.d_c.as_ref().expect("tri adjoints").as_slice().to_vec(),
        _ => adj
            .d_params
            .blocks()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, b)| b.to_vec())
            .expect("known block"),
    }
}

/// Compares analytic gradients of `g^T q_new^c` with central differences,
/// block by block. Failures are report content, never errors.
pub fn gradcheck_report(req: &GradcheckRequest) -> Result<GradcheckReport> {
    let mut rng = seeded(req.seed);
    let inst = TriInstance::random(req.variant, req.integration, req.dims, &mut rng)?;
    let adj = tri_attend_backward(
        &inst.q,
        &inst.keys,
        &inst.values,
        &inst.ctx,
        req.variant,
        req.integration,
        &inst.params,
        &inst.upstream,
    )?;
    let names = inst.block_names();
    if let Some(fault) = &req.fault {
        if !names.contains(&fault.block.as_str()) {
            return Err(invalid(format!("no gradient block named {:?}", fault.block)));
        }
    }
    let mut blocks = Vec::with_capacity(names.len());
    for name in names {
        let theta = inst.block(name);
        let loss = |x: &[f64]| -> f64 {
            let mut probe = inst.clone();
            probe.block_mut(name).copy_from_slice(x);
            let (kc, vc, cc) = (probe.keys.columns(), probe.values.columns(), probe.ctx.columns());
            match TriPlan::new(req.variant, req.integration, &kc, &vc, &cc, &probe.params, req.dims.d) {
                Ok(plan) => {
                    let out = plan.forward(probe.q.as_slice()).out;
                    probe.upstream.as_slice().iter().zip(&out).map(|(g, o)| g * o).sum()
                }
                Err(_) => f64::NAN,
            }
        };
        let numeric = fd_gradient(loss, &theta, req.h)?;
        let mut analytic = analytic_block(&adj, name);
        if let Some(fault) = req.fault.as_ref().filter(|f| f.block == name) {
            let slot = analytic
                .get_mut(fault.index)
                .ok_or_else(|| invalid(format!("fault index {} out of range", fault.index)))?;
            *slot += fault.delta;
        }
        let max_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);
        blocks.push(BlockResult {
            block: name.to_string(),
            entries: theta.len(),
            max_relative_error: max_err,
            pass: max_err < req.threshold,
        });
    }
    Ok(GradcheckReport {
        variant: req.variant.name().to_string(),
        integration: req.integration.name().to_string(),
        dims: req.dims,
        seed: req.seed,
        h: req.h,
        threshold: req.threshold,
        fault_injected: req.fault.is_some(),
        pass: blocks.iter().all(|b| b.pass),
        blocks,
    })
}

/// Every variant, integration and seed at the given dims.
pub fn gradcheck_suite(dims: Dims, seeds: &[u64]) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for variant in TriVariant::ALL {
        for integration in ValueIntegration::ALL {
            for &seed in seeds {
                out.push(gradcheck_report(&GradcheckRequest::new(
                    variant,
                    integration,
                    dims,
                    seed,
                ))?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bi::bi_attend;

    #[test]
    fn fd_of_square_norm() {
        let theta = [0.3, -1.2, 2.0];
        let g = fd_gradient(|x| x.iter().map(|v| v * v).sum(), &theta, 1e-5).unwrap();
        for (gi, t) in g.iter().zip(&theta) {
            assert!((gi - 2.0 * t).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_linear_function() {
        let w = [1.5, -2.0, 0.25];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = fd_gradient(f, &[0.1, 0.2, 0.3], 1e-5).unwrap();
        for (gi, wi) in g.iter().zip(&w) {
            assert!((gi - wi).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_names_the_bad_coordinate() {
        let f = |x: &[f64]| if x[2] > 0.5 { f64::INFINITY } else { x[0] };
        match fd_gradient(f, &[0.0, 0.0, 0.5], 1e-3) {
            Err(Error::NonFinite { coordinate, .. }) => assert_eq!(coordinate, 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(fd_gradient(|x| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_adjoints() {
        for variant in TriVariant::ALL {
            let mut rng = seeded(4);
            let inst = TriInstance::random(variant, variant.default_integration(), Dims::default(), &mut rng)
                .unwrap();
            let adj = tri_attend_backward(
                &inst.q,
                &inst.keys,
                &inst.values,
                &inst.ctx,
                variant,
                variant.default_integration(),
                &inst.params,
                &Vector::zeros(5),
            )
            .unwrap();
            assert!(adj.d_q.as_slice().iter().all(|x| *x == 0.0));
            assert!(adj.d_k.as_slice().iter().all(|x| *x == 0.0));
            assert!(adj.d_params.blocks().iter().all(|(_, b)| b.iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn single_cell_value_gradient() {
        // I = J = 1: the weight is constant 1 and q_new = v * c.
        let q = Vector::from(vec![0.2, -0.4]);
        let k = Matrix::from_cols(&[vec![1.0, 2.0]]).unwrap();
        let v = Matrix::from_cols(&[vec![0.5, -1.5]]).unwrap();
        let c = Matrix::from_cols(&[vec![3.0, -2.0]]).unwrap();
        let g = Vector::from(vec![1.0, 10.0]);
        let adj = tri_attend_backward(
            &q,
            &k,
            &v,
            &c,
            TriVariant::Tdp,
            ValueIntegration::Multiplicative,
            &TriParams::none(),
            &g,
        )
        .unwrap();
        assert_eq!(adj.d_v.as_slice(), &[3.0, -20.0]);
        assert!(adj.d_q.as_slice().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn bi_backward_matches_finite_differences() {
        for variant in BiVariant::ALL {
            let mut rng = seeded(11);
            let d = 4;
            let params = BiParams::init(variant, d, &mut rng);
            let q = normal_vector(&mut rng, d, INPUT_STD);
            let k = normal_matrix(&mut rng, d, 3, INPUT_STD);
            let v = normal_matrix(&mut rng, d, 3, INPUT_STD);
            let g = normal_vector(&mut rng, d, 1.0);
            let adj = bi_attend_backward(&q, &k, &v, variant, &params, &g).unwrap();
            let f = |x: &[f64], slot: usize| -> f64 {
                let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
                match slot {
                    0 => q2.as_mut_slice().copy_from_slice(x),
                    1 => k2.as_mut_slice().copy_from_slice(x),
                    _ => v2.as_mut_slice().copy_from_slice(x),
                }
                let out = bi_attend(&q2, &k2, &v2, variant, &params).unwrap();
                g.dot(&out).unwrap()
            };
            let pairs = [
                (q.as_slice(), adj.d_q.as_slice()),
                (k.as_slice(), adj.d_k.as_slice()),
                (v.as_slice(), adj.d_v.as_slice()),
            ];
            for (slot, (theta, analytic)) in pairs.iter().enumerate() {
                let numeric = fd_gradient(|x| f(x, slot), theta, 1e-5).unwrap();
                for (a, b) in analytic.iter().zip(&numeric) {
                    assert!(relative_error(*a, *b) < 1e-5, "{variant:?} slot {slot}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn tri_backward_matches_finite_differences() {
        for variant in TriVariant::ALL {
            for integration in ValueIntegration::ALL {
                // A wider step keeps round-off on tiny entries below 1e-5.
                let req = GradcheckRequest {
                    h: 1e-4,
                    threshold: 1e-5,
                    ..GradcheckRequest::new(variant, integration, Dims { d: 5, i: 3, j: 2 }, 3)
                };
                let report = gradcheck_report(&req).unwrap();
                assert!(report.pass, "{}", report.to_json());
            }
        }
    }

    #[test]
    fn fault_injection_fails_the_report() {
        let req = GradcheckRequest {
            fault: Some(Fault {
                block: "Wt".into(),
                index: 7,
                delta: 1e-3,
            }),
            ..GradcheckRequest::new(TriVariant::TriliFull, ValueIntegration::Bilinear, Dims { d: 4, i: 2, j: 2 }, 1)
        };
        let report = gradcheck_report(&req).unwrap();
        assert!(!report.pass);
        let wt = report.blocks.iter().find(|b| b.block == "Wt").unwrap();
        assert!(!wt.pass);
        assert!(report.blocks.iter().filter(|b| b.block != "Wt").all(|b| b.pass));
    }

    #[test]
    fn softmax_jacobian_columns_sum_to_zero() {
        // d(sum_i alpha_i)/ds_j = 0 for every j.
        let s = [0.3, -1.0, 2.2, 0.0];
        let total = fd_gradient(
            |x| {
                let mut a = x.to_vec();
                crate::bi::softmax_in_place(&mut a);
                a.iter().sum::<f64>()
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(total.iter().all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn report_serialises_expected_fields() {
        let report = gradcheck_report(&GradcheckRequest::new(
            TriVariant::Tdp,
            ValueIntegration::Multiplicative,
            Dims { d: 3, i: 2, j: 2 },
            1,
        ))
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        for key in ["variant", "integration", "dims", "seed", "blocks", "pass"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["variant"], "tdp");
    }
}
