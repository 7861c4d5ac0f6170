//! Reference implementations written from the score definitions with plain
//! loops over raw entries, independent of the library's plans.

#![allow(dead_code)]

use triattn::init::{normal_matrix, normal_tensor, normal_vec, seeded, Rng64};
use triattn::tensor::{Matrix, Tensor3, Vector};
use triattn::tri::{TriParams, TriVariant, ValueIntegration};

pub fn matvec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum())
        .collect()
}

pub fn col(m: &Matrix, c: usize) -> Vec<f64> {
    (0..m.rows()).map(|r| m.get(r, c)).collect()
}

/// `F(q, k, c)` for one triple.
pub fn naive_score(variant: TriVariant, p: &TriParams, q: &[f64], k: &[f64], c: &[f64]) -> f64 {
    let d = q.len();
    match variant {
        TriVariant::Tdp => (0..d).map(|x| q[x] * k[x] * c[x]).sum(),
        TriVariant::Tsdp => (0..d).map(|x| q[x] * k[x] * c[x]).sum::<f64>() / (d as f64).sqrt(),
        TriVariant::TAdd => {
            let (wq, uk, hc) = (
                matvec(p.w.as_ref().unwrap(), q),
                matvec(p.u.as_ref().unwrap(), k),
                matvec(p.h.as_ref().unwrap(), c),
            );
            let pv = p.p.as_ref().unwrap().as_slice();
            (0..pv.len()).map(|r| pv[r] * (wq[r] + uk[r] + hc[r]).tanh()).sum()
        }
        TriVariant::TriliEcon => {
            let (wq, uk, hc) = (
                matvec(p.w.as_ref().unwrap(), q),
                matvec(p.u.as_ref().unwrap(), k),
                matvec(p.h.as_ref().unwrap(), c),
            );
            (0..wq.len()).map(|r| wq[r] * uk[r] * hc[r]).sum()
        }
        TriVariant::TriliFull => {
            let w = p.wt.as_ref().unwrap();
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    for e in 0..d {
                        s += w.get(a, b, e) * q[a] * k[b] * c[e];
                    }
                }
            }
            s
        }
    }
}

/// Row-major `I x J` weights from a joint softmax over the grid.
pub fn naive_weights(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Random parameters with every block a variant / integration pair needs.
pub fn random_params(rng: &mut Rng64, variant: TriVariant, integration: ValueIntegration, d: usize) -> TriParams {
    let mut p = TriParams::none();
    match variant {
        TriVariant::TAdd => {
            p.w = Some(normal_matrix(rng, d, d, 0.5));
            p.u = Some(normal_matrix(rng, d, d, 0.5));
            p.h = Some(normal_matrix(rng, d, d, 0.5));
            p.p = Some(Vector::from(normal_vec(rng, d, 0.5)));
        }
        TriVariant::TriliEcon => {
            p.w = Some(normal_matrix(rng, d, d, 0.5));
            p.u = Some(normal_matrix(rng, d, d, 0.5));
            p.h = Some(normal_matrix(rng, d, d, 0.5));
        }
        TriVariant::TriliFull => p.wt = Some(normal_tensor(rng, [d, d, d], 0.5)),
        TriVariant::Tdp | TriVariant::Tsdp => {}
    }
    if integration == ValueIntegration::Bilinear {
        p.u_val = Some(normal_matrix(rng, d, d, 0.5));
        p.h_val = Some(normal_matrix(rng, d, d, 0.5));
    }
    p
}

pub fn identity_tensor(d: usize) -> Tensor3 {
    Tensor3::from_fn([d, d, d], |a, b, c| if a == b && b == c { 1.0 } else { 0.0 })
}

pub fn rng(seed: u64) -> Rng64 {
    seeded(seed)
}
