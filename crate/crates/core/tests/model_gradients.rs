use triattn::grad::{fd_gradient, relative_error};
use triattn::model::{loss_and_gradient, Example, Mode, TanConfig, TanState};
use triattn::tri::{TriVariant, ValueIntegration};

fn batch() -> Vec<Example> {
    vec![
        Example { seq_a: vec![4, 5, 6], seq_b: vec![7, 3], label: 1 },
        Example { seq_a: vec![8], seq_b: vec![9, 10, 4, 4], label: 0 },
    ]
}

fn check(config: &TanConfig) {
    // Zero `p` makes attention uniform and, with residual paths, puts
    // |pool a - pool b| exactly on its kink; move away from it.
    let mut state = TanState::init(config).unwrap();
    for (name, block) in state.blocks_mut() {
        if name.starts_with("layer") {
            for (k, x) in block.iter_mut().enumerate() {
                *x += 0.3 * ((k as f64) * 1.7 + 0.4).sin();
            }
        }
    }
    let data = batch();
    let (_, grad) = loss_and_gradient(&state, config, &data).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        grad.blocks().into_iter().map(|(n, b)| (n, b.to_vec())).collect();
    for (idx, (name, a)) in analytic.iter().enumerate() {
        let theta = state.blocks()[idx].1.to_vec();
        let f = |x: &[f64]| {
            let mut s = state.clone();
            s.blocks_mut()[idx].1.copy_from_slice(x);
            loss_and_gradient(&s, config, &data).unwrap().0
        };
        let numeric = fd_gradient(f, &theta, 1e-5).unwrap();
        let worst = a
            .iter()
            .zip(&numeric)
            // Entries near 1e-9 sit at the round-off floor of the differences.
            .map(|(x, y)| if (x - y).abs() < 1e-9 { 0.0 } else { relative_error(*x, *y) })
            .fold(0.0, f64::max);
        assert!(
            worst < 1e-4,
            "{:?} {:?} {:?} block {name}: {worst}",
            config.mode,
            config.variant,
            config.integration
        );
    }
}

fn base() -> TanConfig {
    TanConfig {
        dim: 3,
        vocab_size: 11,
        max_seq_len: 3,
        dropout: 0.0,
        embed_std: Some(0.8),
        layers: 2,
        ..TanConfig::default()
    }
}

#[test]
fn tri_network_gradients_match_finite_differences() {
    for variant in TriVariant::ALL {
        for integration in ValueIntegration::ALL {
            check(&TanConfig { mode: Mode::Tri, variant, integration, ..base() });
        }
    }
}

#[test]
fn bi_and_context_added_gradients_match_finite_differences() {
    for mode in [Mode::Bi, Mode::CBi] {
        for variant in [TriVariant::TAdd, TriVariant::Tdp, TriVariant::Tsdp, TriVariant::TriliEcon] {
            check(&TanConfig { mode, variant, ..base() });
        }
    }
}

#[test]
fn residual_gradients_match_finite_differences() {
    check(&TanConfig { residual: true, variant: TriVariant::TAdd, integration: ValueIntegration::Additive, ..base() });
    check(&TanConfig { residual: true, mode: Mode::Bi, variant: TriVariant::TAdd, ..base() });
    check(&TanConfig { residual: true, ..base() });
}
