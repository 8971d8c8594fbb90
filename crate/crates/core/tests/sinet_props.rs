use proptest::prelude::*;
use silab::gradcheck::rel_error;
use silab::losses::StochasticLoss;
use silab::sinet::{
    degree_map, init_model, load_checkpoint, save_checkpoint, AttentionKind, MaskedTokenTask, SinetConfig,
};
use silab::vecmath::{dot, norm};

fn small() -> SinetConfig {
    SinetConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_k: 4,
        d_v: 4,
        d_ff: 16,
        vocab_size: 12,
        max_seq_len: 6,
        ..SinetConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_ignore_encoder_scale(
        seed in 0u64..1000,
        c in 1e-3..1e3f64,
        tokens in prop::collection::vec(0usize..12, 1..=6),
    ) {
        let model = init_model(&small(), 1.0, seed).unwrap();
        let a = model.forward(&tokens).unwrap();
        let b = model.scaled_encoder(c).forward(&tokens).unwrap();
        prop_assert!(rel_error(a.data(), b.data(), 1e-30) <= 1e-9);
    }

    #[test]
    fn encoder_gradient_is_orthogonal_to_encoder(seed in 0u64..1000, sample in any::<u64>()) {
        let cfg = small();
        let task = MaskedTokenTask::new(cfg.clone(), cfg.max_seq_len, 0.3, 4, seed).unwrap();
        let x = task.flatten(&init_model(&cfg, 1.0, seed).unwrap()).unwrap();
        let n = task.groups()[0].len;
        let g = task.eval(sample, &x).unwrap().grad;
        prop_assert!(dot(&g[..n], &x[..n]).abs() <= 1e-9 * (norm(&g[..n]) * norm(&x[..n]) + 1e-30));
    }
}

#[test]
fn softmax_attention_is_not_invariant() {
    let cfg = SinetConfig {
        attention: AttentionKind::Softmax,
        ..small()
    };
    let model = init_model(&cfg, 1.0, 3).unwrap();
    let tokens = [3, 1, 4, 1, 5, 9];
    let a = model.forward(&tokens).unwrap();
    let b = model.scaled_encoder(10.0).forward(&tokens).unwrap();
    assert!(rel_error(a.data(), b.data(), 1e-30) > 1e-3);
}

#[test]
fn every_residual_sum_joins_equal_degrees() {
    let map = degree_map(&SinetConfig::default());
    assert!(map.residual_rule_violations().is_empty());
    assert_eq!(map.degree("logits"), Some(0));
}

#[test]
fn checkpoint_round_trips_exactly() {
    let model = init_model(&small(), 0.7, 11).unwrap();
    let mut buf = Vec::new();
    save_checkpoint(&model, &mut buf).unwrap();
    let back = load_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.encoder.flat(), model.encoder.flat());
    assert_eq!(back.head.flat(), model.head.flat());
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let model = init_model(&small(), 1.0, 1).unwrap();
    let mut buf = Vec::new();
    save_checkpoint(&model, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
    assert!(load_checkpoint(cut.as_bytes()).is_err());
}

#[test]
fn inconsistent_dimensions_are_rejected() {
    let cfg = SinetConfig { d_v: 3, ..small() };
    assert!(cfg.validate().is_err());
    assert!(init_model(&cfg, 1.0, 0).is_err());
}
