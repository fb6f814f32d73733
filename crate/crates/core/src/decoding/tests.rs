use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits(v: &[f64]) -> TokenDistribution {
    TokenDistribution::logits(v.to_vec()).unwrap()
}

fn probs(v: &[f64]) -> TokenDistribution {
    TokenDistribution::probs(v.to_vec()).unwrap()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&logits(&[0.0, 0.0])).unwrap().values(), &[0.5, 0.5]);
    let s = softmax(&logits(&[1000.0, 1000.0 + 3f64.ln()])).unwrap();
    assert!((s.values()[0] - 0.25).abs() < 1e-12);
    assert!((s.values()[1] - 0.75).abs() < 1e-12);
    assert_eq!(TokenDistribution::logits(vec![0.0, f64::NAN]), Err(DecodingError::NonFinite(1)));
    assert!(softmax(&probs(&[0.5, 0.5])).is_err());
}

#[test]
fn jsd_examples() {
    let p = probs(&[0.3, 0.7]);
    assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    assert_eq!(jsd(&probs(&[1.0, 0.0]), &probs(&[0.0, 1.0])).unwrap(), 1.0);
    assert!(matches!(
        jsd(&probs(&[1.0]), &probs(&[0.5, 0.5])),
        Err(DecodingError::DimensionMismatch(1, 2))
    ));
}

#[test]
fn kld_tau_examples() {
    let p = probs(&[0.2, 0.8]);
    assert_eq!(kld_tau(&p, &p).unwrap(), 0.0);
    // KL([1,0] ‖ [0.5,0.5]) = ln 2
    assert!((kld_tau(&probs(&[1.0, 0.0]), &probs(&[0.5, 0.5])).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(kld_tau_checked(&probs(&[0.5, 0.5]), &probs(&[1.0, 0.0])).unwrap(), (1.0, true));
}

#[test]
fn alpha_examples() {
    assert!((adaptive_alpha(0.4, 2.0) - 0.8).abs() < 1e-15);
    assert_eq!(adaptive_alpha(0.6, 2.0), 1.0);
    assert_eq!(adaptive_alpha(0.9, 0.0), 0.0);
}

#[test]
fn blend_examples() {
    let res = logits(&[2.0, 0.0]);
    let full = logits(&[0.0, 2.0]);
    assert_eq!(blend_logits(&res, &full, 0.0).unwrap().values(), full.values());
    assert_eq!(blend_logits(&res, &full, 1.0).unwrap().values(), res.values());
    assert_eq!(blend_logits(&res, &full, 0.5).unwrap().values(), &[1.0, 1.0]);
    assert!(blend_logits(&res, &logits(&[0.0]), 0.5).is_err());
}

#[test]
fn sampling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let onehot = probs(&[0.0, 0.0, 1.0, 0.0]);
    for cfg in [
        SamplingConfig::default(),
        SamplingConfig::greedy(),
        SamplingConfig { temperature: 3.0, top_k: Some(2), top_p: 0.1, ..Default::default() },
    ] {
        assert_eq!(sample_token(&onehot, &cfg, &mut rng).unwrap(), 2);
    }
    assert_eq!(sample_token(&probs(&[0.2, 0.5, 0.3]), &SamplingConfig::greedy(), &mut rng).unwrap(), 1);
    assert_eq!(argmax(&[0.4, 0.2, 0.4]), 0);

    let nucleus = SamplingConfig { top_p: 0.5, ..Default::default() };
    let d = probs(&[0.6, 0.3, 0.1]);
    assert_eq!(truncate(d.values(), &nucleus).unwrap(), vec![(0, 1.0)]);
    for _ in 0..200 {
        assert_eq!(sample_token(&d, &nucleus, &mut rng).unwrap(), 0);
    }
    let kept = truncate(d.values(), &SamplingConfig { top_p: 0.9, ..Default::default() }).unwrap();
    assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), [0, 1]);
    let kept = truncate(d.values(), &SamplingConfig { top_p: 1.0, top_k: Some(1), ..Default::default() }).unwrap();
    assert_eq!(kept, vec![(0, 1.0)]);
}

#[test]
fn temperature_sharpens_and_flattens() {
    let d = [0.6, 0.3, 0.1];
    let cold = truncate(&d, &SamplingConfig { temperature: 0.5, top_p: 1.0, ..Default::default() }).unwrap();
    let hot = truncate(&d, &SamplingConfig { temperature: 2.0, top_p: 1.0, ..Default::default() }).unwrap();
    assert!(cold[0].1 > 0.6 && hot[0].1 < 0.6);
    // p^(1/T) renormalized
    let z: f64 = d.iter().map(|p| p * p).sum();
    assert!((cold[0].1 - 0.36 / z).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(SamplingConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
    assert!(SamplingConfig { top_p: 0.0, ..Default::default() }.validate().is_err());
    assert!(SamplingConfig { temperature: 0.0, greedy: true, ..Default::default() }.validate().is_ok());
    assert!(RvdConfig { fixed_alpha: Some(1.5), ..Default::default() }.validate().is_err());
    assert!(RvdConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    let d = RvdConfig::default();
    assert_eq!((d.beta, d.divergence, d.sampling.temperature, d.sampling.top_p), (2.0, Divergence::Jsd, 1.0, 0.95));
    assert_eq!(d.sampling.top_k, None);
}

#[test]
fn mode_labels() {
    assert_eq!(DecodingMode::Regular.to_string(), "regular");
    assert_eq!(DecodingMode::Rvd { beta: 2.0, divergence: Divergence::Jsd }.to_string(), "rvd-jsd-b2");
    assert_eq!(DecodingMode::Rvd { beta: 0.25, divergence: Divergence::Kld }.to_string(), "rvd-kld-b0.25");
    assert_eq!(DecodingMode::FixedAlpha { alpha: 0.5 }.to_string(), "fixed-alpha-0.5");
}
