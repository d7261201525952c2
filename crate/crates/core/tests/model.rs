use newscap::adaptive_softmax::ClusterSpec;
use newscap::context::{synth_context, ContextBundle, ContextSpec, Matrix};
use newscap::decoder::DecoderConfig;
use newscap::model::{teacher_forcing_pair, CaptionModel, ModelConfig};
use newscap::tensor::Tape;
use newscap::Error;

fn toy_config() -> ModelConfig {
    ModelConfig {
        context: ContextSpec { d_image: 8, m_image: 4, d_face: 6, max_faces: 2, d_object: 8, max_objects: 3, d_article: 8, n_layers: 2, ..Default::default() },
        decoder: DecoderConfig { d_model: 16, n_heads: 2, n_blocks: 2, kernel_sizes: vec![3, 2], attention_scaling: true, max_positions: 12, ffn_dim: 32 },
        vocab_size: 50,
        clusters: Some(ClusterSpec { cutoffs: vec![10, 20, 20], tail_dim_divisors: vec![] }),
    }
}

fn bundle(seed: u64, cfg: &ModelConfig) -> ContextBundle {
    synth_context(seed, &cfg.context, 2, 3, 6, cfg.vocab_size).unwrap()
}

fn full_pass_hidden(model: &CaptionModel, b: &ContextBundle, input: &[u32]) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let kv = model.encode_context(&mut tape, &bound, b).unwrap();
    let h = model.hidden_states(&mut tape, &bound, &kv, input).unwrap();
    tape.value(h).to_vec()
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let cfg = toy_config();
    let model = CaptionModel::new(cfg.clone(), 3).unwrap();
    let b = bundle(1, &cfg);
    let input = [1u32, 17, 4, 33, 9, 48, 12];
    let full = full_pass_hidden(&model, &b, &input);
    let mut state = model.start_state(&b).unwrap();
    let d = cfg.decoder.d_model;
    for (t, &tok) in input.iter().enumerate() {
        let h = model.decode_step(&mut state, tok).unwrap();
        assert_eq!(h.len(), d);
        for (a, e) in h.iter().zip(&full[t * d..(t + 1) * d]) {
            assert!((a - e).abs() <= 1e-10, "step {t}: {a} vs {e}");
        }
        assert_eq!(state.history_len(0, d), t + 1);
    }
}

#[test]
fn future_tokens_do_not_affect_earlier_positions() {
    let cfg = toy_config();
    let model = CaptionModel::new(cfg.clone(), 4).unwrap();
    let b = bundle(2, &cfg);
    let d = cfg.decoder.d_model;
    let a = full_pass_hidden(&model, &b, &[1, 5, 6, 7, 8, 9]);
    let c = full_pass_hidden(&model, &b, &[1, 5, 6, 40, 41, 42]);
    for i in 0..3 * d {
        assert!((a[i] - c[i]).abs() <= 1e-10);
    }
    assert!((3 * d..6 * d).any(|i| (a[i] - c[i]).abs() > 1e-6));
}

#[test]
fn decode_step_is_deterministic() {
    let cfg = toy_config();
    let b = bundle(5, &cfg);
    let run = || {
        let model = CaptionModel::new(cfg.clone(), 9).unwrap();
        let mut s = model.start_state(&b).unwrap();
        model.decode_step(&mut s, 1).unwrap();
        model.decode_step(&mut s, 22).unwrap()
    };
    let x = run();
    let y = run();
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn dead_value_projections_cut_off_the_context() {
    let cfg = toy_config();
    let mut model = CaptionModel::new(cfg.clone(), 6).unwrap();
    let ids: Vec<usize> = (0..model.params().len()).filter(|&i| model.params().name(i).ends_with(".value")).collect();
    for id in ids {
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let zero = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
    let b1 = bundle(7, &cfg);
    let mut b0 = b1.clone();
    b0.image = zero(&b0.image);
    b0.faces = zero(&b0.faces);
    b0.objects = zero(&b0.objects);
    b0.article_layers = b0.article_layers.iter().map(zero).collect();
    let mut b2 = bundle(8, &cfg);
    b2.faces = Matrix::zeros(0, cfg.context.d_face);
    let input = [1u32, 30, 31, 2];
    let h0 = full_pass_hidden(&model, &b0, &input);
    for other in [&b1, &b2] {
        let h = full_pass_hidden(&model, other, &input);
        for (p, q) in h0.iter().zip(&h) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn position_overflow_is_a_capacity_error() {
    let cfg = toy_config();
    let model = CaptionModel::new(cfg.clone(), 1).unwrap();
    let b = bundle(1, &cfg);
    let mut s = model.start_state(&b).unwrap();
    for _ in 0..cfg.decoder.max_positions {
        model.decode_step(&mut s, 5).unwrap();
    }
    assert!(matches!(model.decode_step(&mut s, 5), Err(Error::Capacity(_))));
    let long: Vec<u32> = vec![5; cfg.decoder.max_positions];
    assert!(matches!(model.teacher_forced(&b, &long), Err(Error::Capacity(_))));
}

#[test]
fn bundle_dimension_mismatch_is_rejected() {
    let cfg = toy_config();
    let model = CaptionModel::new(cfg.clone(), 1).unwrap();
    let mut b = bundle(1, &cfg);
    b.objects = Matrix::zeros(1, cfg.context.d_object + 1);
    assert!(matches!(model.teacher_forced(&b, &[5, 6]), Err(Error::Context(_))));
}

#[test]
fn teacher_forced_log_probs_match_incremental_distributions() {
    let cfg = toy_config();
    let model = CaptionModel::new(cfg.clone(), 2).unwrap();
    let b = bundle(3, &cfg);
    let caption = [12u32, 44, 3, 27];
    let tf = model.teacher_forced(&b, &caption).unwrap();
    let (input, targets) = teacher_forcing_pair(&caption);
    assert_eq!(tf.targets, targets);
    let mut s = model.start_state(&b).unwrap();
    let mut total = 0.0;
    for (i, &tok) in input.iter().enumerate() {
        let lp = model.step_log_probs(&mut s, tok).unwrap();
        let lse = newscap::tensor::logsumexp(&lp);
        assert!(lse.abs() < 1e-9);
        assert!((lp[targets[i] as usize] - tf.log_probs[i]).abs() < 1e-10);
        total += lp[targets[i] as usize];
    }
    assert!((total - tf.total_log_prob()).abs() < 1e-9);

    // the summed NLL used for training agrees with the full distribution
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (nll, n) = model.caption_nll(&mut tape, &bound, &b, &caption).unwrap();
    assert_eq!(n, caption.len() + 1);
    assert!((tape.scalar(nll) + tf.total_log_prob()).abs() < 1e-10);
}

#[test]
fn invalid_configs_name_the_field() {
    let mut cfg = toy_config();
    cfg.decoder.n_heads = 3;
    assert!(CaptionModel::new(cfg, 0).unwrap_err().to_string().contains("n_heads"));
    let mut cfg = toy_config();
    cfg.clusters = Some(ClusterSpec { cutoffs: vec![10, 10], tail_dim_divisors: vec![] });
    assert!(CaptionModel::new(cfg, 0).unwrap_err().to_string().contains("cutoffs"));
    let cfg = ModelConfig { vocab_size: 3, clusters: None, ..toy_config() };
    assert!(CaptionModel::new(cfg, 0).unwrap_err().to_string().contains("vocab_size"));
}

#[test]
fn initialization_follows_fan_in_bounds() {
    let model = CaptionModel::new(toy_config(), 0).unwrap();
    for (name, t) in model.params().iter() {
        if name.ends_with(".ln.gain") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        } else if name.ends_with(".ln.bias") || name == "mix.logits" {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            let fan_in = if t.shape().len() == 2 { t.shape()[1] } else { 0 };
            if fan_in > 0 {
                let bound = 1.0 / (fan_in as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }
}
