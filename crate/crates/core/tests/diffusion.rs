use un2clip_autograd::{AdamWConfig, AdamWState, RngStream, Tape, Tensor};
use un2clip_core::clip::{ClipArch, ClipModel};
use un2clip_core::corpus::{generate_corpus, CorpusConfig, Split};
use un2clip_core::diffusion::*;
use un2clip_core::io::checkpoint::{Checkpoint, Metadata};
use un2clip_core::params::Binding;
use un2clip_core::CoreError;

fn small_arch() -> DenoiserArch {
    DenoiserArch {
        channels: [4, 8, 8],
        cond_dim: 8,
        embed_dim: 16,
        spatial_cond: true,
    }
}

fn small_clip() -> ClipModel {
    let arch = ClipArch {
        dim: 16,
        patch: 8,
        heads: 2,
        mlp_hidden: 16,
        image_depth: 1,
        text_depth: 1,
    };
    ClipModel::new(arch, &mut RngStream::new(9)).unwrap()
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed);
    let mut out = Vec::new();
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
    Tensor::from_vec(&[n, d], out).unwrap()
}

#[test]
fn forward_statistics_match_closed_form() {
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut rng = RngStream::new(5);
    let n = 10_000;
    for _ in 0..5 {
        let t = 1 + rng.below(schedule.steps());
        let x0v = rng.normal();
        let x0 = Tensor::full(&[n], x0v as f32);
        let eps = Tensor::<f32>::randn(&[n], 1.0, &mut rng);
        let xt = forward_diffuse(&x0, t, &eps, &schedule).unwrap();
        let ab = schedule.alpha_bar_at(t).unwrap();
        let vals: Vec<f64> = xt.data().iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        // Var of the sample variance of a Gaussian is 2σ⁴/(n-1).
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - ab.sqrt() * x0v).abs() < 3.0 * se_mean,
            "t={t} mean {mean}"
        );
        assert!((var - want_var).abs() < 3.0 * se_var, "t={t} var {var}");
    }
}

#[test]
fn untrained_decoder_predicts_zero_noise() {
    // The output convolution starts at zero, so the loss is E[ε²].
    let g = Denoiser::<f32>::new(small_arch(), &mut RngStream::new(1)).unwrap();
    let schedule = ScheduleConfig::default().build().unwrap();
    let x0 = Tensor::<f32>::randn(&[4, 3, 32, 32], 0.5, &mut RngStream::new(2));
    let batch = noise_batch(&x0, &schedule, &mut RngStream::new(3));
    let emb = unit_rows(4, 16, 4);
    let mut tape = Tape::<f32>::new();
    let gv = g.params.bind(&mut tape, false).unwrap();
    let e = tape.constant(emb);
    let loss = diffusion_loss_graph(&mut tape, &g, &gv, &batch, e).unwrap();
    let l = tape.value(loss).item() as f64;
    let n = batch.eps.len() as f64;
    assert!(n >= 1e4);
    assert!((l - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "loss {l}");
}

#[test]
fn perfect_prediction_gives_zero_loss() {
    let mut tape = Tape::<f32>::new();
    let eps = Tensor::<f32>::randn(&[2, 3, 4, 4], 1.0, &mut RngStream::new(1));
    let a = tape.constant(eps.clone());
    let b = tape.constant(eps);
    let l = tape.mse(a, b).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn step_loss_matches_recomputation() {
    let clip = small_clip();
    let corpus = generate_corpus(
        &CorpusConfig {
            size: 20,
            ..CorpusConfig::default()
        },
        3,
    )
    .unwrap();
    let images: Vec<&Tensor<f32>> = corpus.scenes.iter().take(4).map(|s| &s.image).collect();
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut g = Denoiser::<f32>::new(small_arch(), &mut RngStream::new(1)).unwrap();
    // Move the output layer off zero so the oracle is not trivially E[ε²].
    for v in g.params.get_mut("out.w").data_mut().iter_mut() {
        *v = 0.01;
    }
    let before = g.clone();
    let mut opt = AdamWState::new(AdamWConfig::default());
    let loss = unclip_train_step(
        &mut g,
        &clip,
        &images,
        &schedule,
        &mut opt,
        &mut RngStream::new(8),
    )
    .unwrap();

    let x0 = to_model_space(&images).unwrap();
    let batch = noise_batch(&x0, &schedule, &mut RngStream::new(8));
    let emb = clip.embed_images(&images).unwrap();
    let pred = before.predict(&batch.x_t, &batch.t, &emb).unwrap();
    let mse: f64 = pred
        .data()
        .iter()
        .zip(batch.eps.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    assert!((loss - mse).abs() < 1e-6, "{loss} vs {mse}");
    assert_ne!(g.params.digest(), before.params.digest());
}

#[test]
fn decoder_training_leaves_encoder_untouched() {
    let clip = small_clip();
    let digest = clip.image.digest();
    let corpus = generate_corpus(
        &CorpusConfig {
            size: 20,
            ..CorpusConfig::default()
        },
        3,
    )
    .unwrap();
    let images: Vec<&Tensor<f32>> = corpus.scenes.iter().take(4).map(|s| &s.image).collect();
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut g = Denoiser::<f32>::new(small_arch(), &mut RngStream::new(1)).unwrap();
    let mut opt = AdamWState::new(AdamWConfig::default());
    for i in 0..3 {
        unclip_train_step(
            &mut g,
            &clip,
            &images,
            &schedule,
            &mut opt,
            &mut RngStream::new(i),
        )
        .unwrap();
    }
    assert_eq!(clip.image.digest(), digest);

    // Attaching the encoder as trainable must be caught before any update.
    let g_before = g.params.digest();
    let err = unclip_train_step_with(
        &mut g,
        &clip,
        &images,
        &schedule,
        &mut opt,
        &mut RngStream::new(9),
        Binding::Attached,
    )
    .unwrap_err();
    assert!(matches!(err, CoreError::InvariantViolation(_)));
    assert_eq!(g.params.digest(), g_before);
}

#[test]
fn training_run_is_deterministic_and_decoder_conditioned() {
    let corpus = generate_corpus(
        &CorpusConfig {
            size: 40,
            ..CorpusConfig::default()
        },
        4,
    )
    .unwrap();
    let clip = small_clip();
    let cfg = DiffusionConfig {
        arch: small_arch(),
        batch_size: 8,
        epochs: 1,
        ..DiffusionConfig::default()
    };
    let (a, la) = train_unclip(&corpus, &clip, &cfg, 2).unwrap();
    let (b, lb) = train_unclip(&corpus, &clip, &cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(
        la.losses.len(),
        corpus.split(Split::Train).len().div_ceil(8)
    );

    let wrong = DiffusionConfig {
        arch: DenoiserArch {
            embed_dim: 8,
            ..small_arch()
        },
        ..cfg
    };
    assert!(matches!(
        train_unclip(&corpus, &clip, &wrong, 2),
        Err(CoreError::Config(_))
    ));
}

#[test]
fn cosine_rate_endpoints() {
    assert_eq!(cosine_rate(2.0, 0.0), 2.0);
    assert!((cosine_rate(2.0, 0.5) - 1.0).abs() < 1e-12);
    assert!(cosine_rate(2.0, 1.0).abs() < 1e-12);
}

fn nonzero_decoder() -> Denoiser {
    let mut g = Denoiser::<f32>::new(small_arch(), &mut RngStream::new(3)).unwrap();
    let mut rng = RngStream::new(4);
    let w = Tensor::<f32>::randn(&[3, 4, 3, 3], 0.1, &mut rng);
    *g.params.get_mut("out.w") = w;
    g
}

#[test]
fn sampling_is_deterministic_and_clamped() {
    let g = nonzero_decoder();
    let schedule = make_schedule(10, 1e-3, 0.3).unwrap();
    let cond = unit_rows(1, 16, 1).reshaped(&[16]).unwrap();
    for mode in [SampleMode::Ancestral, SampleMode::Deterministic] {
        let a = sample(&g, &cond, &schedule, 7, mode).unwrap();
        let b = sample(&g, &cond, &schedule, 7, mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [32, 32, 3]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, sample(&g, &cond, &schedule, 8, mode).unwrap());
    }
    // Batched sampling matches one-at-a-time sampling.
    let conds = unit_rows(2, 16, 5);
    let batch = sample_batch(&g, &conds, &[3, 4], &schedule, SampleMode::Ancestral).unwrap();
    let one = sample(
        &g,
        &Tensor::from_vec(&[16], conds.row(1).to_vec()).unwrap(),
        &schedule,
        4,
        SampleMode::Ancestral,
    )
    .unwrap();
    assert_eq!(batch[1], one);
}

#[test]
fn sampling_rejects_non_unit_conditioning() {
    let g = nonzero_decoder();
    let schedule = make_schedule(5, 1e-3, 0.5).unwrap();
    let cond = Tensor::full(&[16], 1.0f32);
    assert!(sample(&g, &cond, &schedule, 1, SampleMode::Deterministic).is_err());
}

#[test]
fn sampling_commutes_with_checkpointing() {
    let g = nonzero_decoder();
    let ck = g.to_checkpoint(Metadata::default());
    let back = Denoiser::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
    assert_eq!(back, g);
    let schedule = make_schedule(10, 1e-3, 0.3).unwrap();
    let cond = unit_rows(1, 16, 2).reshaped(&[16]).unwrap();
    assert_eq!(
        sample(&g, &cond, &schedule, 5, SampleMode::Deterministic).unwrap(),
        sample(&back, &cond, &schedule, 5, SampleMode::Deterministic).unwrap()
    );
}

#[test]
fn schedule_bounds() {
    assert!(make_schedule(0, 1e-4, 0.02).is_err());
    assert!(make_schedule(10, 0.0, 0.02).is_err());
    assert!(make_schedule(10, 0.03, 0.02).is_err());
    assert!(make_schedule(10, 1e-4, 1.0).is_err());
    // The terminal bound is enforced at config level only.
    assert!(ScheduleConfig {
        steps: 100,
        beta_min: 1e-4,
        beta_max: 0.02
    }
    .build()
    .is_err());
    let s = ScheduleConfig::default().build().unwrap();
    assert!(s.terminal_alpha_bar() < TERMINAL_ALPHA_BAR);
    assert!(matches!(s.check_t(0), Err(CoreError::Timestep { .. })));
    assert!(matches!(s.check_t(101), Err(CoreError::Timestep { .. })));
}
