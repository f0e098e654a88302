use proptest::prelude::*;
use un2clip_autograd::{finite_diff_check, RngStream, Tensor};
use un2clip_core::clip::*;
use un2clip_core::corpus::*;
use un2clip_core::io::checkpoint::{Checkpoint, Metadata};
use un2clip_core::params::Bound;
use un2clip_core::CoreError;

fn model(seed: u64) -> ClipModel {
    ClipModel::new(ClipArch::default(), &mut RngStream::new(seed)).unwrap()
}

fn corpus(size: usize, seed: u64) -> Corpus {
    generate_corpus(
        &CorpusConfig {
            size,
            ..CorpusConfig::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn image_encoding_contract() {
    let m = model(1);
    let c = corpus(10, 1);
    let out = m.encode_image(&c.scenes[0].image).unwrap();
    let n: f64 = out
        .global
        .data()
        .iter()
        .map(|v| (*v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((n - 1.0).abs() < 1e-5);
    assert_eq!(out.patch_tokens.shape(), [64, 64]);
    assert_eq!(out.attention_internals.len(), 2);
    assert_eq!(out.attention_internals[0].q.shape(), [4, 65, 16]);
    assert_eq!(m.encode_image(&c.scenes[0].image).unwrap(), out);
    // The batched path agrees with the single-image path.
    let batch = m
        .embed_images(&[&c.scenes[0].image, &c.scenes[1].image])
        .unwrap();
    for (a, b) in batch.row(0).iter().zip(out.global.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn image_shape_and_range_checked() {
    let m = model(1);
    assert!(matches!(
        m.encode_image(&Tensor::zeros(&[32, 32, 4])),
        Err(CoreError::Image(_))
    ));
    assert!(matches!(
        m.encode_image(&Tensor::full(&[32, 32, 3], 1.5)),
        Err(CoreError::Image(_))
    ));
}

#[test]
fn text_encoding_contract() {
    let m = model(2);
    let ids = caption_tokenize("two red triangles pointing up in the top left").unwrap();
    let e = m.encode_text(&ids).unwrap();
    let n: f64 = e
        .data()
        .iter()
        .map(|v| (*v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((n - 1.0).abs() < 1e-5);
    assert_eq!(m.encode_text(&ids).unwrap(), e);
    let mut rev = ids.clone();
    rev.reverse();
    assert_ne!(m.encode_text(&rev).unwrap(), e);
    assert!(matches!(
        m.encode_text(&[99]),
        Err(CoreError::OutOfVocabulary(_))
    ));
}

#[test]
fn temperature_starts_at_clip_value_and_is_capped() {
    let mut m = model(3);
    assert!((m.logit_scale() - 1.0 / 0.07).abs() < 1e-3);
    m.temperature.get_mut("log_scale").data_mut()[0] = 10.0;
    m.clamp_temperature();
    assert!((m.logit_scale() - MAX_LOGIT_SCALE).abs() < 1e-3);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = model(4);
    let ck = m.to_checkpoint(Metadata::default());
    let back = ClipModel::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
    assert_eq!(back, m);
}

fn random_unit_rows(rng: &mut RngStream, b: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(b * d);
    for _ in 0..b {
        let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / n));
    }
    Tensor::from_vec(&[b, d], data).unwrap()
}

/// Orthogonal matrix from Gram–Schmidt on Gaussian columns.
fn random_rotation(rng: &mut RngStream, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.iter().map(|x| x / n).collect());
    }
    q
}

fn rotate(e: &Tensor<f64>, r: &[Vec<f64>]) -> Tensor<f64> {
    let (b, d) = (e.shape()[0], e.shape()[1]);
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        for row in r {
            out.push(row.iter().zip(e.row(i)).map(|(a, x)| a * x).sum());
        }
    }
    Tensor::from_vec(&[b, d], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn infonce_is_rotation_invariant(seed in 0u64..10_000, b in 2usize..9, tau in 0.05f64..2.0) {
        let mut rng = RngStream::new(seed);
        let img = random_unit_rows(&mut rng, b, 16);
        let txt = random_unit_rows(&mut rng, b, 16);
        let r = random_rotation(&mut rng, 16);
        let l0 = infonce_loss(&img, &txt, tau).unwrap();
        let l1 = infonce_loss(&rotate(&img, &r), &rotate(&txt, &r), tau).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-5);
    }
}

#[test]
fn infonce_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed);
        let b = 2 + (seed as usize % 5);
        let params = vec![
            Tensor::<f64>::randn(&[b, 8], 1.0, &mut rng),
            Tensor::<f64>::randn(&[b, 8], 1.0, &mut rng),
            Tensor::<f64>::full(&[1], 0.5 + rng.uniform()),
        ];
        let err = finite_diff_check(
            |t, v| {
                let a = t.l2_normalize(v[0])?;
                let b = t.l2_normalize(v[1])?;
                let s = t.exp(v[2])?;
                infonce_graph(t, a, b, s).map_err(|e| match e {
                    CoreError::Autograd(a) => a,
                    other => panic!("{other}"),
                })
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn clip_tower_gradients_match_finite_differences() {
    let arch = ClipArch {
        dim: 8,
        patch: 8,
        heads: 2,
        mlp_hidden: 8,
        image_depth: 1,
        text_depth: 1,
    };
    let c = corpus(4, 7);
    let images: Vec<&Tensor<f32>> = c.scenes.iter().map(|s| &s.image).collect();
    let caps: Vec<&[u32]> = c.scenes.iter().map(|s| s.caption.as_slice()).collect();
    let ids = text_inputs(&caps).unwrap();
    let m = ClipModel::<f64>::new(arch, &mut RngStream::new(5)).unwrap();
    let names: Vec<String> = m.image.iter().map(|(n, _)| n.to_string()).collect();
    let tnames: Vec<String> = m.text.iter().map(|(n, _)| n.to_string()).collect();
    let params: Vec<Tensor<f64>> = m
        .image
        .iter()
        .chain(m.text.iter())
        .map(|(_, t)| t.clone())
        .collect();
    let err = finite_diff_check(
        |t, v| {
            let ip = Bound::from_pairs(names.iter().cloned().zip(v[..names.len()].iter().copied()));
            let tp =
                Bound::from_pairs(tnames.iter().cloned().zip(v[names.len()..].iter().copied()));
            let x = t.constant(patchify(&arch, &images).unwrap());
            let g = image_graph(t, &ip, &arch, x, LastBlock::Standard).unwrap();
            let e = text_graph(t, &tp, &arch, &ids).unwrap();
            let s = t.constant(Tensor::scalar(5.0));
            Ok(infonce_graph(t, g.global, e, s).unwrap())
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn tiny_config() -> ClipConfig {
    ClipConfig {
        arch: ClipArch {
            dim: 32,
            heads: 2,
            mlp_hidden: 64,
            image_depth: 1,
            text_depth: 1,
            patch: 8,
        },
        batch_size: 8,
        epochs: 2,
        eval_every: 5,
        ..ClipConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let c = corpus(40, 3);
    let (a, la) = train_clip(&c, &tiny_config(), 11).unwrap();
    let (b, lb) = train_clip(&c, &tiny_config(), 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.losses.iter().all(|l| l.is_finite()));
    let (d, _) = train_clip(&c, &tiny_config(), 12).unwrap();
    assert_ne!(a, d);
}

#[test]
fn memorizes_a_single_batch() {
    // Eight scenes with pairwise different captions, all in the training split.
    let c = corpus(400, 8);
    let mut seen = std::collections::HashSet::new();
    let mut scenes: Vec<ShapeScene> = Vec::new();
    for s in &c.scenes {
        if scenes.len() < 8 && seen.insert(s.caption.clone()) {
            let mut s = s.clone();
            s.split = Split::Train;
            scenes.push(s);
        }
    }
    let one = Corpus {
        seed: c.seed,
        config_hash: c.config_hash,
        scenes,
    };
    let cfg = ClipConfig {
        epochs: 150,
        learning_rate: 2e-3,
        mention: MentionRates {
            color: 1.0,
            count: 1.0,
            position: 1.0,
            orientation: 1.0,
        },
        eval_every: 1000,
        ..tiny_config()
    };
    let (_, log) = train_clip(&one, &cfg, 1).unwrap();
    let last = *log.losses.last().unwrap();
    assert!(last < 0.1 * 8f64.ln(), "final loss {last}");
}

#[test]
fn untrained_retrieval_is_near_chance() {
    let c = corpus(640, 21);
    let scenes = c.split(Split::Train);
    let mut hits = 0.0;
    let mut runs = 0.0;
    for seed in 0..4 {
        let m = model(100 + seed);
        hits += validation_recall_at_1(&m, &scenes, 16);
        runs += 1.0;
    }
    let r = hits / runs;
    // Chance is 1/16; allow for correlated captions.
    assert!(r < 3.0 / 16.0, "recall {r}");
}

fn validation_recall_at_1(m: &ClipModel, scenes: &[&ShapeScene], b: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for chunk in scenes.chunks(b).filter(|c| c.len() == b) {
        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let caps: Vec<&[u32]> = chunk.iter().map(|s| s.caption.as_slice()).collect();
        let ie = m.embed_images(&imgs).unwrap();
        let te = m.embed_texts(&caps).unwrap();
        total += un2clip_core::eval::recall_at_k(&ie, &te, 1).unwrap();
        n += 1.0;
    }
    total / n
}
