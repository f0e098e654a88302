use std::collections::HashSet;

use proptest::prelude::*;
use un2clip_autograd::Tensor;
use un2clip_core::corpus::render::connected_components;
use un2clip_core::corpus::*;
use un2clip_core::CoreError;

fn small(size: usize) -> CorpusConfig {
    CorpusConfig {
        size,
        ..CorpusConfig::default()
    }
}

#[test]
fn split_sizes_and_unique_ids() {
    let c = generate_corpus(&small(100), 3).unwrap();
    assert_eq!(c.split_counts(), [80, 10, 10]);
    let ids: HashSet<u64> = c.scenes.iter().map(|s| s.scene_id).collect();
    assert_eq!(ids.len(), 100);
    let per_split: Vec<HashSet<u64>> = Split::ALL
        .iter()
        .map(|sp| c.split(*sp).iter().map(|s| s.scene_id).collect())
        .collect();
    assert!(per_split[0].is_disjoint(&per_split[1]));
    assert!(per_split[0].is_disjoint(&per_split[2]));
    assert!(per_split[1].is_disjoint(&per_split[2]));
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    generate_corpus(&small(60), 9).unwrap().write(&a).unwrap();
    generate_corpus(&small(60), 9).unwrap().write(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = generate_corpus(&small(60), 10).unwrap();
    assert_ne!(other.encode(), std::fs::read(&a).unwrap());
}

#[test]
fn corpus_file_round_trip() {
    let c = generate_corpus(&small(40), 4).unwrap();
    let back = Corpus::decode(&c.encode()).unwrap();
    assert_eq!(back, c);
    let bytes = c.encode();
    assert!(Corpus::decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn marginals_over_ten_thousand_scenes() {
    let cfg = CorpusConfig {
        size: 10_000,
        shape_weights: [0.25, 0.25, 0.5],
        orientation_weights: [0.125; 4],
        ..CorpusConfig::default()
    };
    let c = generate_corpus(&cfg, 11).unwrap();
    let n = c.scenes.len() as f64;
    let frac = |f: &dyn Fn(&AttributeRecord) -> bool| {
        c.scenes.iter().filter(|s| f(&s.attrs)).count() as f64 / n
    };
    let tri = frac(&|a| a.shape_class == ShapeClass::Triangle);
    assert!((0.48..=0.52).contains(&tri), "triangles {tri}");
    for (i, w) in cfg.shape_weights.iter().enumerate() {
        assert!((frac(&|a| a.shape_class.index() == i) - w).abs() < 0.02);
    }
    for (i, w) in cfg.color_weights.iter().enumerate() {
        assert!((frac(&|a| a.color.index() == i) - w).abs() < 0.02);
    }
    for (i, w) in cfg.count_weights.iter().enumerate() {
        assert!((frac(&|a| a.count as usize == i + 1) - w).abs() < 0.02);
    }
    for (i, w) in cfg.orientation_weights.iter().enumerate() {
        assert!((frac(&|a| a.orientation.map(|o| o.index()) == Some(i)) - w).abs() < 0.02);
    }
}

#[test]
fn unreachable_orientation_marginal() {
    let cfg = CorpusConfig {
        orientation_weights: [0.2; 4],
        ..CorpusConfig::default()
    };
    assert!(matches!(
        generate_corpus(&cfg, 1),
        Err(CoreError::UnreachableMarginals(_))
    ));
}

#[test]
fn every_scene_is_consistent() {
    let c = generate_corpus(&small(200), 5).unwrap();
    for s in &c.scenes {
        s.attrs.validate().unwrap();
        let label = s.attrs.shape_class.label();
        assert!(s.mask.iter().all(|&m| m == 0 || m == label));
        assert_eq!(
            connected_components(&s.mask, IMAGE_SIZE),
            s.attrs.count as usize
        );
        let text = caption_render(&s.attrs);
        assert_eq!(caption_tokenize(&text).unwrap(), s.caption);
        let rgb = s.image.data();
        for (p, &m) in s.mask.iter().enumerate() {
            let px = &rgb[p * 3..p * 3 + 3];
            if m == 0 {
                assert_eq!(px, [0.0; 3]);
            } else {
                assert!(px.iter().any(|v| *v > 0.0));
            }
        }
    }
}

fn scene(id: u64, attrs: AttributeRecord) -> ShapeScene {
    let (image, mask) = render_scene(&attrs, id).unwrap();
    ShapeScene {
        scene_id: id,
        split: Split::Test,
        render_seed: id,
        attrs,
        caption: caption_tokenize(&caption_render(&attrs)).unwrap(),
        image,
        mask,
    }
}

fn base() -> AttributeRecord {
    AttributeRecord {
        shape_class: ShapeClass::Circle,
        color: Color::ALL[0],
        count: 1,
        cell: Cell::new(1, 1),
        orientation: None,
        pattern_family: PatternFamily::Color,
    }
}

fn constant_embeddings(n: usize) -> Tensor<f32> {
    let mut d = vec![0f32; n * 4];
    for i in 0..n {
        d[i * 4] = 1.0;
    }
    Tensor::from_vec(&[n, 4], d).unwrap()
}

#[test]
fn mining_pairs_only_single_family_differences() {
    let a = base();
    let mut color = a;
    color.color = Color::ALL[1];
    let mut two = a;
    two.color = Color::ALL[1];
    two.count = 2;
    let scenes = [scene(0, a), scene(1, a), scene(2, color), scene(3, two)];
    let refs: Vec<&ShapeScene> = scenes.iter().collect();
    let mined = mine_with_embeddings(&refs, &constant_embeddings(4), 0.99, 10).unwrap();
    let got: Vec<(u64, u64, PatternFamily)> = mined
        .pairs
        .iter()
        .map(|p| (p.scene_a, p.scene_b, p.differing_family))
        .collect();
    // (0,1) identical, (x,3) differ in two families: never paired.
    assert_eq!(
        got,
        vec![
            (0, 2, PatternFamily::Color),
            (1, 2, PatternFamily::Color),
            (2, 3, PatternFamily::Count),
        ]
    );
    assert!(mined.pairs.iter().all(|p| p.cosine_similarity >= 0.99));
    assert!(mined
        .warnings
        .iter()
        .any(|w| w.family == PatternFamily::Color && w.found == 2));
}

#[test]
fn degenerate_encoder_admits_every_one_family_pair() {
    let c = generate_corpus(&small(300), 2).unwrap();
    let test = c.split(Split::Test);
    let emb = constant_embeddings(test.len());
    let mut expected = 0;
    for (i, a) in test.iter().enumerate() {
        for b in &test[i + 1..] {
            expected += (a.attrs.differing_families(&b.attrs).len() == 1) as usize;
        }
    }
    for th in [0.01, 0.5, 0.999] {
        let mined = mine_with_embeddings(&test, &emb, th, usize::MAX).unwrap();
        assert_eq!(mined.pairs.len(), expected);
    }
    assert!(mine_with_embeddings(&test, &emb, 1.0, 5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mining_is_stable_under_reordering(seed in 0u64..1000, rot in 0usize..30) {
        let c = generate_corpus(&small(300), seed).unwrap();
        let test = c.split(Split::Test);
        let n = test.len();
        // Pseudo-embeddings tied to scene ids so both orderings see the same vectors.
        let row = |s: &ShapeScene| {
            let a = (s.scene_id as f32 * 0.37).sin();
            let b = (s.scene_id as f32 * 0.11).cos();
            let nrm = (a * a + b * b + 1.0).sqrt();
            [a / nrm, b / nrm, 1.0 / nrm]
        };
        let emb_of = |v: &[&ShapeScene]| Tensor::from_vec(&[v.len(), 3], v.iter().flat_map(|s| row(s)).collect()).unwrap();
        let mut shuffled = test.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let a = mine_with_embeddings(&test, &emb_of(&test), 0.9, 5).unwrap();
        let b = mine_with_embeddings(&shuffled, &emb_of(&shuffled), 0.9, 5).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mask_histogram_matches_count(seed in 0u64..10_000) {
        let cfg = CorpusConfig::default();
        let mut rng = un2clip_autograd::RngStream::new(seed);
        let attrs = sample_attributes(&cfg, &mut rng);
        let (_, mask) = render_scene(&attrs, seed).unwrap();
        let label = attrs.shape_class.label();
        prop_assert!(mask.iter().all(|&m| m == 0 || m == label));
        prop_assert_eq!(connected_components(&mask, IMAGE_SIZE), attrs.count as usize);
    }
}
