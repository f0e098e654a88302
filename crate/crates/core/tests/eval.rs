use proptest::prelude::*;
use un2clip_autograd::{RngStream, Tensor};
use un2clip_core::clip::{ClipArch, ClipModel};
use un2clip_core::corpus::*;
use un2clip_core::eval::*;
use un2clip_core::CoreError;

fn brute_miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes as u8 {
        let mut inter = 0;
        let mut uni = 0;
        for i in 0..pred.len() {
            let (p, g) = (pred[i] == c, gt[i] == c);
            inter += (p && g) as usize;
            uni += (p || g) as usize;
        }
        if uni > 0 {
            total += inter as f64 / uni as f64;
            present += 1;
        }
    }
    total / present as f64
}

#[test]
fn miou_matches_brute_force_on_random_maps() {
    let mut rng = RngStream::new(42);
    for _ in 0..100 {
        let classes = 2 + rng.below(4);
        let pred: Vec<u8> = (0..64).map(|_| rng.below(classes) as u8).collect();
        let gt: Vec<u8> = (0..64).map(|_| rng.below(classes) as u8).collect();
        assert_eq!(
            miou(&pred, &gt, classes).unwrap(),
            brute_miou(&pred, &gt, classes)
        );
    }
}

proptest! {
    #[test]
    fn miou_oracle_property(maps in prop::collection::vec((0u8..4, 0u8..4), 64)) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = maps.into_iter().unzip();
        prop_assert_eq!(miou(&pred, &gt, 4).unwrap(), brute_miou(&pred, &gt, 4));
    }

    #[test]
    fn pair_scoring_is_swap_invariant(m in prop::array::uniform2(prop::array::uniform2(-1.0f64..1.0))) {
        // Swap images and captions together.
        let swapped = [[m[1][1], m[1][0]], [m[0][1], m[0][0]]];
        prop_assert_eq!(pair_correct(m), pair_correct(swapped));
    }
}

#[test]
fn miou_examples() {
    assert_eq!(miou(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
    assert_eq!(miou(&[0; 4], &[1; 4], 2).unwrap(), 0.0);
    assert!((miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap() - 7.0 / 12.0).abs() < 1e-12);
    assert!(matches!(miou(&[0], &[0, 1], 2), Err(CoreError::Eval(_))));
}

#[test]
fn pair_truth_table() {
    let cases: [([[f64; 2]; 2], bool); 7] = [
        ([[0.9, 0.1], [0.1, 0.9]], true),
        ([[0.9, 0.1], [0.8, 0.2]], false),
        ([[0.1, 0.9], [0.1, 0.9]], false),
        ([[0.1, 0.9], [0.9, 0.1]], false),
        ([[0.5, 0.5], [0.1, 0.9]], false),
        ([[0.9, 0.1], [0.4, 0.4]], false),
        ([[0.3, 0.2], [0.29, 0.3]], true),
    ];
    for (m, want) in cases {
        assert_eq!(pair_correct(m), want, "{m:?}");
    }
}

#[test]
fn nine_pattern_fixture_averages_to_19_3() {
    let correct = [2, 2, 3, 3, 2, 8, 3, 1, 2];
    let rows: Vec<(String, usize, usize)> = correct
        .iter()
        .enumerate()
        .map(|(i, &c)| (format!("pattern{i}"), c, 15))
        .collect();
    let r = BlindPairResult::from_counts(&rows);
    let shown: Vec<String> = r
        .per_family
        .iter()
        .map(|f| format!("{:.1}", f.accuracy * 100.0))
        .collect();
    assert_eq!(
        shown,
        ["13.3", "13.3", "20.0", "20.0", "13.3", "53.3", "20.0", "6.7", "13.3"]
    );
    assert_eq!(format!("{:.1}", r.average * 100.0), "19.3");
}

#[test]
fn empty_families_do_not_count() {
    let r = BlindPairResult::from_counts(&[("a".into(), 1, 2), ("b".into(), 0, 0)]);
    assert_eq!(r.average, 0.5);
    let scored = score_matrices(&[(PatternFamily::Color, [[1.0, 0.0], [0.0, 1.0]])]);
    assert_eq!(scored.average, 1.0);
    assert_eq!(scored.family("count").unwrap().pairs, 0);
}

fn tiny_clip() -> ClipModel {
    let arch = ClipArch {
        dim: 16,
        patch: 4,
        heads: 2,
        mlp_hidden: 16,
        image_depth: 1,
        text_depth: 1,
    };
    ClipModel::new(arch, &mut RngStream::new(3)).unwrap()
}

#[test]
fn blind_accuracy_is_swap_invariant_and_checks_scenes() {
    let c = generate_corpus(
        &CorpusConfig {
            size: 80,
            ..CorpusConfig::default()
        },
        2,
    )
    .unwrap();
    let clip = tiny_clip();
    let test = c.split(Split::Test);
    let pairs: Vec<BlindPair> = test
        .windows(2)
        .map(|w| BlindPair {
            scene_a: w[0].scene_id,
            scene_b: w[1].scene_id,
            differing_family: PatternFamily::Color,
            cosine_similarity: 0.9,
        })
        .collect();
    let a = blind_pair_accuracy(&clip, &pairs, &c).unwrap();
    let swapped: Vec<BlindPair> = pairs
        .iter()
        .map(|p| BlindPair {
            scene_a: p.scene_b,
            scene_b: p.scene_a,
            ..*p
        })
        .collect();
    assert_eq!(blind_pair_accuracy(&clip, &swapped, &c).unwrap(), a);
    let missing = [BlindPair {
        scene_a: 1_000_000,
        ..pairs[0]
    }];
    assert!(matches!(
        blind_pair_accuracy(&clip, &missing, &c),
        Err(CoreError::Eval(_))
    ));
}

#[test]
fn dense_single_prompt_labels_everything_class_zero() {
    let c = generate_corpus(
        &CorpusConfig {
            size: 10,
            ..CorpusConfig::default()
        },
        2,
    )
    .unwrap();
    let clip = tiny_clip();
    let prompts = vec![caption_tokenize("circle").unwrap()];
    for v in DenseVariant::ALL {
        let p = dense_segment(&clip, &c.scenes[0].image, &prompts, v, None).unwrap();
        assert!(p.labels.iter().all(|&l| l == 0));
        assert_eq!(p.labels.len(), 32 * 32);
        assert_eq!(
            p,
            dense_segment(&clip, &c.scenes[0].image, &prompts, v, None).unwrap()
        );
    }
    assert!(DenseVariant::parse("clearclip").is_err());
}

#[test]
fn one_hot_fixture_reproduces_its_design() {
    // Patch i carries the one-hot of class (i mod 3); the map follows it.
    let feats: Vec<f32> = (0..64)
        .flat_map(|i| (0..3).map(move |c| (i % 3 == c) as u8 as f32))
        .collect();
    let f = Tensor::from_vec(&[64, 3], feats).unwrap();
    let text =
        Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let map = label_patches(&f, &text, None).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            assert_eq!(map[y * 32 + x] as usize, ((y / 4) * 8 + x / 4) % 3);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn labelling_ignores_positive_text_rescaling(seed in 0u64..1000, scale in 0.01f32..100.0) {
        let mut rng = RngStream::new(seed);
        let f = Tensor::<f32>::randn(&[64, 8], 1.0, &mut rng);
        let t = Tensor::<f32>::randn(&[3, 8], 1.0, &mut rng);
        let scaled = Tensor::from_vec(&[3, 8], t.data().iter().map(|v| v * scale).collect()).unwrap();
        prop_assert_eq!(label_patches(&f, &t, None).unwrap(), label_patches(&f, &scaled, None).unwrap());
    }
}

#[test]
fn zero_shot_and_retrieval_edges() {
    let c = generate_corpus(
        &CorpusConfig {
            size: 40,
            ..CorpusConfig::default()
        },
        6,
    )
    .unwrap();
    let clip = tiny_clip();
    let test = c.split(Split::Test);
    let n = test.len();
    assert_eq!(retrieval_at_k(&clip, &test, n).unwrap(), 1.0);
    assert!(retrieval_at_k(&clip, &test, n + 1).is_err());
    assert!(retrieval_at_k(&clip, &test, 0).is_err());
    let imgs = Tensor::<f32>::randn(&[5, 4], 1.0, &mut RngStream::new(1));
    let one = Tensor::<f32>::randn(&[1, 4], 1.0, &mut RngStream::new(2));
    assert_eq!(classify_embeddings(&imgs, &one, &[0; 5]).unwrap(), 1.0);
}

#[test]
fn random_embeddings_retrieve_at_chance() {
    let b = 8;
    let mut hits = 0.0;
    let runs = 2000;
    for seed in 0..runs {
        let mut rng = RngStream::new(seed);
        let q = Tensor::<f32>::randn(&[b, 16], 1.0, &mut rng);
        let c = Tensor::<f32>::randn(&[b, 16], 1.0, &mut rng);
        hits += recall_at_k(&q, &c, 1).unwrap();
    }
    let r = hits / runs as f64;
    // Standard error of the mean is about 0.0026.
    assert!((r - 1.0 / b as f64).abs() < 0.01, "{r}");
}

#[test]
fn recall_ties_break_by_index() {
    let q = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let c = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    // Both candidates tie; row 0 wins, row 1 loses to the lower index.
    assert_eq!(recall_at_k(&q, &c, 1).unwrap(), 0.5);
}

fn fixture() -> Vec<MetricRecord> {
    vec![
        MetricRecord::new("c", "Original", "diffusion_loss", MetricKind::Loss, 0.3396),
        MetricRecord::new("c", "Original", "blind_avg", MetricKind::Accuracy, 0.193),
        MetricRecord::new("c", "finetuned", "diffusion_loss", MetricKind::Loss, 0.3378),
        MetricRecord::new("c", "finetuned", "blind_avg", MetricKind::Accuracy, 0.326),
    ]
}

#[test]
fn report_fixture_flags_the_improved_row() {
    let r = render_report(&fixture()).unwrap();
    let lines: Vec<&str> = r.text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("model"));
    assert!(lines[1].contains("0.3396") && lines[1].contains("19.3"));
    assert!(!lines[1].contains("lower"));
    assert!(lines[2].contains("0.3378") && lines[2].contains("32.6"));
    assert!(lines[2].ends_with("lower diffusion_loss; higher blind_avg"));
    assert_eq!(
        r.csv,
        "schema_version,model,metric,kind,value\n\
         1,Original,diffusion_loss,loss,0.3396\n\
         1,Original,blind_avg,accuracy,19.3\n\
         1,finetuned,diffusion_loss,loss,0.3378\n\
         1,finetuned,blind_avg,accuracy,32.6\n"
    );
    assert_eq!(render_report(&fixture()).unwrap(), r);
}

#[test]
fn report_rejects_mixed_corpora() {
    let mut recs = fixture();
    recs[3].corpus = "other".into();
    assert!(matches!(render_report(&recs), Err(CoreError::Report(_))));
}
