use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distcap::dataset::CaptionDataset;
use distcap::distinct::{relatedness_weights, template_sentence, DistinctProfile};
use distcap::gdma::{AttentionMode, AttentionParams, MemoryBank};
use distcap::groups::{build_groups, EmbeddingKind, EmbeddingStore, GroupSource, ImageGroup, RetrievalMode};
use distcap::io;
use distcap::losses::{mem_cls_loss, weighted_distinctive_loss, WeightedWords};
use distcap::metrics::{cider_rank, corpus_report, dis_word_rate, CiderScorer};
use distcap::tensor::{EncoderParams, EncoderShape, Mat};
use distcap::text::{TokenSeq, WordSet};
use distcap::vocab::Vocab;

const WORDS: [&str; 10] = ["a", "dog", "cat", "red", "ball", "park", "on", "grass", "two", "runs"];

fn seq(max: usize) -> impl Strategy<Value = TokenSeq> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..=max).prop_map(TokenSeq::from_tokens)
}

fn corpus() -> impl Strategy<Value = CaptionDataset> {
    prop::collection::vec(prop::collection::vec(seq(7), 1..4), 2..7).prop_map(|images| {
        CaptionDataset::new(images.into_iter().enumerate().map(|(i, caps)| {
            (format!("img{i}"), caps.iter().map(|c| c.to_string()).collect())
        }))
        .unwrap()
    })
}

proptest! {
    #[test]
    fn cider_ignores_reference_order(ds in corpus(), cand in seq(8), seed in any::<u64>()) {
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let mut refs = ds.gts("img0").unwrap().to_vec();
        let a = scorer.cider(&cand, &refs).unwrap();
        refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = scorer.cider(&cand, &refs).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=10.0 + 1e-12).contains(&a));
    }

    #[test]
    fn cider_rank_ignores_similar_order(ds in corpus(), cand in seq(8), seed in any::<u64>()) {
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let ids: Vec<String> = ds.sorted_ids().into_iter().map(str::to_owned).collect();
        let mut similars = ids[1..].to_vec();
        let a = cider_rank(&scorer, &cand, &ImageGroup::new(ids[0].clone(), similars.clone()).unwrap(), &ds).unwrap();
        similars.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let group = ImageGroup::new(ids[0].clone(), similars).unwrap();
        prop_assert_eq!(a, cider_rank(&scorer, &cand, &group, &ds).unwrap());
    }

    #[test]
    fn idf_scaling_leaves_scores_and_rank(ds in corpus(), cand in seq(8), factor in 0.01f64..100.0) {
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let scaled = CiderScorer::with_config(scorer.idf().scaled(factor), *scorer.config());
        let gts = ds.gts("img0").unwrap();
        let (a, b) = (scorer.cider(&cand, gts).unwrap(), scaled.cider(&cand, gts).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        let ids: Vec<String> = ds.sorted_ids().into_iter().map(str::to_owned).collect();
        let group = ImageGroup::new(ids[0].clone(), ids[1..].to_vec()).unwrap();
        prop_assert_eq!(
            cider_rank(&scorer, &cand, &group, &ds).unwrap(),
            cider_rank(&scaled, &cand, &group, &ds).unwrap()
        );
    }

    #[test]
    fn covering_candidate_has_full_dis_word_rate(
        gts in prop::collection::vec(seq(6), 1..4),
        omega in subsequence(WORDS.to_vec(), 0..=WORDS.len()),
        pick in any::<prop::sample::Index>(),
        extra in seq(4),
    ) {
        let omega: WordSet = omega.into_iter().collect();
        let gt = &gts[pick.index(gts.len())];
        let shared = omega.intersection(&gt.word_set());
        prop_assume!(!shared.is_empty());
        let cand = TokenSeq::from_tokens(shared.iter().chain(extra.iter()));
        prop_assert_eq!(dis_word_rate(&cand, &omega, &gts).unwrap(), Some(1.0));
    }
}

fn clustered_store(rng: &mut ChaCha8Rng, images: usize, dim: usize) -> Vec<(String, Vec<f32>)> {
    (0..images)
        .map(|i| {
            let v = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            (format!("im{i:02}"), v)
        })
        .collect()
}

fn dataset_for(ids: &[String]) -> CaptionDataset {
    CaptionDataset::new(ids.iter().map(|id| (id.clone(), vec![format!("caption of {id}")]))).unwrap()
}

fn groups_of(entries: &[(String, Vec<f32>)], ids: &[String], k: usize, seed: u64) -> Vec<ImageGroup> {
    let mut store = EmbeddingStore::new(entries[0].1.len(), EmbeddingKind::Image);
    for (id, v) in entries {
        store.insert(id.clone(), v.clone()).unwrap();
    }
    let source = GroupSource {
        images: &store,
        captions: None,
    };
    build_groups(&source, &dataset_for(ids), k, seed, RetrievalMode::ImageImage).unwrap()
}

proptest! {
    #[test]
    fn main_phase_groups_partition_the_pool(seed in any::<u64>(), images in 2usize..30, k in 1usize..6) {
        prop_assume!(k < images);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = clustered_store(&mut rng, images, 6);
        let ids: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
        let groups = groups_of(&entries, &ids, k, seed);
        let mut seen = BTreeSet::new();
        for g in groups.iter().filter(|g| !g.leftover) {
            prop_assert_eq!(g.similars.len(), k);
            for id in g.members() {
                prop_assert!(seen.insert(id.to_owned()), "{} appears twice", id);
            }
        }
        for g in groups.iter().filter(|g| g.leftover) {
            prop_assert!(seen.insert(g.target.clone()));
        }
        prop_assert_eq!(seen.len(), images);
    }

    #[test]
    fn group_builder_ignores_scale_and_insertion_order(seed in any::<u64>(), scale in 0.1f32..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = clustered_store(&mut rng, 13, 5);
        let ids: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
        let base = groups_of(&entries, &ids, 3, seed);
        let mut shuffled = entries.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(&base, &groups_of(&shuffled, &ids, 3, seed));
        // powers of two scale exactly in f32
        let pow2 = 2f32.powi(scale.log2().round() as i32);
        let scaled: Vec<(String, Vec<f32>)> = entries
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().map(|x| x * pow2).collect()))
            .collect();
        prop_assert_eq!(&base, &groups_of(&scaled, &ids, 3, seed));
    }
}

fn gdma_setup(seed: u64) -> (EncoderParams, Vec<Mat>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.gen_range(2..8);
    let shape = EncoderShape {
        d_in,
        ..EncoderShape::new(4, 2, 1)
    };
    let encoder = EncoderParams::init(shape, seed).unwrap();
    let feats = (0..rng.gen_range(2..6))
        .map(|_| Mat::uniform(rng.gen_range(1..5), d_in, 1.0, &mut rng))
        .collect();
    (encoder, feats)
}

proptest! {
    #[test]
    fn attention_stays_between_b_and_b_plus_omega(seed in any::<u64>(), omega in 0.0f64..3.0, b in 0.0f64..2.0) {
        let (encoder, feats) = gdma_setup(seed);
        let refs: Vec<&Mat> = feats.iter().collect();
        let params = AttentionParams { omega, bias: b };
        let state = MemoryBank::build(&refs, &encoder).unwrap().attend(0, params, AttentionMode::Distinctive).unwrap();
        for &a in &state.attention {
            prop_assert!(a >= b && a <= b + omega + 1e-12);
        }
    }

    #[test]
    fn weighted_memory_ignores_similar_order_and_is_deterministic(seed in any::<u64>()) {
        let (encoder, feats) = gdma_setup(seed);
        let refs: Vec<&Mat> = feats.iter().collect();
        let params = AttentionParams::default();
        let bank = MemoryBank::build(&refs, &encoder).unwrap();
        let state = bank.attend(0, params, AttentionMode::Distinctive).unwrap();
        let again = MemoryBank::build(&refs, &encoder).unwrap().attend(0, params, AttentionMode::Distinctive).unwrap();
        prop_assert_eq!(&state, &again);

        let mut shuffled = refs.clone();
        shuffled[1..].shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let other = MemoryBank::build(&shuffled, &encoder).unwrap();
        let moved = other.attend(0, params, AttentionMode::Distinctive).unwrap();
        let m1 = bank.weighted_memory(0, &state).unwrap();
        let m2 = other.weighted_memory(0, &moved).unwrap();
        prop_assert!(m1.max_abs_diff(&m2) < 1e-9);
    }
}

proptest! {
    #[test]
    fn doubling_relatedness_is_normalized_away(
        seed in any::<u64>(),
        words in subsequence(WORDS.to_vec(), 1..5),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega: WordSet = words.iter().copied().collect();
        let dim = 4;
        let mut sentences = EmbeddingStore::new(dim, EmbeddingKind::Image);
        let mut doubled = EmbeddingStore::new(dim, EmbeddingKind::Image);
        for w in omega.iter() {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            doubled.insert(template_sentence(w), v.iter().map(|x| 2.0 * x).collect()).unwrap();
            sentences.insert(template_sentence(w), v).unwrap();
        }
        let image: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let l1 = relatedness_weights(&omega, &sentences, &image).unwrap();
        let l2 = relatedness_weights(&omega, &doubled, &image).unwrap();

        let vocab = Vocab::new(WORDS);
        let resolve = |weights: BTreeMap<String, f64>| {
            WeightedWords::resolve(&DistinctProfile::with_weights("t", omega.clone(), weights).unwrap(), &vocab)
        };
        let (w1, w2) = (resolve(l1), resolve(l2));
        let v = vocab.len();
        let dists: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let p_m: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
        prop_assert!(close(weighted_distinctive_loss(&dists, &w1).unwrap(), weighted_distinctive_loss(&dists, &w2).unwrap()));
        prop_assert!(close(mem_cls_loss(&p_m, &w1).unwrap(), mem_cls_loss(&p_m, &w2).unwrap()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn caption_and_group_files_round_trip(ds in corpus()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.json");
        io::write_captions(&path, &ds).unwrap();
        prop_assert_eq!(&io::read_captions(&path).unwrap(), &ds);

        let ids: Vec<String> = ds.sorted_ids().into_iter().map(str::to_owned).collect();
        let groups: Vec<ImageGroup> = (0..ids.len())
            .map(|t| ImageGroup::new(ids[t].clone(), ids.iter().filter(|i| **i != ids[t]).cloned().collect()).unwrap())
            .collect();
        let gpath = dir.path().join("groups.json");
        io::write_groups(&gpath, &groups).unwrap();
        prop_assert_eq!(&io::read_groups(&gpath).unwrap(), &groups);

        let profiles: Vec<DistinctProfile> = groups
            .iter()
            .map(|g| DistinctProfile::uniform(g.target.clone(), distcap::distinct::group_distinct_words(g, &ds).unwrap()))
            .collect();
        let ppath = dir.path().join("profiles.json");
        io::write_profiles(&ppath, &profiles).unwrap();
        prop_assert_eq!(&io::read_profiles(&ppath).unwrap(), &profiles);

        // reports carry sorted keys and are stable across runs
        let scorer = CiderScorer::from_dataset(&ds).unwrap();
        let cands: BTreeMap<String, TokenSeq> = ids.iter().map(|id| (id.clone(), ds.gts(id).unwrap()[0].clone())).collect();
        let report = corpus_report(&scorer, &cands, &ds, &groups, &BTreeMap::new()).unwrap();
        let text = io::to_sorted_json(&report).unwrap();
        prop_assert_eq!(&text, &io::to_sorted_json(&report).unwrap());
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&String> = value.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        prop_assert!(pos("corpus_bleu") < pos("dis_word_rate_excluded"));
        prop_assert!(pos("dis_word_rate_excluded") < pos("images"));
        prop_assert!(pos("images") < pos("means"));
    }
}
