use proptest::prelude::*;

use xmatch_core::checkpoint::{read_checkpoint, write_checkpoint, ModelLayout, ParamStore};
use xmatch_core::cmce::{cross_modal_probabilities, update_buffer, FeatureBuffer, Modality};
use xmatch_core::coattention::{
    semantic_attention_step, CoattentionDims, JointFeatureSequence, MatchingNetwork, SemanticAttentionParams,
    Stage2Variant,
};
use xmatch_core::config::RunConfig;
use xmatch_core::dataset::{generate, DatasetConfig, SampleModality, Split};
use xmatch_core::encoders::{EncoderDims, EncoderParams};
use xmatch_core::numcore::{softmax, DenseArray, Rng};
use xmatch_core::pipeline::{
    rerank, retrieve_stage1, topk_accuracy, Candidate, PassCounter, RankedList, RetrievalDirection, Stage2Config,
    Stage2Model,
};

fn lists(seed: u64, queries: usize, len: usize, classes: usize) -> Vec<RankedList> {
    let mut rng = Rng::seeded(seed);
    (0..queries)
        .map(|q| {
            let c = (0..len)
                .map(|i| Candidate { item: i, identity: rng.below(classes), score: rng.uniform(-1.0, 1.0) })
                .collect();
            RankedList::new(q, rng.below(classes), RetrievalDirection::TextToImage, c)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let p = softmax(&logits).unwrap();
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn sharp_probabilities_stay_finite(seed in any::<u64>(), n in 1usize..30, scale in 1e-3f64..1e3) {
        let mut rng = Rng::seeded(seed);
        let buf: FeatureBuffer<f64> = FeatureBuffer::new(Modality::Textual, DenseArray::uniform(&[n, 6], -1.0, 1.0, &mut rng), true).unwrap();
        let feat: Vec<f32> = (0..6).map(|_| (scale * rng.uniform(-1.0, 1.0)) as f32).collect();
        let buf32 = FeatureBuffer::new(
            Modality::Textual,
            DenseArray::new(vec![n, 6], buf.table().values().iter().map(|&v| v as f32).collect()).unwrap(),
            true,
        ).unwrap();
        let q = cross_modal_probabilities(&feat, &buf32, 0.04).unwrap().probs;
        prop_assert!(q.iter().all(|v| v.is_finite()));
        prop_assert!((q.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn semantic_step_ignores_row_order(seed in any::<u64>(), t in 1usize..12) {
        let mut rng = Rng::seeded(seed);
        let cd = CoattentionDims { attention: 4, importance: 5, fc: 3, decoder: 4, steps: 2, ..CoattentionDims::with_encoder(3, 5) };
        let p = SemanticAttentionParams::<f64>::init(&cd, &mut rng);
        let joint = DenseArray::uniform(&[t, cd.joint()], -2.0, 2.0, &mut rng);
        let c: Vec<f64> = (0..cd.decoder).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let perm = rng.permutation(t);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| joint.row(i).to_vec()).collect();
        let (_, x) = semantic_attention_step(&c, &JointFeatureSequence(joint), &p).unwrap();
        let (_, y) = semantic_attention_step(&c, &JointFeatureSequence(DenseArray::from_rows(&rows).unwrap()), &p).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn topk_is_monotone_in_k(seed in any::<u64>(), queries in 1usize..10, len in 1usize..30, classes in 1usize..6) {
        let l = lists(seed, queries, len, classes);
        let acc: Vec<f64> = (1..=len).map(|k| topk_accuracy(&l, k).unwrap()).collect();
        prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(acc.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn update_touches_one_unit_row(seed in any::<u64>(), n in 1usize..8, d in 1usize..10, alpha in 0.01f64..0.99) {
        let mut rng = Rng::seeded(seed);
        let mut buf = FeatureBuffer::new(Modality::Visual, DenseArray::uniform(&[n, d], -1.0, 1.0, &mut rng), true).unwrap();
        let id = rng.below(n);
        let f: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let before = buf.table().clone();
        update_buffer(&mut buf, id, &f, alpha).unwrap();
        let norm = buf.row(id).iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-9);
        for r in (0..n).filter(|&r| r != id) {
            prop_assert_eq!(buf.row(r), before.row(r));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        arrays in prop::collection::vec((1usize..4, 1usize..5, any::<u64>()), 0..5),
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::default();
        for (i, &(r, c, s)) in arrays.iter().enumerate() {
            let mut rng = Rng::seeded(s);
            let a = DenseArray::<f32>::uniform(&[r, c], -1e3, 1e3, &mut rng);
            store.push(&format!("p{i}"), &a);
        }
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), "bare", "x = 1", seed, ModelLayout::Bare, &store).unwrap();
        let (m, back) = read_checkpoint(dir.path()).unwrap();
        prop_assert_eq!(m.seed, seed);
        prop_assert_eq!(back.arrays.len(), store.arrays.len());
        for (a, b) in store.arrays.iter().zip(&back.arrays) {
            prop_assert_eq!(&a.0, &b.0);
            prop_assert_eq!(&a.1, &b.1);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.2), bits(&b.2));
        }
    }

    #[test]
    fn config_render_round_trips(
        n in 2usize..200, noise in 0.0f64..2.0, permute in 0.0f64..1.0, epochs in 1usize..100,
        lr in 1e-6f64..1.0, k in 1usize..50, f64_mode in any::<bool>(), no_sma in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.dataset.num_identities = n;
        cfg.dataset.noise_level = noise;
        cfg.dataset.permute_prob = permute;
        cfg.stage1.epochs = epochs;
        cfg.stage1.lr_text = lr;
        cfg.rerank_k = k;
        cfg.stage2.variant.no_sma = no_sma;
        if f64_mode {
            cfg.precision = xmatch_core::config::Precision::F64;
        }
        prop_assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rerank_permutes_only_the_head(seed in any::<u64>(), k in 1usize..8) {
        let (ds, _) = generate(&DatasetConfig { num_identities: 4, seed: seed % 1000, ..Default::default() }).unwrap();
        let dims = EncoderDims { embed: 4, hidden: 4, region: 4, joint: 4, ..Default::default() };
        let mut rng = Rng::seeded(seed);
        let enc = EncoderParams::<f64>::init(dims, &mut rng);
        let q = ds.split_records(Split::Test, SampleModality::Text);
        let g = ds.split_records(Split::Test, SampleModality::Image);
        let before = retrieve_stage1(&ds, &q, &g, &enc, &PassCounter::new()).unwrap();
        let k = k.min(g.len());
        let cd = Stage2Config { attention: 3, importance: 3, fc: 3, decoder: 3, steps: 2, ..Default::default() }.dims(&dims);
        let net = MatchingNetwork::new(enc, cd, Stage2Variant::default(), &mut rng).unwrap();
        let model = Stage2Model { net, no_stage1: false, no_id: false };
        let after = rerank(&ds, &before, k, &model, &PassCounter::new()).unwrap();
        for (b, a) in before.iter().zip(&after) {
            let mut head_b: Vec<usize> = b.candidates[..k].iter().map(|c| c.item).collect();
            let mut head_a: Vec<usize> = a.candidates[..k].iter().map(|c| c.item).collect();
            head_b.sort_unstable();
            head_a.sort_unstable();
            prop_assert_eq!(head_b, head_a);
            prop_assert_eq!(&b.candidates[k..], &a.candidates[k..]);
            prop_assert!(a.candidates[..k].windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
