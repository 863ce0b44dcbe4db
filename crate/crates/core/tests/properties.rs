mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tapgkit::aam::{adaptive_select, normalize_scores};
use tapgkit::data::{load_features, save_features, synth_generate, Action, SynthSpec, VideoAnnotation};
use tapgkit::evaluation::{auc, interval_iou, recall_at_an, Detection, Predictions};
use tapgkit::inference::{nms, soft_nms, Proposal};
use tapgkit::tensor::{checkpoint, Graph, ParamStore, Tensor};
use tapgkit::training::{boundary_labels, duration_labels, loss_wb};
use tapgkit::{AoeNet, Config};

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0.0..50.0f64, 0.01..20.0f64).prop_map(|(s, l)| (s, s + l))
}

fn proposals(max: usize) -> impl Strategy<Value = Vec<Proposal>> {
    prop::collection::vec((interval(), 0.0..1.0f64), 0..max)
        .prop_map(|v| v.into_iter().map(|((s, e), p)| Proposal::new(s, e, p)).collect())
}

fn keyed(props: &[Proposal]) -> Vec<(u64, u64, u64)> {
    let mut v: Vec<_> = props
        .iter()
        .map(|p| (p.start.to_bits(), p.end.to_bits(), p.score.to_bits()))
        .collect();
    v.sort_unstable();
    v
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in interval(), b in interval()) {
        let x = interval_iou(a, b);
        prop_assert_eq!(x, interval_iou(b, a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((interval_iou(a, a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(h in prop::collection::vec(-30.0..30.0f64, 1..16)) {
        let w = normalize_scores(&h);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let sel = adaptive_select(&w);
        prop_assert!(!sel.is_empty());
        let top = (0..h.len()).max_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap();
        prop_assert!(sel.contains(&top));
    }

    #[test]
    fn suppression_ignores_input_order(props in proptest::collection::vec((interval(), 0.0..1.0f64), 0..10), seed in any::<u64>()) {
        let props: Vec<Proposal> = props.into_iter().map(|((s, e), p)| Proposal::new(s, e, p)).collect();
        let mut shuffled = props.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(keyed(&nms(&props, 0.5)), keyed(&nms(&shuffled, 0.5)));
        prop_assert_eq!(
            keyed(&soft_nms(&props, 0.5, 0.4, 0.4, 1e-4, 60.0)),
            keyed(&soft_nms(&shuffled, 0.5, 0.4, 0.4, 1e-4, 60.0))
        );
    }

    #[test]
    fn soft_nms_never_raises_scores(props in proposals(12)) {
        let out = soft_nms(&props, 0.0, 0.0, 0.4, 0.0, 60.0);
        prop_assert_eq!(out.len(), props.len());
        for p in &out {
            let orig = props.iter().find(|q| q.start == p.start && q.end == p.end).unwrap();
            prop_assert!(p.score <= orig.score);
        }
    }

    #[test]
    fn hard_nms_keeps_disjoint_survivors(props in proposals(12), thr in 0.1..0.9f64) {
        let kept = nms(&props, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(interval_iou(a.interval(), b.interval()) < thr);
            }
        }
    }

    #[test]
    fn weighted_loss_is_permutation_invariant(
        cells in prop::collection::vec((0.001..0.999f64, any::<bool>()), 1..20),
        seed in any::<u64>(),
    ) {
        let (p, l): (Vec<f64>, Vec<bool>) = cells.iter().copied().unzip();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let ll: Vec<bool> = idx.iter().map(|&i| l[i]).collect();
        let (a, _) = loss_wb(&p, &l);
        let (b, _) = loss_wb(&pp, &ll);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn labels_stay_in_range(t in 1usize..24, raw in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 0..4)) {
        let acts: Vec<(f64, f64)> = raw
            .iter()
            .map(|&(a, b)| {
                let s = a * t as f64 * 0.9;
                (s, s + (t as f64 - s) * b.max(0.05))
            })
            .collect();
        let b = boundary_labels(&acts, t);
        prop_assert_eq!(b.start.len(), t);
        prop_assert_eq!(b.end.len(), t);
        let d = duration_labels(&acts, t, t);
        for (dd, s) in d.positives() {
            prop_assert!(s + dd <= t);
        }
        if acts.is_empty() {
            prop_assert_eq!(d.positives().count(), 0);
        }
    }

    #[test]
    fn recall_is_monotone_in_tiou(gts in prop::collection::vec(interval(), 1..5), props in proposals(8)) {
        let ann = VideoAnnotation::new("v", 100.0, 10.0, gts.iter().map(|&(s, e)| Action::new(s, e)).collect()).unwrap();
        let mut preds = Predictions::new();
        preds.insert(
            "v".into(),
            props.iter().map(|p| Detection { segment: [p.start, p.end], score: p.score, label: None }).collect(),
        );
        let mut last = f64::INFINITY;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let r = recall_at_an(&preds, &[ann.clone()], 100, &[t]);
            prop_assert!(r <= last + 1e-12);
            last = r;
        }
    }

    #[test]
    fn auc_is_a_percentage(curve in prop::collection::vec(0.0..=1.0f64, 1..100)) {
        let a = auc(&curve);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
    }
}

#[test]
fn features_round_trip_through_files() {
    let spec = SynthSpec {
        n_videos: 3,
        t_min: 5,
        t_max: 9,
        env_dim: 3,
        actor_dim: 2,
        object_dim: 4,
        action_len_min: 1,
        action_len_max: 2,
        actors_min: 0,
        objects_per_snippet: 5,
        ..SynthSpec::default()
    };
    let (_, feats) = synth_generate(11, &spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for f in &feats {
        let path = dir.path().join(format!("{}.fea", f.video_id));
        save_features(&path, f).unwrap();
        assert_eq!(&load_features(&path).unwrap(), f);
    }
}

#[test]
fn truncated_feature_file_is_rejected() {
    let (_, feats) = synth_generate(1, &SynthSpec { n_videos: 1, ..SynthSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.fea");
    save_features(&path, &feats[0]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_features(&path).is_err());
}

#[test]
fn model_checkpoint_round_trip() {
    let cfg = Config::desk();
    let a = AoeNet::<f64>::new(cfg.model.clone(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.save(&path).unwrap();
    let b = AoeNet::<f64>::load(cfg.model.clone(), &path).unwrap();
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value, q.value);
    }
    let records = checkpoint::read(&path).unwrap();
    assert_eq!(records.len(), a.store.len());
}

#[test]
fn same_seed_same_model_output() {
    let cfg = Config::desk();
    let (_, feats) = synth_generate(2, &cfg.synth).unwrap();
    let a = AoeNet::<f32>::new(cfg.model.clone(), 9).unwrap().predict(&feats[0]).unwrap();
    let b = AoeNet::<f32>::new(cfg.model.clone(), 9).unwrap().predict(&feats[0]).unwrap();
    assert_eq!(a.start, b.start);
    assert_eq!(a.actionness, b.actionness);
    a.validate().unwrap();
}

#[test]
fn backward_matches_finite_differences_for_a_small_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = common::random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let c = common::check_inputs(&[x], &mut rng, |g, v| {
        let s = g.sigmoid(v[0])?;
        let t = g.transpose(s)?;
        let m = g.matmul(s, t)?;
        g.softmax(m, 1)
    })
    .unwrap();
    assert!(c.max_rel < 1e-6, "{c:?}");
}

#[test]
fn tape_cannot_run_backward_twice() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::with_params(&store);
    let x = g.input(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    assert!(g.backward(s).is_err());
}
