use ndarray::Array1;
use proptest::prelude::*;
use rand::SeedableRng;

use crate::detector::{eval_classification, Benchmark, BenchmarkItem, DetectorModel, PerRelation, Scorer};
use crate::encoder::EncoderParams;
use crate::langparse::{self, tokenize, Relation, Vocabulary, PAD, UNK};
use crate::narrate::{
    generate_dataset, held_out_phrases, relation_phrases, render, save_dataset, GeneratorConfig, HELD_OUT_TEMPLATE,
    TEMPLATES,
};
use crate::nn::{sigmoid, softmax};
use crate::policy::{
    run_episode, sample_task, DqnConfig, EpisodeConfig, ObjectSet, ReplayBuffer, RewardRule, RewardSource, Transition,
};
use crate::synthesis::{synthesize_goal_with, SynthesisConfig};
use crate::world::{self, Action, ObjectInstance, Scene, SpatialFeatures, TABLE_D, TABLE_W};
use crate::{rng, Execution};

fn relation() -> impl Strategy<Value = Relation> {
    prop::sample::select(Relation::ALL.to_vec())
}

fn category() -> impl Strategy<Value = String> {
    prop::sample::select(world::default_library().into_iter().map(|c| c.name).collect::<Vec<_>>())
}

/// A box fully on the table.
fn object(id: u32) -> impl Strategy<Value = ObjectInstance> {
    (2.0..7.0f64, 2.0..7.0f64, 0.0..1.0f64, 0.0..1.0f64, any::<bool>()).prop_map(move |(w, h, fx, fy, container)| {
        ObjectInstance {
            id,
            category: format!("thing{id}"),
            cx: w / 2.0 + fx * (TABLE_W - w),
            cy: h / 2.0 + fy * (TABLE_D - h),
            w,
            h,
            is_container: container,
            color: [0.5; 3],
            orientation: None,
        }
    })
}

fn pair_scene() -> impl Strategy<Value = Scene> {
    (object(0), object(1)).prop_map(|(a, b)| Scene { objects: vec![a, b], held: Some(1) })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tokens_are_clean_and_tokenize_is_idempotent(text in "[a-zA-Z ,.'!?-]{0,40}") {
        let tokens = tokenize(&text);
        for t in &tokens {
            prop_assert!(!t.is_empty());
            prop_assert!(t.chars().all(char::is_alphanumeric));
        }
        prop_assert_eq!(tokenize(&tokens.join(" ")), tokens.clone());
        if text.chars().any(char::is_alphanumeric) {
            prop_assert!(!tokens.is_empty());
        }
    }

    #[test]
    fn render_then_parse_round_trips(
        subject in category(),
        object in category(),
        rel in relation(),
        template in 0..TEMPLATES.len() + 1,
        phrase in 0..4usize,
    ) {
        prop_assume!(subject != object);
        let (tpl, phrases) = if template == TEMPLATES.len() {
            (HELD_OUT_TEMPLATE, held_out_phrases(rel))
        } else {
            (TEMPLATES[template], relation_phrases(rel))
        };
        let text = render(tpl, &subject, phrases[phrase % phrases.len()], &object);
        let parsed = langparse::parse_text(&text).unwrap();
        prop_assert_eq!(&parsed.subject, &subject);
        prop_assert_eq!(&parsed.object, &object);
        prop_assert_eq!(parsed.relation, rel);
        let tokens = tokenize(&text);
        prop_assert_eq!(&tokens[parsed.relation_span.clone()], &parsed.relation_tokens[..]);
        prop_assert_eq!(langparse::SynonymTable::builtin().label_of(&parsed.relation_tokens), Some(rel));
    }

    #[test]
    fn vocabulary_is_dense_and_encoding_in_range(corpus in prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,4}", 1..6), probe in "[a-f]{1,3}( [a-f]{1,3}){0,4}") {
        let utts: Vec<_> = corpus.iter().map(langparse::Utterance::new).collect();
        let vocab = Vocabulary::build(&utts).unwrap();
        prop_assert_eq!(vocab.token(PAD).is_some(), true);
        prop_assert_eq!(vocab.token(UNK).is_some(), true);
        for i in 0..vocab.len() {
            let tok = vocab.token(i).unwrap();
            prop_assert_eq!(vocab.get(tok), Some(i));
        }
        for idx in vocab.encode(&tokenize(&probe)) {
            prop_assert!(idx < vocab.len());
        }
    }

    #[test]
    fn attention_is_a_distribution_and_pooling_is_convex(seed in any::<u64>(), seq in prop::collection::vec(0..10usize, 1..9)) {
        let p = EncoderParams::new(10, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let tr = p.encode(&seq).unwrap();
        prop_assert!(tr.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((tr.weights.sum() - 1.0).abs() < 1e-9);
        for (j, &v) in tr.embedding.iter().enumerate() {
            let col = tr.states.column(j);
            let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        prop_assert_eq!(p.relation_embedding(&seq).unwrap(), tr.embedding);
    }

    #[test]
    fn softmax_and_sigmoid_stay_finite(logits in prop::collection::vec(-800.0..800.0f64, 1..12)) {
        let s = softmax(Array1::from(logits.clone()).view());
        prop_assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((s.sum() - 1.0).abs() < 1e-9);
        for z in logits {
            let y = sigmoid(z);
            prop_assert!(y.is_finite() && (0.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn left_and_right_never_hold_together(scene in pair_scene()) {
        let l = scene.predicate_holds(1, 0, Relation::LeftOf).unwrap();
        let r = scene.predicate_holds(1, 0, Relation::RightOf).unwrap();
        prop_assert!(!(l && r));
    }

    #[test]
    fn mirror_swaps_left_and_right(scene in pair_scene()) {
        let m = scene.mirror();
        for (a, b) in [(Relation::LeftOf, Relation::RightOf), (Relation::RightOf, Relation::LeftOf), (Relation::Behind, Relation::Behind)] {
            prop_assert_eq!(m.predicate_holds(1, 0, a).unwrap(), scene.predicate_holds(1, 0, b).unwrap());
        }
        let back = m.mirror();
        prop_assert_eq!(back.held, scene.held);
        for (a, b) in back.objects.iter().zip(&scene.objects) {
            prop_assert!((a.cx - b.cx).abs() < 1e-9);
            prop_assert_eq!(&ObjectInstance { cx: b.cx, ..a.clone() }, b);
        }
    }

    #[test]
    fn actions_keep_the_held_box_on_the_table(scene in pair_scene(), moves in prop::collection::vec(0..4usize, 1..20), step in 0.5..12.0f64) {
        let anchor = scene.objects[0].clone();
        let mut s = scene;
        for m in moves {
            s = s.apply_action(Action::from_index(m), step).unwrap();
            let o = s.get(1).unwrap();
            prop_assert!(o.cx - o.w / 2.0 >= -1e-9 && o.cx + o.w / 2.0 <= TABLE_W + 1e-9);
            prop_assert!(o.cy - o.h / 2.0 >= -1e-9 && o.cy + o.h / 2.0 <= TABLE_D + 1e-9);
            let f = s.normalized_features(1).unwrap();
            prop_assert!(f.0.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(s.get(0).unwrap(), &anchor);
        }
    }

    #[test]
    fn scores_ignore_categories(seed in any::<u64>(), scene in pair_scene(), a in category(), b in category()) {
        let model = detector(seed);
        let relabeled = Scene {
            objects: scene.objects.iter().zip([a, b]).map(|(o, c)| ObjectInstance { category: c, ..o.clone() }).collect(),
            ..scene.clone()
        };
        let feats = |s: &Scene| (s.normalized_features(1).unwrap(), s.normalized_features(0).unwrap());
        let u = "the cup is behind the box";
        prop_assert_eq!(model.scores(u, &[feats(&scene)]).unwrap(), model.scores(u, &[feats(&relabeled)]).unwrap());
    }
}

fn detector(seed: u64) -> DetectorModel {
    let corpus = vec!["the cup is behind the box".to_owned(), "put the apple in the bowl".to_owned()];
    DetectorModel::for_corpus(&corpus, &mut rng::stream(seed, "prop.detector")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_segments_honour_the_contract(seed in any::<u64>()) {
        let cfg = GeneratorConfig { n_videos: 1, tasks_per_video: (14, 16), seed, ..Default::default() };
        let ds = generate_dataset(&cfg).unwrap();
        let segments = ds.segments();
        let tasks: usize = ds.demos.iter().map(|d| d.frames.iter().map(|f| f.task_idx).max().map_or(0, |m| m + 1)).sum();
        prop_assert_eq!(segments.len(), tasks);
        for seg in &segments {
            let (a, b) = seg.range;
            prop_assert_eq!(seg.x_minus.len(), cfg.n_frames_per_side);
            prop_assert_eq!(seg.x_plus.len(), cfg.n_frames_per_side);
            prop_assert!(seg.x_minus.iter().chain(&seg.x_plus).all(|i| (a..=b).contains(i)));
            prop_assert!(seg.x_minus.iter().all(|i| !seg.x_plus.contains(i)));
            let holds = |k: usize| {
                let scene = &ds.frame(seg.video_id, k).scene;
                let s = scene.find_category(&seg.parsed.subject).unwrap().id;
                let o = scene.find_category(&seg.parsed.object).unwrap().id;
                scene.predicate_holds(s, o, seg.parsed.relation).unwrap()
            };
            prop_assert!(!holds(a));
            prop_assert!(holds(b));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &ds).unwrap();
        let lines = std::fs::read_to_string(&path).unwrap().lines().count();
        prop_assert_eq!(lines, ds.total_frames() + 1);
    }

    #[test]
    fn shaping_telescopes(seed in any::<u64>(), moves in prop::collection::vec(0..4usize, 5)) {
        let env = EpisodeConfig::default();
        let task = sample_task(&env, ObjectSet::Seen, &mut rng::stream(seed, "prop.task")).unwrap();
        let goal = (30.0, 27.5);
        let rule = RewardRule { bonus: 0.0, ..RewardRule::new(RewardSource::Oracle, Some(goal), None) };
        let ep = run_episode(&task, &env, Some(&rule), |_, t| Ok(Action::from_index(moves[t]))).unwrap();
        let dist = |s: &Scene| {
            let o = s.get(task.subject).unwrap();
            (o.cx - goal.0).hypot(o.cy - goal.1)
        };
        let total: f64 = ep.transitions.iter().map(|t| t.reward).sum();
        let expected = rule.shaping_scale * (dist(&task.scene) - dist(&ep.final_scene));
        prop_assert!((total - expected).abs() < 1e-9, "{} vs {}", total, expected);
    }

    #[test]
    fn replay_buffer_is_a_bounded_fifo(capacity in 1..20usize, pushes in 0..60usize) {
        let env = EpisodeConfig::default();
        let state = sample_task(&env, ObjectSet::Seen, &mut rng::stream(1, "prop.replay")).unwrap().state();
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..pushes {
            buf.push(Transition { state: state.clone(), action: Action::Left, reward: i as f64, next_state: state.clone(), terminal: false });
            prop_assert!(buf.len() <= capacity);
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let first = pushes.saturating_sub(capacity);
        prop_assert_eq!(kept, (first..pushes).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn goal_score_is_the_detector_score_at_the_goal(seed in any::<u64>()) {
        let env = EpisodeConfig::default();
        let task = sample_task(&env, ObjectSet::Seen, &mut rng::stream(seed, "prop.goal")).unwrap();
        let model = detector(seed);
        let cfg = SynthesisConfig { samples: 32, ..Default::default() };
        let goal = synthesize_goal_with(&model, &task.utterance, &task.scene, &cfg, &mut rng::stream(seed, "g")).unwrap();
        let again = synthesize_goal_with(&model, &task.utterance, &task.scene, &cfg, &mut rng::stream(seed, "g")).unwrap();
        prop_assert_eq!(goal, again);
        let subject = task.scene.get(task.subject).unwrap();
        let placed = ObjectInstance { cx: goal.cx, cy: goal.cy, ..subject.clone() };
        let pair = (SpatialFeatures::of(&placed), SpatialFeatures::of(task.scene.get(task.object).unwrap()));
        prop_assert_eq!(model.scores(&task.utterance, &[pair]).unwrap()[0], goal.score);
    }
}

#[test]
fn epsilon_schedule_is_exact() {
    let cfg = DqnConfig::default();
    for n in (0..20_000).step_by(250) {
        let expected = (0.8 - 0.1 * (n / 1000) as f64).max(0.05);
        assert!((cfg.epsilon(n) - expected).abs() < 1e-12, "n={n}");
    }
}

#[test]
fn report_average_is_the_exact_mean() {
    let model = detector(3);
    let env = EpisodeConfig::default();
    let mut r = rng::stream(2, "prop.bench");
    let benches: Vec<Benchmark> = Relation::ALL
        .iter()
        .map(|&rel| Benchmark {
            relation: rel,
            items: (0..6)
                .map(|i| {
                    let t = sample_task(&env, ObjectSet::Seen, &mut r).unwrap();
                    BenchmarkItem {
                        label: t.scene.predicate_holds(t.subject, t.object, rel).unwrap(),
                        scene: t.scene,
                        subject: t.subject,
                        object: t.object,
                        utterance: if i % 2 == 0 { "the cup is behind the box".into() } else { "put the apple in the bowl".into() },
                        near_miss: false,
                    }
                })
                .collect(),
        })
        .collect();
    let report = eval_classification(&model, &benches, Execution::Sequential).unwrap();
    let a: PerRelation = report.accuracy;
    assert_eq!(report.average, (a.in_ + a.behind + a.left + a.right) / 4.0);
    for r in Relation::ALL {
        assert!((0.0..=1.0).contains(&a.get(r)));
    }
    assert_eq!(report, eval_classification(&model, &benches, Execution::Parallel).unwrap());
}
