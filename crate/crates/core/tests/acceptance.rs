//! Acceptance suite A1-A10, one PASS/FAIL line per criterion.
//!
//! Runs the full default-size pipeline on the CPU, so expect it to take a
//! while. `NGD_ACCEPT_ONLY=A1,A3` restricts the run to the listed criteria
//! (skipped ones print SKIP). The process exits with status 1 if any
//! criterion that ran failed.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

use ngd_core::checkpoint::{self, Model};
use ngd_core::detector::{
    contrastive_loss, eval_classification, gen_benchmarks, gen_pool, rank_pool, threshold_loss, Benchmark,
    BenchmarkConfig, DetectorModel, LossVariant, NegativeMode, TrainConfig, RELATION_LAYERS, THRESHOLD_LAYERS,
};
use ngd_core::encoder::EncoderParams;
use ngd_core::langparse::Relation;
use ngd_core::narrate::{generate_dataset, relation_phrases, render, save_dataset, Dataset, GeneratorConfig, TEMPLATES};
use ngd_core::nn::{bce_with_logits, bce_with_logits_grad, grad_check, Conv2d, Dense, GradCheck, LstmCell, Mlp, Parameters};
use ngd_core::policy::{
    curve_to_csv, evaluate_policy, sample_task, train_dqn, DqnConfig, EpisodeConfig, ObjectSet, PolicyState, QNetwork,
    RewardSource, TrainedPolicy, Variant,
};
use ngd_core::synthesis::{synthesize_goal_with, SynthesisConfig};
use ngd_core::world::{self, relation_holds, Action, ObjectInstance, Scene, TABLE_D, TABLE_W};
use ngd_core::{rng, Execution};

const SEED: u64 = 0;
const EVAL_EPISODES: usize = 500;
/// Reduced budget for the raster comparison.
const EXTENDED_EPISODES: usize = 1500;
const EXTENDED_BATCH: usize = 32;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Artifacts shared between criteria, built on first use.
#[derive(Default)]
struct Shared {
    dataset: Option<Dataset>,
    benchmarks: Option<Vec<Benchmark>>,
    hard: Option<(DetectorModel, Duration)>,
    /// Seen and unseen success of the default R_gt object run, and its training time.
    oracle_policy: Option<(f64, f64, Duration)>,
}

impl Shared {
    fn dataset(&mut self) -> &Dataset {
        self.dataset.get_or_insert_with(|| generate_dataset(&GeneratorConfig { seed: SEED, ..Default::default() }).unwrap())
    }

    fn benchmarks(&mut self) -> &[Benchmark] {
        self.benchmarks.get_or_insert_with(|| {
            gen_benchmarks(rng::child_seed(SEED, "benchmark"), &BenchmarkConfig::default()).unwrap()
        })
    }

    fn train(&mut self, mode: NegativeMode) -> (DetectorModel, Duration) {
        let cfg = TrainConfig { negative_mode: mode, seed: SEED, ..Default::default() };
        let t = Instant::now();
        let out = ngd_core::detector::fit(self.dataset(), &cfg).unwrap();
        (out.model, t.elapsed())
    }

    fn hard(&mut self) -> &(DetectorModel, Duration) {
        if self.hard.is_none() {
            self.hard = Some(self.train(NegativeMode::Hard));
        }
        self.hard.as_ref().unwrap()
    }

    fn oracle_policy(&mut self) -> (f64, f64, Duration) {
        *self.oracle_policy.get_or_insert_with(|| {
            let (_, seen, unseen, took) = policy_run(RewardSource::Oracle, Variant::Object, None, None);
            (seen, unseen, took)
        })
    }
}

fn mean_accuracy(model: &DetectorModel, benches: &[Benchmark]) -> f64 {
    eval_classification(model, benches, Execution::Parallel).unwrap().average
}

/// Train and evaluate on held-out seen and unseen tasks.
fn policy_run(
    source: RewardSource,
    variant: Variant,
    detector: Option<&DetectorModel>,
    budget: Option<(usize, usize)>,
) -> (TrainedPolicy, f64, f64, Duration) {
    let env = EpisodeConfig::default();
    let mut cfg = DqnConfig { seed: SEED, ..Default::default() };
    if let Some((episodes, batch)) = budget {
        cfg.episodes = episodes;
        cfg.batch = batch;
        cfg.eval_every = episodes / 6;
    }
    let t = Instant::now();
    let scorer = detector.map(|d| d as &dyn ngd_core::detector::Scorer);
    let trained = train_dqn(&env, &cfg, source, variant, scorer, Execution::Parallel).unwrap();
    let elapsed = t.elapsed();
    let test_seed = rng::child_seed(SEED, "policy.test");
    let seen = evaluate_policy(&trained.net, &env, EVAL_EPISODES, ObjectSet::Seen, test_seed, Execution::Parallel).unwrap();
    let unseen =
        evaluate_policy(&trained.net, &env, EVAL_EPISODES, ObjectSet::Unseen, test_seed, Execution::Parallel).unwrap();
    (trained, seen, unseen, elapsed)
}

fn uniform(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn a1(_: &mut Shared) -> Verdict {
    let t = Instant::now();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let full = GradCheck::exhaustive();
    let mut errs: Vec<(&str, f64)> = Vec::new();

    // Dense: weights and input under a quadratic loss.
    let dense = Dense::new(8, 5, &mut r);
    let x = Array2::from_shape_vec((4, 8), uniform(32, &mut r)).unwrap();
    let target = Array2::from_shape_vec((4, 5), uniform(20, &mut r)).unwrap();
    let dense_loss = |d: &Dense, x: &Array2<f64>| 0.5 * (&d.forward(x.view()).unwrap() - &target).mapv(|v| v * v).sum();
    let dy = &dense.forward(x.view()).unwrap() - &target;
    let (g, dx) = dense.backward(x.view(), dy.view());
    let e1 = grad_check(
        |p| {
            let mut d = dense.clone();
            d.set_flat(p).unwrap();
            dense_loss(&d, &x)
        },
        &dense.flat(),
        &g.flat(),
        &full,
        &mut r,
    )
    .unwrap();
    let e2 = grad_check(
        |p| dense_loss(&dense, &Array2::from_shape_vec((4, 8), p.to_vec()).unwrap()),
        x.as_slice().unwrap(),
        &dx.iter().copied().collect::<Vec<_>>(),
        &full,
        &mut r,
    )
    .unwrap();
    errs.push(("dense", e1.max(e2)));

    // Conv: every kernel/stride used by the raster network.
    let mut conv_err: f64 = 0.0;
    for (k, s) in [(5, 2), (3, 1)] {
        let conv = Conv2d::new(3, 4, k, s, &mut r);
        let img = Array3::from_shape_vec((3, 9, 9), uniform(243, &mut r)).unwrap();
        let ho = conv.output_size(9);
        let w = Array3::from_shape_vec((4, ho, ho), uniform(4 * ho * ho, &mut r)).unwrap();
        let loss = |c: &Conv2d, x: &Array3<f64>| (&c.forward(x.view()).unwrap().0 * &w).sum();
        let (_, cache) = conv.forward(img.view()).unwrap();
        let (g, dx) = conv.backward(&cache, w.view());
        conv_err = conv_err.max(
            grad_check(
                |p| {
                    let mut c = conv.clone();
                    c.set_flat(p).unwrap();
                    loss(&c, &img)
                },
                &conv.flat(),
                &g.flat(),
                &full,
                &mut r,
            )
            .unwrap(),
        );
        conv_err = conv_err.max(
            grad_check(
                |p| loss(&conv, &Array3::from_shape_vec((3, 9, 9), p.to_vec()).unwrap()),
                img.as_slice().unwrap(),
                &dx.iter().copied().collect::<Vec<_>>(),
                &full,
                &mut r,
            )
            .unwrap(),
        );
    }
    errs.push(("conv", conv_err));

    // LSTM cell: weights and (x, h, c).
    let cell = LstmCell::new(3, 4, &mut r);
    let xs = Array1::from(uniform(11, &mut r));
    let (wh, wc) = (Array1::from(uniform(4, &mut r)), Array1::from(uniform(4, &mut r)));
    let lstm_loss = |cell: &LstmCell, v: &Array1<f64>| {
        let (h, c, _) = cell.step(v.slice(ndarray::s![..3]), v.slice(ndarray::s![3..7]), v.slice(ndarray::s![7..])).unwrap();
        wh.dot(&h) + wc.dot(&c)
    };
    let (_, _, cache) = cell.step(xs.slice(ndarray::s![..3]), xs.slice(ndarray::s![3..7]), xs.slice(ndarray::s![7..])).unwrap();
    let mut g = cell.zeros_like();
    let (dx, dh, dc) = cell.backward(&cache, wh.view(), wc.view(), &mut g);
    let e1 = grad_check(
        |p| {
            let mut c = cell.clone();
            c.set_flat(p).unwrap();
            lstm_loss(&c, &xs)
        },
        &cell.flat(),
        &g.flat(),
        &full,
        &mut r,
    )
    .unwrap();
    let d_in: Vec<f64> = dx.iter().chain(dh.iter()).chain(dc.iter()).copied().collect();
    let e2 = grad_check(|p| lstm_loss(&cell, &Array1::from(p.to_vec())), xs.as_slice().unwrap(), &d_in, &full, &mut r)
        .unwrap();
    errs.push(("lstm", e1.max(e2)));

    // BiLSTM + attention pooling.
    let enc = EncoderParams::new(12, &mut r);
    let seq = [3, 1, 7, 7, 2, 9];
    let target = Array1::from(uniform(ngd_core::encoder::RELATION_DIM, &mut r));
    let enc_loss = |p: &EncoderParams| {
        let v = p.relation_embedding(&seq).unwrap();
        v.dot(&target) + 0.5 * v.dot(&v)
    };
    let tr = enc.encode(&seq).unwrap();
    let mut g = enc.zeros_like();
    enc.backward(&tr, &(&target + &tr.embedding), &mut g);
    let e = grad_check(
        |p| {
            let mut q = enc.clone();
            q.set_flat(p).unwrap();
            enc_loss(&q)
        },
        &enc.flat(),
        &g.flat(),
        &GradCheck::probes(800),
        &mut r,
    )
    .unwrap();
    errs.push(("attention encoder", e));

    // Relation MLP and threshold net as standalone blocks.
    for (name, sizes) in [("relation mlp", &RELATION_LAYERS[..]), ("threshold net", &THRESHOLD_LAYERS[..])] {
        let m = Mlp::new(sizes, &mut r);
        let n_in = sizes[0];
        let x = Array2::from_shape_vec((3, n_in), uniform(3 * n_in, &mut r)).unwrap();
        let w = Array2::from_shape_vec((3, 1), uniform(3, &mut r)).unwrap();
        let loss = |m: &Mlp, x: &Array2<f64>| (&m.predict(x.view()).unwrap() * &w).sum();
        let (_, cache) = m.forward(x.view()).unwrap();
        let (g, dx) = m.backward(&cache, w.view());
        let e1 = grad_check(
            |p| {
                let mut q = m.clone();
                q.set_flat(p).unwrap();
                loss(&q, &x)
            },
            &m.flat(),
            &g.flat(),
            &GradCheck::probes(600),
            &mut r,
        )
        .unwrap();
        let e2 = grad_check(
            |p| loss(&m, &Array2::from_shape_vec((3, n_in), p.to_vec()).unwrap()),
            x.as_slice().unwrap(),
            &dx.iter().copied().collect::<Vec<_>>(),
            &GradCheck::probes(200),
            &mut r,
        )
        .unwrap();
        errs.push((name, e1.max(e2)));
    }

    // Contrastive hinge through the whole detector.
    let corpus = vec!["the mug is to the left of the plate".to_owned()];
    let det = DetectorModel::for_corpus(&corpus, &mut r).unwrap();
    let tokens = det.token_indices(&corpus[0]).unwrap();
    let pair = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut f = || world::SpatialFeatures([r.random_range(0.0..1.0), r.random_range(0.0..1.0), 0.07, 0.08]);
        (f(), f())
    };
    let pos: Vec<_> = (0..3).map(|_| pair(&mut r)).collect();
    let neg: Vec<_> = (0..3).map(|_| pair(&mut r)).collect();
    let (_, grad) = contrastive_loss(&det, &tokens, &pos, &neg, 2.0, LossVariant::Margin).unwrap();
    let e = grad_check(
        |p| {
            let mut m = det.clone();
            m.set_flat(p).unwrap();
            contrastive_loss(&m, &tokens, &pos, &neg, 2.0, LossVariant::Margin).unwrap().0
        },
        &det.flat(),
        &grad.flat(),
        &GradCheck::probes(600),
        &mut r,
    )
    .unwrap();
    errs.push(("contrastive loss", e));

    // Cross-entropy: the bare loss and the threshold objective.
    let logits = uniform(6, &mut r).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let ce = |z: &[f64]| z.iter().zip(labels).map(|(&z, y)| bce_with_logits(z, y)).sum::<f64>();
    let analytic: Vec<f64> = logits.iter().zip(labels).map(|(&z, y)| bce_with_logits_grad(z, y)).collect();
    let e1 = grad_check(ce, &logits, &analytic, &full, &mut r).unwrap();
    let v = det.embed(&corpus[0]).unwrap();
    let scores = [0.3, -0.2, 1.1, 0.05];
    let tl = [true, false, true, false];
    let (_, grad) = threshold_loss(&det, &v, &scores, &tl, 4.0).unwrap();
    let e2 = grad_check(
        |p| {
            let mut m = det.clone();
            m.threshold.set_flat(p).unwrap();
            threshold_loss(&m, &v, &scores, &tl, 4.0).unwrap().0
        },
        &det.threshold.flat(),
        &grad.flat(),
        &full,
        &mut r,
    )
    .unwrap();
    errs.push(("cross-entropy", e1.max(e2)));

    // Both Q-networks through the Huber TD loss.
    let env = EpisodeConfig::default();
    for (name, variant, probes) in [("object q-net", Variant::Object, 600), ("raster q-net", Variant::Raster, 150)] {
        let net = QNetwork::new(variant, &mut r);
        let mut tr = rng::stream(5, "a1.tasks");
        let states: Vec<PolicyState> = (0..4).map(|_| sample_task(&env, ObjectSet::Seen, &mut tr).unwrap().state()).collect();
        let refs: Vec<&PolicyState> = states.iter().collect();
        let input = net.encode(&refs).unwrap();
        let actions: Vec<Action> = (0..4).map(Action::from_index).collect();
        let q = net.predict(&input, Execution::Sequential).unwrap();
        let targets: Vec<f64> = (0..4).map(|i| q[[i, i]] + [0.4, -0.3, 2.5, -3.0][i]).collect();
        let (_, grad) = net.td_loss(&input, &actions, &targets, Execution::Sequential).unwrap();
        let e = grad_check(
            |p| {
                let mut n = net.clone();
                n.set_flat(p).unwrap();
                n.td_loss(&input, &actions, &targets, Execution::Sequential).unwrap().0
            },
            &net.flat(),
            &grad.flat(),
            &GradCheck::probes(probes),
            &mut r,
        )
        .unwrap();
        errs.push((name, e));
    }

    let elapsed = t.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(worst < 1e-4 && elapsed < 60.0, format!("max rel err {worst:.1e} < 1e-4 in {elapsed:.1}s < 60s [{detail}]"))
}

/// Coordinates on a 1/16 cm grid so mirroring and translating are exact.
fn dyadic(lo: f64, hi: f64, r: &mut impl Rng) -> f64 {
    let steps = ((hi - lo) * 16.0).floor() as i64;
    lo + r.random_range(0..=steps) as f64 / 16.0
}

fn a2(_: &mut Shared) -> Verdict {
    let t = Instant::now();
    let lib = world::default_library();
    let mut r = rng::stream(SEED, "a2");
    let mut violations = [0usize; 3];
    let mut lefts = 0;
    for _ in 0..10_000 {
        let n = r.random_range(2..=4);
        let objects: Vec<ObjectInstance> = (0..n)
            .map(|id| {
                let spec = lib.choose(&mut r).unwrap();
                let w = dyadic(spec.size.0, spec.size.1, &mut r);
                let h = dyadic(spec.size.0, spec.size.1, &mut r);
                let cx = dyadic(w / 2.0, TABLE_W - w / 2.0, &mut r);
                let cy = dyadic(h / 2.0, TABLE_D - h / 2.0, &mut r);
                ObjectInstance { w, h, ..spec.instantiate(id as u32, cx, cy, &mut r) }
            })
            .collect();
        let scene = Scene { objects, held: None };
        let mirrored = scene.mirror();
        let dx = dyadic(-5.0, 5.0, &mut r);
        let dy = dyadic(-5.0, 5.0, &mut r);
        let moved = scene.translate(dx, dy);
        for s in 0..n as u32 {
            for o in (0..n as u32).filter(|&o| o != s) {
                let v = |sc: &Scene, rel| sc.predicate_holds(s, o, rel).unwrap();
                let mirror_ok = v(&mirrored, Relation::LeftOf) == v(&scene, Relation::RightOf)
                    && v(&mirrored, Relation::RightOf) == v(&scene, Relation::LeftOf)
                    && v(&mirrored, Relation::In) == v(&scene, Relation::In)
                    && v(&mirrored, Relation::Behind) == v(&scene, Relation::Behind);
                let translate_ok = Relation::ALL.iter().all(|&rel| v(&moved, rel) == v(&scene, rel));
                let left = v(&scene, Relation::LeftOf);
                lefts += left as usize;
                violations[0] += !mirror_ok as usize;
                violations[1] += !translate_ok as usize;
                violations[2] += (left && v(&scene, Relation::RightOf)) as usize;
            }
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    verdict(
        violations == [0, 0, 0] && elapsed < 5.0 && lefts > 0,
        format!(
            "10000 scenes: mirror {} / translate {} / left&right {} violations ({lefts} LeftOf pairs) in {elapsed:.2}s < 5s",
            violations[0], violations[1], violations[2]
        ),
    )
}

fn a3(sh: &mut Shared) -> Verdict {
    let (model, took) = sh.hard().clone();
    let report = eval_classification(&model, sh.benchmarks(), Execution::Parallel).unwrap();
    let secs = took.as_secs_f64();
    let a = report.accuracy;
    verdict(
        report.average >= 0.85 && secs < 300.0,
        format!(
            "HardNeg mean accuracy {:.3} >= 0.85 (in {:.2} behind {:.2} left {:.2} right {:.2}); trained in {secs:.0}s < 300s",
            report.average, a.in_, a.behind, a.left, a.right
        ),
    )
}

fn a4(sh: &mut Shared) -> Verdict {
    let hard = mean_accuracy(&sh.hard().0.clone(), sh.benchmarks());
    let (random, _) = sh.train(NegativeMode::Random);
    let random = mean_accuracy(&random, sh.benchmarks());
    let utterances: Vec<String> = sh.dataset().segments().iter().map(|s| s.utterance.clone()).collect();
    let untrained: Vec<f64> = (0..10)
        .map(|s| {
            let m = DetectorModel::for_corpus(&utterances, &mut rng::indexed(SEED, "a4.untrained", s)).unwrap();
            mean_accuracy(&m, sh.benchmarks())
        })
        .collect();
    let in_band = untrained.iter().all(|a| (0.35..=0.65).contains(a));
    let gap = hard - random;
    let (lo, hi) = untrained.iter().fold((1.0f64, 0.0f64), |(l, h), &a| (l.min(a), h.max(a)));
    verdict(
        gap >= 0.10 && in_band,
        format!("HardNeg {hard:.3} - RandomNeg {random:.3} = {gap:.3} >= 0.10; untrained x10 in [{lo:.3}, {hi:.3}] within [0.35, 0.65]"),
    )
}

fn a5(sh: &mut Shared) -> Verdict {
    let model = sh.hard().0.clone();
    let mut correct = 0;
    let mut total = 0;
    for b in sh.benchmarks() {
        for it in &b.items {
            let (fs, fo) = it.features().unwrap();
            correct += (model.binary_reward(&it.utterance, &fs, &fo).unwrap() == it.label) as usize;
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    verdict(acc >= 0.80, format!("binary reward accuracy {acc:.3} >= 0.80 on {total} benchmark scenes"))
}

fn a6(sh: &mut Shared) -> Verdict {
    let model = sh.hard().0.clone();
    let cfg = BenchmarkConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for r in Relation::ALL {
        let pool = gen_pool(r, &cfg, &mut rng::indexed(SEED, "pool", r.index() as u64)).unwrap();
        let p = rank_pool(&model, &pool.utterance, &pool.items).unwrap().precision_at_5;
        pass &= p >= 0.8;
        parts.push(format!("{} {p:.1}", r.short_name()));
    }
    verdict(pass, format!("precision@5 >= 0.8 on {}-scene pools: {}", cfg.pool_size, parts.join(", ")))
}

/// A held subject, a reference object for `relation`, and one or two distractors.
fn goal_scene(relation: Relation, i: usize, r: &mut impl Rng) -> (Scene, String) {
    let lib: Vec<_> = world::default_library().into_iter().filter(|c| c.seen).collect();
    let subjects: Vec<_> = lib.iter().filter(|c| world::is_subject_category(c)).collect();
    let refs: Vec<_> =
        lib.iter().filter(|c| !world::is_subject_category(c) && (relation != Relation::In || c.container)).collect();
    let s = *subjects.choose(r).unwrap();
    let o = *refs.choose(r).unwrap();
    let object = o.instantiate(0, r.random_range(15.0..45.0), r.random_range(15.0..45.0), r);
    let subject = s.instantiate(1, r.random_range(5.0..55.0), r.random_range(5.0..55.0), r);
    let mut scene = Scene { objects: vec![object, subject], held: Some(1) };
    let others: Vec<_> = lib.iter().filter(|c| c.name != s.name && c.name != o.name).collect();
    for id in 2..2 + r.random_range(1..=2u32) {
        let spec = *others.choose(r).unwrap();
        for _ in 0..200 {
            let d = spec.instantiate(id, r.random_range(4.0..56.0), r.random_range(4.0..56.0), r);
            if scene.placement_is_plausible(d.cx, d.cy, d.w, d.h, &[]) {
                scene.objects.push(d);
                break;
            }
        }
    }
    let utterance = render(TEMPLATES[i % TEMPLATES.len()], &s.name, relation_phrases(relation)[0], &o.name);
    (scene, utterance)
}

fn a7(sh: &mut Shared) -> Verdict {
    let model = sh.hard().0.clone();
    let cfg = SynthesisConfig { samples: 256, seed: SEED, ..Default::default() };
    let mut parts = Vec::new();
    let mut pass = true;
    for rel in Relation::ALL {
        let mut r = rng::indexed(SEED, "a7", rel.index() as u64);
        let mut ok = 0;
        for i in 0..200 {
            let (scene, utterance) = goal_scene(rel, i, &mut r);
            let goal = synthesize_goal_with(&model, &utterance, &scene, &cfg, &mut r).unwrap();
            let placed = ObjectInstance { cx: goal.cx, cy: goal.cy, ..scene.objects[1].clone() };
            ok += relation_holds(&placed, &scene.objects[0], rel) as usize;
        }
        let frac = ok as f64 / 200.0;
        pass &= frac >= 0.90;
        parts.push(format!("{} {frac:.3}", rel.short_name()));
    }
    verdict(pass, format!("goals satisfying the predicate >= 0.90 (M=256, 200 per relation): {}", parts.join(", ")))
}

fn a8(sh: &mut Shared) -> Verdict {
    let detector = sh.hard().0.clone();
    let (gt_seen, gt_unseen, gt_time) = sh.oracle_policy();
    let (_, d_seen, d_unseen, d_time) = policy_run(RewardSource::Detector, Variant::Object, Some(&detector), None);
    let budget = Some((EXTENDED_EPISODES, EXTENDED_BATCH));
    let (_, _, rgb_unseen, rgb_time) = policy_run(RewardSource::Oracle, Variant::Raster, None, budget);
    let (_, _, obj_unseen, _) = policy_run(RewardSource::Oracle, Variant::Object, None, budget);
    let limit = 1800.0;
    let checks = [
        gt_seen >= 0.90,
        gt_unseen >= 0.60,
        d_seen >= 0.70,
        d_seen <= gt_seen,
        rgb_unseen <= obj_unseen - 0.10,
        gt_time.as_secs_f64() < limit && d_time.as_secs_f64() < limit && rgb_time.as_secs_f64() < limit,
    ];
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "R_gt seen {gt_seen:.3} >= 0.90, unseen {gt_unseen:.3} >= 0.60 ({:.0}s); R_d seen {d_seen:.3} in [0.70, {gt_seen:.3}], unseen {d_unseen:.3} ({:.0}s); extended {EXTENDED_EPISODES} ep/batch {EXTENDED_BATCH}: raster unseen {rgb_unseen:.3} <= object {obj_unseen:.3} - 0.10 ({:.0}s)",
            gt_time.as_secs_f64(),
            d_time.as_secs_f64(),
            rgb_time.as_secs_f64()
        ),
    )
}

fn a9(sh: &mut Shared) -> Verdict {
    let (shaped_seen, _, _) = sh.oracle_policy();
    let (_, binary_seen, _, took) = policy_run(RewardSource::BinaryOnly, Variant::Object, None, None);
    verdict(
        binary_seen < 0.30 && shaped_seen >= 0.80,
        format!(
            "T=5 binary-only seen success {binary_seen:.3} < 0.30 ({:.0}s); shaped {shaped_seen:.3} >= 0.80",
            took.as_secs_f64()
        ),
    )
}

/// Every artifact a pipeline stage writes, as bytes.
fn pipeline_bytes(exec: Execution) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let gen = GeneratorConfig { n_videos: 1, tasks_per_video: (14, 14), seed: 3, ..Default::default() };
    let dataset = generate_dataset(&gen).unwrap();
    let path = dir.path().join("demos.jsonl");
    save_dataset(&path, &dataset).unwrap();
    let mut out = vec![("dataset".to_owned(), std::fs::read(&path).unwrap())];

    let train = TrainConfig { epochs: 3, threshold_epochs: 3, seed: 3, ..Default::default() };
    let model = ngd_core::detector::fit(&dataset, &train).unwrap().model;
    let ckpt = |m: Model| checkpoint::to_bytes(&m, "a10").unwrap();
    out.push(("detector checkpoint".into(), ckpt(Model::Detector(model.clone()))));
    let benches = gen_benchmarks(3, &BenchmarkConfig { n: 40, ..Default::default() }).unwrap();
    let report = eval_classification(&model, &benches, exec).unwrap();
    out.push(("detector report".into(), serde_json::to_vec_pretty(&report).unwrap()));

    let env = EpisodeConfig::default();
    for (variant, episodes) in [(Variant::Object, 120), (Variant::Raster, 30)] {
        let cfg = DqnConfig { episodes, batch: 8, warmup: 40, eval_every: episodes / 2, eval_episodes: 10, seed: 3, ..Default::default() };
        let trained = train_dqn(&env, &cfg, RewardSource::Detector, variant, Some(&model), exec).unwrap();
        out.push((format!("{} curve", variant.name()), curve_to_csv(&trained.curve).into_bytes()));
        let seen = evaluate_policy(&trained.net, &env, 20, ObjectSet::Seen, 3, exec).unwrap();
        out.push((format!("{} eval", variant.name()), seen.to_le_bytes().to_vec()));
        out.push((format!("{} checkpoint", variant.name()), ckpt(Model::Policy(trained.net))));
    }
    out
}

fn a10(_: &mut Shared) -> Verdict {
    let first = pipeline_bytes(Execution::Parallel);
    let second = pipeline_bytes(Execution::Parallel);
    let sequential = pipeline_bytes(Execution::Sequential);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .zip(&sequential)
        .filter(|((a, b), c)| a.1 != b.1 || a.1 != c.1)
        .map(|((a, _), _)| a.0.as_str())
        .collect();
    verdict(
        differing.is_empty(),
        format!(
            "{} artifacts identical across re-runs and sequential execution{}",
            first.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) }
        ),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("NGD_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').map(|p| p.trim().to_ascii_uppercase()).filter(|p| !p.is_empty()).collect());
    let criteria: [(&str, &str, fn(&mut Shared) -> Verdict); 10] = [
        ("A1", "gradient integrity", a1),
        ("A2", "predicate metamorphic suite", a2),
        ("A3", "hard-negative detector", a3),
        ("A4", "ablation ordering", a4),
        ("A5", "threshold calibration", a5),
        ("A6", "retrieval", a6),
        ("A7", "goal synthesis", a7),
        ("A8", "policy orderings", a8),
        ("A9", "shaping necessity", a9),
        ("A10", "determinism", a10),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            println!("{id:<4} SKIP {name}");
            continue;
        }
        let t = Instant::now();
        let v = run(&mut shared);
        failed += !v.pass as usize;
        println!(
            "{id:<4} {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
