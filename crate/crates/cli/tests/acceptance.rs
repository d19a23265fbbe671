//! Acceptance gate: one PASS/FAIL line per criterion, toy backends only.
//! Runs without the libtest harness so the lines always reach the terminal.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use forge_core::backends::{DifferentiableGenerator, ToyDiffStack, ToyGlyphWorld, ToyInstructionLlm};
use forge_core::builder::{build_synthetic_dataset, BuilderConfig, ImageSink};
use forge_core::classifier::gff::{branch_backward, branch_forward, gff_forward_batch, norm_backward};
use forge_core::classifier::tensor::FeatureMap;
use forge_core::classifier::{
    aggregate_regions, binary_probability, train_classifier, ClassifierConfig, ClassifierState, GffParams, NormMode,
    Strategy, TrainConfig,
};
use forge_core::data::{DatasetManifest, ImageRef, LabelSpace, SampleRecord, Split};
use forge_core::filter::{grouping_softmax, qualify, Discriminator, QualificationPolicy};
use forge_core::image::Image;
use forge_core::metrics::{average_precision, mean_average_precision, topk_prf, EvalMode};
use forge_core::pipeline::{load_metrics, run_pipeline, RunConfig, RunOptions, METRICS};
use forge_core::prompts::build_prompt_store;
use forge_core::seed;
use forge_core::tuner::{asl_loss, finetune, qualified_rate, AslParams, TunerConfig};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

// Criterion 1: grouping softmax against a brute-force reference.

const GS_INSTANCES: usize = 1000;
const GS_TOL: f64 = 1e-12;

fn grouping_reference(u: &[f64], pos: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let negs: Vec<usize> = (0..u.len()).filter(|i| !pos.contains(i)).collect();
    let mut v_p = Vec::new();
    let mut v_n = vec![0.0; negs.len()];
    for &p in pos {
        let denom = u[p].exp() + negs.iter().map(|&n| u[n].exp()).sum::<f64>();
        v_p.push(u[p].exp() / denom);
        for (k, &n) in negs.iter().enumerate() {
            v_n[k] += u[n].exp() / denom / pos.len() as f64;
        }
    }
    (v_p, v_n)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_instance(rng: &mut seed::Rng) -> (Vec<f64>, Vec<usize>) {
    let m = rng.random_range(2..=20);
    let j = rng.random_range(1..=5.min(m - 1));
    let u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    (u, idx[..j].to_vec())
}

fn a1_grouping_softmax() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(1);
    let mut worst = 0.0f64;
    let mut independence = 0;
    for _ in 0..GS_INSTANCES {
        let (u, pos) = random_instance(&mut rng);
        let (v_p, v_n) = grouping_softmax(&u, &pos).map_err(|e| e.to_string())?;
        let (r_p, r_n) = grouping_reference(&u, &pos);
        worst = worst.max(max_diff(&v_p, &r_p)).max(max_diff(&v_n, &r_n));

        let c = rng.random_range(-20.0..20.0);
        let shifted: Vec<f64> = u.iter().map(|x| x + c).collect();
        let (s_p, s_n) = grouping_softmax(&shifted, &pos).unwrap();
        ensure(
            max_diff(&v_p, &s_p) <= GS_TOL && max_diff(&v_n, &s_n) <= GS_TOL,
            format!("shift by {c} moved outputs"),
        )?;

        if pos.len() >= 2 {
            let mut moved = u.clone();
            moved[pos[1]] += rng.random_range(-2.0..2.0);
            let (m_p, _) = grouping_softmax(&moved, &pos).unwrap();
            ensure(m_p[0] == v_p[0], "a positive depended on another positive's score")?;
            independence += 1;
        }
    }
    ensure(worst <= GS_TOL, format!("max abs diff {worst:e} > {GS_TOL:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "{GS_INSTANCES} instances, max abs diff {worst:.1e}, {independence} independence checks, {:.2?}",
        start.elapsed()
    ))
}

// Criterion 2: a plain softmax suppresses co-occurring positives.

fn a2_suppression() -> Outcome {
    let mut rng = seed::rng(2);
    let trials = 1000;
    let mut wins = 0;
    for _ in 0..trials {
        let m = rng.random_range(3..=20);
        let top = rng.random_range(0.0..1.0);
        let mut u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..top)).collect();
        u[0] = top;
        u[1] = top;
        let z: f64 = u.iter().map(|x| x.exp()).sum();
        let plain = u[0].exp() / z;
        let (v_p, _) = grouping_softmax(&u, &[0, 1]).unwrap();
        if plain < v_p[0] && plain < v_p[1] {
            wins += 1;
        }
    }
    ensure(wins == trials, format!("{wins}/{trials}"))?;
    Ok(format!("plain < grouped in {wins}/{trials} trials"))
}

// Criterion 3: ASL value, gradient and a falling tuner loss.

const ASL_HAND_TOL: f64 = 1e-9;
const ASL_GRAD_REL: f64 = 1e-4;

fn a3_asl() -> Outcome {
    let sym = AslParams {
        gamma_plus: 0.0,
        gamma_minus: 0.0,
        margin: 0.0,
    };
    let v = asl_loss(&[0.5], &[0.5], &sym).unwrap().loss;
    ensure((v - 2.0 * 2f64.ln()).abs() <= ASL_HAND_TOL, format!("symmetric loss {v}"))?;

    let mut rng = seed::rng(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let params = AslParams {
            gamma_plus: rng.random_range(0.0..2.0),
            gamma_minus: rng.random_range(0.0..5.0),
            margin: rng.random_range(0.0..0.05),
        };
        let pos: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        let neg: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.95)).collect();
        let out = asl_loss(&pos, &neg, &params).unwrap();
        let h = 1e-6;
        for i in 0..pos.len() + neg.len() {
            let at = |d: f64| {
                let (mut p, mut n) = (pos.clone(), neg.clone());
                if i < pos.len() {
                    p[i] += d;
                } else {
                    n[i - pos.len()] += d;
                }
                asl_loss(&p, &n, &params).unwrap().loss
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let analytic = if i < pos.len() { out.grad_pos[i] } else { out.grad_neg[i - pos.len()] };
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(1e-6));
        }
    }
    ensure(worst < ASL_GRAD_REL, format!("gradient rel err {worst:e}"))?;

    let setup = TunerSetup::new();
    let state = finetune(&setup.stack, setup.train.records(), &setup.tuner_config(200), None).unwrap();
    // Smooth over blocks of 20 steps; every block must improve on the last.
    let blocks: Vec<f64> = state.losses.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let falling = blocks.windows(2).all(|w| w[1] < w[0]);
    ensure(falling, format!("block means {blocks:.4?}"))?;
    Ok(format!(
        "2ln2 err {:.1e}, grad rel err {worst:.1e}, block means {:.4} -> {:.4}",
        (v - 2.0 * 2f64.ln()).abs(),
        blocks[0],
        blocks[blocks.len() - 1]
    ))
}

struct TunerSetup {
    ls: LabelSpace,
    world: ToyGlyphWorld,
    stack: ToyDiffStack,
    train: forge_core::prompts::PromptStore,
    held_out: forge_core::prompts::PromptStore,
}

impl TunerSetup {
    fn new() -> Self {
        let ls = LabelSpace::new(&["person", "car", "dog"], &["cat", "bus", "bird"]).unwrap();
        let world = ToyGlyphWorld::new(ls.names(), 64).unwrap();
        let stack = ToyDiffStack::new(world.clone(), ls.unseen().to_vec(), 16, 3).unwrap();
        let train = build_prompt_store(Some(&ToyInstructionLlm::new(1)), &ls, 2, 5).unwrap();
        let held_out = build_prompt_store(Some(&ToyInstructionLlm::new(99)), &ls, 2, 20).unwrap();
        TunerSetup {
            ls,
            world,
            stack,
            train,
            held_out,
        }
    }

    fn tuner_config(&self, steps: usize) -> TunerConfig {
        TunerConfig {
            steps,
            learning_rate: 0.05,
            ..TunerConfig::default()
        }
    }
}

// Criterion 4: frozen parameters stay frozen.

fn toy_manifest(ls: &LabelSpace, n: usize) -> DatasetManifest {
    let world = ToyGlyphWorld::new(ls.names(), 64).unwrap();
    let records = (0..n)
        .map(|i| {
            let seen = ls.seen();
            let cats: BTreeSet<usize> = [seen[i % seen.len()], seen[(i / 2 + 1) % seen.len()]].into_iter().collect();
            let cats: Vec<usize> = cats.into_iter().collect();
            SampleRecord::real(
                ImageRef::Memory(Arc::new(world.render(&cats, i as u64))),
                cats.into_iter().collect(),
            )
        })
        .collect();
    DatasetManifest::from_records(ls.clone(), Split::Train, records).unwrap()
}

fn a4_frozen_contracts() -> Outcome {
    let setup = TunerSetup::new();
    let frozen = setup.stack.frozen_fingerprint();
    let encoder = setup.stack.text_encoder().fingerprint();
    let state = finetune(&setup.stack, setup.train.records(), &setup.tuner_config(50), None).unwrap();
    let mut tuned = setup.stack.clone();
    tuned.set_encoder(state.text_encoder.clone()).unwrap();
    ensure(tuned.frozen_fingerprint() == frozen, "tuning changed a frozen parameter")?;
    ensure(state.frozen_fingerprint == frozen, "tuner state records another frozen fingerprint")?;
    ensure(tuned.text_encoder().fingerprint() != encoder, "text encoder did not move")?;

    let ls = LabelSpace::new(&["person", "car", "tree"], &["cat"]).unwrap();
    let manifest = toy_manifest(&ls, 16);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let classifier = ClassifierConfig {
        context_len: 2,
        ..ClassifierConfig::default()
    };
    let mut lines = Vec::new();
    for strategy in Strategy::ALL {
        let before = ClassifierState::new(&ls, classifier.clone(), strategy, 4).unwrap();
        let after = train_classifier(&manifest, before.clone(), &cfg, None).map_err(|e| e.to_string())?;
        let trainable = strategy.trainable();
        let mut moved = Vec::new();
        for (set, fp) in before.fingerprints() {
            let changed = after.fingerprint(set) != fp;
            ensure(
                changed == trainable.contains(&set),
                format!("{strategy}: {set:?} changed={changed}"),
            )?;
            if changed {
                moved.push(format!("{set:?}"));
            }
        }
        lines.push(format!("{strategy}={}", moved.join("+")));
    }
    Ok(format!("tuner frozen fingerprint unchanged after 50 steps; {}", lines.join(", ")))
}

// Criterion 5: the fusion branch is an identity at init, with sound gradients.

const ATTN_TOL: f64 = 1e-6;
const GFF_GRAD_REL: f64 = 1e-4;

fn random_map(c: usize, h: usize, w: usize, rng: &mut seed::Rng) -> FeatureMap {
    FeatureMap::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn a5_gff() -> Outcome {
    let ls = LabelSpace::new(&["person", "car", "dog"], &["cat", "bus"]).unwrap();
    let world = ToyGlyphWorld::new(ls.names(), 64).unwrap();
    let state = ClassifierState::new(&ls, ClassifierConfig::default(), Strategy::SyncPromptsGff, 9).unwrap();
    let images: Vec<Image> = (0..8).map(|i| world.render(&[i % 5, (i + 2) % 5], i as u64)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let with = state.predict_all(&refs).unwrap();
    let without = state.without_gff().predict_all(&refs).unwrap();
    let identical = with
        .iter()
        .flatten()
        .zip(without.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(identical, "fresh fusion branches changed the network output")?;

    let mut rng = seed::rng(5);
    let mut worst_sum = 0.0f64;
    for _ in 0..50 {
        let p = GffParams::init(6, 3, &mut rng).unwrap();
        let f = random_map(6, 4, 5, &mut rng);
        let (_, cache) = branch_forward(&f, &p).unwrap();
        for head in cache.attention.chunks(f.positions()) {
            worst_sum = worst_sum.max((head.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_sum <= ATTN_TOL, format!("attention sums off by {worst_sum:e}"))?;

    // Finite differences on a branch with a live normalization scale.
    let mut p = GffParams::init(3, 2, &mut rng).unwrap();
    p.norm_scale = vec![0.7, -0.4, 1.1];
    p.norm_shift = vec![0.1, 0.0, -0.2];
    let fs = vec![random_map(3, 3, 3, &mut rng), random_map(3, 3, 3, &mut rng)];
    let dys = vec![random_map(3, 3, 3, &mut rng), random_map(3, 3, 3, &mut rng)];
    let mut worst = 0.0f64;
    for mode in [NormMode::Train, NormMode::Eval] {
        let loss = |fs: &[FeatureMap], p: &GffParams| -> f64 {
            let (out, _, _) = gff_forward_batch(fs, p, mode).unwrap();
            out.iter()
                .zip(&dys)
                .flat_map(|(o, d)| o.data.iter().zip(&d.data).map(|(a, b)| a * b))
                .sum()
        };
        let (_, caches, norm) = gff_forward_batch(&fs, &p, mode).unwrap();
        let mut grads = p.zeros_like();
        let d_pre = norm_backward(&p, &norm, &dys, &mut grads);
        let d_in: Vec<FeatureMap> = fs
            .iter()
            .zip(&caches)
            .zip(&d_pre)
            .map(|((f, c), d)| branch_backward(f, &p, c, d, &mut grads))
            .collect();
        let h = 1e-6;
        let mut rel = |num: f64, ana: f64| worst = worst.max((num - ana).abs() / num.abs().max(1e-4));
        for i in 0..p.attn.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.attn[i] += h;
            b.attn[i] -= h;
            rel((loss(&fs, &a) - loss(&fs, &b)) / (2.0 * h), grads.attn[i]);
        }
        for i in 0..p.gate.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.gate[i] += h;
            b.gate[i] -= h;
            rel((loss(&fs, &a) - loss(&fs, &b)) / (2.0 * h), grads.gate[i]);
        }
        for i in 0..p.gate_bias.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.gate_bias[i] += h;
            b.gate_bias[i] -= h;
            rel((loss(&fs, &a) - loss(&fs, &b)) / (2.0 * h), grads.gate_bias[i]);
        }
        for i in 0..3 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.norm_scale[i] += h;
            b.norm_scale[i] -= h;
            rel((loss(&fs, &a) - loss(&fs, &b)) / (2.0 * h), grads.norm_scale[i]);
        }
        for img in 0..fs.len() {
            for i in 0..fs[img].data.len() {
                let (mut a, mut b) = (fs.clone(), fs.clone());
                a[img].data[i] += h;
                b[img].data[i] -= h;
                rel((loss(&a, &p) - loss(&b, &p)) / (2.0 * h), d_in[img].data[i]);
            }
        }
    }
    ensure(worst < GFF_GRAD_REL, format!("gff gradient rel err {worst:e}"))?;
    Ok(format!(
        "bitwise identity on 8 images, attention sum err {worst_sum:.1e}, grad rel err {worst:.1e}"
    ))
}

// Criterion 6: region aggregation bounds and the binary probability.

fn a6_heads() -> Outcome {
    let mut rng = seed::rng(6);
    for case in 0..1000 {
        let regions = rng.random_range(1..=25);
        let classes = rng.random_range(1..=6);
        let s_plus: Vec<Vec<f64>> = (0..regions)
            .map(|_| (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let s_minus: Vec<Vec<f64>> = (0..regions)
            .map(|_| (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (agg_p, agg_m) = aggregate_regions(&s_plus, &s_minus).unwrap();
        for c in 0..classes {
            for (s, agg) in [(&s_plus, agg_p[c]), (&s_minus, agg_m[c])] {
                let lo = s.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = s.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                ensure(
                    agg >= lo - 1e-12 && agg <= hi + 1e-12,
                    format!("case {case}: {agg} outside [{lo}, {hi}]"),
                )?;
            }
        }
    }
    let mut worst_half = 0.0f64;
    let mut worst_nine = 0.0f64;
    for _ in 0..200 {
        let s = rng.random_range(-1.0..1.0);
        let tau = rng.random_range(0.01..1.0);
        worst_half = worst_half.max((binary_probability(s, s, tau).unwrap() - 0.5).abs());
        let p = binary_probability(s + tau * 9f64.ln(), s, tau).unwrap();
        worst_nine = worst_nine.max((p - 0.9).abs());
    }
    ensure(worst_half <= 1e-12, format!("p at equal similarities off by {worst_half:e}"))?;
    ensure(worst_nine <= 1e-9, format!("p at tau*ln9 off by {worst_nine:e}"))?;
    Ok(format!(
        "1000 convexity cases, |p-0.5| {worst_half:.1e}, |p-0.9| {worst_nine:.1e}"
    ))
}

// Criterion 7: the builder terminates with exact counts and clean records.

const PIXEL_AGREEMENT: f64 = 0.99;

fn a7_builder() -> Outcome {
    let start = Instant::now();
    let ls = LabelSpace::new(&["person", "car", "dog", "tree", "house", "boat"], &["cat", "bus", "bird"]).unwrap();
    let world = ToyGlyphWorld::new(ls.names(), 64).unwrap().with_miss_rate(0.3).unwrap();
    let store = build_prompt_store(Some(&ToyInstructionLlm::new(7)), &ls, 2, 3).unwrap();
    let policy = QualificationPolicy::strict(0.5);
    let k = 5;
    let config = BuilderConfig {
        k,
        objects_per_image: 2,
        resolution: 64,
        batch_size: 16,
        seed: 7,
        ..BuilderConfig::default()
    };
    let (manifest, ledger) = build_synthetic_dataset(&world, &world, &store, &ls, &policy, &config, &ImageSink::Memory)
        .map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    ensure(
        ledger.per_category_counts.values().all(|&n| n == k),
        format!("ledger counts {:?}", ledger.per_category_counts),
    )?;
    let mut recount: BTreeMap<&str, usize> = BTreeMap::new();
    for c in ledger.credited.iter().flatten() {
        *recount.entry(c).or_default() += 1;
    }
    ensure(recount.values().all(|&n| n == k) && recount.len() == 3, format!("credited {recount:?}"))?;

    let unseen = ls.unseen_names();
    let disc = Discriminator::new(&world, unseen.clone()).unwrap();
    let mut refiltered = 0;
    let mut agree = 0;
    for r in &manifest.records {
        let image = manifest.load_image(r).unwrap();
        let local: Vec<usize> = r
            .positives
            .iter()
            .map(|&i| unseen.iter().position(|u| u == ls.name(i)).unwrap())
            .collect();
        if qualify(&disc.score(&image, &local).unwrap(), &policy).accepted {
            refiltered += 1;
        }
        if r.positives.is_subset(&world.detect(&image)) {
            agree += 1;
        }
    }
    let n = manifest.len();
    ensure(refiltered == n, format!("re-filter kept {refiltered}/{n}"))?;
    let agreement = agree as f64 / n as f64;
    ensure(agreement >= PIXEL_AGREEMENT, format!("pixel agreement {agreement:.3}"))?;
    Ok(format!(
        "{} attempts, {n} records, counts {:?}, re-filter {refiltered}/{n}, pixel agreement {agreement:.3}, {:.2?}",
        ledger.attempts,
        ledger.per_category_counts.values().collect::<Vec<_>>(),
        start.elapsed()
    ))
}

// Criterion 8: tuning raises the qualified rate on held-out prompts.

const QR_SAMPLES: usize = 600;
const QR_MIN_GAIN: f64 = 0.10;

fn a8_qualified_rate() -> Outcome {
    let setup = TunerSetup::new();
    let disc = Discriminator::new(&setup.world, setup.ls.unseen_names()).unwrap();
    let policy = QualificationPolicy::strict(0.5);
    let held = setup.held_out.records();
    let before = qualified_rate(&setup.stack, &disc, &policy, held, QR_SAMPLES, 64, 7).unwrap();
    let state = finetune(&setup.stack, setup.train.records(), &setup.tuner_config(200), None).unwrap();
    let mut tuned = setup.stack.clone();
    tuned.set_encoder(state.text_encoder).unwrap();
    let after = qualified_rate(&tuned, &disc, &policy, held, QR_SAMPLES, 64, 7).unwrap();
    let gain = after - before;
    ensure(gain >= QR_MIN_GAIN, format!("before {before:.3}, after {after:.3}"))?;
    Ok(format!(
        "{QR_SAMPLES} held-out generations: {before:.3} -> {after:.3} (+{:.1} points)",
        100.0 * gain
    ))
}

// Criterion 9: synthetic data lifts unseen-class mAP.

const ZSL_SEEDS: u64 = 5;
const ZSL_MIN_LIFT: f64 = 0.20;

fn zsl_config(seed: u64, synthetic: bool) -> RunConfig {
    let mut c = RunConfig {
        toy: true,
        ..RunConfig::default()
    };
    c.params.seed = seed;
    c.params.positives_per_category_k = 20;
    c.generate.enabled = synthetic;
    c.finetune.enabled = false;
    c.finetune.eval_samples = 0;
    c.train.epochs = 30;
    c.train.learning_rate = 0.01;
    c.eval.modes = vec![EvalMode::Zsl];
    c
}

fn a9_synthetic_lift() -> Outcome {
    let start = Instant::now();
    let runs: Vec<(u64, bool)> = (0..ZSL_SEEDS).flat_map(|s| [(s, false), (s, true)]).collect();
    let maps: Vec<Result<f64, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|&(s, synth)| {
                scope.spawn(move || {
                    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
                    run_pipeline(&zsl_config(s, synth), dir.path(), RunOptions::default()).map_err(|e| e.to_string())?;
                    let m = load_metrics(&dir.path().join(METRICS)).map_err(|e| e.to_string())?;
                    Ok(m[&EvalMode::Zsl].map)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let maps: Vec<f64> = maps.into_iter().collect::<Result<_, _>>()?;
    let lifts: Vec<f64> = maps.chunks(2).map(|p| p[1] - p[0]).collect();
    let mean = lifts.iter().sum::<f64>() / lifts.len() as f64;
    within(start.elapsed(), Duration::from_secs(300))?;
    ensure(mean >= ZSL_MIN_LIFT, format!("mean lift {mean:.3}, per seed {lifts:.3?}"))?;
    let base = maps.iter().step_by(2).sum::<f64>() / ZSL_SEEDS as f64;
    Ok(format!(
        "ZSL mAP {base:.3} -> {:.3}, mean lift {:.1} points over {ZSL_SEEDS} seeds (per seed {lifts:.3?}), {:.1?}",
        base + mean,
        100.0 * mean,
        start.elapsed()
    ))
}

// Criterion 10: metric oracles.

/// Expected AP of a uniformly random ranking of `n` items with `p` positives.
fn random_ranking_ap(n: usize, p: usize) -> f64 {
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let n = n as f64;
    h / n + (p as f64 - 1.0) / (n * (n - 1.0)) * (n - h)
}

fn a10_metrics() -> Outcome {
    // Three images, four classes, K = 2: one hit per image.
    let scores = vec![
        vec![0.9, 0.8, 0.1, 0.2],
        vec![0.1, 0.7, 0.6, 0.3],
        vec![0.5, 0.2, 0.4, 0.9],
    ];
    let truth = vec![
        vec![true, false, true, false],
        vec![false, true, false, false],
        vec![false, false, true, true],
    ];
    let m = topk_prf(&scores, &truth, 2).unwrap();
    ensure(m.precision == 3.0 / 6.0 && m.recall == 3.0 / 5.0, format!("{m:?}"))?;
    ensure((m.f1 - 6.0 / 11.0).abs() < 1e-15, format!("f1 {}", m.f1))?;

    let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
    ensure((ap - 5.0 / 6.0).abs() <= 1e-12, format!("AP {ap}"))?;

    // Random scores: each class has exactly `pos` positives among `n` images.
    let (n, q, pos, trials) = (400, 4, 100, 200);
    let mut rng = seed::rng(10);
    let maps: Vec<f64> = (0..trials)
        .map(|_| {
            let s: Vec<Vec<f64>> = (0..n).map(|_| (0..q).map(|_| rng.random::<f64>()).collect()).collect();
            let mut t = vec![vec![false; q]; n];
            for c in 0..q {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                for &i in &idx[..pos] {
                    t[i][c] = true;
                }
            }
            mean_average_precision(&s, &t, &(0..q).collect::<Vec<_>>()).unwrap().map
        })
        .collect();
    let mean = maps.iter().sum::<f64>() / trials as f64;
    let sd = (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
    let se = sd / (trials as f64).sqrt();
    let expected = random_ranking_ap(n, pos);
    let prevalence = pos as f64 / n as f64;
    ensure(
        (mean - expected).abs() <= 3.0 * se,
        format!("random mAP {mean:.4} vs expected {expected:.4} (3 se = {:.4})", 3.0 * se),
    )?;
    Ok(format!(
        "P=1/2 R=3/5 exact, AP=5/6, random mAP {mean:.4} vs prevalence {prevalence} (finite-n expectation {expected:.4}, 3 se {:.4})",
        3.0 * se
    ))
}

// Criterion 11: two CLI runs agree byte for byte.

const COMPARED: &[&str] = &[
    "real_train.jsonl",
    "test.jsonl",
    "prompts.jsonl",
    "synthetic.jsonl",
    "train.jsonl",
    "ledger.json",
    "finetune/summary.json",
    "finetune/tuner_state.json",
    "checkpoints/classifier.json",
    "metrics.json",
];

fn without_timings(run_json: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(run_json).unwrap();
    for s in v["stages"].as_array_mut().unwrap() {
        s.as_object_mut().unwrap().remove("wall_clock_s");
    }
    v
}

fn forge_run(config: &Path, run_dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(["--config"])
        .arg(config)
        .arg("--run-dir")
        .arg(run_dir)
        .arg("run")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("forge run failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn a11_determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.yaml");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    forge_run(&config, a.path())?;
    forge_run(&config, b.path())?;
    for f in COMPARED {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, format!("{f} differs"))?;
    }
    let ra = std::fs::read(a.path().join("run.json")).unwrap();
    let rb = std::fs::read(b.path().join("run.json")).unwrap();
    ensure(without_timings(&ra) == without_timings(&rb), "run.json differs beyond timings")?;
    Ok(format!(
        "{} artifacts byte-identical; run.json identical apart from wall-clock fields",
        COMPARED.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("grouping softmax matches reference", a1_grouping_softmax),
        ("plain softmax suppresses positives", a2_suppression),
        ("asymmetric loss value, gradient, trend", a3_asl),
        ("frozen-parameter contracts", a4_frozen_contracts),
        ("fusion branch identity and gradients", a5_gff),
        ("region aggregation and probability", a6_heads),
        ("builder termination and exact counts", a7_builder),
        ("tuning raises qualified rate", a8_qualified_rate),
        ("synthetic data lifts unseen mAP", a9_synthetic_lift),
        ("metric oracles", a10_metrics),
        ("determinism of forge run", a11_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("A{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| f == &id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id:<4} PASS {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id:<4} FAIL {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
