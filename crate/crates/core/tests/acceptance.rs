//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Runs as a plain binary (`harness = false`).

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emotalk_core::data::corpus::{DatasetSpec, SplitDataset};
use emotalk_core::data::{savgol_smooth, BlendshapeSequence, CrossPair, Dataset, FeatureSequence, PairSampler};
use emotalk_core::losses::{classification_loss, total_loss, velocity_loss, LossWeights};
use emotalk_core::model::{FrontendCache, Model, ModelConfig};
use emotalk_core::rig::{eve, lip_avg_error, lve, make_synthetic_rig, BlendMode, VertexSequence, MM_PER_M};
use emotalk_core::training::{evaluate, run, EvalReport, RunOptions, TrainConfig, Trainer};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pair_for(data: &Dataset, seed: u64) -> CrossPair {
    let sampler = PairSampler::new(data).unwrap();
    sampler.sample(data, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_spec(duration_s: f64, clips_per_cell: usize) -> DatasetSpec {
    let mut spec = DatasetSpec {
        clips_per_cell,
        heldout_per_cell: 0,
        duration_s,
        seed: 7,
        ..DatasetSpec::default()
    };
    spec.ranges.n_contents = 2;
    spec.ranges.n_emotions = 2;
    spec.ranges.n_levels = 1;
    spec.ranges.n_speakers = 1;
    spec
}

fn gradient_oracle() -> Outcome {
    let data = small_spec(4.0 / 30.0, 1).generate().unwrap();
    let pair = pair_for(&data.train, 0);
    let t = pair.gt_c1e1.frames();
    if t > 4 {
        return Err(format!("T = {t} > 4"));
    }
    let mut model = Model::new(&ModelConfig::tiny(), 3).unwrap();
    let weights = LossWeights::default();
    let mut cache = FrontendCache::new();
    let pairs = std::slice::from_ref(&pair);
    let (_, grads) = model.loss_and_gradients(pairs, &weights, &mut cache).unwrap();
    let h = 1e-5;
    let (mut worst, mut worst_name, mut n) = (0.0f64, String::new(), 0usize);
    let ids: Vec<_> = model.store.trainable().collect();
    for id in ids {
        let dim = model.store.get(id).dim();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(dim));
        for idx in ndarray::indices(dim) {
            let x0 = model.store.get(id)[idx];
            model.store.get_mut(id)[idx] = x0 + h;
            let lp = model.loss(pairs, &weights, &mut cache).unwrap().total;
            model.store.get_mut(id)[idx] = x0 - h;
            let lm = model.loss(pairs, &weights, &mut cache).unwrap().total;
            model.store.get_mut(id)[idx] = x0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = model.store.entry(id).name.clone();
            }
            n += 1;
        }
    }
    check(
        worst < 1e-4,
        format!("T={t}, {n} trainable values, max relative error {worst:.2e} ({worst_name})"),
    )
}

fn overfit_one_pair() -> Outcome {
    let data = DatasetSpec::default().generate().unwrap();
    let pair = pair_for(&data.train, 0);
    let mut mc = ModelConfig::desk();
    mc.encoder.n_emotions = 3;
    let tc = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&mc, &tc).unwrap();
    let pairs = std::slice::from_ref(&pair);
    let first = trainer.train_step(pairs).unwrap().loss.total;
    for _ in 1..500 {
        trainer.train_step(pairs).unwrap();
    }
    let last = trainer
        .model
        .loss(pairs, &tc.weights, &mut FrontendCache::new())
        .unwrap()
        .total;
    let reduction = 1.0 - last / first;
    check(
        reduction >= 0.9,
        format!("loss {first:.4} -> {last:.5}, reduction {:.1}%", 100.0 * reduction),
    )
}

struct DeskRun {
    trained: EvalReport,
    untrained: EvalReport,
    m: usize,
    steps: u64,
    silhouette: f64,
    content_closer: (usize, usize),
}

fn mean_rows(a: &Array2<f64>) -> Vec<f64> {
    a.mean_axis(ndarray::Axis(0)).unwrap().to_vec()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sum[labels[j]] += dist(p, q);
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        let a = sum[own] / cnt[own].max(1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}

fn desk_run() -> DeskRun {
    let mut spec = DatasetSpec {
        clips_per_cell: 2,
        heldout_per_cell: 1,
        ..DatasetSpec::default()
    };
    spec.ranges.n_contents = 3;
    spec.ranges.n_emotions = 3;
    spec.ranges.n_speakers = 2;
    spec.ranges.n_levels = 1;
    let SplitDataset { train, test } = spec.generate().unwrap();
    let mut mc = ModelConfig::desk();
    mc.encoder.n_emotions = 3;
    let tc = TrainConfig {
        seed: 1,
        max_steps: Some(1000),
        ..TrainConfig::default()
    };
    let rig = make_synthetic_rig(1000, 0).unwrap();
    let untrained = evaluate(&Model::new(&mc, tc.seed).unwrap(), &test, &rig, BlendMode::Delta).unwrap();
    let mut trainer = Trainer::new(&mc, &tc).unwrap();
    let sampler = PairSampler::new(&train).unwrap();
    let steps = tc.total_steps(train.len());
    while trainer.step < steps {
        trainer.step_on(&train, &sampler).unwrap();
    }
    let model = &trainer.model;
    let trained = evaluate(model, &test, &rig, BlendMode::Delta).unwrap();

    let mut cache = FrontendCache::new();
    let feats: Vec<_> = test
        .samples
        .iter()
        .map(|s| model.clip_features(&s.clip, s.target.frames(), &mut cache).unwrap())
        .collect();
    let pooled: Vec<_> = feats.iter().map(|(_, e)| mean_rows(e)).collect();
    let labels: Vec<_> = test.samples.iter().map(|s| s.clip.labels.emotion_id).collect();
    let mut closer = (0, 0);
    for (i, a) in test.samples.iter().enumerate() {
        for (j, b) in test.samples.iter().enumerate() {
            let (la, lb) = (a.clip.labels, b.clip.labels);
            if j <= i
                || la.speaker_id != lb.speaker_id
                || la.content_id != lb.content_id
                || la.emotion_id == lb.emotion_id
            {
                continue;
            }
            for (k, c) in test.samples.iter().enumerate() {
                let lc = c.clip.labels;
                if lc.speaker_id == la.speaker_id && lc.emotion_id == la.emotion_id && lc.content_id != la.content_id {
                    closer.1 += 1;
                    if cosine(&feats[i].0, &feats[j].0) > cosine(&feats[i].0, &feats[k].0) {
                        closer.0 += 1;
                    }
                }
            }
        }
    }
    DeskRun {
        trained,
        untrained,
        m: mc.encoder.n_emotions,
        steps,
        silhouette: silhouette(&pooled, &labels),
        content_closer: closer,
    }
}

fn disentanglement(r: &DeskRun) -> Outcome {
    let cross = r.trained.cross_error.unwrap_or(f64::NAN);
    let shuffled = r.trained.shuffled_emotion_error.unwrap_or(f64::NAN);
    let acc = r.trained.emotion_accuracy;
    let bar = 2.0 / r.m as f64;
    check(
        cross < shuffled && acc > bar,
        format!(
            "{} steps; cross {cross:.4} vs shuffled-emotion {shuffled:.4}; accuracy {acc:.3} vs {bar:.3} \
             (silhouette {:.3}, content closer in {}/{} triples)",
            r.steps, r.silhouette, r.content_closer.0, r.content_closer.1
        ),
    )
}

fn metric_gap(r: &DeskRun) -> Outcome {
    let (t, u) = (&r.trained, &r.untrained);
    check(
        t.lve_mm < u.lve_mm && t.eve_mm < u.eve_mm && t.lip_avg_mm < u.lip_avg_mm,
        format!(
            "LVE {:.3} vs {:.3} mm, EVE {:.3} vs {:.3} mm, lip-avg {:.3} vs {:.3} mm",
            t.lve_mm, u.lve_mm, t.eve_mm, u.eve_mm, t.lip_avg_mm, u.lip_avg_mm
        ),
    )
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn rig_exactness() -> Outcome {
    let rig = make_synthetic_rig(500, 4).unwrap();
    let mut one_hot = 0.0f64;
    for i in 0..52 {
        let mut beta = [0.0; 52];
        beta[i] = 1.0;
        one_hot = one_hot.max(max_abs_diff(
            &rig.blend(&beta, BlendMode::Literal).unwrap(),
            &rig.templates[i],
        ));
    }
    let neutral = max_abs_diff(&rig.blend(&[0.0; 52], BlendMode::Delta).unwrap(), &rig.neutral);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut affine = 0.0f64;
    for _ in 0..100 {
        let a: Vec<f64> = (0..52).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..52).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w: f64 = rng.gen_range(-1.0..2.0);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        for mode in [BlendMode::Literal, BlendMode::Delta] {
            let lhs = rig.blend(&mix, mode).unwrap();
            let rhs = w * &rig.blend(&a, mode).unwrap() + (1.0 - w) * &rig.blend(&b, mode).unwrap();
            affine = affine.max(max_abs_diff(&lhs, &rhs));
        }
    }
    check(
        one_hot <= 1e-12 && neutral <= 1e-12 && affine <= 1e-9,
        format!("one-hot {one_hot:.1e}, neutral {neutral:.1e}, affine {affine:.1e} over 100 pairs"),
    )
}

fn brute_frame_distances(p: &Array3<f64>, g: &Array3<f64>, mask: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for t in 0..p.shape()[0] {
        let mut row = Vec::new();
        for &v in mask {
            let mut s = 0.0;
            for k in 0..3 {
                let d = p[[t, v, k]] - g[[t, v, k]];
                s += d * d;
            }
            row.push(s.sqrt() * MM_PER_M);
        }
        out.push(row);
    }
    out
}

fn brute_max_mean(d: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for row in d {
        let mut m = f64::MIN;
        for &x in row {
            if x > m {
                m = x;
            }
        }
        acc += m;
    }
    acc / d.len() as f64
}

fn brute_avg(d: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for row in d {
        for &x in row {
            acc += x;
            n += 1;
        }
    }
    acc / n as f64
}

fn metric_oracles() -> Outcome {
    let (t, v) = (10, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut err, mut ordered, mut shift) = (0.0f64, true, 0.0f64);
    for _ in 0..20 {
        let p = Array3::from_shape_fn((t, v, 3), |_| rng.gen_range(-0.1..0.1));
        let g = Array3::from_shape_fn((t, v, 3), |_| rng.gen_range(-0.1..0.1));
        let lip: Vec<usize> = (0..v).filter(|_| rng.gen_bool(0.3)).collect();
        let eye: Vec<usize> = (0..v).filter(|_| rng.gen_bool(0.3)).collect();
        let (ps, gs) = (
            VertexSequence::new(p.clone()).unwrap(),
            VertexSequence::new(g.clone()).unwrap(),
        );
        let l = lve(&ps, &gs, &lip).unwrap();
        let e = eve(&ps, &gs, &eye).unwrap();
        let a = lip_avg_error(&ps, &gs, &lip).unwrap();
        let dl = brute_frame_distances(&p, &g, &lip);
        err = err
            .max((l - brute_max_mean(&dl)).abs())
            .max((e - brute_max_mean(&brute_frame_distances(&p, &g, &eye))).abs())
            .max((a - brute_avg(&dl)).abs());
        ordered &= a <= l;
        let off = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let moved = |x: &Array3<f64>| {
            let mut y = x.clone();
            for ((_, _, k), val) in y.indexed_iter_mut() {
                *val += off[k];
            }
            VertexSequence::new(y).unwrap()
        };
        let (pm, gm) = (moved(&p), moved(&g));
        shift = shift
            .max((lve(&pm, &gm, &lip).unwrap() - l).abs())
            .max((eve(&pm, &gm, &eye).unwrap() - e).abs())
            .max((lip_avg_error(&pm, &gm, &lip).unwrap() - a).abs());
    }
    check(
        err <= 1e-9 && ordered && shift <= 1e-9,
        format!("20 trials: brute-force diff {err:.1e} mm, lip_avg <= lve {ordered}, translation diff {shift:.1e} mm"),
    )
}

fn loss_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut uniform = 0.0f64;
    for m in [2usize, 3, 8] {
        let probs = Array2::from_elem((5, m), 1.0 / m as f64);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..m)).collect();
        uniform = uniform.max((classification_loss(&probs, &labels).unwrap() - (m as f64).ln()).abs());
    }
    let gt = Array2::from_shape_fn((12, 52), |_| rng.gen_range(0.0..1.0));
    let offset = Array2::from_shape_fn((1, 52), |_| rng.gen_range(-1.0..1.0));
    let pred = &gt + &offset;
    let vel = velocity_loss(
        &BlendshapeSequence::new(pred).unwrap(),
        &BlendshapeSequence::new(gt).unwrap(),
    )
    .unwrap();

    let w = LossWeights {
        cross: 0.7,
        self_rec: 1.3,
        velocity: 0.25,
        classification: 0.05,
    };
    let terms: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
    let r = total_loss(terms[0], terms[1], terms[2], terms[3], &w).unwrap();
    let mut weighted = (r.total - (0.7 * terms[0] + 1.3 * terms[1] + 0.25 * terms[2] + 0.05 * terms[3])).abs();

    // and on a real model forward
    let data = small_spec(0.2, 1).generate().unwrap();
    let pair = pair_for(&data.train, 1);
    let model = Model::new(&ModelConfig::tiny(), 0).unwrap();
    let d = LossWeights::default();
    let m = model
        .loss(std::slice::from_ref(&pair), &d, &mut FrontendCache::new())
        .unwrap();
    let sum =
        d.cross * m.cross + d.self_rec * m.self_rec + d.velocity * m.velocity + d.classification * m.classification;
    weighted = weighted.max((m.total - sum).abs());
    check(
        uniform <= 1e-9 && vel == 0.0 && weighted <= 1e-9,
        format!("|uniform - ln M| {uniform:.1e}, offset velocity {vel:e}, weighted-sum diff {weighted:.1e}"),
    )
}

fn smoothing_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut poly, mut lin) = (0.0f64, 0.0f64);
    for t in [5usize, 6, 9, 30, 61] {
        let c: Vec<[f64; 3]> = (0..52)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let x = Array2::from_shape_fn((t, 52), |(i, j)| {
            let s = i as f64 / 10.0;
            c[j][0] + c[j][1] * s + c[j][2] * s * s
        });
        let sm = savgol_smooth(&BlendshapeSequence::new(x.clone()).unwrap(), 5, 2).unwrap();
        poly = poly.max(max_abs_diff(sm.coeffs(), &x));

        let a = Array2::from_shape_fn((t, 52), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((t, 52), |_| rng.gen_range(-1.0..1.0));
        let (u, w) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let s = |m: Array2<f64>| {
            savgol_smooth(&BlendshapeSequence::new(m).unwrap(), 5, 2)
                .unwrap()
                .into_coeffs()
        };
        let lhs = s(u * &a + w * &b);
        let rhs = u * &s(a) + w * &s(b);
        lin = lin.max(max_abs_diff(&lhs, &rhs));
    }
    check(
        poly <= 1e-9 && lin <= 1e-9,
        format!("quadratic reproduction {poly:.1e}, linearity {lin:.1e}"),
    )
}

fn full_structure() -> Outcome {
    use emotalk_core::autograd::ParamStore;
    use emotalk_core::decoder::FusionDecoder;

    let cfg = ModelConfig::full();
    if let Err(e) = cfg.validate() {
        return Err(format!("full preset invalid: {e}"));
    }
    let f = &cfg.fusion;
    let widths: Vec<usize> = f.segments().iter().map(|r| r.len()).collect();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dec = FusionDecoder::new(&mut store, &mut rng, f, cfg.encoder.d_model).unwrap();
    let style = store.get(dec.style_table).dim();
    let level = store.get(dec.level_table).dim();
    let raw = FeatureSequence::new(Array2::zeros((3, 1024)), 30.0).unwrap();
    let fused = dec.fuse_features(&store, &raw, &raw, 23, 1).unwrap();
    let out = dec.decode_blendshapes(&store, fused.values(), raw.values()).unwrap();
    let ok = f.d_fused == 832
        && widths == [256, 512, 32, 32]
        && f.n_heads == 4
        && dec.head.d_out == 52
        && out.coeffs().ncols() == 52
        && style == (24, 32)
        && level == (2, 32)
        && fused.dim() == 832;
    check(
        ok,
        format!(
            "fused {} = {:?}, heads {}, output {}, style table {style:?}, level table {level:?}",
            f.d_fused,
            widths,
            f.n_heads,
            out.coeffs().ncols()
        ),
    )
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn determinism() -> Outcome {
    let data = small_spec(0.5, 2).generate().unwrap();
    let mut mc = ModelConfig::desk();
    mc.encoder.n_emotions = 2;
    let tc = TrainConfig {
        seed: 9,
        batch_size: 4,
        max_steps: Some(30),
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let full = |dir: &Path| {
        let mut t = Trainer::new(&mc, &tc).unwrap();
        run(&mut t, &data.train, dir, &RunOptions::default()).unwrap();
    };
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    full(&a);
    full(&b);
    let mut t = Trainer::new(&mc, &tc).unwrap();
    let stop = RunOptions {
        stop_at: Some(13),
        ..RunOptions::default()
    };
    run(&mut t, &data.train, &c, &stop).unwrap();
    let mut resumed = Trainer::load(&c.join("checkpoint.bin")).unwrap();
    run(&mut resumed, &data.train, &c, &RunOptions::default()).unwrap();

    let hash = |d: &Path, f: &str| fnv(&fs::read(d.join(f)).unwrap());
    let (ha, hb, hc) = (
        hash(&a, "metrics.jsonl"),
        hash(&b, "metrics.jsonl"),
        hash(&c, "metrics.jsonl"),
    );
    let ckpt = hash(&a, "checkpoint.bin") == hash(&c, "checkpoint.bin");
    check(
        ha == hb && ha == hc && ckpt,
        format!("log hashes {ha:016x} / {hb:016x} / resumed {hc:016x}, resumed checkpoint identical {ckpt}"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {id:>2} {name}: {detail} [{secs:.1}s]");
    };

    let s = Instant::now();
    report(1, "gradient oracle", s, guarded(gradient_oracle));
    let s = Instant::now();
    report(2, "overfit one pair", s, guarded(overfit_one_pair));

    let s = Instant::now();
    match catch_unwind(desk_run) {
        Ok(r) => {
            report(3, "disentanglement", s, disentanglement(&r));
            report(4, "trained vs untrained metrics", s, metric_gap(&r));
        }
        Err(_) => {
            report(3, "disentanglement", s, Err("desk run panicked".into()));
            report(4, "trained vs untrained metrics", s, Err("desk run panicked".into()));
        }
    }

    let rest: [Criterion; 6] = [
        (5, "rig exactness", rig_exactness),
        (6, "metric oracles", metric_oracles),
        (7, "loss closed forms", loss_closed_forms),
        (8, "smoothing exactness", smoothing_exactness),
        (9, "full preset structure", full_structure),
        (10, "determinism and resume", determinism),
    ];
    for (id, name, f) in rest {
        let s = Instant::now();
        report(id, name, s, guarded(f));
    }

    if failed == 0 {
        println!("all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
