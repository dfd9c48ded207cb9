//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use amcfg::anchors::fit_anchor_stats;
use amcfg::clustering::{fit_kmeans, fit_kmeans_from, KMeansParams, LabelVector};
use amcfg::dataset::amcf::{decode, encode};
use amcfg::eval::{
    compute_metrics, generate_synthetic, group_kfold, ladder_anchor_features, run_ablation, run_pipeline, sweep_k,
    temporal_group_kfold, FeatureGroup, FoldPlan, PipelineConfig, SynthSpec,
};
use amcfg::fusion::FeatureBlock;
use amcfg::gbdt::{predict, train, GbdtParams};
use amcfg::{Dataset, EmbeddingMatrix, Modality};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool")
        .install(f)
}

/// Synthetic defaults under 5-fold temporal group k-fold: each fold trains on
/// other users' earlier posts and tests on its own users' drifted later posts.
fn drift_folds() -> (Dataset, FoldPlan) {
    let data = generate_synthetic(&SynthSpec::default()).expect("synth");
    let plan = temporal_group_kfold(&data.train.user_ids(), &data.test.user_ids(), 5, 0).expect("plan");
    let all = Dataset::concat(&[&data.train, &data.test]).expect("concat");
    (all, plan)
}

fn drift_config(groups: &[FeatureGroup]) -> PipelineConfig {
    PipelineConfig {
        k: 20,
        ..PipelineConfig::default()
    }
    .with_features(groups)
}

fn anchoring_benefit() -> Outcome {
    let (data, plan) = drift_folds();
    let timed = |groups: &[FeatureGroup]| -> Result<(f64, Duration), String> {
        let cfg = drift_config(groups);
        let t = Instant::now();
        let r = single_threaded(|| run_pipeline(&data, &plan, &cfg)).map_err(|e| e.to_string())?;
        Ok((r.report.metrics.mape, t.elapsed()))
    };
    let (orig, t0) = timed(&[FeatureGroup::Orig])?;
    let (stat, t1) = timed(&[FeatureGroup::Orig, FeatureGroup::Stat])?;
    let reduction = (orig - stat) / orig;
    let detail = format!(
        "MAPE orig {orig:.3}% -> orig+stat {stat:.3}% ({:.1}% lower); {:.1}s / {:.1}s single-threaded",
        100.0 * reduction,
        t0.as_secs_f64(),
        t1.as_secs_f64()
    );
    ensure(reduction >= 0.20, || format!("{detail}; need >= 20% lower"))?;
    ensure(t0.max(t1) < Duration::from_secs(120), || {
        format!("{detail}; over 2 minutes")
    })?;
    Ok(detail)
}

fn ablation_ladder() -> Outcome {
    let (data, plan) = drift_folds();
    let steps = ladder_anchor_features(&drift_config(&[FeatureGroup::Orig]));
    let report = run_ablation(&data, &plan, &steps).map_err(|e| e.to_string())?;
    let mapes: Vec<f64> = report.rows.iter().map(|r| r.mape).collect();
    let detail = report
        .rows
        .iter()
        .map(|r| format!("{} {:.3}%", r.label, r.mape))
        .collect::<Vec<_>>()
        .join(" -> ");
    ensure(mapes.len() == 3, || format!("expected 3 rows, got {}", mapes.len()))?;
    ensure(mapes.windows(2).all(|w| w[1] <= w[0] + 0.5), || {
        format!("{detail}; MAPE rose by more than 0.5 points")
    })?;
    Ok(detail)
}

fn k_sweep_shape() -> Outcome {
    let (data, plan) = drift_folds();
    let base = drift_config(&[FeatureGroup::Orig, FeatureGroup::Stat]);
    let report = sweep_k(&data, &plan, &base, &[2, 5, 20, 100]).map_err(|e| e.to_string())?;
    let detail = report
        .rows
        .iter()
        .map(|r| format!("k={} {:.3}%", r.label, r.mape))
        .collect::<Vec<_>>()
        .join(", ");
    let best = report.best().ok_or("empty sweep")?;
    ensure(best.label == "5" || best.label == "20", || {
        format!("{detail}; best k = {}", best.label)
    })?;
    Ok(format!("{detail}; best k = {}", best.label))
}

fn sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> (f64, Vec<Vec<f64>>) {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    let total = points
        .iter()
        .zip(labels)
        .map(|(p, &l)| p.iter().zip(&centroids[l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    (total, centroids)
}

/// Minimum SSE over all partitions into exactly `k` non-empty groups.
fn brute_force_kmeans(points: &[Vec<f64>], k: usize) -> (f64, Vec<Vec<f64>>) {
    let n = points.len();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.contains(&false) {
            continue;
        }
        let (s, cents) = sse(points, &labels, k);
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, cents));
        }
    }
    best.expect("n >= k")
}

fn kmeans_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = KMeansParams::default();
    for inst in 0..200 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(1..=3usize.min(n));
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(Modality::Text, &points).map_err(|e| e.to_string())?;
        let (opt, opt_centroids) = brute_force_kmeans(&points, k);
        let tol = 1e-9 * opt.max(1e-12);

        let fitted = fit_kmeans(&m, k, inst, &params).map_err(|e| e.to_string())?;
        ensure(fitted.inertia >= opt - tol, || {
            format!("instance {inst}: inertia {} below optimum {opt}", fitted.inertia)
        })?;
        let from_opt = fit_kmeans_from(&m, opt_centroids, &params).map_err(|e| e.to_string())?;
        ensure((from_opt.inertia - opt).abs() <= tol, || {
            format!("instance {inst}: started at optimum, got {} vs {opt}", from_opt.inertia)
        })?;
    }
    Ok("200 instances; inertia >= optimum and exact from optimal init".into())
}

fn anchor_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for inst in 0..100 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(1..=5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let lv = LabelVector {
            modality: Modality::Text,
            labels: labels.clone(),
        };
        let stats = fit_anchor_stats(&lv, &y, k).map_err(|e| e.to_string())?;

        let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (&l, &v) in labels.iter().zip(&y) {
            groups.entry(l).or_default().push(v);
        }
        let total: usize = stats.clusters.iter().map(|c| c.count).sum();
        ensure(total == n, || {
            format!("instance {inst}: counts sum to {total}, n = {n}")
        })?;
        for (l, vals) in &groups {
            let c = stats.clusters[*l];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            ensure(
                c.count == vals.len() && (c.mean - mean).abs() <= 1e-9 && (c.var - var).abs() <= 1e-9,
                || {
                    format!(
                        "instance {inst} cluster {l}: {c:?} vs mean {mean} var {var} n {}",
                        vals.len()
                    )
                },
            )?;
        }
    }
    Ok("100 instances match the group-by oracle".into())
}

fn leakage() -> Outcome {
    let spec = SynthSpec {
        n_users: 10,
        posts_per_user: 6,
        test_posts_per_user: 1,
        n_topics: 4,
        text_dim: 8,
        video_dim: 4,
        audio_dim: 4,
        seed: 3,
        ..SynthSpec::default()
    };
    let synth = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let data = synth.train.clone();
    let plan = group_kfold(&data.user_ids(), 5, 1).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        k: 4,
        embed_dim: 16,
        gbdt: GbdtParams {
            n_rounds: 30,
            min_samples_leaf: 3,
            ..GbdtParams::default()
        },
        ..PipelineConfig::default()
    };
    let base = run_pipeline(&data, &plan, &cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for f in 0..plan.n_folds {
        let mut y = data.popularity();
        for r in plan.test_rows(f) {
            y[r] = rng.random_range(-50.0..500.0);
        }
        let perturbed = data.with_popularity(&y).map_err(|e| e.to_string())?;
        let run = run_pipeline(&perturbed, &plan, &cfg).map_err(|e| e.to_string())?;
        ensure(
            run.artifacts[f].to_json_bytes() == base.artifacts[f].to_json_bytes(),
            || format!("fold {f} artifacts changed when its test labels changed"),
        )?;
    }

    // temporal plan: later-period rows are test-only, so relabelling all of
    // them must leave every fold untouched
    let both = Dataset::concat(&[&synth.train, &synth.test]).map_err(|e| e.to_string())?;
    let tplan =
        temporal_group_kfold(&synth.train.user_ids(), &synth.test.user_ids(), 5, 1).map_err(|e| e.to_string())?;
    let tbase = run_pipeline(&both, &tplan, &cfg).map_err(|e| e.to_string())?;
    let mut y = both.popularity();
    for v in &mut y[synth.train.len()..] {
        *v = rng.random_range(-50.0..500.0);
    }
    let relabelled = both.with_popularity(&y).map_err(|e| e.to_string())?;
    let trun = run_pipeline(&relabelled, &tplan, &cfg).map_err(|e| e.to_string())?;
    for (a, b) in tbase.artifacts.iter().zip(&trun.artifacts) {
        ensure(a.to_json_bytes() == b.to_json_bytes(), || {
            format!("temporal fold {} changed when later-period labels changed", a.fold)
        })?;
    }

    for inst in 0..100u64 {
        let n_users = rng.random_range(5..=40);
        let n_rows = rng.random_range(n_users..=400);
        let mut users: Vec<String> = (0..n_users).map(|u| format!("u{u}")).collect();
        users.extend((n_users..n_rows).map(|_| format!("u{}", rng.random_range(0..n_users))));
        let folds = rng.random_range(2..=5);
        let plan = group_kfold(&users, folds, inst).map_err(|e| e.to_string())?;
        for f in 0..folds {
            let test: std::collections::BTreeSet<&str> = plan.test_rows(f).iter().map(|&r| users[r].as_str()).collect();
            ensure(
                plan.train_rows(f).iter().all(|&r| !test.contains(users[r].as_str())),
                || format!("distribution {inst}: user overlap in fold {f}"),
            )?;
        }
    }
    Ok(
        "group and temporal folds byte-identical under test-label perturbation; 100 user distributions without overlap"
            .into(),
    )
}

fn metrics() -> Outcome {
    let m = compute_metrics(&[1.0, 2.0], &[2.0, 1.0]).map_err(|e| e.to_string())?;
    ensure(
        (m.mae - 1.0).abs() <= 1e-12 && (m.mape - 75.0).abs() <= 1e-12 && (m.r2 + 3.0).abs() <= 1e-12,
        || format!("worked example gave {m:?}"),
    )?;
    let y = [3.0, 7.0, 1.5, 9.0, 4.5];
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let m = compute_metrics(&y, &[mean; 5]).map_err(|e| e.to_string())?;
    ensure(m.r2.abs() <= 1e-12, || format!("mean predictor R2 = {}", m.r2))?;
    let m = compute_metrics(&y, &y).map_err(|e| e.to_string())?;
    ensure(m.mae == 0.0 && m.mape == 0.0 && m.r2 == 1.0, || {
        format!("all-correct gave {m:?}")
    })?;
    Ok("worked example (1, 75%, -3); mean predictor R2 0; all-correct (0, 0%, 1)".into())
}

fn random_block(rng: &mut ChaCha8Rng, n: usize, d: usize, levels: Option<u32>) -> FeatureBlock {
    let data = (0..n * d)
        .map(|_| match levels {
            Some(l) => rng.random_range(0..l) as f64,
            None => rng.random_range(-5.0..5.0),
        })
        .collect();
    FeatureBlock::new(n, (0..d).map(|j| format!("f{j}")).collect(), data)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Predictions of one depth-1 L1 tree with learning rate 1, from an
/// exhaustive scan of every feature and threshold.
fn brute_force_stump(x: &FeatureBlock, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let base = median(y);
    let g: Vec<f64> = y.iter().map(|&t| sign(base - t)).collect();
    let total: f64 = g.iter().sum();
    let parent = total * total / n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x.width() {
        let mut vals: Vec<f64> = (0..n).map(|i| x.row(i)[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for &t in &vals[..vals.len() - 1] {
            let (mut ls, mut lc) = (0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                if x.row(i)[f] <= t {
                    ls += gi;
                    lc += 1.0;
                }
            }
            let rs = total - ls;
            let gain = ls * ls / lc + rs * rs / (n as f64 - lc) - parent;
            if gain > 1e-10 && best.is_none_or(|(bg, _, _)| gain > bg) {
                best = Some((gain, f, t));
            }
        }
    }
    let Some((_, f, t)) = best else {
        return vec![base; n];
    };
    let side = |left: bool| -> f64 {
        let r: Vec<f64> = (0..n)
            .filter(|&i| (x.row(i)[f] <= t) == left)
            .map(|i| y[i] - base)
            .collect();
        median(&r)
    };
    let (lv, rv) = (side(true), side(false));
    (0..n).map(|i| base + if x.row(i)[f] <= t { lv } else { rv }).collect()
}

fn gbdt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for ds in 0..20 {
        let n = rng.random_range(20..=300);
        let d = rng.random_range(1..=5);
        let x = random_block(&mut rng, n, d, None);
        let y: Vec<f64> = (0..n)
            .map(|i| 3.0 * x.row(i)[0].sin() + rng.random_range(-1.0..1.0) + 10.0)
            .collect();
        let params = GbdtParams {
            learning_rate: rng.random_range(0.05..=1.0),
            num_leaves: rng.random_range(2..=31),
            n_rounds: 40,
            min_samples_leaf: rng.random_range(1..=10),
            early_stopping_rounds: 0,
            ..GbdtParams::default()
        };
        let m = train(&x, &y, &params, None).map_err(|e| e.to_string())?;
        ensure(m.train_mae.windows(2).all(|w| w[1] <= w[0] + 1e-12), || {
            format!("dataset {ds}: training MAE increased: {:?}", m.train_mae)
        })?;
    }

    let exact = GbdtParams {
        learning_rate: 1.0,
        num_leaves: 2,
        n_rounds: 1,
        min_samples_leaf: 1,
        early_stopping_rounds: 0,
        ..GbdtParams::default()
    };
    let x = FeatureBlock::new(2, vec!["f0".into()], vec![0.0, 1.0]);
    let m = train(&x, &[0.0, 10.0], &exact, None).map_err(|e| e.to_string())?;
    let p = predict(&m, &x).map_err(|e| e.to_string())?;
    ensure(p == vec![0.0, 10.0], || format!("two-point trace predicted {p:?}"))?;

    for inst in 0..200 {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=3);
        let levels = if inst % 2 == 0 {
            Some(rng.random_range(2..=6))
        } else {
            None
        };
        let x = random_block(&mut rng, n, d, levels);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let m = train(&x, &y, &exact, None).map_err(|e| e.to_string())?;
        let got = predict(&m, &x).map_err(|e| e.to_string())?;
        let want = brute_force_stump(&x, &y);
        ensure(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12), || {
            format!("instance {inst}: tree {got:?} vs oracle {want:?}")
        })?;
    }
    Ok("20 MAE histories non-increasing; two-point trace [0, 10]; 200 stumps match the oracle".into())
}

fn amcfg_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_amcfg"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = amcfg_bin().args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "amcfg {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    run_cli(&[
        "synth",
        "--out",
        &dir("data"),
        "--n-users",
        "15",
        "--posts-per-user",
        "8",
    ])?;
    let manifest = dir("data/manifest.json");
    for out in ["a", "b"] {
        run_cli(&[
            "run",
            "--manifest",
            &manifest,
            "--llm",
            "stub",
            "--seed",
            "5",
            "--k",
            "6",
            "--n-rounds",
            "60",
            "--embed-dim",
            "32",
            "--out",
            &dir(out),
        ])?;
    }
    for file in ["report.json", "predictions.csv"] {
        let (a, b) = (
            read(&tmp.path().join("a").join(file))?,
            read(&tmp.path().join("b").join(file))?,
        );
        ensure(!a.is_empty() && a == b, || format!("{file} differs between runs"))?;
    }
    Ok("report.json and predictions.csv byte-identical across two runs".into())
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..8) {
        0 => f32::from_bits(rng.random_range(1..0x0080_0000)),
        1 => -0.0,
        2 => [f32::MAX, f32::MIN, f32::MIN_POSITIVE, 0.0][rng.random_range(0..4)],
        _ => loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        },
    }
}

fn amcf_format() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for inst in 0..1000 {
        let (r, c) = if inst == 0 {
            (1, 1)
        } else {
            (rng.random_range(1..=24), rng.random_range(1..=24))
        };
        let vals: Vec<f32> = (0..r * c).map(|_| random_f32(&mut rng)).collect();
        let m = EmbeddingMatrix::new(Modality::Audio, r, c, vals.iter().map(|&v| v as f64).collect())
            .map_err(|e| e.to_string())?;
        let bytes = encode(&m).map_err(|e| e.to_string())?;
        ensure(bytes.len() == 16 + 4 * r * c, || {
            format!("instance {inst}: {} bytes", bytes.len())
        })?;
        let back = decode(&bytes, Modality::Audio).map_err(|e| e.to_string())?;
        let same = back.n_rows() == r
            && back.n_cols() == c
            && back
                .data()
                .iter()
                .zip(&vals)
                .all(|(&a, &b)| (a as f32).to_bits() == b.to_bits());
        ensure(same, || format!("instance {inst}: values changed"))?;
        ensure(encode(&back).map_err(|e| e.to_string())? == bytes, || {
            format!("instance {inst}: re-encoding differs")
        })?;
    }
    Ok("1000 matrices bit-exact, including the 20-byte 1x1 file".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("anchoring benefit under drift", anchoring_benefit),
        ("ablation monotonicity shape", ablation_ladder),
        ("k-sweep shape", k_sweep_shape),
        ("k-means oracle", kmeans_oracle),
        ("anchor-stat oracle", anchor_oracle),
        ("leakage suite", leakage),
        ("metrics", metrics),
        ("gbdt", gbdt),
        ("determinism", determinism),
        ("format", amcf_format),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
