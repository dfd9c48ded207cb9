use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use tracing::info;

use amcfg::anchors::fit_anchor_stats;
use amcfg::clustering::{fit_modality, project_2d, write_projection_csv};
use amcfg::dataset::{load_dataset, Manifest};
use amcfg::eval::{
    generate_synthetic, group_kfold, ladder_anchor_features, ladder_modalities, ladder_semantic, run_ablation_with,
    run_pipeline_with, sweep_k_with, temporal_group_kfold, write_predictions_csv, write_synthetic, AblationReport,
    FeatureGroup, FoldPlan, LadderStep, PipelineConfig, SynthSpec,
};
use amcfg::gbdt::{feature_importance, BoostedModel, ImportanceKind};
use amcfg::semantic::{
    fit_semantic_table, CachedLlm, HashingEmbedder, HttpLlm, LlmClient, LlmClientConfig, PromptTask, ResponseCache,
    StubLlm,
};
use amcfg::{Dataset, Modality};

use crate::args::{
    AblateArgs, AnchorsArgs, ImportanceArgs, ImportanceKindArg, LadderFile, LlmBackend, PipelineArgs, Preset, RunArgs,
    SweepArgs, SynthArgs, VizArgs,
};
use crate::{load_config_file, UsageError};

const DEFAULT_KS: [usize; 5] = [100, 200, 300, 400, 500];

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, UsageError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| UsageError(format!("--{what}: {e}"))))
        .collect()
}

fn pipeline_config(args: &PipelineArgs) -> Result<PipelineConfig, UsageError> {
    let mut cfg = PipelineConfig::default();
    if let Some(f) = &args.features {
        let groups: Vec<FeatureGroup> = parse_list(f, "features")?;
        if groups.is_empty() {
            return Err(UsageError("--features: at least one feature group is required".into()));
        }
        cfg = cfg.with_features(&groups);
    }
    if let Some(m) = &args.modalities {
        cfg.modalities = parse_list::<Modality>(m, "modalities")?;
    }
    if let Some(t) = &args.tasks {
        cfg.semantic.tasks = parse_list::<PromptTask>(t, "tasks")?;
    }
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $( if let Some(v) = args.$src.clone() { cfg.$($dst).+ = v; } )*
        };
    }
    set!(k => k, svd_rank => svd_rank, seed => seed, embed_dim => embed_dim,
        learning_rate => gbdt.learning_rate, num_leaves => gbdt.num_leaves, n_rounds => gbdt.n_rounds,
        min_samples_leaf => gbdt.min_samples_leaf, max_bins => gbdt.max_bins,
        max_in_flight => semantic.max_in_flight);
    if cfg.embed_dim == 0 {
        return Err(UsageError("--embed-dim must be at least 1".into()));
    }
    cfg.llm = match args.llm.unwrap_or(LlmBackend::Stub) {
        LlmBackend::Stub => "stub".into(),
        LlmBackend::Http => format!("http:{}", llm_client_config(args).model),
    };
    Ok(cfg)
}

fn llm_client_config(args: &PipelineArgs) -> LlmClientConfig {
    let mut c = LlmClientConfig::default();
    if let Some(e) = &args.llm_endpoint {
        c.endpoint = e.clone();
    }
    if let Some(m) = &args.llm_model {
        c.model = m.clone();
    }
    if let Some(t) = args.llm_timeout {
        c.timeout_secs = t;
    }
    if let Some(r) = args.llm_retries {
        c.retries = r;
    }
    c.cache_dir = args.llm_cache.clone();
    c
}

fn llm_client(args: &PipelineArgs) -> Result<Box<dyn LlmClient>> {
    let inner: Box<dyn LlmClient> = match args.llm.unwrap_or(LlmBackend::Stub) {
        LlmBackend::Stub => Box::new(StubLlm::new()),
        LlmBackend::Http => {
            let client = HttpLlm::new(llm_client_config(args));
            if args.llm_fallback.unwrap_or(false) {
                Box::new(client.with_stub_fallback())
            } else {
                Box::new(client)
            }
        }
    };
    Ok(match &args.llm_cache {
        Some(dir) => Box::new(CachedLlm::new(inner, ResponseCache::open(dir)?)),
        None => inner,
    })
}

fn read_manifest(path: &Path) -> Result<Dataset> {
    let manifest = Manifest::from_path(path).with_context(|| format!("reading manifest {}", path.display()))?;
    load_dataset(&manifest).with_context(|| format!("loading dataset from {}", path.display()))
}

/// The evaluation dataset and its fold plan. With a test manifest: temporal
/// group k-fold over both periods, or a plain holdout for `--folds 1`.
/// Otherwise group k-fold by user.
fn load_eval_data(args: &PipelineArgs) -> Result<(Dataset, FoldPlan)> {
    let manifest = args
        .manifest
        .as_deref()
        .ok_or_else(|| UsageError("--manifest is required".into()))?;
    let train = read_manifest(manifest)?;
    if let Some(test_path) = &args.test_manifest {
        let test = read_manifest(test_path)?;
        let plan = match args.folds.unwrap_or(5) {
            1 => FoldPlan::holdout(train.len(), test.len()),
            n => temporal_group_kfold(&train.user_ids(), &test.user_ids(), n, args.seed.unwrap_or(0))?,
        };
        let all = Dataset::concat(&[&train, &test]).context("combining train and test datasets")?;
        return Ok((all, plan));
    }
    let plan = group_kfold(&train.user_ids(), args.folds.unwrap_or(5), args.seed.unwrap_or(0))?;
    Ok((train, plan))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let args = args.resolve()?;
    let out = args.out.clone().ok_or_else(|| UsageError("--out is required".into()))?;
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_users: args.n_users.unwrap_or(d.n_users),
        posts_per_user: args.posts_per_user.unwrap_or(d.posts_per_user),
        test_posts_per_user: args.test_posts_per_user.unwrap_or(d.test_posts_per_user),
        n_topics: args.n_topics.unwrap_or(d.n_topics),
        text_dim: args.text_dim.unwrap_or(d.text_dim),
        video_dim: args.video_dim.unwrap_or(d.video_dim),
        audio_dim: args.audio_dim.unwrap_or(d.audio_dim),
        popularity_noise: args.noise.unwrap_or(d.popularity_noise),
        embed_noise: args.embed_noise.unwrap_or(d.embed_noise),
        drift: args.drift.unwrap_or(d.drift),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    let data = generate_synthetic(&spec)?;
    let (train, test) = write_synthetic(&data, &out)?;
    write_file(&out.join("synth_spec.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &spec)?;
        writeln!(w)
    })?;
    println!(
        "wrote {} training and {} test posts: {} and {}",
        data.train.len(),
        data.test.len(),
        train.display(),
        test.display()
    );
    Ok(())
}

pub fn run(args: RunArgs) -> Result<()> {
    let p = args.pipeline.resolve()?;
    let cfg = pipeline_config(&p)?;
    let (dataset, plan) = load_eval_data(&p)?;
    let client = llm_client(&p)?;
    let embedder = HashingEmbedder::new(cfg.embed_dim);
    let res = run_pipeline_with(&dataset, &plan, &cfg, client.as_ref(), &embedder)?;

    let out = p.out_dir();
    create_out(&out)?;
    fs::write(out.join("report.json"), res.report.to_json_pretty()).context("writing report.json")?;
    write_file(&out.join("predictions.csv"), |w| {
        write_predictions_csv(&res.predictions, w)
    })?;
    for art in &res.artifacts {
        art.model.save(out.join(format!("model_fold{}.json", art.fold)))?;
    }
    let m = res.report.metrics;
    println!(
        "MAPE {:.4}%  MAE {:.4}  R2 {:.4}  (n={}, folds={}, fingerprint {})",
        m.mape, m.mae, m.r2, m.n, res.report.n_folds, res.report.config_fingerprint
    );
    info!(out = %out.display(), "run finished");
    Ok(())
}

fn emit_report(report: &AblationReport, path: &Path, title: &str) -> Result<()> {
    write_file(path, |w| report.write_csv(w))?;
    println!("{title}\n{}", report.to_table());
    Ok(())
}

fn ladder_from_file(path: &Path, base: &PipelineConfig) -> Result<Vec<LadderStep>, UsageError> {
    let file: LadderFile = load_config_file(path)?;
    if file.steps.is_empty() {
        return Err(UsageError(format!("ladder file {} has no steps", path.display())));
    }
    file.steps
        .into_iter()
        .map(|s| {
            let mut config = base.clone();
            if let Some(f) = &s.features {
                config = config.with_features(&parse_list::<FeatureGroup>(f, "features")?);
            }
            if let Some(m) = &s.modalities {
                config.modalities = parse_list::<Modality>(m, "modalities")?;
            }
            if let Some(k) = s.k {
                config.k = k;
            }
            Ok(LadderStep { label: s.label, config })
        })
        .collect()
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let p = args.pipeline.resolve()?;
    let base = pipeline_config(&p)?;
    let ladder = match &args.ladder {
        Some(path) => Some(ladder_from_file(path, &base)?),
        None => None,
    };
    let (dataset, plan) = load_eval_data(&p)?;
    let client = llm_client(&p)?;
    let embedder = HashingEmbedder::new(base.embed_dim);
    let out = p.out_dir();
    create_out(&out)?;

    let run = |steps: &[LadderStep]| run_ablation_with(&dataset, &plan, steps, client.as_ref(), &embedder);
    if let Some(steps) = ladder {
        return emit_report(&run(&steps)?, &out.join("ablation.csv"), "ablation");
    }
    match args.preset.expect("clap requires --ladder or --preset") {
        Preset::PaperTables => {
            let ks = args.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
            let sweep = sweep_k_with(&dataset, &plan, &base, &ks, client.as_ref(), &embedder)?;
            emit_report(&sweep, &out.join("table1_k_sweep.csv"), "k sweep")?;
            emit_report(
                &run(&ladder_modalities(&base))?,
                &out.join("table2_modalities.csv"),
                "modality ladder",
            )?;
            emit_report(
                &run(&ladder_anchor_features(&base))?,
                &out.join("table3_anchor_features.csv"),
                "anchor feature ladder",
            )?;
            emit_report(
                &run(&ladder_semantic(&base))?,
                &out.join("table4_semantic.csv"),
                "semantic anchor ladder",
            )
        }
        Preset::Modalities => emit_report(&run(&ladder_modalities(&base))?, &out.join("ablation.csv"), "ablation"),
        Preset::Features => emit_report(
            &run(&ladder_anchor_features(&base))?,
            &out.join("ablation.csv"),
            "ablation",
        ),
        Preset::Semantic => emit_report(&run(&ladder_semantic(&base))?, &out.join("ablation.csv"), "ablation"),
    }
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let p = args.pipeline.resolve()?;
    let base = pipeline_config(&p)?;
    let ks = args.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
    if ks.is_empty() || ks.contains(&0) {
        return Err(UsageError("--ks needs one or more positive values".into()).into());
    }
    let (dataset, plan) = load_eval_data(&p)?;
    let client = llm_client(&p)?;
    let embedder = HashingEmbedder::new(base.embed_dim);
    let out = p.out_dir();
    create_out(&out)?;
    let report = sweep_k_with(&dataset, &plan, &base, &ks, client.as_ref(), &embedder)?;
    emit_report(&report, &out.join("k_sweep.csv"), "k sweep")
}

pub fn viz(args: VizArgs) -> Result<()> {
    let p = args.pipeline.resolve()?;
    let cfg = pipeline_config(&p)?;
    let manifest = p
        .manifest
        .as_deref()
        .ok_or_else(|| UsageError("--manifest is required".into()))?;
    let dataset = read_manifest(manifest)?;
    let mods = cfg.resolve_modalities(&dataset)?;
    let out = p.out_dir();
    create_out(&out)?;
    for m in mods {
        let raw = dataset.matrix(m).expect("resolved");
        let (model, labels) = fit_modality(raw, cfg.k_for(m), cfg.svd_rank, cfg.seed, &cfg.kmeans)?;
        let space = model.preprocessing.apply(raw)?;
        let points = project_2d(&space, &labels, cfg.seed)?;
        let path = out.join(format!("{m}_projection.csv"));
        write_file(&path, |w| write_projection_csv(&points, w))?;
        println!("{}: {} points, k={} -> {}", m, points.len(), model.k, path.display());
    }
    Ok(())
}

pub fn importance(args: ImportanceArgs) -> Result<()> {
    let model = BoostedModel::load(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let kind = match args.kind.unwrap_or(ImportanceKindArg::Gain) {
        ImportanceKindArg::Gain => ImportanceKind::Gain,
        ImportanceKindArg::Splits => ImportanceKind::Splits,
    };
    let rows = feature_importance(&model, kind);
    let write = |w: &mut dyn Write| -> io::Result<()> {
        writeln!(w, "feature,score")?;
        for (name, score) in &rows {
            writeln!(w, "{name},{score}")?;
        }
        Ok(())
    };
    match &args.out {
        Some(path) => write_file(path, |w| write(w)),
        None => write(&mut io::stdout().lock()).context("writing to stdout"),
    }
}

pub fn anchors_build(args: AnchorsArgs) -> Result<()> {
    let p = args.pipeline.resolve()?;
    let cfg = pipeline_config(&p)?;
    let manifest = p
        .manifest
        .as_deref()
        .ok_or_else(|| UsageError("--manifest is required".into()))?;
    let dataset = read_manifest(manifest)?;
    let mods = cfg.resolve_modalities(&dataset)?;
    if args.semantic && !mods.iter().any(|m| m.is_semantic()) {
        return Err(UsageError("--semantic needs at least one of the text, video or audio modalities".into()).into());
    }
    let out = p.out_dir();
    create_out(&out)?;
    let y = dataset.popularity();
    let mut models = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for m in mods {
        let raw = dataset.matrix(m).expect("resolved");
        let (model, lv) = fit_modality(raw, cfg.k_for(m), cfg.svd_rank, cfg.seed, &cfg.kmeans)?;
        let stats = fit_anchor_stats(&lv, &y, model.k)?;
        fs::write(
            out.join(format!("clusters_{m}.json")),
            serde_json::to_vec_pretty(&model)?,
        )?;
        fs::write(
            out.join(format!("anchors_{m}.json")),
            serde_json::to_vec_pretty(&stats)?,
        )?;
        println!("{m}: k={} clusters, {} rows", model.k, lv.len());
        models.insert(m, model);
        labels.insert(m, lv);
    }
    if args.semantic {
        let client = llm_client(&p)?;
        let embedder = HashingEmbedder::new(cfg.embed_dim);
        let sem_models = models.into_iter().filter(|(m, _)| m.is_semantic()).collect();
        let table = fit_semantic_table(
            &dataset,
            &sem_models,
            &labels,
            client.as_ref(),
            &embedder,
            &cfg.semantic,
        )?;
        fs::write(out.join("semantic_table.json"), serde_json::to_vec_pretty(&table)?)?;
        println!("semantic table: {} backend calls", client.backend_calls());
    }
    Ok(())
}
