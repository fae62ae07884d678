//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use iconoforge::curate::{
    apply_pose_filter, detect_figures, find_near_duplicates, flag_fragments, flag_pose_mismatches,
    remove_exact_duplicates, CommandDetector, FigureDetector, StubDetector, DEFAULT_FRAGMENT_KEYWORDS,
};
use iconoforge::dataset::{apply_keyword_labels, stratified_split, KeywordConfig, MetadataField, Split};
use iconoforge::eval::{ablation_csv, ablation_sweep, evaluate, top1_accuracy, train_and_evaluate, AblationSetup};
use iconoforge::explain::{compute_cam, render_overlay, write_matrix};
use iconoforge::fixture::{make_synthetic_fixture, FixtureOptions};
use iconoforge::ingest::{image_file_name, ingest, load_manifest, LocalFetcher};
use iconoforge::model::{
    pretrain_backbone, BackboneWeights, FreezeLevel, InputSet, ModelConfig, PretrainConfig, Tensor, TrainedModel,
};
use iconoforge::pipeline::{
    active_image_ids, build_inputs, channel_stats_for, load_record_image, load_splits, save_splits, training_subset,
};
use iconoforge::refine::{enqueue_proposals, propose_labels, write_proposals, PROPOSALS_FILE};
use iconoforge::review::now_timestamp;
use iconoforge::store::{write_jsonl, Store, DECISIONS_FILE, LABELS_FILE, RECORDS_FILE, REVIEW_FILE, SPLITS_FILE};
use iconoforge::IconClass;

use crate::config::{PipelineConfig, Seeds};
use crate::manifest::{hash_inputs, write_manifest, RunManifest};
use crate::service::{self, AppState};
use crate::{Cli, Command};

pub const MODEL_FILE: &str = "model.ifm";
pub const BACKBONE_FILE: &str = "backbone.ifw";
pub const REPORTS_DIR: &str = "reports";
pub const SUGGESTIONS_FILE: &str = "keyword_suggestions.jsonl";

struct Ctx {
    cfg: PipelineConfig,
    store_dir: PathBuf,
}

/// What a command produced; recorded in its run manifest.
struct Outcome {
    dir: PathBuf,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: Value,
}

impl Ctx {
    fn open_store(&self) -> Result<Store> {
        Store::open_existing(&self.store_dir)
            .with_context(|| format!("record store {} (run ingest first)", self.store_dir.display()))
    }

    fn store_files(&self) -> Vec<PathBuf> {
        [RECORDS_FILE, LABELS_FILE, REVIEW_FILE, DECISIONS_FILE, SPLITS_FILE]
            .iter()
            .map(|f| self.store_dir.join(f))
            .filter(|p| p.is_file())
            .collect()
    }

    fn reports_dir(&self) -> PathBuf {
        self.cfg.paths.reports.clone().unwrap_or_else(|| self.store_dir.join(REPORTS_DIR))
    }

    fn model_path(&self, arg: &Option<PathBuf>) -> PathBuf {
        arg.clone()
            .or_else(|| self.cfg.paths.model.clone())
            .unwrap_or_else(|| self.store_dir.join(MODEL_FILE))
    }

    fn pretrained_path(&self, arg: &Option<PathBuf>) -> PathBuf {
        arg.clone()
            .or_else(|| self.cfg.paths.pretrained.clone())
            .or_else(|| self.cfg.model.pretrained.clone())
            .unwrap_or_else(|| self.store_dir.join(BACKBONE_FILE))
    }

    fn load_model(&self, arg: &Option<PathBuf>) -> Result<(PathBuf, TrainedModel)> {
        let path = self.model_path(arg);
        if !path.is_file() {
            bail!("model checkpoint {} not found (run train first)", path.display());
        }
        let model = TrainedModel::load(&path).with_context(|| format!("model checkpoint {}", path.display()))?;
        Ok((path, model))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("write {}", path.display()))
}

fn scores_by_code(scores: &[f64]) -> Value {
    IconClass::ALL.iter().map(|c| (c.code().to_string(), json!(scores[c.index()]))).collect()
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    let started_at = now_timestamp();
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seeds = Seeds::all(seed);
    }
    let store_dir = cli
        .store
        .clone()
        .or_else(|| cfg.paths.store.clone())
        .unwrap_or_else(|| PathBuf::from("store"));
    let ctx = Ctx { cfg, store_dir };

    let (mut outcome, server) = match &cli.command {
        Command::Fixture(a) => (fixture(&ctx, a)?, None),
        Command::Ingest(a) => (ingest_cmd(&ctx, a)?, None),
        Command::Dedup(a) => (dedup(&ctx, a)?, None),
        Command::Filter(a) => (filter(&ctx, a)?, None),
        Command::Label(a) => (label(&ctx, a)?, None),
        Command::Split(a) => (split(&ctx, a)?, None),
        Command::Stats(a) => (stats(&ctx, a)?, None),
        Command::Pretrain(a) => (pretrain(&ctx, a)?, None),
        Command::Train(a) => (train(&ctx, a)?, None),
        Command::Eval(a) => (eval(&ctx, a)?, None),
        Command::Ablation(a) => (ablation(&ctx, a)?, None),
        Command::Cam(a) => (cam(&ctx, a)?, None),
        Command::Predict(a) => (predict(&ctx, a)?, None),
        Command::Propose(a) => (propose(&ctx, a)?, None),
        Command::Serve(a) => {
            let (o, state, listener) = prepare_serve(&ctx, a)?;
            (o, Some((state, listener)))
        }
    };
    outcome.inputs.extend(cli.config.iter().cloned());
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: argv.to_vec(),
        seed: outcome.seed,
        started_at,
        finished_at: now_timestamp(),
        inputs: hash_inputs(&outcome.inputs),
        outputs: outcome.outputs.clone(),
        summary: outcome.summary.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = write_manifest(&outcome.dir, &manifest)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    eprintln!("run manifest: {}", path.display());

    if let Some((state, listener)) = server {
        let runtime = tokio::runtime::Runtime::new()?;
        runtime.block_on(service::serve(state, listener))?;
    }
    Ok(())
}

fn fixture(ctx: &Ctx, a: &crate::FixtureArgs) -> Result<Outcome> {
    let seed = ctx.cfg.seeds.fixture;
    let fx = make_synthetic_fixture(&a.out, &FixtureOptions::new(a.n_per_class, seed))?;
    Ok(Outcome {
        dir: a.out.clone(),
        seed: Some(seed),
        inputs: vec![],
        outputs: vec![fx.manifest_path()],
        summary: json!({
            "dir": a.out,
            "manifest": fx.manifest_path(),
            "images": fx.images.len(),
            "originals": fx.originals().count(),
        }),
    })
}

fn ingest_cmd(ctx: &Ctx, a: &crate::IngestArgs) -> Result<Outcome> {
    let manifest = load_manifest(&a.manifest, &a.source)?;
    let base_dir = a.images_dir.clone().unwrap_or_else(|| parent_dir(&a.manifest));
    let mut store = Store::open(&ctx.store_dir)?;
    let images_dir = store.images_dir().expect("store on disk");
    let report = ingest(&mut store, &manifest, &LocalFetcher { base_dir }, &images_dir)?;
    Ok(Outcome {
        dir: ctx.store_dir.clone(),
        seed: None,
        inputs: vec![a.manifest.clone()],
        outputs: vec![ctx.store_dir.join(RECORDS_FILE), images_dir],
        summary: json!({
            "source": report.source_name,
            "rows": report.rows,
            "stored": report.stored,
            "already_present": report.already_present,
            "fetch_failures": report.fetch_failures.len(),
            "damaged": report.damaged.len(),
            "rejected_rows": report.rejects.len(),
        }),
    })
}

fn dedup(ctx: &Ctx, a: &crate::DedupArgs) -> Result<Outcome> {
    let mut store = ctx.open_store()?;
    let inputs = ctx.store_files();
    let threshold = a.threshold.unwrap_or(ctx.cfg.thresholds.near_dup);
    let exact = remove_exact_duplicates(&mut store, &now_timestamp())?;
    let near = find_near_duplicates(store.state(), threshold)?;
    let found = near.len();
    let queued = store.enqueue(near)?;
    Ok(Outcome {
        dir: ctx.store_dir.clone(),
        seed: None,
        inputs,
        outputs: vec![ctx.store_dir.join(DECISIONS_FILE), ctx.store_dir.join(REVIEW_FILE)],
        summary: json!({
            "exact_groups": exact.groups.len(),
            "exact_removed": exact.removed_count(),
            "near_dup_threshold": threshold,
            "near_dup_pairs": found,
            "newly_queued": queued,
        }),
    })
}

fn filter(ctx: &Ctx, a: &crate::FilterArgs) -> Result<Outcome> {
    if !a.fragments && !a.pose {
        bail!("nothing to do: pass --fragments and/or --pose");
    }
    let mut store = ctx.open_store()?;
    let inputs = ctx.store_files();
    let mut summary = serde_json::Map::new();
    if a.fragments {
        let words: Vec<String> = a
            .fragment_keywords
            .clone()
            .unwrap_or_else(|| DEFAULT_FRAGMENT_KEYWORDS.iter().map(|s| s.to_string()).collect());
        let items = flag_fragments(store.state(), &words)?;
        let found = items.len();
        let queued = store.enqueue(items)?;
        summary.insert("fragments".into(), json!({ "keywords": words, "candidates": found, "newly_queued": queued }));
    }
    if a.pose {
        let detector: Box<dyn FigureDetector> = match &a.detector {
            Some(cmd) => Box::new(CommandDetector { command: cmd.clone() }),
            None => Box::new(StubDetector::from_metadata(&a.figures_field)),
        };
        let images_dir = store.images_dir();
        let (found, skipped) = detect_figures(store.state(), detector.as_ref(), images_dir.as_deref());
        let plan = flag_pose_mismatches(store.state(), &found);
        let queued = apply_pose_filter(&mut store, &plan, &now_timestamp())?;
        summary.insert(
            "pose".into(),
            json!({
                "detector": detector.name(),
                "detected": found.len(),
                "skipped": skipped.len(),
                "auto_removed": plan.auto_removals.len(),
                "newly_queued": queued,
            }),
        );
    }
    Ok(Outcome {
        dir: ctx.store_dir.clone(),
        seed: None,
        inputs,
        outputs: vec![ctx.store_dir.join(DECISIONS_FILE), ctx.store_dir.join(REVIEW_FILE)],
        summary: Value::Object(summary),
    })
}

fn label(ctx: &Ctx, a: &crate::LabelArgs) -> Result<Outcome> {
    let mut store = ctx.open_store()?;
    let mut inputs = ctx.store_files();
    let path = a.keywords.clone().or_else(|| ctx.cfg.paths.keywords.clone());
    let config = match &path {
        Some(p) => {
            inputs.push(p.clone());
            KeywordConfig::load(p)?
        }
        None => KeywordConfig::defaults(),
    };
    let labeling = apply_keyword_labels(store.state().active_records(), &config, &MetadataField::ALL)?;
    let labeled = labeling.annotations.iter().filter(|s| !s.is_empty()).count();
    let suggestions = ctx.store_dir.join(SUGGESTIONS_FILE);
    write_jsonl(&suggestions, &labeling.suggestions)?;
    let n_suggestions = labeling.suggestions.len();
    store.set_base_labels(labeling.annotations)?;
    Ok(Outcome {
        dir: ctx.store_dir.clone(),
        seed: None,
        inputs,
        outputs: vec![ctx.store_dir.join(LABELS_FILE), suggestions],
        summary: json!({
            "keywords": path,
            "labeled": labeled,
            "unlabeled": store.state().active_records().count() - labeled,
            "suggestions": n_suggestions,
        }),
    })
}

fn split(ctx: &Ctx, a: &crate::SplitArgs) -> Result<Outcome> {
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| anyhow::anyhow!("--ratios needs three comma-separated values"))?;
    let store = ctx.open_store()?;
    let inputs = ctx.store_files();
    let seed = ctx.cfg.seeds.split;
    let outcome = stratified_split(&store.state().active_annotations(), ratios, seed)?;
    let path = save_splits(&store, &outcome)?;
    let mut sizes = [0usize; 3];
    for s in &outcome.assignments {
        sizes[s.split.index()] += 1;
    }
    Ok(Outcome {
        dir: ctx.store_dir.clone(),
        seed: Some(seed),
        inputs,
        outputs: vec![path],
        summary: json!({
            "ratios": ratios,
            "train": sizes[0],
            "val": sizes[1],
            "test": sizes[2],
            "warnings": outcome.warnings,
        }),
    })
}

fn stats(ctx: &Ctx, a: &crate::StatsArgs) -> Result<Outcome> {
    let store = ctx.open_store()?;
    let inputs = ctx.store_files();
    let summary = service::dataset_stats(&store, a.cooccurrence);
    let path = ctx.reports_dir().join("stats.json");
    write_json(&path, &summary)?;
    Ok(Outcome {
        dir: parent_dir(&path),
        seed: None,
        inputs,
        outputs: vec![path],
        summary,
    })
}

fn pretrain(ctx: &Ctx, a: &crate::PretrainArgs) -> Result<Outcome> {
    let defaults = PretrainConfig::default();
    let cfg = PretrainConfig {
        arch: ctx.cfg.model.backbone.clone(),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        n_per_class: a.n_per_class.unwrap_or(defaults.n_per_class),
        seed: ctx.cfg.seeds.pretrain,
        ..defaults
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.store_dir.join(BACKBONE_FILE));
    let (weights, model) = pretrain_backbone(&cfg)?;
    ensure_parent(&out)?;
    weights.save(&out)?;
    let last = model.training_log.last();
    Ok(Outcome {
        dir: parent_dir(&out),
        seed: Some(cfg.seed),
        inputs: vec![],
        outputs: vec![out.clone()],
        summary: json!({
            "out": out,
            "arch": cfg.arch.name,
            "epochs": cfg.epochs,
            "pretext_val_accuracy": last.and_then(|l| l.val_accuracy),
            "pretext_train_loss": last.map(|l| l.train_loss),
        }),
    })
}

/// Shared by train and ablation: weights, config and inputs for the
/// store's train and val splits.
struct TrainingData {
    config: ModelConfig,
    weights: BackboneWeights,
    inputs: InputSet,
    train: Vec<(String, IconClass)>,
    val: Vec<(String, IconClass)>,
    files: Vec<PathBuf>,
}

fn training_data(ctx: &Ctx, pretrained: &Option<PathBuf>, epochs: Option<usize>) -> Result<TrainingData> {
    let store = ctx.open_store()?;
    let splits = load_splits(&store)?;
    let subset = training_subset(&store, &splits);
    if subset.train.is_empty() {
        bail!("the train split has no single-label images");
    }
    let path = ctx.pretrained_path(pretrained);
    if !path.is_file() {
        bail!("pretrained backbone weights {} not found (run pretrain first)", path.display());
    }
    let weights = BackboneWeights::load(&path)?;
    let stats = channel_stats_for(&store, subset.train.iter().map(|(id, _)| id.as_str()))?;
    let config = ModelConfig {
        channel_stats: stats,
        pretrained: Some(path.clone()),
        epochs: epochs.unwrap_or(ctx.cfg.model.epochs),
        seed: ctx.cfg.seeds.train,
        ..ctx.cfg.model.clone()
    };
    config.validate()?;
    let ids = subset.train.iter().chain(&subset.val).map(|(id, _)| id.as_str());
    let inputs = build_inputs(&store, ids, config.input_size, &config.channel_stats)?;
    let mut files = ctx.store_files();
    files.push(path);
    Ok(TrainingData {
        config,
        weights,
        inputs,
        train: subset.train,
        val: subset.val,
        files,
    })
}

impl TrainingData {
    fn setup(&self, oversample: bool, threshold: f64) -> AblationSetup<'_> {
        AblationSetup {
            config: &self.config,
            weights: &self.weights,
            inputs: &self.inputs,
            train: &self.train,
            val: &self.val,
            oversample,
            threshold,
        }
    }
}

fn train(ctx: &Ctx, a: &crate::TrainArgs) -> Result<Outcome> {
    let level: FreezeLevel = match &a.freeze {
        Some(s) => s.parse()?,
        None => ctx.cfg.model.freeze_level,
    };
    let data = training_data(ctx, &a.pretrained, a.epochs)?;
    let out = ctx.model_path(&a.out);
    let seed = data.config.seed;
    let (model, report) = train_and_evaluate(&data.setup(!a.no_oversample, ctx.cfg.thresholds.decision), level, seed)?;
    ensure_parent(&out)?;
    model.save(&out)?;
    let log = out.with_extension("log.json");
    write_json(&log, &json!({ "training_log": model.training_log, "best_epoch": model.best_epoch, "val": report }))?;
    Ok(Outcome {
        dir: parent_dir(&out),
        seed: Some(seed),
        inputs: data.files,
        outputs: vec![out.clone(), log],
        summary: json!({
            "model": out,
            "checkpoint": model.checkpoint_id(),
            "freeze_level": level,
            "train": data.train.len(),
            "val": data.val.len(),
            "epochs": model.training_log.len(),
            "best_epoch": model.best_epoch,
            "val_means": report.means,
        }),
    })
}

fn eval(ctx: &Ctx, a: &crate::EvalArgs) -> Result<Outcome> {
    let (model_path, model) = ctx.load_model(&a.model)?;
    let split = Split::parse(&a.split).ok_or_else(|| anyhow::anyhow!("unknown split {:?}", a.split))?;
    let store = ctx.open_store()?;
    let splits = load_splits(&store)?;
    let subset = training_subset(&store, &splits);
    let items = subset.get(split);
    if items.is_empty() {
        bail!("the {split} split has no single-label images");
    }
    let threshold = a.threshold.unwrap_or(ctx.cfg.thresholds.decision);
    let inputs = build_inputs(
        &store,
        items.iter().map(|(id, _)| id.as_str()),
        model.config.input_size,
        &model.config.channel_stats,
    )?;
    let refs: Vec<(&str, &Tensor)> = items
        .iter()
        .map(|(id, _)| inputs.get(id).map(|t| (id.as_str(), t)))
        .collect::<iconoforge::Result<_>>()?;
    let preds = model.predict_tensors(&refs, threshold);
    let truths: Vec<Option<IconClass>> = items.iter().map(|(_, c)| Some(*c)).collect();
    let report = evaluate(&preds, &truths, threshold)?;
    let top1 = top1_accuracy(&preds, &items.iter().map(|(_, c)| *c).collect::<Vec<_>>());
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| ctx.reports_dir().join(format!("eval-{split}.json")));
    write_json(
        &out,
        &json!({
            "split": split,
            "model": model.checkpoint_id(),
            "top1_accuracy": top1,
            "report": report,
        }),
    )?;
    let mut inputs = ctx.store_files();
    inputs.push(model_path);
    Ok(Outcome {
        dir: parent_dir(&out),
        seed: None,
        inputs,
        outputs: vec![out.clone()],
        summary: json!({
            "report": out,
            "split": split,
            "n": items.len(),
            "threshold": threshold,
            "means": report.means,
            "top1_accuracy": top1,
        }),
    })
}

fn ablation(ctx: &Ctx, a: &crate::AblationArgs) -> Result<Outcome> {
    let levels: Vec<FreezeLevel> = a.levels.iter().map(|s| s.parse()).collect::<iconoforge::Result<_>>()?;
    let data = training_data(ctx, &a.pretrained, a.epochs)?;
    let runs = ablation_sweep(&data.setup(!a.no_oversample, ctx.cfg.thresholds.decision), &levels, &a.seeds)?;
    let dir = ctx.reports_dir();
    let csv = dir.join("ablation.csv");
    let full = dir.join("ablation.json");
    write_json(&full, &runs)?;
    fs::write(&csv, ablation_csv(&runs)).with_context(|| format!("write {}", csv.display()))?;
    let rows: Vec<Value> = runs
        .iter()
        .map(|r| json!({ "level": r.level, "seed": r.seed, "val_mean_ap": r.report.means.ap, "best_epoch": r.best_epoch }))
        .collect();
    Ok(Outcome {
        dir,
        seed: a.seeds.first().copied(),
        inputs: data.files,
        outputs: vec![csv, full],
        summary: json!({ "runs": rows }),
    })
}

fn cam(ctx: &Ctx, a: &crate::CamArgs) -> Result<Outcome> {
    let (model_path, model) = ctx.load_model(&a.model)?;
    let store = ctx.open_store()?;
    let img = load_record_image(&store, &a.record)?;
    let pred = model.predict_image(&a.record, &img, ctx.cfg.thresholds.decision)?;
    let class = match &a.class {
        Some(code) => code.parse::<IconClass>()?,
        None => pred.top_class(),
    };
    let cam = compute_cam(&pred, class)?;
    let overlay = render_overlay(&img.to_rgb8(), &cam, a.alpha, model.config.channel_stats.mean_rgb8())?;
    let out = a.out.clone().unwrap_or_else(|| {
        ctx.reports_dir()
            .join("cams")
            .join(format!("{}-{}.png", image_file_name(&a.record), class.code()))
    });
    ensure_parent(&out)?;
    overlay.save(&out).with_context(|| format!("write {}", out.display()))?;
    let matrix = out.with_extension("txt");
    write_matrix(&matrix, pred.map_h, pred.map_w, &cam.raw_map)?;
    let mut inputs = ctx.store_files();
    inputs.push(model_path);
    Ok(Outcome {
        dir: parent_dir(&out),
        seed: None,
        inputs,
        outputs: vec![out.clone(), matrix],
        summary: json!({
            "record_id": a.record,
            "class": class.code(),
            "score": pred.score(class),
            "alpha": a.alpha,
            "overlay": out,
        }),
    })
}

fn predict(ctx: &Ctx, a: &crate::PredictArgs) -> Result<Outcome> {
    let (model_path, model) = ctx.load_model(&a.model)?;
    let threshold = a.threshold.unwrap_or(ctx.cfg.thresholds.decision);
    let img = image::ImageReader::open(&a.image)
        .with_context(|| format!("image {}", a.image.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("image {}", a.image.display()))?;
    let id = a.image.display().to_string();
    let pred = model.predict_image(&id, &img, threshold)?;
    fs::create_dir_all(&ctx.store_dir).with_context(|| format!("create {}", ctx.store_dir.display()))?;
    Ok(Outcome {
        dir: ctx.store_dir.clone(),
        seed: None,
        inputs: vec![model_path, a.image.clone()],
        outputs: vec![],
        summary: json!({
            "image": a.image,
            "threshold": threshold,
            "predicted": pred.predicted.map(|c| c.code()),
            "top_class": pred.top_class().code(),
            "scores": scores_by_code(&pred.scores),
        }),
    })
}

fn propose(ctx: &Ctx, a: &crate::ProposeArgs) -> Result<Outcome> {
    let (model_path, model) = ctx.load_model(&a.model)?;
    let mut store = ctx.open_store()?;
    let threshold = a.threshold.unwrap_or(ctx.cfg.thresholds.proposal);
    let ids = active_image_ids(&store);
    let inputs = build_inputs(
        &store,
        ids.iter().map(String::as_str),
        model.config.input_size,
        &model.config.channel_stats,
    )?;
    let proposals = propose_labels(&model, store.state(), &inputs, threshold)?;
    let queued = enqueue_proposals(&mut store, &proposals)?;
    let out = ctx.store_dir.join(PROPOSALS_FILE);
    write_proposals(&out, &proposals)?;
    let mut files = ctx.store_files();
    files.push(model_path);
    Ok(Outcome {
        dir: ctx.store_dir.clone(),
        seed: None,
        inputs: files,
        outputs: vec![out.clone(), ctx.store_dir.join(REVIEW_FILE)],
        summary: json!({
            "threshold": threshold,
            "scanned": ids.len(),
            "proposals": proposals.len(),
            "newly_queued": queued,
            "export": out,
        }),
    })
}

fn prepare_serve(ctx: &Ctx, a: &crate::ServeArgs) -> Result<(Outcome, std::sync::Arc<AppState>, std::net::TcpListener)> {
    let store = ctx.open_store()?;
    let mut inputs = ctx.store_files();
    let model = match &a.model {
        Some(_) => {
            let (path, m) = ctx.load_model(&a.model)?;
            inputs.push(path);
            Some(m)
        }
        None => None,
    };
    let listener = service::bind(std::net::SocketAddr::new(a.host, a.port))?;
    let summary = json!({
        "address": listener.local_addr()?.to_string(),
        "model": model.as_ref().map(|m| m.checkpoint_id()),
        "pending": store.state().pending_items().count(),
    });
    let state = AppState::new(store, model, ctx.cfg.thresholds.decision);
    Ok((
        Outcome {
            dir: ctx.store_dir.clone(),
            seed: None,
            inputs,
            outputs: vec![],
            summary,
        },
        state,
        listener,
    ))
}
