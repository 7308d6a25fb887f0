use std::fs;
use std::path::{Path, PathBuf};

use pipnet::datasets::{generate_to_disk, load_spec, ArtifactSpec, Dataset, DatasetItem, Split, SyntheticSpec};
use pipnet::debugger::{counterfactual_eval, detect_shortcuts, disable, InterventionLog, Thresholds};
use pipnet::explainer::{compute_metrics, explain, export_cards, global_explanation, top_patches_from, Scan};
use pipnet::kv::KvMap;
use pipnet::protomodel::{load_checkpoint, save_checkpoint, ModelConfig, ProtoModel};
use pipnet::trainer::{pretrain_prototypes, train_classifier, LabeledImages, TrainConfig};
use serde_json::json;

use crate::{Command, Common, ModelInput, ThresholdArgs};

/// Marker file naming what produced an output directory.
pub const STAGE_FILE: &str = "stage";
/// Exact configuration a run used, loadable again with `--config`.
pub const RESOLVED_FILE: &str = "resolved.conf";
pub const LOG_FILE: &str = "interventions.jsonl";
const MODEL_PREFIX: &str = "model.";

/// Failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<pipnet::Error> for CliError {
    fn from(e: pipnet::Error) -> Self {
        let kind = match &e {
            pipnet::Error::Shape { .. } => "shape",
            pipnet::Error::InvalidArgument(_) => "invalid_argument",
            pipnet::Error::Precondition(_) => "precondition",
            pipnet::Error::Format { .. } => "format",
            pipnet::Error::Io { .. } => "io",
            pipnet::Error::Image { .. } => "image",
            pipnet::Error::Json(_) => "json",
            pipnet::Error::NonFinite { .. } => "non_finite",
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("json", e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_kv(path: &Path) -> CliResult<KvMap> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(KvMap::parse(&text)?)
}

/// Output directory, created empty unless `--force` allows reuse.
fn prepare_output(common: &Common, required: bool) -> CliResult<Option<PathBuf>> {
    let Some(dir) = common.output.clone() else {
        return if required {
            Err(CliError::new("usage", "this subcommand needs --output"))
        } else {
            Ok(None)
        };
    };
    if dir.exists() {
        let mut entries = fs::read_dir(&dir).map_err(io_err(&dir))?;
        if entries.next().is_some() && !common.force {
            return Err(CliError::new(
                "output_exists",
                format!("output directory {} is not empty; pass --force to overwrite", dir.display()),
            ));
        }
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(Some(dir))
}

/// Writes the resolved config and the stage marker.
fn finish_output(dir: &Path, resolved: &KvMap, stage: &str) -> CliResult<()> {
    write(&dir.join(RESOLVED_FILE), resolved.to_text())?;
    write(&dir.join(STAGE_FILE), format!("{stage}\n"))
}

fn user_config(common: &Common) -> CliResult<KvMap> {
    match &common.config {
        Some(p) => read_kv(p),
        None => Ok(KvMap::new()),
    }
}

/// Splits a run config into model keys (prefixed `model.`) and training keys.
fn split_config(kv: &KvMap) -> (KvMap, KvMap) {
    let (mut model, mut train) = (KvMap::new(), KvMap::new());
    for k in kv.keys() {
        let v = kv.get(k).unwrap_or_default();
        match k.strip_prefix(MODEL_PREFIX) {
            Some(m) => model.set(m, v),
            None => train.set(k, v),
        }
    }
    (model, train)
}

fn train_config(common: &Common, kv: &KvMap) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default().apply_kv(kv)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.is_dir() {
        return Err(CliError::new(
            "precondition",
            format!("no dataset at {}; run `pipnet gen-data --output {}` first", path.display(), path.display()),
        ));
    }
    Ok(Dataset::load(path)?)
}

fn stage_of(dir: &Path) -> Option<String> {
    fs::read_to_string(dir.join(STAGE_FILE)).ok().map(|s| s.trim().to_string())
}

fn load_model(dir: &Path) -> CliResult<ProtoModel> {
    match stage_of(dir).as_deref() {
        Some("pretrained" | "trained" | "adapted") => Ok(load_checkpoint(dir)?),
        _ => Err(CliError::new(
            "precondition",
            format!("{} is not a model checkpoint; run `pipnet pretrain` first", dir.display()),
        )),
    }
}

fn nonempty<'a>(ds: &'a Dataset, split: Split) -> CliResult<Vec<&'a DatasetItem>> {
    let items = ds.split(split);
    if items.is_empty() {
        return Err(CliError::new("precondition", format!("the dataset has no {} images", split.dir())));
    }
    Ok(items)
}

fn artifact_spec(dataset: &Path) -> CliResult<ArtifactSpec> {
    Ok(load_spec(dataset)?.map(|s| s.artifact).unwrap_or_default())
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

pub fn run(command: Command, common: &Common) -> CliResult<()> {
    match command {
        Command::GenData { spec } => gen_data(common, &spec),
        Command::Pretrain { dataset } => pretrain(common, &dataset),
        Command::Train { checkpoint, dataset } => train(common, &checkpoint, &dataset),
        Command::Eval { input, subset } => eval(common, &input, &subset),
        Command::Explain { input, k } => explain_cmd(common, &input, k),
        Command::DetectShortcuts { input, thresholds } => detect(common, &input, &thresholds),
        Command::Disable {
            checkpoint,
            prototypes,
            actor,
        } => disable_cmd(common, &checkpoint, &prototypes, &actor),
        Command::Counterfactual {
            input,
            prototypes,
            thresholds,
        } => counterfactual(common, &input, prototypes, &thresholds),
        Command::Serve { input, addr, log } => serve(common, &input, addr, log),
    }
}

fn gen_data(common: &Common, spec_arg: &str) -> CliResult<()> {
    let mut spec = SyntheticSpec::default();
    if spec_arg != "default" {
        spec = spec.apply_kv(&read_kv(Path::new(spec_arg))?)?;
    }
    spec = spec.apply_kv(&user_config(common)?)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let out = prepare_output(common, true)?.expect("required");
    let (ds, _) = generate_to_disk(&spec, &out)?;
    finish_output(&out, &spec.to_kv(), "data")?;
    print_json(&json!({ "output": out, "images": ds.len(), "with_artifact": ds.items.iter().filter(|i| i.has_artifact()).count() }));
    Ok(())
}

fn pretrain(common: &Common, dataset: &Path) -> CliResult<()> {
    let (model_kv, train_kv) = split_config(&user_config(common)?);
    let model_cfg = ModelConfig::default().apply_kv(&model_kv)?;
    let cfg = train_config(common, &train_kv)?;
    let ds = load_dataset(dataset)?;
    let out = prepare_output(common, true)?.expect("required");
    let train = LabeledImages::from_items(nonempty(&ds, Split::Train)?);
    let mut model = ProtoModel::new(model_cfg.clone(), cfg.seed)?;
    let log = pretrain_prototypes(&mut model, &train.images, &cfg)?;
    save_checkpoint(&model, &out)?;
    let mut csv = String::from("updates,align,anticollapse\n");
    for (u, a, c) in &log.windows {
        csv.push_str(&format!("{u},{a},{c}\n"));
    }
    write(&out.join("pretrain_log.csv"), csv)?;
    let mut resolved = cfg.to_kv();
    for k in model_cfg.to_kv().keys() {
        resolved.set(&format!("{MODEL_PREFIX}{k}"), model_cfg.to_kv().get(k).unwrap_or_default());
    }
    finish_output(&out, &resolved, "pretrained")?;
    print_json(&json!({ "output": out, "updates": cfg.pretrain_updates, "last_window": log.windows.last() }));
    Ok(())
}

fn train(common: &Common, checkpoint: &Path, dataset: &Path) -> CliResult<()> {
    let (model_kv, train_kv) = split_config(&user_config(common)?);
    let mut model = match stage_of(checkpoint).as_deref() {
        Some("pretrained" | "trained" | "adapted") => load_checkpoint(checkpoint)?,
        _ => {
            return Err(CliError::new(
                "precondition",
                format!(
                    "train needs a pretrained checkpoint, but {} has none; run `pipnet pretrain --dataset <dir> --output {}` first",
                    checkpoint.display(),
                    checkpoint.display()
                ),
            ))
        }
    };
    if model_kv.keys().next().is_some() {
        // the architecture is fixed by the checkpoint
        let merged = model.config().clone().apply_kv(&model_kv)?;
        if &merged != model.config() {
            return Err(CliError::new(
                "invalid_argument",
                "model.* keys differ from the checkpoint's architecture; they only apply to pretrain",
            ));
        }
    }
    let cfg = train_config(common, &train_kv)?;
    let ds = load_dataset(dataset)?;
    let out = prepare_output(common, true)?.expect("required");
    let train_set = LabeledImages::from_items(nonempty(&ds, Split::Train)?);
    let test_items = nonempty(&ds, Split::Test)?;
    let test_set = LabeledImages::from_items(test_items.iter().copied());
    let curve = train_classifier(&mut model, &train_set, &test_set, &cfg)?;
    save_checkpoint(&model, &out)?;
    write(&out.join("curve.csv"), curve.to_csv())?;
    let metrics = compute_metrics(&model, &test_items, cfg.positive_class)?;
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    finish_output(&out, &cfg.to_kv(), "trained")?;
    print_json(&json!({ "output": out, "metrics": metrics }));
    Ok(())
}

fn eval(common: &Common, input: &ModelInput, subset: &str) -> CliResult<()> {
    let split = Split::parse(subset)
        .ok_or_else(|| CliError::new("invalid_argument", format!("unknown subset {subset:?}")))?;
    let cfg = train_config(common, &user_config(common)?)?;
    let model = load_model(&input.checkpoint)?;
    let ds = load_dataset(&input.dataset)?;
    let out = prepare_output(common, false)?;
    let metrics = compute_metrics(&model, &nonempty(&ds, split)?, cfg.positive_class)?;
    if let Some(out) = out {
        write(&out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        finish_output(&out, &cfg.to_kv(), "eval")?;
    }
    print_json(&serde_json::to_value(&metrics)?);
    Ok(())
}

fn explain_cmd(common: &Common, input: &ModelInput, k: usize) -> CliResult<()> {
    let model = load_model(&input.checkpoint)?;
    let ds = load_dataset(&input.dataset)?;
    let out = prepare_output(common, true)?.expect("required");
    let train = nonempty(&ds, Split::Train)?;
    let scan = Scan::new(&model, &train)?;
    let global = global_explanation(&model);
    let cards = global
        .iter()
        .map(|g| top_patches_from(&model, &scan, g.prototype, k))
        .collect::<Result<Vec<_>, _>>()?;
    export_cards(&cards, |id| ds.get(id).map(|i| i.image.clone()), &out.join("patches"))?;
    write(&out.join("global.json"), serde_json::to_string_pretty(&global)?)?;
    let test = ds.split(Split::Test);
    let mut lines = String::new();
    if !test.is_empty() {
        let test_scan = Scan::new(&model, &test)?;
        for (id, pred) in test_scan.ids.iter().zip(test_scan.predictions(&model)) {
            let e = explain(&model, &pred)?;
            lines.push_str(&json!({ "image": id, "explanation": e }).to_string());
            lines.push('\n');
        }
    }
    write(&out.join("local.jsonl"), lines)?;
    let mut resolved = KvMap::new();
    resolved.set("k", k);
    finish_output(&out, &resolved, "explain")?;
    print_json(&json!({ "output": out, "global_size": global.len(), "local_explanations": test.len() }));
    Ok(())
}

fn thresholds(t: &ThresholdArgs) -> Thresholds {
    Thresholds {
        presence: t.presence_thr,
        overlap: t.overlap_thr,
    }
}

fn threshold_kv(t: &Thresholds) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("presence_thr", t.presence);
    kv.set("overlap_thr", t.overlap);
    kv
}

fn detect(common: &Common, input: &ModelInput, t: &ThresholdArgs) -> CliResult<()> {
    let thr = thresholds(t);
    let model = load_model(&input.checkpoint)?;
    let ds = load_dataset(&input.dataset)?;
    let out = prepare_output(common, false)?;
    let report = detect_shortcuts(&model, &nonempty(&ds, Split::Train)?, thr)?;
    let value = json!({ "flagged": report.flagged(), "report": report });
    if let Some(out) = out {
        write(&out.join("shortcuts.json"), serde_json::to_string_pretty(&value)?)?;
        finish_output(&out, &threshold_kv(&thr), "shortcuts")?;
    }
    print_json(&value);
    Ok(())
}

fn disable_cmd(common: &Common, checkpoint: &Path, ids: &[usize], actor: &str) -> CliResult<()> {
    let mut model = load_model(checkpoint)?;
    let out = prepare_output(common, true)?.expect("required");
    let log_path = out.join(LOG_FILE);
    let previous = checkpoint.join(LOG_FILE);
    if previous.exists() && previous != log_path {
        fs::copy(&previous, &log_path).map_err(io_err(&previous))?;
    }
    let mut log = InterventionLog::open(&log_path)?;
    let changed = disable(&mut model, ids, &mut log, actor)?;
    save_checkpoint(&model, &out)?;
    let mut resolved = KvMap::new();
    let list: Vec<String> = ids.iter().map(usize::to_string).collect();
    resolved.set("prototypes", list.join(","));
    resolved.set("actor", actor);
    finish_output(&out, &resolved, "adapted")?;
    print_json(&json!({
        "output": out,
        "changed": changed,
        "disabled": model.sheet().disabled(),
        "global_size": model.sheet().global_size(),
    }));
    Ok(())
}

fn counterfactual(
    common: &Common,
    input: &ModelInput,
    prototypes: Option<Vec<usize>>,
    t: &ThresholdArgs,
) -> CliResult<()> {
    let thr = thresholds(t);
    let cfg = train_config(common, &user_config(common)?)?;
    let model = load_model(&input.checkpoint)?;
    let ds = load_dataset(&input.dataset)?;
    let out = prepare_output(common, false)?;
    let ids = match prototypes {
        Some(ids) => ids,
        None => detect_shortcuts(&model, &nonempty(&ds, Split::Train)?, thr)?.flagged(),
    };
    let test = nonempty(&ds, Split::Test)?;
    let artifact = artifact_spec(&input.dataset)?;
    let report = counterfactual_eval(&model, &test, &artifact, cfg.positive_class, &ids, cfg.seed)?;
    if let Some(out) = out {
        write(&out.join("counterfactual.json"), serde_json::to_string_pretty(&report)?)?;
        let mut resolved = cfg.to_kv();
        resolved.merge(&threshold_kv(&thr));
        finish_output(&out, &resolved, "counterfactual")?;
    }
    print_json(&serde_json::to_value(&report)?);
    Ok(())
}

fn serve(common: &Common, input: &ModelInput, addr: std::net::SocketAddr, log: Option<PathBuf>) -> CliResult<()> {
    let cfg = train_config(common, &user_config(common)?)?;
    load_model(&input.checkpoint)?;
    let config = pipnet_workbench::ServeConfig {
        checkpoint: input.checkpoint.clone(),
        dataset: input.dataset.clone(),
        addr,
        log_path: log,
        positive_class: cfg.positive_class,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e.to_string()))?;
    runtime
        .block_on(pipnet_workbench::serve(config))
        .map_err(|e| CliError::new("serve", e.to_string()))
}
