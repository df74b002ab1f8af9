use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use logitmix_core::bundle::{load_manifest, validate_bundle};
use logitmix_core::calibration::{
    calibrated_confidence, calibrated_log_avg, calibration_data, fit_temperatures, TemperatureVector,
};
use logitmix_core::cascade::{
    cascade_cost, cascade_data, order_backbones, train_prefix_controllers, CascadeCombiner,
    CascadeOrder,
};
use logitmix_core::combine::{confidence_select, log_avg, vote_top1, vote_top3};
use logitmix_core::fewshot::{probe_fit, probe_logits, sample_shots, LinearProbe, ProbeConfig};
use logitmix_core::fixed::{combine_fixed, gac_fit, sl_fit, FixedTempsModel, GacConfig, SlConfig};
use logitmix_core::metrics::{
    diversity, oracle_accuracy, overlap_table, prediction_accuracy, relative_improvement, top1,
    CorrectnessMask,
};
use logitmix_core::nlc::{nlc_predict, nlc_train, NlcModel, NlcTrainConfig, OutputActivation};
use logitmix_core::npy::{load_labels, load_npy, save_labels, save_npy};
use logitmix_core::report::{build_report, ReportRow};
use logitmix_core::synth::{synth_generate, SynthConfig};
use logitmix_core::{DatasetBundle, Labels, Matrix, SplitData};
use serde_json::json;

use crate::{
    Analysis, AnalyzeArgs, CalibrateArgs, CascadeArgs, CascadeCombinerArg, Command, EnsembleArgs,
    EnsembleMethod, FewshotArgs, OutputFormat, Positivity, PredictArgs, ReportArgs, ReportFormat,
    SynthArgs, TrainArgs, TrainMethod,
};

macro_rules! say {
    ($($t:tt)*) => {
        writeln!(std::io::stdout().lock(), $($t)*)?
    };
}

macro_rules! sayn {
    ($($t:tt)*) => {
        write!(std::io::stdout().lock(), $($t)*)?
    };
}

/// An invocation that is well-formed for the parser but not usable.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Validate { manifest } => validate(&manifest),
        Command::Analyze(a) => analyze(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Cascade(a) => cascade(a),
        Command::FewshotSplit(a) => fewshot_split(a),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast::<Invalid>() {
        Ok(Invalid) => Ok(ExitCode::from(1)),
        Err(e) => Err(e),
    })
}

/// Failure already reported on stdout.
#[derive(Debug)]
struct Invalid;

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid bundle")
    }
}

impl std::error::Error for Invalid {}

fn open(path: &Path) -> Result<DatasetBundle> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            sayn!("{text}");
            Ok(())
        }
    }
}

fn best_single(data: &SplitData) -> Result<f64> {
    let mut best = 0.0f64;
    for block in data.stack.blocks() {
        best = best.max(prediction_accuracy(&top1(block)?, &data.labels)?);
    }
    Ok(best)
}

fn write_row(
    path: Option<&Path>,
    bundle: &DatasetBundle,
    method: &str,
    split: &str,
    data: &SplitData,
    accuracy: f64,
    gflops: Option<f64>,
) -> Result<()> {
    if let Some(path) = path {
        let row = ReportRow::new(&bundle.name, method, split, accuracy, best_single(data)?, gflops);
        write(path, &serde_json::to_string_pretty(&row)?)?;
    }
    Ok(())
}

fn logits_only(bundle: &DatasetBundle, split: &str) -> Result<SplitData> {
    let stack = bundle.load_logits(split)?;
    let labels = bundle.load_labels(split)?;
    if labels.len() != stack.rows() {
        bail!("{split}: {} labels for {} logit rows", labels.len(), stack.rows());
    }
    Ok(SplitData {
        stack,
        labels,
        features: None,
    })
}

fn validate(manifest: &Path) -> Result<()> {
    let bundle = open(manifest)?;
    let report = validate_bundle(&bundle);
    if report.is_empty() {
        say!("ok");
        Ok(())
    } else {
        sayn!("{report}");
        Err(Invalid.into())
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let bundle = open(&a.manifest)?;
    let data = logits_only(&bundle, &a.split)?;
    let masks = data
        .stack
        .blocks()
        .iter()
        .zip(bundle.backbone_names())
        .map(|(m, name)| CorrectnessMask::from_logits(name, m, &data.labels))
        .collect::<logitmix_core::Result<Vec<_>>>()?;
    let scalar = |key: &str, value: f64| match a.format {
        OutputFormat::Text => format!("{key}={value}\n"),
        OutputFormat::Json => format!("{}\n", json!({ key: value, "split": a.split })),
        OutputFormat::Csv => format!("{key}\n{value}\n"),
    };
    let text = match a.analysis {
        Analysis::Oracle => scalar("oracle_accuracy", oracle_accuracy(&masks)?),
        Analysis::Diversity => scalar("diversity", diversity(&masks)?),
        Analysis::Overlap => {
            let table = overlap_table(&masks)?;
            match a.format {
                OutputFormat::Json => serde_json::to_string_pretty(&table)? + "\n",
                _ => table.to_csv(),
            }
        }
        Analysis::Improvement => {
            let method = match (&a.preds, a.accuracy) {
                (Some(p), _) => prediction_accuracy(&load_labels(p)?, &data.labels)?,
                (None, Some(acc)) => acc,
                (None, None) => return Err(usage("improvement needs --preds or --accuracy")),
            };
            scalar("relative_improvement", relative_improvement(method, best_single(&data)?)?)
        }
    };
    emit(a.out.as_deref(), &text)
}

fn read_temps(path: Option<&Path>, bundle: &DatasetBundle) -> Result<TemperatureVector> {
    let path = path.ok_or_else(|| usage("calibrated combiners need --temps"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TemperatureVector::from_json(&text, &bundle.backbone_names())?)
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let bundle = open(&a.manifest)?;
    let data = logits_only(&bundle, &a.split)?;
    let stack = if a.zscore { data.stack.zscored() } else { data.stack.clone() };
    let preds = match a.method {
        EnsembleMethod::Logavg => top1(&log_avg(&stack))?,
        EnsembleMethod::Vote1 => vote_top1(&stack),
        EnsembleMethod::Vote3 => vote_top3(&stack)?,
        EnsembleMethod::Conf => confidence_select(&stack),
        EnsembleMethod::Clogavg => {
            top1(&calibrated_log_avg(&stack, &read_temps(a.temps.as_deref(), &bundle)?)?)?
        }
        EnsembleMethod::Cconf => calibrated_confidence(&stack, &read_temps(a.temps.as_deref(), &bundle)?)?,
    };
    let acc = prediction_accuracy(&preds, &data.labels)?;
    save_labels(&preds, &a.out)?;
    say!("accuracy={acc}");
    let method = format!("{:?}", a.method).to_lowercase();
    write_row(a.report.as_deref(), &bundle, &method, &a.split, &data, acc, None)
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let bundle = open(&a.manifest)?;
    let (data, split) = match a.split {
        Some(split) => (logits_only(&bundle, &split)?, split),
        None if bundle.has_split("val") => (logits_only(&bundle, "val")?, "val".to_string()),
        None => {
            let seed = a
                .seed
                .ok_or_else(|| usage("no val split: --seed is required for the train holdout"))?;
            calibration_data(&bundle, seed)?
        }
    };
    let temps = fit_temperatures(&data.stack, &data.labels, &bundle.backbone_names(), &split)?;
    write(&a.out, &temps.to_json())?;
    for (name, t) in temps.names.iter().zip(&temps.temps) {
        say!("{name}={t}");
    }
    Ok(())
}

fn shot_subset(data: SplitData, shots: Option<usize>, seed: u64) -> Result<SplitData> {
    match shots {
        None => Ok(data),
        Some(n) => Ok(data.select(&sample_shots(&data.labels, n, seed)?.indices)),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let bundle = open(&a.manifest)?;
    let shots_seed = a.shots_seed.unwrap_or(a.seed);
    match a.method {
        TrainMethod::Gac | TrainMethod::Sl => {
            let split = a.split.clone().unwrap_or_else(|| {
                if bundle.has_split("val") { "val" } else { "train" }.to_string()
            });
            let data = shot_subset(logits_only(&bundle, &split)?, a.shots, shots_seed)?;
            let (fit, config) = if a.method == TrainMethod::Gac {
                let mut cfg = GacConfig {
                    seed: a.seed,
                    ..GacConfig::default()
                };
                if let Some(p) = a.population {
                    cfg.population = p;
                }
                if let Some(g) = a.generations {
                    cfg.generations = g;
                }
                (gac_fit(&data.stack, &data.labels, &cfg)?, serde_json::to_value(&cfg)?)
            } else {
                let mut cfg = SlConfig {
                    seed: a.seed,
                    ..SlConfig::default()
                };
                if let Some(s) = a.steps {
                    cfg.steps = s;
                }
                if let Some(lr) = a.lr {
                    cfg.learning_rate = lr;
                }
                (sl_fit(&data.stack, &data.labels, &cfg)?, serde_json::to_value(&cfg)?)
            };
            let method = if a.method == TrainMethod::Gac { "gac" } else { "sl" };
            let model = FixedTempsModel::new(method, bundle.backbone_names(), &fit, config);
            write(&a.out, &model.to_json())?;
            say!("val_loss={}", fit.loss);
        }
        TrainMethod::Nlc => {
            let split = a.split.clone().unwrap_or_else(|| "train".to_string());
            if !bundle.has_features(&split) {
                let missing = bundle
                    .backbones
                    .iter()
                    .find(|b| !b.features.as_ref().is_some_and(|f| f.contains_key(&split)))
                    .map(|b| b.name.clone())
                    .unwrap_or_default();
                return Err(logitmix_core::Error::MissingFeatures(missing).into());
            }
            let data = shot_subset(bundle.load_split(&split)?, a.shots, shots_seed)?;
            let defaults = NlcTrainConfig::default();
            let cfg = NlcTrainConfig {
                learning_rate: a.lr.unwrap_or(defaults.learning_rate),
                weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
                coupled_decay: a.coupled_decay,
                epochs: a.epochs.unwrap_or(defaults.epochs),
                batch_size: a.batch_size.unwrap_or(defaults.batch_size),
                holdout_fraction: a.holdout.unwrap_or(defaults.holdout_fraction),
                patience: a.patience.unwrap_or(defaults.patience),
                hidden_dim: a.hidden.unwrap_or(defaults.hidden_dim),
                normalize: !a.no_normalize,
                output: match a.positivity {
                    Positivity::Softplus => OutputActivation::Softplus,
                    Positivity::Linear => OutputActivation::Linear,
                },
                seed: a.seed,
            };
            let (model, history) = nlc_train(&data, &bundle.backbone_names(), &cfg)?;
            write(&a.out, &model.to_json())?;
            if let Some(h) = &a.history {
                write(h, &serde_json::to_string_pretty(&history)?)?;
            }
            let best = history.iter().map(|r| r.holdout_accuracy).fold(0.0, f64::max);
            say!("epochs={} holdout_accuracy={best}", history.len() - 1);
        }
        TrainMethod::Probe => {
            let name = a
                .backbone
                .as_deref()
                .ok_or_else(|| usage("probe training needs --backbone"))?;
            let b = bundle.backbone_index(name)?;
            let split = a.split.clone().unwrap_or_else(|| "train".to_string());
            let labels = bundle.load_labels(&split)?;
            let features = bundle.load_features(&split)?.swap_remove(b);
            if features.rows() != labels.len() {
                bail!("{split}: {} labels for {} feature rows", labels.len(), features.rows());
            }
            let (features, labels) = match a.shots {
                Some(n) => {
                    let idx = sample_shots(&labels, n, shots_seed)?.indices;
                    (features.select_rows(&idx), labels.select(&idx))
                }
                None => (features, labels),
            };
            let init = bundle.backbones[b].probe_init.as_ref().map(load_npy).transpose()?;
            let defaults = ProbeConfig::default();
            let cfg = ProbeConfig {
                learning_rate: a.lr.unwrap_or(defaults.learning_rate),
                epochs: a.epochs.unwrap_or(defaults.epochs),
            };
            let (probe, _) = probe_fit(name, &features, &labels, bundle.num_classes, init.as_ref(), &cfg)?;
            write(&a.out, &probe.to_json())?;
            say!("final_loss={}", probe.final_loss);
        }
    }
    Ok(())
}

/// Combined logits of a saved model on one split.
fn model_logits(text: &str, bundle: &DatasetBundle, split: &str) -> Result<(String, Matrix, SplitData)> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| logitmix_core::Error::SchemaViolation(e.to_string()))?;
    match value.get("type").and_then(|t| t.as_str()) {
        Some("nlc") => {
            let model = NlcModel::from_json(text)?;
            model.check_bundle(bundle)?;
            let data = bundle.load_split(split)?;
            let z = nlc_predict(&model, &data.stack, data.features_or_err()?)?;
            Ok(("nlc".into(), z, data))
        }
        Some("fixed-temps") => {
            let model = FixedTempsModel::from_json(text)?;
            if model.backbones != bundle.backbone_names() {
                return Err(logitmix_core::Error::DimMismatchOnLoad(format!(
                    "model backbones {:?}, bundle backbones {:?}",
                    model.backbones,
                    bundle.backbone_names()
                ))
                .into());
            }
            let data = logits_only(bundle, split)?;
            Ok((model.method.clone(), combine_fixed(&data.stack, &model.temps)?, data))
        }
        Some("probe") => {
            let probe = LinearProbe::from_json(text)?;
            let b = bundle.backbone_index(&probe.backbone)?;
            let mut data = logits_only(bundle, split)?;
            let features = bundle.load_features(split)?.swap_remove(b);
            let z = probe_logits(&probe, &features)?;
            data.features = None;
            Ok((format!("probe-{}", probe.backbone), z, data))
        }
        other => Err(logitmix_core::Error::SchemaViolation(format!("unknown model type {other:?}")).into()),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let bundle = open(&a.manifest)?;
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let (method, z, data) = model_logits(&text, &bundle, &a.split)?;
    let preds = top1(&z)?;
    let acc = prediction_accuracy(&preds, &data.labels)?;
    save_labels(&preds, &a.out)?;
    if let Some(p) = &a.logits {
        save_npy(&z, p)?;
    }
    say!("accuracy={acc}");
    write_row(a.report.as_deref(), &bundle, &method, &a.split, &data, acc, None)
}

fn cascade(a: CascadeArgs) -> Result<()> {
    let bundle = open(&a.manifest)?;
    let policy = if a.order == "gflops" {
        CascadeOrder::GflopsAscending
    } else {
        CascadeOrder::Explicit(a.order.split(',').map(|s| s.trim().to_string()).collect())
    };
    let order = order_backbones(&bundle, &policy)?;
    let names = bundle.backbone_names();
    let (combiner, data) = match a.combiner {
        CascadeCombinerArg::Logavg => (CascadeCombiner::LogAvg, logits_only(&bundle, &a.split)?),
        CascadeCombinerArg::CLogavg => (
            CascadeCombiner::CalibratedLogAvg(Some(read_temps(a.temps.as_deref(), &bundle)?)),
            logits_only(&bundle, &a.split)?,
        ),
        CascadeCombinerArg::NlcPerPrefix => {
            let seed = a
                .seed
                .ok_or_else(|| usage("nlc-per-prefix trains controllers and needs --seed"))?;
            let train = shot_subset(bundle.load_split("train")?, a.shots, seed)?;
            let cfg = NlcTrainConfig {
                seed,
                ..NlcTrainConfig::default()
            };
            let models = train_prefix_controllers(&train, &names, &order, &cfg)?;
            (CascadeCombiner::NlcPerPrefix(models), bundle.load_split(&a.split)?)
        }
    };
    let gflops: Vec<f64> = bundle.backbones.iter().map(|b| b.gflops).collect();
    let thresholds: Vec<f64> = if a.sweep {
        (0..=20).map(|k| k as f64 / 20.0).collect()
    } else {
        vec![a.threshold]
    };
    say!("threshold,accuracy,avg_gflops");
    let mut last = None;
    for &t in &thresholds {
        let trace = cascade_data(&data, &names, &gflops, &order, t, &combiner)?;
        let acc = prediction_accuracy(&trace.predictions(), &data.labels)?;
        let cost = cascade_cost(&trace);
        say!("{t},{acc},{cost}");
        last = Some((trace, acc, cost));
    }
    let (trace, acc, cost) = last.expect("at least one threshold");
    if let Some(out) = &a.out {
        write(out, &trace.to_json())?;
    }
    let method = format!("cascade-{}", combiner.name());
    write_row(a.report.as_deref(), &bundle, &method, &a.split, &data, acc, Some(cost))
}

fn fewshot_split(a: FewshotArgs) -> Result<()> {
    let bundle = open(&a.manifest)?;
    let labels = bundle.load_labels(&a.split)?;
    let sample = sample_shots(&labels, a.shots, a.seed)?;
    save_labels(&Labels(sample.indices.clone()), &a.out)?;
    say!("indices={}", sample.indices.len());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let accuracies = match a.acc.len() {
        1 => vec![a.acc[0]; a.backbones],
        n if n == a.backbones => a.acc.clone(),
        n => return Err(usage(format!("--acc has {n} values for {} backbones", a.backbones))),
    };
    let cfg = SynthConfig {
        classes: a.classes,
        n_train: a.n,
        n_test: a.n_test.unwrap_or(a.n),
        n_val: a.n_val,
        accuracies,
        rho: a.rho,
        reliable_acc: a.reliable_acc,
        margin: a.margin,
        feature_dim: a.feature_dim,
        cue_strength: a.cue,
        gflops: a.gflops.clone(),
        seed: a.seed,
    };
    synth_generate(&cfg, &a.out)?;
    say!("{}", a.out.join("manifest.json").display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut paths: Vec<_> = fs::read_dir(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in &paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        if let Ok(row) = serde_json::from_str::<ReportRow>(&text) {
            rows.push(row);
        } else if let Ok(many) = serde_json::from_str::<Vec<ReportRow>>(&text) {
            rows.extend(many);
        }
    }
    if rows.is_empty() {
        bail!("no result rows found in {}", a.input.display());
    }
    let report = build_report(rows);
    let text = match a.format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json() + "\n",
        ReportFormat::Markdown => report.to_markdown(),
    };
    emit(a.out.as_deref(), &text)
}
