use std::fs;
use std::path::{Path, PathBuf};

use jkoflow::checkpoint::{load_model, train_checkpointed};
use jkoflow::datagen::{
    corrupt, make_potential_dataset, make_trajectory_dataset, Split, StyblinskiForm, TrajectoryKind,
};
use jkoflow::energy::{energy_grid, GridSpec};
use jkoflow::metrics::{
    class_histogram, hellinger, knn_classify, l1_histogram, prediction_loss_per_step, report_records, write_records_csv,
    write_records_json, MetricRecord,
};
use jkoflow::trainer::{predict_trajectory, Model, ModelKind, PredictMode};
use jkoflow::{load_dataset, save_dataset, GeneratorInfo, SnapshotDataset};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{Common, EvaluateArgs, ExportGridArgs, GenerateArgs, PredictArgs, TrainArgs};

const CONFIG_ECHO: &str = "resolved_config.toml";

fn base_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn parse<T: std::str::FromStr<Err = jkoflow::Error>>(s: &str) -> CliResult<T> {
    s.parse::<T>().map_err(|e| CliError::Config(e.to_string()))
}

fn parse_mode(s: &str) -> CliResult<PredictMode> {
    match s {
        "one-step" => Ok(PredictMode::OneStep),
        "all-steps" => Ok(PredictMode::AllSteps),
        other => Err(CliError::Config(format!("unknown mode {other:?}"))),
    }
}

fn mode_name(m: PredictMode) -> &'static str {
    match m {
        PredictMode::OneStep => "one-step",
        PredictMode::AllSteps => "all-steps",
    }
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    let g = &mut cfg.generate;
    if let Some(v) = a.kind {
        g.kind = v;
    }
    if let Some(v) = a.n_points {
        g.n_points = v;
    }
    if let Some(v) = a.sd {
        g.sd = v;
    }
    if let Some(v) = a.split {
        g.split = v;
    }
    if let Some(v) = a.corrupt_fraction {
        g.corrupt_fraction = v;
    }
    if let Some(v) = a.noise_scale {
        g.noise_scale = v;
    }
    if let Some(v) = a.styblinski_form {
        g.potential.styblinski_form = match v.as_str() {
            "printed" => StyblinskiForm::Printed,
            "classical" => StyblinskiForm::Classical,
            other => return Err(CliError::Config(format!("unknown styblinski form {other:?}"))),
        };
    }
    let g = &cfg.generate;
    let seed = cfg.seed;
    let mut ds = match g.kind.as_str() {
        "quadratic" | "styblinski" => {
            if g.split != "train" {
                log::info!("potential datasets ignore the split; use a different seed for held-out data");
            }
            make_potential_dataset(parse(&g.kind)?, g.n_points, seed, &g.potential)?
        }
        _ => {
            let kind: TrajectoryKind = parse(&g.kind)?;
            let split: Split = parse(&g.split)?;
            make_trajectory_dataset(kind, g.n_points, g.sd, seed, split)?
        }
    };
    if g.corrupt_fraction > 0.0 {
        ds = corrupt(&ds, g.corrupt_fraction, g.noise_scale, seed.wrapping_add(0x5eed))?;
    }
    ensure_dir(&a.out)?;
    cfg.echo(&a.out.join(CONFIG_ECHO))?;
    save_dataset(&ds, &a.out)?;
    log::info!(
        "wrote {} snapshots of {} points to {}",
        ds.snapshots().len(),
        ds.snapshots()[0].len(),
        a.out.display()
    );
    Ok(())
}

fn load_all(dirs: &[PathBuf]) -> CliResult<Vec<SnapshotDataset>> {
    dirs.iter().map(|d| load_dataset(d).map_err(CliError::from)).collect()
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    let kind: ModelKind = parse(&a.model)?;
    let t = &mut cfg.train;
    t.seed = cfg.seed;
    if a.teacher_forcing {
        t.teacher_forcing = true;
    }
    if let Some(v) = a.tau {
        t.jko.tau = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.strong_convexity {
        t.jko.strong_convexity = v;
    }
    cfg.train.validate()?;
    let data = load_all(&a.data)?;
    ensure_dir(&a.out)?;
    cfg.echo(&a.out.join(CONFIG_ECHO))?;
    let out = train_checkpointed(kind, &data, &cfg.train, &a.out)?;
    let unconverged = out.log.iter().filter(|l| !l.inner_converged).count();
    log::info!(
        "{} outer steps, final epoch loss {:.6}, {} inner solves hit the iteration cap",
        out.log.len(),
        out.epoch_losses.last().copied().unwrap_or(f64::NAN),
        unconverged
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Model> {
    load_model(path).map_err(CliError::from)
}

/// Per-step class distances between predictions labelled by kNN on the
/// true snapshot and the true labels.
fn class_records(
    preds: &[jkoflow::PointCloud],
    ds: &SnapshotDataset,
    labels: &[Vec<u32>],
    k: usize,
    mode: &str,
    seed: u64,
) -> CliResult<Vec<MetricRecord>> {
    let n_classes = labels.iter().flatten().max().map_or(0, |&m| m as usize + 1);
    let mut out = Vec::new();
    for t in 1..preds.len() {
        let truth = &ds.snapshots()[t];
        let k = k.min(truth.len());
        let predicted = knn_classify(truth, &labels[t], &preds[t], k)?;
        let hp = class_histogram(&predicted, n_classes)?;
        let ht = class_histogram(&labels[t], n_classes)?;
        out.push(MetricRecord::new("hellinger", mode, t, hellinger(&hp, &ht)?, seed));
        out.push(MetricRecord::new("l1", mode, t, l1_histogram(&hp, &ht)?, seed));
    }
    Ok(out)
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(m) = a.mode {
        cfg.evaluate.mode = m;
    }
    if let Some(e) = a.epsilon {
        cfg.evaluate.epsilon = e;
    }
    if a.classes {
        cfg.evaluate.classes = true;
    }
    let ev = &cfg.evaluate;
    let modes = match ev.mode.as_str() {
        "both" => vec![PredictMode::OneStep, PredictMode::AllSteps],
        m => vec![parse_mode(m)?],
    };
    let model = load_checkpoint(&a.model)?;
    let ds = load_dataset(&a.data)?;
    if ds.dim() != model.input_dim() {
        return Err(CliError::Data(format!(
            "dataset dimension {} does not match the model's {}",
            ds.dim(),
            model.input_dim()
        )));
    }
    let labels = ds.labels();
    if ev.classes && labels.is_none() {
        return Err(CliError::Data(format!("{} has no labels for class metrics", a.data.display())));
    }
    if labels.is_none() {
        log::info!("dataset is unlabeled; skipping class metrics");
    }
    let snaps = ds.snapshots();
    let t = ds.transitions();
    let mut records = Vec::new();
    for mode in modes {
        let preds = predict_trajectory(&model, &snaps[0], t, mode, Some(&snaps[..t]))?;
        let report = prediction_loss_per_step(&preds[1..], &snaps[1..], ev.epsilon, &ev.sinkhorn)?;
        log::info!(
            "{}: mean W_eps {:.6}, mean sinkhorn divergence {:.6}",
            mode_name(mode),
            report.mean_w_eps(),
            report.mean_w_bar()
        );
        records.extend(report_records(&report, mode_name(mode), cfg.seed));
        if let Some(labels) = labels {
            records.extend(class_records(&preds, &ds, labels, ev.knn_k, mode_name(mode), cfg.seed)?);
        }
    }
    ensure_dir(&a.out)?;
    cfg.echo(&a.out.join(CONFIG_ECHO))?;
    write_records_csv(&records, &a.out.join("metrics.csv"))?;
    write_records_json(&records, &a.out.join("metrics.json"))?;
    Ok(())
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    let cfg = base_config(&a.common)?;
    let mode = parse_mode(&a.mode)?;
    let model = load_checkpoint(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let steps = a.steps.unwrap_or(ds.transitions());
    let snaps = ds.snapshots();
    let truths = (mode == PredictMode::OneStep).then(|| &snaps[..steps.min(snaps.len())]);
    let preds = predict_trajectory(&model, &snaps[0], steps, mode, truths)?;
    let ts = ds.manifest().timestamps.clone();
    let dt = if ts.len() > 1 { ts[1] - ts[0] } else { 1.0 };
    let timestamps = (0..preds.len())
        .map(|k| ts.get(k).copied().unwrap_or_else(|| ts[ts.len() - 1] + dt * (k + 1 - ts.len()) as f64))
        .collect();
    let generator = GeneratorInfo {
        kind: "prediction".into(),
        params: serde_json::json!({
            "model_kind": model.kind.as_str(),
            "mode": mode_name(mode),
            "source": ds.manifest().name,
        }),
    };
    let out = SnapshotDataset::new(format!("{}-{}", ds.manifest().name, model.kind.as_str()), preds, timestamps, generator, cfg.seed, "prediction")?;
    ensure_dir(&a.out)?;
    cfg.echo(&a.out.join(CONFIG_ECHO))?;
    save_dataset(&out, &a.out)?;
    Ok(())
}

pub fn export_grid(a: ExportGridArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(b) = a.bounds {
        if b.len() != 4 {
            return Err(CliError::Config(format!("--bounds takes x_min,x_max,y_min,y_max, got {} values", b.len())));
        }
        cfg.grid.x_min = b[0];
        cfg.grid.x_max = b[1];
        cfg.grid.y_min = b[2];
        cfg.grid.y_max = b[3];
    }
    if let Some(r) = a.resolution {
        cfg.grid.resolution = r;
    }
    let g = &cfg.grid;
    let model = load_checkpoint(&a.model)?;
    if model.input_dim() != 2 {
        return Err(CliError::Data(format!("grid export needs a 2-D model, got dimension {}", model.input_dim())));
    }
    let spec = GridSpec {
        x_min: g.x_min,
        x_max: g.x_max,
        y_min: g.y_min,
        y_max: g.y_max,
        resolution: g.resolution,
    };
    let rows = energy_grid(&model.energy, &spec)?;
    let mut text = String::from("x,y,value\n");
    for [x, y, v] in &rows {
        text.push_str(&format!("{x:?},{y:?},{v:?}\n"));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let stem = a.out.file_stem().map_or("grid".into(), |s| s.to_string_lossy().into_owned());
    cfg.echo(&a.out.with_file_name(format!("{stem}_config.toml")))?;
    fs::write(&a.out, text).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    Ok(())
}
