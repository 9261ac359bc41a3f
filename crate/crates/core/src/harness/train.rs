use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::data::{batch_order, load_manifest, load_manifest_with_labels, PipelineMode, PreparedDataset};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::report::{
    append_line, format_compare_csv, format_compare_table, format_delta_csv, format_epoch_table, read_report,
    EpochReport, ReportWriter,
};
use crate::harness::TrainConfig;
use crate::metrics::{read_score_file, summarize, MetricsSummary, PredictionSet};
use crate::model::ViTModel;
use crate::optim::{cross_entropy, AdamW};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

pub const REPORT_FILE: &str = "report.csv";
pub const LR_LOG_FILE: &str = "lr_log.csv";
pub const TABLE_FILE: &str = "table.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const DROPOUT_STREAM: u64 = 1 << 62;
const EVAL_BATCH: usize = 64;

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch}.ckpt")
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Config with `num_classes` filled in.
    pub config: TrainConfig,
    /// Reports of the epochs run by this call.
    pub reports: Vec<EpochReport>,
    /// Learning rate applied in each of those epochs.
    pub lrs: Vec<f64>,
    pub model: ViTModel,
    pub optimizer: AdamW,
    pub label_names: Vec<String>,
    pub final_checkpoint: PathBuf,
}

/// Config with resolved class count and both datasets in memory.
pub struct PreparedRun {
    pub config: TrainConfig,
    pub label_names: Vec<String>,
    pub train: PreparedDataset,
    pub test: PreparedDataset,
}

/// Validates `cfg` and loads both manifests. The test manifest shares the
/// training label table.
pub fn prepare(cfg: &TrainConfig) -> Result<PreparedRun> {
    cfg.validate()?;
    let mut config = cfg.clone();
    let train_path = config.train_manifest.clone().expect("validated");
    let test_path = config.test_manifest.clone().expect("validated");
    let train = load_manifest(&train_path)?;
    let test = load_manifest_with_labels(&test_path, &train.label_names)?;
    let classes = train.num_classes();
    match config.vit.num_classes {
        0 => config.vit.num_classes = classes,
        n if n != classes => {
            return Err(Error::Config(format!(
                "num_classes is {n} but {} has {classes} labels",
                train_path.display()
            )))
        }
        _ => {}
    }
    config.vit.validate()?;
    if config.pipeline_mode == PipelineMode::Masked {
        for (path, m) in [(&train_path, &train), (&test_path, &test)] {
            if !m.all_masked() {
                return Err(Error::Config(format!(
                    "masked mode needs a mask for every sample in {}",
                    path.display()
                )));
            }
        }
    }
    let (size, mode, ch) = (config.vit.image_size, config.pipeline_mode, config.vit.in_channels);
    Ok(PreparedRun {
        train: PreparedDataset::load(&train, size, mode, ch)?,
        test: PreparedDataset::load(&test, size, mode, ch)?,
        label_names: train.label_names,
        config,
    })
}

/// Eval-mode class probabilities for every sample, in dataset order.
pub fn predict(model: &ViTModel, data: &PreparedDataset) -> Result<PredictionSet> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len() * model.config().num_classes);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.stack(chunk)?;
        scores.extend(model.predict_proba(&x)?.into_data());
    }
    PredictionSet::new(scores, data.labels.clone(), model.config().num_classes)
}

pub fn evaluate(model: &ViTModel, data: &PreparedDataset) -> Result<MetricsSummary> {
    Ok(summarize(&predict(model, data)?))
}

/// One pass over the shuffled training set; returns the sample-weighted mean
/// loss.
pub fn train_epoch(
    model: &mut ViTModel,
    optimizer: &mut AdamW,
    data: &PreparedDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    for (b, idx) in batch_order(data.len(), batch_size, seed, epoch, true)?
        .into_iter()
        .enumerate()
    {
        let value = train_step(model, optimizer, data, &idx, seed, epoch, b).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {} batch {}", epoch + 1, b + 1)),
            other => other,
        })?;
        loss_sum += value * idx.len() as f64;
    }
    Ok(loss_sum / data.len() as f64)
}

fn train_step(
    model: &mut ViTModel,
    optimizer: &mut AdamW,
    data: &PreparedDataset,
    idx: &[usize],
    seed: u64,
    epoch: usize,
    batch: usize,
) -> Result<f64> {
    let (x, y) = data.stack(idx)?;
    let mut g = Graph::new();
    let mut rng = Rng::stream(seed, DROPOUT_STREAM + ((epoch as u64) << 24) + batch as u64);
    let (logits, bound) = model.forward(&mut g, &x, Some(&mut rng))?;
    let loss = cross_entropy(&mut g, logits, &y)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    g.backward(loss)?;
    let grads: Vec<Option<Tensor>> = model
        .params()
        .iter()
        .zip(&bound.vars)
        .map(|(p, &v)| {
            model
                .is_trainable(p)
                .then(|| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
        })
        .collect();
    optimizer.step(model.params_mut(), &grads)?;
    Ok(value)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn rewrite_lr_log(path: &Path, keep: usize) -> Result<()> {
    let mut text = String::from("epoch,lr\n");
    if let Ok(old) = fs::read_to_string(path) {
        for line in old.lines().skip(1) {
            if line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= keep)
            {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Loop {
    run: PreparedRun,
    model: ViTModel,
    optimizer: AdamW,
    start: usize,
    writer: ReportWriter,
}

fn run_loop(mut l: Loop) -> Result<TrainOutcome> {
    let cfg = l.run.config.clone();
    let out = &cfg.out_dir;
    let mut reports = Vec::new();
    let mut lrs = Vec::new();
    let checkpoint = |model: &ViTModel, optimizer: &AdamW, epochs_done: usize, path: &Path| {
        Checkpoint {
            config: TrainConfig {
                out_dir: PathBuf::from("."),
                checkpoint_every: 0,
                ..cfg.clone()
            },
            label_names: l.run.label_names.clone(),
            epochs_done,
            model: model.clone(),
            optimizer: optimizer.clone(),
        }
        .save(path)
    };
    if let Some(schedule) = cfg.schedule()? {
        for t in l.start..cfg.epochs {
            let epoch = t + 1;
            let lr = schedule.lr_at(t)?;
            l.optimizer.lr = lr;
            append_line(&out.join(LR_LOG_FILE), &format!("{epoch},{lr:?}"))?;
            let loss = train_epoch(
                &mut l.model,
                &mut l.optimizer,
                &l.run.train,
                cfg.batch_size,
                cfg.seed,
                t,
            )?;
            let report = EpochReport::new(epoch, loss, &evaluate(&l.model, &l.run.test)?);
            l.writer.append(&report)?;
            info!(
                "epoch {epoch}/{}: lr {lr:.3e} loss {loss:.4} acc {:.4} auc {:.4} mcc {:.4}",
                cfg.epochs, report.accuracy, report.roc_auc, report.mcc
            );
            let table = format_epoch_table(&read_report(&out.join(REPORT_FILE))?);
            fs::write(out.join(TABLE_FILE), table).map_err(|e| Error::io(out.join(TABLE_FILE), e))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint(&l.model, &l.optimizer, epoch, &out.join(epoch_checkpoint_name(epoch)))?;
            }
            reports.push(report);
            lrs.push(lr);
        }
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    checkpoint(&l.model, &l.optimizer, cfg.epochs, &final_checkpoint)?;
    Ok(TrainOutcome {
        config: cfg.clone(),
        reports,
        lrs,
        model: l.model,
        optimizer: l.optimizer,
        label_names: l.run.label_names,
        final_checkpoint,
    })
}

/// Trains from a fresh initialization, writing `report.csv`, `lr_log.csv`,
/// `table.txt` and checkpoints into `cfg.out_dir`.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let run = prepare(cfg)?;
    let out = run.config.out_dir.clone();
    create_dir(&out)?;
    let model = ViTModel::new(run.config.vit.clone(), run.config.seed)?;
    let optimizer = AdamW::new(run.config.adamw(), run.config.eta_max, model.params());
    let writer = ReportWriter::create(&out.join(REPORT_FILE))?;
    rewrite_lr_log(&out.join(LR_LOG_FILE), 0)?;
    fs::write(out.join(TABLE_FILE), format_epoch_table(&[])).map_err(|e| Error::io(out.join(TABLE_FILE), e))?;
    info!(
        "training {} samples, testing {}, {} parameters",
        run.train.len(),
        run.test.len(),
        model.parameter_count(crate::model::ParamScope::All)
    );
    run_loop(Loop {
        run,
        model,
        optimizer,
        start: 0,
        writer,
    })
}

/// Continues the run saved at `checkpoint`. Report rows after the saved epoch
/// are discarded, so the output matches an uninterrupted run.
pub fn resume_training(cfg: &TrainConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let run = prepare(cfg)?;
    if !ck.config.same_run(&run.config) {
        return Err(Error::Usage(format!(
            "{} was written by a different configuration",
            checkpoint.display()
        )));
    }
    if ck.label_names != run.label_names {
        return Err(Error::Usage(format!(
            "{} was trained on labels {:?}, manifest has {:?}",
            checkpoint.display(),
            ck.label_names,
            run.label_names
        )));
    }
    let out = run.config.out_dir.clone();
    create_dir(&out)?;
    let writer = ReportWriter::resume(&out.join(REPORT_FILE), ck.epochs_done)?;
    rewrite_lr_log(&out.join(LR_LOG_FILE), ck.epochs_done)?;
    info!("resuming after epoch {}", ck.epochs_done);
    run_loop(Loop {
        run,
        model: ck.model,
        optimizer: ck.optimizer,
        start: ck.epochs_done,
        writer,
    })
}

pub const COMPARE_FILE: &str = "compare.csv";
pub const COMPARE_DELTA_FILE: &str = "compare_delta.csv";
pub const COMPARE_TABLE_FILE: &str = "compare_table.txt";

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub full: TrainOutcome,
    pub masked: TrainOutcome,
}

/// Trains the full-image and masked arms side by side. The configs must be
/// identical apart from `pipeline_mode`; the arms write into `full/` and
/// `masked/` below the shared `out_dir`, and the comparison files go to
/// `out_dir` itself.
pub fn run_compare(cfg_full: &TrainConfig, cfg_masked: &TrainConfig) -> Result<CompareOutcome> {
    if cfg_full.pipeline_mode != PipelineMode::Full || cfg_masked.pipeline_mode != PipelineMode::Masked {
        return Err(Error::Usage("compare needs one full and one masked config".into()));
    }
    let aligned = TrainConfig {
        pipeline_mode: PipelineMode::Full,
        ..cfg_masked.clone()
    };
    if aligned != *cfg_full {
        return Err(Error::Usage("compare configs differ in more than pipeline_mode".into()));
    }
    let out = cfg_full.out_dir.clone();
    let arm = |cfg: &TrainConfig, name: &str| TrainConfig {
        out_dir: out.join(name),
        ..cfg.clone()
    };
    let (full_cfg, masked_cfg) = (arm(cfg_full, "full"), arm(cfg_masked, "masked"));
    prepare(&full_cfg)?;
    prepare(&masked_cfg)?;
    let (full, masked) = std::thread::scope(|s| {
        let f = s.spawn(|| run_training(&full_cfg));
        let m = run_training(&masked_cfg);
        (f.join().expect("full-image arm panicked"), m)
    });
    let (full, masked) = (full?, masked?);
    let write = |name: &str, text: String| fs::write(out.join(name), text).map_err(|e| Error::io(out.join(name), e));
    write(COMPARE_FILE, format_compare_csv(&full.reports, &masked.reports))?;
    write(COMPARE_TABLE_FILE, format_compare_table(&full.reports, &masked.reports))?;
    if let (Some(a), Some(b)) = (full.reports.last(), masked.reports.last()) {
        write(COMPARE_DELTA_FILE, format_delta_csv(a, b))?;
    }
    Ok(CompareOutcome { full, masked })
}

/// Metrics of a score file, written as a `metric,value` CSV to `out`.
pub fn score_file(predictions: &Path, out: &Path) -> Result<MetricsSummary> {
    let summary = summarize(&read_score_file(predictions)?);
    fs::write(out, summary.to_csv()).map_err(|e| Error::io(out, e))?;
    Ok(summary)
}
