use std::fs;
use std::path::Path;

use super::optim::{adam_step, AdamState};
use super::RunConfig;
use crate::config::{parse_value, KvConfig};
use crate::error::{Error, Result};
use crate::model::{modality_dropout, teacher_forcing_inputs, ForwardOptions, LoadedExtras, Model};
use crate::numkernel::Tape;
use crate::routing::{ExpertSelection, ModalityTag};
use crate::scalar::Scalar;
use crate::synthdata::{SampleBatch, Task};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOAD_REPORT_FILE: &str = "load_report.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

const STEP_KEY: &str = "state.step";

const CONDITIONS: [ModalityTag; 3] = [ModalityTag::AudioOnly, ModalityTag::VideoOnly, ModalityTag::AudioVisual];

/// Losses of one training step and the mean group shares per layer and
/// modality condition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub lb: f64,
    pub ls: f64,
    pub lz: f64,
    pub total: f64,
    /// Flattened `[layer][condition][group]`; `None` when the batch has no
    /// tokens of that condition.
    pub shares: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub state: AdamState<T>,
    pub metrics: Vec<StepMetrics>,
}

/// CSV column names for a model with `n_layers` MoE layers of `n_groups`.
pub fn metrics_header(n_layers: usize, n_groups: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "L_CE", "L_B", "L_S", "L_Z", "L_tot"].iter().map(|s| s.to_string()).collect();
    for l in 0..n_layers {
        for c in CONDITIONS {
            for g in 0..n_groups {
                h.push(format!("share_l{l}_{}_g{g}", c.as_str()));
            }
        }
    }
    h
}

fn group_shares<T: Scalar>(layers: &[ExpertSelection<T>], tags: &[ModalityTag], n_groups: usize) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(layers.len() * CONDITIONS.len() * n_groups);
    for sel in layers {
        for c in CONDITIONS {
            let mut acc = vec![0.0; n_groups];
            let mut n = 0usize;
            for (w, _) in sel.group_weights.iter().zip(tags).filter(|(_, &t)| t == c) {
                for (a, v) in acc.iter_mut().zip(w) {
                    *a += v.as_f64();
                }
                n += 1;
            }
            out.extend(acc.into_iter().map(|a| (n > 0).then(|| a / n as f64)));
        }
    }
    out
}

pub fn write_metrics(path: &Path, header: &[String], rows: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.ce.to_string(),
            r.lb.to_string(),
            r.ls.to_string(),
            r.lz.to_string(),
            r.total.to_string(),
        ];
        rec.extend(r.shares.iter().map(|s| s.map_or_else(String::new, |v| v.to_string())));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| parse_value::<f64>("metrics", &rec[i]);
        out.push(StepMetrics {
            step: parse_value("step", &rec[0])?,
            ce: f(1)?,
            lb: f(2)?,
            ls: f(3)?,
            lz: f(4)?,
            total: f(5)?,
            shares: (6..rec.len())
                .map(|i| if rec[i].is_empty() { Ok(None) } else { f(i).map(Some) })
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

fn extras<T: Scalar>(cfg: &RunConfig, model: &Model<T>, state: &AdamState<T>) -> LoadedExtras {
    let mut config = cfg.task.to_kv("task");
    config.extend(cfg.train.to_kv("train"));
    config.push((STEP_KEY.into(), state.step.to_string()));
    LoadedExtras {
        config,
        state: state.to_named(model.params()),
    }
}

/// Restores configuration, parameters and optimizer state from a checkpoint
/// file or a run directory.
pub fn load_run<T: Scalar>(path: &Path) -> Result<(RunConfig, Model<T>, AdamState<T>)> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let (model, ex) = Model::<T>::load_checkpoint(&file)?;
    let mut cfg = RunConfig {
        model: model.config().clone(),
        ..RunConfig::default()
    };
    let mut step = 0;
    for (k, v) in &ex.config {
        if k == STEP_KEY {
            step = parse_value(k, v)?;
        } else if let Some(rest) = k.strip_prefix("task.") {
            cfg.task.set_kv(rest, v)?;
        } else if let Some(rest) = k.strip_prefix("train.") {
            cfg.train.set_kv(rest, v)?;
        } else {
            return Err(Error::Format(format!("unexpected checkpoint entry `{k}`")));
        }
    }
    cfg.validate()?;
    let state = AdamState::from_named(model.params(), step, &ex.state)?;
    Ok((cfg, model, state))
}

/// One training batch: step-indexed data stream, then modality dropout.
pub(crate) fn training_batch<T: Scalar>(
    cfg: &RunConfig,
    task: &Task,
    step: usize,
) -> Result<(SampleBatch<T>, Vec<ModalityTag>)> {
    let mut rng = Task::batch_rng(cfg.train.seed, step as u64);
    let batch = task.generate_batch_with(cfg.train.batch_size, cfg.train.noise_plan(), &mut rng);
    let tags = modality_dropout(
        cfg.train.batch_size,
        cfg.model.dropout_prob,
        cfg.model.audio_only_share,
        &mut rng,
    )?;
    Ok((batch, tags))
}

fn step<T: Scalar>(
    cfg: &RunConfig,
    task: &Task,
    model: &mut Model<T>,
    state: &mut AdamState<T>,
    index: usize,
    tape: &mut Tape<T>,
) -> Result<StepMetrics> {
    let (batch, tags) = training_batch::<T>(cfg, task, index)?;
    tape.reset();
    let bound = model.bind(tape);
    let enc = model.encode(tape, &bound, &batch.audio, &batch.video, &tags)?;
    let inputs = teacher_forcing_inputs(&batch.targets, model.bos());
    let out = model.forward(tape, &bound, &enc, &inputs, &ForwardOptions::default())?;
    let lv = model.loss(tape, &out, &batch.targets, &cfg.train.weights, cfg.train.z_scope)?;
    let metrics = StepMetrics {
        step: index,
        ce: tape.scalar(lv.ce).as_f64(),
        lb: tape.scalar(lv.aux.lb).as_f64(),
        ls: tape.scalar(lv.aux.ls).as_f64(),
        lz: tape.scalar(lv.aux.lz).as_f64(),
        total: tape.scalar(lv.total).as_f64(),
        shares: group_shares(&out.layers, &out.token_tags, cfg.model.moe.n_groups),
    };
    let grads = tape.backward(lv.total)?;
    for (&v, p) in bound.vars().iter().zip(model.params_mut()) {
        p.zero_grad();
        grads.accumulate_into(v, p)?;
    }
    adam_step(model.params_mut(), state, &cfg.train.adam)?;
    Ok(metrics)
}

/// Trains from the seeded initialization for `cfg.train.steps` steps.
///
/// With `out_dir`, writes the configuration snapshot, `metrics.csv` and the
/// final checkpoint there. A non-finite loss or gradient stops training
/// with [`Error::Diverged`] after saving the last good parameters.
pub fn train<T: Scalar>(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let task = Task::new(cfg.task.clone())?;
    let mut model = Model::<T>::new(cfg.model.clone())?;
    let mut state = AdamState::new(model.params());
    let header = metrics_header(cfg.model.n_decoder_layers, cfg.model.moe.n_groups);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    let mut metrics = Vec::with_capacity(cfg.train.steps);
    let mut tape = Tape::new();
    for i in 0..cfg.train.steps {
        // a failing step leaves model and optimizer untouched
        match step(cfg, &task, &mut model, &mut state, i, &mut tape) {
            Ok(m) => metrics.push(m),
            Err(Error::Numeric(reason)) => {
                if let Some(dir) = out_dir {
                    model.save_checkpoint(dir.join(CHECKPOINT_FILE), &extras(cfg, &model, &state))?;
                    write_metrics(&dir.join(METRICS_FILE), &header, &metrics)?;
                }
                return Err(Error::Diverged { step: i, reason });
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(dir) = out_dir {
        write_metrics(&dir.join(METRICS_FILE), &header, &metrics)?;
        model.save_checkpoint(dir.join(CHECKPOINT_FILE), &extras(cfg, &model, &state))?;
    }
    Ok(TrainOutcome { model, state, metrics })
}
