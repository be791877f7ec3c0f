use std::path::Path;

use crate::error::{cfg_err, Result};
use crate::model::{teacher_forcing_inputs, ForwardOptions, ForwardOutput, Model};
use crate::numkernel::{cross_entropy, Tape};
use crate::routing::{ModalityTag, Strategy};
use crate::scalar::Scalar;
use crate::synthdata::{NoisePlan, SampleBatch, Task, TaskConfig};

/// Audio-group weights of the hard-routing sweep.
pub const DEFAULT_SWEEP_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Evaluation streams start here so they never overlap training batches.
const EVAL_STREAM: u64 = 1 << 40;

/// Input condition of an evaluation cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Condition {
    pub tag: ModalityTag,
    pub noise: NoisePlan,
}

impl Condition {
    pub fn new(tag: ModalityTag, noise: NoisePlan) -> Self {
        Self { tag, noise }
    }

    /// Audio-visual input at the given audio SNR.
    pub fn av_snr(snr_db: f64) -> Self {
        Self::new(ModalityTag::AudioVisual, NoisePlan::Snr(snr_db))
    }

    pub fn label(&self) -> String {
        let noise = match self.noise {
            NoisePlan::Config => "default".to_string(),
            NoisePlan::Snr(db) => format!("snr{db}"),
            NoisePlan::Sigma(s) => format!("sigma{s}"),
            NoisePlan::Mixed { .. } => "mixed".to_string(),
        };
        format!("{}:{noise}", self.tag.as_str())
    }
}

/// Token error and cross-entropy of one evaluation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub condition: String,
    pub snr_db: Option<f64>,
    pub token_error: f64,
    pub nll: f64,
    pub n_tokens: usize,
}

fn cell<T: Scalar>(task: &Task, cond: &Condition, n_seq: usize, seed: u64) -> (SampleBatch<T>, Vec<ModalityTag>) {
    // one stream per seed: every condition sees the same tokens and the same
    // standard-normal draws, only scaled differently
    let mut rng = Task::batch_rng(seed, EVAL_STREAM);
    (task.generate_batch_with(n_seq, cond.noise, &mut rng), vec![cond.tag; n_seq])
}

fn teacher_forced<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &SampleBatch<T>,
    tags: &[ModalityTag],
    opts: &ForwardOptions<T>,
) -> Result<ForwardOutput<T>> {
    let bound = model.bind_frozen(tape);
    let enc = model.encode(tape, &bound, &batch.audio, &batch.video, tags)?;
    let inputs = teacher_forcing_inputs(&batch.targets, model.bos());
    model.forward(tape, &bound, &enc, &inputs, opts)
}

fn score<T: Scalar>(
    model: &Model<T>,
    batch: &SampleBatch<T>,
    tags: &[ModalityTag],
    opts: &ForwardOptions<T>,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, &bound, &batch.audio, &batch.video, tags)?;
    let decoded = model.greedy_decode(&mut tape, &bound, &enc, batch.seq_len(), opts)?;
    let (mut wrong, mut n) = (0usize, 0usize);
    for (d, t) in decoded.iter().zip(&batch.targets) {
        wrong += d.iter().zip(t).filter(|(a, b)| a != b).count();
        n += t.len();
    }
    let mut tape = Tape::new();
    let out = teacher_forced(model, &mut tape, batch, tags, opts)?;
    let targets: Vec<usize> = batch.targets.iter().flatten().copied().collect();
    let nll = cross_entropy(tape.value(out.logits), &targets)?.as_f64();
    Ok((wrong as f64 / n as f64, nll))
}

/// Greedy-decoding token error per condition on `n_seq` fresh sequences.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    task: &TaskConfig,
    conditions: &[Condition],
    n_seq: usize,
    seed: u64,
    opts: &ForwardOptions<T>,
) -> Result<Vec<EvalRow>> {
    let task = Task::new(task.clone())?;
    conditions
        .iter()
        .map(|c| {
            let (batch, tags) = cell::<T>(&task, c, n_seq, seed);
            let (token_error, nll) = score(model, &batch, &tags, opts)?;
            Ok(EvalRow {
                condition: c.label(),
                snr_db: match c.noise {
                    NoisePlan::Snr(db) => Some(db),
                    _ => None,
                },
                token_error,
                nll,
                n_tokens: batch.len() * batch.seq_len(),
            })
        })
        .collect()
}

/// One value of the load report.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadRow {
    pub layer: usize,
    /// `expert` (inter-weighted selection frequency) or `group` (token mass).
    pub kind: &'static str,
    pub index: usize,
    pub condition: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub rows: Vec<LoadRow>,
}

impl LoadReport {
    pub fn get(&self, layer: usize, kind: &str, index: usize, condition: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.kind == kind && r.index == index && r.condition == condition)
            .map(|r| r.value)
    }

    pub fn n_layers(&self) -> usize {
        self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "kind", "index", "condition", "value"])?;
        for r in &self.rows {
            w.write_record([
                r.layer.to_string(),
                r.kind.to_string(),
                r.index.to_string(),
                r.condition.clone(),
                r.value.to_string(),
            ])?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))
    }
}

/// Routing statistics per layer and condition.
///
/// Expert frequencies count each selection with the weight of its group
/// (the inter-modal probability under hierarchical gating, the fixed split
/// under hard routing, 1 under flat routing) and are normalized to sum to 1.
/// Group rows hold the mean group weight per token and are omitted for flat
/// routing.
pub fn analyze_load<T: Scalar>(
    model: &Model<T>,
    task: &TaskConfig,
    conditions: &[Condition],
    n_seq: usize,
    seed: u64,
    opts: &ForwardOptions<T>,
) -> Result<LoadReport> {
    let task = Task::new(task.clone())?;
    let flat = model.config().moe.strategy == Strategy::Flat;
    let mut rows = Vec::new();
    for c in conditions {
        let (batch, tags) = cell::<T>(&task, c, n_seq, seed);
        let mut tape = Tape::new();
        let out = teacher_forced(model, &mut tape, &batch, &tags, opts)?;
        let label = c.label();
        for (l, sel) in out.layers.iter().enumerate() {
            let mut freq = vec![0.0; sel.n_experts()];
            let mut mass = vec![0.0; sel.n_groups];
            for (cs, gw) in sel.choices.iter().zip(&sel.group_weights) {
                for ch in cs {
                    let w = if flat { 1.0 } else { gw[ch.group].as_f64() };
                    freq[ch.global(sel.experts_per_group)] += w;
                }
                for (m, g) in mass.iter_mut().zip(gw) {
                    *m += g.as_f64();
                }
            }
            let total: f64 = freq.iter().sum();
            for (e, f) in freq.into_iter().enumerate() {
                rows.push(LoadRow {
                    layer: l,
                    kind: "expert",
                    index: e,
                    condition: label.clone(),
                    value: if total > 0.0 { f / total } else { 0.0 },
                });
            }
            if !flat {
                let n = sel.n_tokens.max(1) as f64;
                for (g, m) in mass.into_iter().enumerate() {
                    rows.push(LoadRow {
                        layer: l,
                        kind: "group",
                        index: g,
                        condition: label.clone(),
                        value: m / n,
                    });
                }
            }
        }
    }
    Ok(LoadReport { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub p_audio: f64,
    pub snr_db: f64,
    pub token_error: f64,
    pub nll: f64,
}

/// Evaluates a hard-routing model with audio-visual group weights
/// `(p, 1 - p)` for every `p` in `grid` and every SNR.
pub fn hard_weight_sweep<T: Scalar>(
    model: &Model<T>,
    task: &TaskConfig,
    grid: &[f64],
    snr_grid: &[f64],
    n_seq: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if model.config().moe.strategy != Strategy::Hard {
        return Err(cfg_err!(
            "weight sweep needs a hard-routing checkpoint, got {}",
            model.config().moe.strategy
        ));
    }
    if let Some(p) = grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(cfg_err!("audio weight {p} outside [0, 1]"));
    }
    let conditions: Vec<Condition> = snr_grid.iter().map(|&db| Condition::av_snr(db)).collect();
    let mut out = Vec::with_capacity(grid.len() * snr_grid.len());
    for &p in grid {
        let opts = ForwardOptions {
            hard_audio_weight: Some(T::lit(p)),
            ..ForwardOptions::default()
        };
        for (row, &db) in evaluate(model, task, &conditions, n_seq, seed, &opts)?.into_iter().zip(snr_grid) {
            out.push(SweepRow {
                p_audio: p,
                snr_db: db,
                token_error: row.token_error,
                nll: row.nll,
            });
        }
    }
    Ok(out)
}

/// Best audio weight at one SNR: lowest token error, ties broken by the
/// lower cross-entropy.
pub fn sweep_argmin(rows: &[SweepRow], snr_db: f64) -> Option<f64> {
    rows.iter()
        .filter(|r| r.snr_db == snr_db)
        .min_by(|a, b| {
            a.token_error
                .total_cmp(&b.token_error)
                .then(a.nll.total_cmp(&b.nll))
        })
        .map(|r| r.p_audio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::RunConfig;
    use crate::routing::{AUDIO_GROUP, VISUAL_GROUP};

    fn small(strategy: Strategy) -> (Model<f64>, TaskConfig) {
        let mut cfg = RunConfig::default();
        cfg.apply([("model.d_model", "16"), ("model.d_ff", "32"), ("task.seq_len", "6")])
            .unwrap();
        cfg.model.moe.strategy = strategy;
        (Model::new(cfg.model).unwrap(), cfg.task)
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let (model, task) = small(Strategy::Hierarchical);
        let rows = evaluate(&model, &task, &[Condition::av_snr(10.0)], 1000, 3, &ForwardOptions::default()).unwrap();
        let chance = 1.0 - 1.0 / 32.0;
        assert!((rows[0].token_error - chance).abs() < 0.01, "{}", rows[0].token_error);
    }

    #[test]
    fn expert_frequencies_and_group_mass_sum_to_one() {
        for strategy in [Strategy::Hierarchical, Strategy::Hard, Strategy::Flat] {
            let (model, task) = small(strategy);
            let conds = [
                Condition::new(ModalityTag::AudioOnly, NoisePlan::Config),
                Condition::new(ModalityTag::VideoOnly, NoisePlan::Config),
                Condition::av_snr(-10.0),
            ];
            let rep = analyze_load(&model, &task, &conds, 20, 1, &ForwardOptions::default()).unwrap();
            for c in &conds {
                for l in 0..rep.n_layers() {
                    let freq: f64 = (0..8).map(|e| rep.get(l, "expert", e, &c.label()).unwrap()).sum();
                    assert!((freq - 1.0).abs() < 1e-9);
                    let mass: Option<f64> = (0..2).map(|g| rep.get(l, "group", g, &c.label())).sum();
                    match strategy {
                        Strategy::Flat => assert!(mass.is_none()),
                        _ => assert!((mass.unwrap() - 1.0).abs() < 1e-9),
                    }
                }
            }
        }
    }

    #[test]
    fn hard_routing_puts_unimodal_mass_on_own_group() {
        let (model, task) = small(Strategy::Hard);
        let a = Condition::new(ModalityTag::AudioOnly, NoisePlan::Config);
        let v = Condition::new(ModalityTag::VideoOnly, NoisePlan::Config);
        let rep = analyze_load(&model, &task, &[a, v], 5, 1, &ForwardOptions::default()).unwrap();
        assert_eq!(rep.get(0, "group", AUDIO_GROUP, &a.label()), Some(1.0));
        assert_eq!(rep.get(1, "group", VISUAL_GROUP, &v.label()), Some(1.0));
    }

    #[test]
    fn forced_weights_give_even_mass() {
        let (model, task) = small(Strategy::Hierarchical);
        let opts = ForwardOptions {
            forced_q: Some(vec![0.5, 0.5]),
            ..ForwardOptions::default()
        };
        let c = Condition::new(ModalityTag::AudioOnly, NoisePlan::Config);
        let rep = analyze_load(&model, &task, &[c], 10, 2, &opts).unwrap();
        for l in 0..2 {
            for g in 0..2 {
                assert_eq!(rep.get(l, "group", g, &c.label()), Some(0.5));
            }
        }
    }

    #[test]
    fn sweep_needs_hard_routing_and_default_weight_matches_eval() {
        let (model, task) = small(Strategy::Flat);
        assert!(hard_weight_sweep(&model, &task, &[0.5], &[0.0], 4, 1).is_err());
        let (model, task) = small(Strategy::Hard);
        let rows = hard_weight_sweep(&model, &task, &[0.3, 0.5], &[0.0], 16, 1).unwrap();
        let plain = evaluate(&model, &task, &[Condition::av_snr(0.0)], 16, 1, &ForwardOptions::default()).unwrap();
        assert_eq!(rows[1].token_error, plain[0].token_error);
        assert_eq!(rows[1].nll, plain[0].nll);
    }

    #[test]
    fn argmin_breaks_ties_by_nll() {
        let rows = [
            SweepRow { p_audio: 0.3, snr_db: 0.0, token_error: 0.1, nll: 0.5 },
            SweepRow { p_audio: 0.7, snr_db: 0.0, token_error: 0.1, nll: 0.4 },
            SweepRow { p_audio: 0.5, snr_db: 0.0, token_error: 0.2, nll: 0.1 },
        ];
        assert_eq!(sweep_argmin(&rows, 0.0), Some(0.7));
        assert_eq!(sweep_argmin(&rows, 5.0), None);
    }
}
