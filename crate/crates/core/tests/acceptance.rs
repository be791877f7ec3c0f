//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Criteria 6 to 9 train the default configuration (3000 steps, f32) for
//! five seeds per variant, so the whole target takes the better part of an
//! hour on one core.

use std::process::ExitCode;
use std::time::Instant;

use hmoe::harness::{
    analyze_load, evaluate, flops, gradcheck, gradcheck_config, hard_weight_sweep, sweep_argmin, train, Condition,
    FlopsReport, LoadReport, RunConfig, SweepRow, DEFAULT_SWEEP_GRID,
};
use hmoe::losses::{expert_stats, group_stats, load_balance_loss, load_bias_loss, total_loss, z_loss, LossWeights};
use hmoe::model::{teacher_forcing_inputs, ForwardOptions, LoadedExtras, Model, ModelConfig};
use hmoe::numkernel::{softmax, GradCheckOptions, Tape, Tensor};
use hmoe::routing::{route_flat, topk_oracle, ModalityTag, Strategy, AUDIO_GROUP, VISUAL_GROUP};
use hmoe::synthdata::{NoisePlan, SampleBatch, Task, TaskConfig};
use hmoe::{Result, Scalar};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Sequences per evaluation or load-analysis cell.
const EVAL_SEQUENCES: usize = 256;
/// Sequences per cell of the hard-routing weight sweep.
const SWEEP_SEQUENCES: usize = 128;
/// Seed of every evaluation stream, shared by all runs so that comparisons
/// between variants are paired.
const EVAL_SEED: u64 = 0;
const HIGH_NOISE_DB: f64 = -10.0;
const LOW_NOISE_DB: f64 = 10.0;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    PassWithNote,
    Fail,
}

#[derive(Default)]
struct Report {
    failed: usize,
}

impl Report {
    fn record(&mut self, id: &str, name: &str, verdict: Verdict, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::PassWithNote => "PASS (note)",
            Verdict::Fail => {
                self.failed += 1;
                "FAIL"
            }
        };
        println!("{tag} [{id}] {name}: {detail}");
    }

    fn check(&mut self, id: &str, name: &str, ok: bool, detail: String) {
        self.record(id, name, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }

    fn error(&mut self, id: &str, name: &str, e: hmoe::Error) {
        self.record(id, name, Verdict::Fail, format!("error: {e}"));
    }
}

fn progress(msg: &str) {
    eprintln!("acceptance: {msg}");
}

fn flops_anchors(r: &mut Report) {
    let anchor = |d: usize, ff: usize| {
        let cfg = ModelConfig {
            d_model: d,
            d_ff: ff,
            ..ModelConfig::default()
        };
        FlopsReport::mflops(flops(&cfg, 500, 50).dense_ffn)
    };
    let base = anchor(768, 3072);
    let large = anchor(1024, 4096);
    r.check(
        "1",
        "FLOPs anchors",
        (base - 472.0).abs() <= 0.5 && (large - 839.0).abs() <= 0.5 && (base - 471.9).abs() < 0.05 && (large - 838.9).abs() < 0.05,
        format!("768/3072 -> {base:.4} MFLOPs, 1024/4096 -> {large:.4} MFLOPs (targets 472 and 839, +-0.5)"),
    );
}

fn gradient_check(r: &mut Report) {
    let name = "gradient correctness";
    let start = Instant::now();
    let strategies = [Strategy::Flat, Strategy::Hard, Strategy::Hierarchical];
    match gradcheck(&gradcheck_config(), 0, &strategies, GradCheckOptions::default()) {
        Ok(checks) => {
            let secs = start.elapsed().as_secs_f64();
            let ok = checks
                .iter()
                .all(|c| c.report.passed() && c.report.max_rel_error < 1e-5 && c.n_params <= 10_000)
                && secs <= 300.0;
            let parts: Vec<String> = checks
                .iter()
                .map(|c| {
                    format!(
                        "{} max rel {:.2e} over {} coords ({} skipped, {} params)",
                        c.strategy,
                        c.report.max_rel_error,
                        c.report.checked,
                        c.report.skipped.len(),
                        c.n_params
                    )
                })
                .collect();
            r.check("2", name, ok, format!("{}; {secs:.1}s (limits 1e-5, 1e4 params, 300s)", parts.join("; ")));
        }
        Err(e) => r.error("2", name, e),
    }
}

fn routing_oracle(r: &mut Report) {
    let n = 10_000;
    let n_exp = 8;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let logits = Tensor::matrix(n, n_exp, (0..n * n_exp).map(|_| normal.sample(&mut rng)).collect()).unwrap();
    let probs = softmax(&logits).unwrap();
    let mut identity = Tensor::zeros(&[n_exp, n_exp]);
    for i in 0..n_exp {
        identity.data_mut()[i * n_exp + i] = 1.0;
    }
    let (mut worst, mut mismatched) = (0.0f64, 0usize);
    for k in [1, 2, 4, 8] {
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let router = tape.constant(identity.clone());
        let sel = route_flat(&mut tape, x, router, k, 4).unwrap();
        for (t, choices) in sel.choices.iter().enumerate() {
            let p = probs.row(t);
            let mut oracle = topk_oracle(p, k);
            let mass: f64 = oracle.iter().map(|&e| p[e]).sum();
            oracle.sort_unstable();
            let got: Vec<usize> = choices.iter().map(|c| c.global(4)).collect();
            if got != oracle {
                mismatched += 1;
            }
            for c in choices {
                worst = worst.max((c.weight - p[c.global(4)] / mass).abs());
            }
        }
    }
    r.check(
        "3",
        "routing oracle equivalence",
        mismatched == 0 && worst < 1e-12,
        format!("{n} tokens, k in {{1,2,4,8}}: {mismatched} set mismatches, max weight diff {worst:.1e} (limit 1e-12)"),
    );
}

fn loss_anchors(r: &mut Report) {
    let mut tape: Tape<f64> = Tape::new();
    let mut lb = |rows: &[&[f64]]| {
        let p = tape.constant(Tensor::from_rows(rows).unwrap());
        let s = expert_stats(&mut tape, p).unwrap();
        let v = load_balance_loss(&mut tape, &s).unwrap();
        tape.scalar(v)
    };
    let uniform = lb(&[&[0.25; 4], &[0.25; 4]]);
    let collapsed = lb(&[&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]]);
    let mut tape: Tape<f64> = Tape::new();
    let zeros = tape.constant(Tensor::zeros(&[3, 4]));
    let zv = z_loss(&mut tape, zeros).unwrap();
    let lz = tape.scalar(zv);
    let ln4sq = 4f64.ln().powi(2);
    let q = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]).unwrap());
    let tags = [ModalityTag::AudioOnly, ModalityTag::VideoOnly, ModalityTag::AudioOnly];
    let gs = group_stats(&mut tape, q, &tags).unwrap();
    let lsv = load_bias_loss(&mut tape, &gs).unwrap();
    let ls = tape.scalar(lsv);
    let w = LossWeights::default();
    let tot = total_loss(1.0f64, 2.0, 3.0, 4.0, &w).unwrap();
    let ok = uniform == 1.0
        && collapsed == 4.0
        && (lz - ln4sq).abs() < 1e-12
        && ls == 0.0
        && (w.c_b, w.c_s, w.c_z) == (1e-2, 1e-2, 1e-3)
        && (tot.total - (1.0 + 2e-2 + 3e-2 + 4e-3)).abs() < 1e-12;
    r.check(
        "4",
        "loss unit anchors",
        ok,
        format!(
            "L_B uniform {uniform}, collapsed {collapsed}; L_Z(0) {lz:.12} vs (ln 4)^2 {ln4sq:.12}; L_S perfect {ls}; \
             c_B {} c_S {} c_Z {}, L_tot(1,2,3,4) {}",
            w.c_b, w.c_s, w.c_z, tot.total
        ),
    );
}

fn small_config(strategy: Strategy) -> ModelConfig {
    let mut cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        vocab_size: 8,
        d_audio: 6,
        d_video: 6,
        init_std: 0.3,
        seed: 9,
        ..ModelConfig::default()
    };
    cfg.moe.d_model = cfg.d_model;
    cfg.moe.d_ff = cfg.d_ff;
    cfg.moe.k_hard = 2;
    cfg.moe.m_groups = 2;
    cfg.moe.k_within = vec![1, 1];
    cfg.with_strategy(strategy)
}

fn small_batch(cfg: &ModelConfig, n_seq: usize) -> SampleBatch<f64> {
    let task = Task::new(TaskConfig {
        vocab_size: cfg.vocab_size,
        n_clusters: 4,
        seq_len: 6,
        d_audio: cfg.d_audio,
        d_video: cfg.d_video,
        ..TaskConfig::default()
    })
    .unwrap();
    task.generate_batch(n_seq, &mut Task::batch_rng(3, 0))
}

fn logits_of(model: &Model<f64>, b: &SampleBatch<f64>, tags: &[ModalityTag], opts: &ForwardOptions<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = model.encode(&mut tape, &bound, &b.audio, &b.video, tags).unwrap();
    let inputs = teacher_forcing_inputs(&b.targets, model.bos());
    let out = model.forward(&mut tape, &bound, &enc, &inputs, opts).unwrap();
    tape.value(out.logits).clone()
}

fn strategy_equivalence(r: &mut Report) {
    let tags = [
        ModalityTag::AudioVisual,
        ModalityTag::AudioOnly,
        ModalityTag::VideoOnly,
        ModalityTag::AudioVisual,
    ];
    let mut dense_gap = 0.0f64;
    for strategy in [Strategy::Flat, Strategy::Hard, Strategy::Hierarchical] {
        let mut model = Model::<f64>::new(small_config(strategy)).unwrap();
        model.tie_experts();
        let b = small_batch(model.config(), tags.len());
        let moe = logits_of(&model, &b, &tags, &ForwardOptions::default());
        let dense = ForwardOptions {
            dense_expert: Some(0),
            ..ForwardOptions::default()
        };
        dense_gap = dense_gap.max(moe.max_abs_diff(&logits_of(&model, &b, &tags, &dense)));
    }
    let hier = Model::<f64>::new(small_config(Strategy::Hierarchical)).unwrap();
    let mut hard = Model::<f64>::new(small_config(Strategy::Hard)).unwrap();
    for p in hard.params_mut() {
        p.value = hier.param(&p.name).unwrap().value.clone();
    }
    let av = [ModalityTag::AudioVisual; 4];
    let b = small_batch(hier.config(), av.len());
    let forced = ForwardOptions {
        forced_q: Some(vec![0.5, 0.5]),
        ..ForwardOptions::default()
    };
    let hard_gap = logits_of(&hier, &b, &av, &forced).max_abs_diff(&logits_of(&hard, &b, &av, &ForwardOptions::default()));
    r.check(
        "5",
        "strategy-equivalence invariants",
        dense_gap < 1e-10 && hard_gap < 1e-12,
        format!("identical experts vs dense {dense_gap:.1e} (limit 1e-10); forced q=[0.5,0.5] vs hard k=2 {hard_gap:.1e} (limit 1e-12)"),
    );
}

fn determinism(r: &mut Report) {
    let name = "determinism and persistence";
    let run = || -> Result<bool> {
        let dir = tempfile::tempdir().map_err(|e| hmoe::Error::io("tempdir", e))?;
        let mut cfg = RunConfig::default();
        cfg.apply([("train.steps", "20"), ("train.batch_size", "8")])?;
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        train::<f64>(&cfg, Some(&a))?;
        train::<f64>(&cfg, Some(&b))?;
        let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| hmoe::Error::io(&p, e));
        let same_metrics = read(a.join("metrics.csv"))? == read(b.join("metrics.csv"))?;
        let (model, extras): (Model<f64>, LoadedExtras) = Model::load_checkpoint(a.join("model.ckpt"))?;
        let again = dir.path().join("again.ckpt");
        model.save_checkpoint(&again, &extras)?;
        let same_ckpt = read(a.join("model.ckpt"))? == read(again)?;
        Ok(same_metrics && same_ckpt)
    };
    match run() {
        Ok(ok) => r.check("10", name, ok, format!("20-step runs, metrics.csv and checkpoint round-trip byte-identical: {ok}")),
        Err(e) => r.error("10", name, e),
    }
}

/// Group mass of the expert-frequency rows of one layer and condition.
fn group_mass(rep: &LoadReport, layer: usize, group: usize, epg: usize, condition: &str) -> f64 {
    (group * epg..(group + 1) * epg)
        .map(|e| rep.get(layer, "expert", e, condition).unwrap_or(f64::NAN))
        .sum()
}

/// Held-out L_S on unimodal sequences (half audio-only, half video-only).
fn heldout_load_bias<T: Scalar>(model: &Model<T>, task: &TaskConfig) -> Result<f64> {
    let task = Task::new(task.clone())?;
    let n = EVAL_SEQUENCES;
    let batch: SampleBatch<T> = task.generate_batch_with(n, NoisePlan::Config, &mut Task::batch_rng(EVAL_SEED, 1 << 41));
    let tags: Vec<ModalityTag> = (0..n)
        .map(|i| if i < n / 2 { ModalityTag::AudioOnly } else { ModalityTag::VideoOnly })
        .collect();
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, &bound, &batch.audio, &batch.video, &tags)?;
    let inputs = teacher_forcing_inputs(&batch.targets, model.bos());
    let out = model.forward(&mut tape, &bound, &enc, &inputs, &ForwardOptions::default())?;
    let lv = model.loss(&mut tape, &out, &batch.targets, &LossWeights::default(), Default::default())?;
    Ok(tape.scalar(lv.aux.ls).as_f64())
}

struct Trained {
    model: Model<f32>,
    secs: f64,
}

fn train_seeds(base: &RunConfig, label: &str) -> Result<Vec<Trained>> {
    SEEDS
        .iter()
        .map(|&s| {
            let start = Instant::now();
            let out = train::<f32>(&base.with_seed(s), None)?;
            let secs = start.elapsed().as_secs_f64();
            progress(&format!("{label} seed {s} trained in {secs:.0}s"));
            Ok(Trained { model: out.model, secs })
        })
        .collect()
}

fn load_conditions() -> Vec<Condition> {
    vec![
        Condition::new(ModalityTag::AudioOnly, NoisePlan::Config),
        Condition::new(ModalityTag::VideoOnly, NoisePlan::Config),
        Condition::av_snr(HIGH_NOISE_DB),
        Condition::av_snr(LOW_NOISE_DB),
    ]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Load reports of the trained models plus the wall time spent analysing.
fn load_reports(runs: &[Trained], task: &TaskConfig) -> Result<(Vec<LoadReport>, f64)> {
    let start = Instant::now();
    let conds = load_conditions();
    let reps = runs
        .iter()
        .map(|t| analyze_load(&t.model, task, &conds, EVAL_SEQUENCES, EVAL_SEED, &ForwardOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    Ok((reps, start.elapsed().as_secs_f64()))
}

fn unimodal_masses(reps: &[LoadReport], epg: usize) -> Vec<(f64, f64)> {
    let ao = Condition::new(ModalityTag::AudioOnly, NoisePlan::Config).label();
    let vo = Condition::new(ModalityTag::VideoOnly, NoisePlan::Config).label();
    reps.iter()
        .flat_map(|rep| {
            (0..rep.n_layers()).map(|l| {
                (
                    group_mass(rep, l, AUDIO_GROUP, epg, &ao),
                    group_mass(rep, l, VISUAL_GROUP, epg, &vo),
                )
            })
        })
        .collect()
}

fn fmt_masses(m: &[(f64, f64)]) -> String {
    m.iter().map(|(a, v)| format!("{a:.3}/{v:.3}")).collect::<Vec<_>>().join(" ")
}

/// Criteria 6 and 7 plus the held-out L_S contrast of the two hierarchical
/// variants. Returns the trained load-biased models for criterion 9.
fn load_biasing(r: &mut Report, base: &RunConfig) -> Result<Vec<Trained>> {
    let epg = base.model.moe.experts_per_group;
    let mut off = base.clone();
    off.train.weights.c_s = 0.0;
    let on_runs = train_seeds(base, "hierarchical")?;
    let (on_reps, on_secs) = load_reports(&on_runs, &base.task)?;
    let off_runs = train_seeds(&off, "hierarchical c_S=0")?;
    let (off_reps, off_secs) = load_reports(&off_runs, &base.task)?;
    let total: f64 = on_runs.iter().chain(&off_runs).map(|t| t.secs).sum::<f64>() + on_secs + off_secs;

    let on = unimodal_masses(&on_reps, epg);
    let off_m = unimodal_masses(&off_reps, epg);
    let specialized = on.iter().all(|&(a, v)| a >= 0.9 && v >= 0.9);
    let band = |x: f64| (0.3..=0.7).contains(&x);
    let unbiased = off_m.iter().all(|&(a, v)| band(a) && band(v));
    r.check(
        "6",
        "load-biasing behavior",
        specialized && unbiased && total <= 1800.0,
        format!(
            "audio-only->audio / video-only->visual mass per seed and layer, with L_S: [{}] (need >= 0.9); \
             c_S=0: [{}] (need within [0.3, 0.7]); {total:.0}s for 10 runs (limit 1800s)",
            fmt_masses(&on),
            fmt_masses(&off_m)
        ),
    );

    let on_ls = on_runs
        .iter()
        .map(|t| heldout_load_bias(&t.model, &base.task))
        .collect::<Result<Vec<_>>>()?;
    let off_ls = off_runs
        .iter()
        .map(|t| heldout_load_bias(&t.model, &base.task))
        .collect::<Result<Vec<_>>>()?;
    let drop = mean(&off_ls) - mean(&on_ls);
    r.check(
        "6b",
        "held-out L_S contrast",
        drop >= 0.3,
        format!(
            "mean held-out L_S {:.3} with L_S vs {:.3} with c_S=0, drop {drop:.3} (need >= 0.3)",
            mean(&on_ls),
            mean(&off_ls)
        ),
    );

    let hi = Condition::av_snr(HIGH_NOISE_DB).label();
    let lo = Condition::av_snr(LOW_NOISE_DB).label();
    let shifts: Vec<f64> = on_reps
        .iter()
        .flat_map(|rep| {
            (0..rep.n_layers())
                .map(|l| group_mass(rep, l, VISUAL_GROUP, epg, &hi) - group_mass(rep, l, VISUAL_GROUP, epg, &lo))
                .collect::<Vec<_>>()
        })
        .collect();
    let shift = mean(&shifts);
    r.check(
        "7",
        "adaptive noise behavior",
        shift >= 0.05,
        format!(
            "visual-group mass on audio-visual input, {HIGH_NOISE_DB} dB minus {LOW_NOISE_DB} dB, mean over layers and seeds {shift:.3} \
             (need >= 0.05); per seed and layer [{}]",
            shifts.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" ")
        ),
    );
    Ok(on_runs)
}

fn hard_sweep(r: &mut Report, base: &RunConfig) -> Result<()> {
    let mut cfg = base.clone();
    cfg.model.moe.strategy = Strategy::Hard;
    let runs = train_seeds(&cfg, "hard")?;
    let snrs = [HIGH_NOISE_DB, LOW_NOISE_DB];
    let sweeps = runs
        .iter()
        .map(|t| hard_weight_sweep(&t.model, &cfg.task, &DEFAULT_SWEEP_GRID, &snrs, SWEEP_SEQUENCES, EVAL_SEED))
        .collect::<Result<Vec<_>>>()?;
    // seed-averaged error curve, ties broken by the averaged cross-entropy
    let averaged: Vec<SweepRow> = (0..sweeps[0].len())
        .map(|i| {
            let rows: Vec<&SweepRow> = sweeps.iter().map(|s| &s[i]).collect();
            SweepRow {
                p_audio: rows[0].p_audio,
                snr_db: rows[0].snr_db,
                token_error: mean(&rows.iter().map(|x| x.token_error).collect::<Vec<_>>()),
                nll: mean(&rows.iter().map(|x| x.nll).collect::<Vec<_>>()),
            }
        })
        .collect();
    let high = sweep_argmin(&averaged, HIGH_NOISE_DB).unwrap_or(f64::NAN);
    let low = sweep_argmin(&averaged, LOW_NOISE_DB).unwrap_or(f64::NAN);
    let per_seed = |db: f64| {
        sweeps
            .iter()
            .map(|s| format!("{:.1}", sweep_argmin(s, db).unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    r.check(
        "8",
        "hard-weight sweep",
        high <= 0.5 && low >= 0.5,
        format!(
            "argmin p^A over 5 seeds: {high:.1} at {HIGH_NOISE_DB} dB (need <= 0.5), {low:.1} at {LOW_NOISE_DB} dB (need >= 0.5); \
             per seed [{}] and [{}]",
            per_seed(HIGH_NOISE_DB),
            per_seed(LOW_NOISE_DB)
        ),
    );
    Ok(())
}

fn grid_error<T: Scalar>(model: &Model<T>, cfg: &RunConfig) -> Result<f64> {
    let conds: Vec<Condition> = cfg.train.snr_grid.iter().map(|&db| Condition::av_snr(db)).collect();
    let rows = evaluate(model, &cfg.task, &conds, EVAL_SEQUENCES, EVAL_SEED, &ForwardOptions::default())?;
    Ok(mean(&rows.iter().map(|x| x.token_error).collect::<Vec<_>>()))
}

fn comparative(r: &mut Report, base: &RunConfig, hier: &[Trained]) -> Result<()> {
    let mut cfg = base.clone();
    cfg.model.moe.strategy = Strategy::Flat;
    let flat = train_seeds(&cfg, "flat")?;
    let h = hier.iter().map(|t| grid_error(&t.model, base)).collect::<Result<Vec<_>>>()?;
    let f = flat.iter().map(|t| grid_error(&t.model, &cfg)).collect::<Result<Vec<_>>>()?;
    let diffs: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a - b).collect();
    let (gap, se) = (mean(&diffs), std_err(&diffs));
    let verdict = if gap <= 0.0 {
        Verdict::Pass
    } else if gap <= se {
        Verdict::PassWithNote
    } else {
        Verdict::Fail
    };
    let note = if verdict == Verdict::PassWithNote { "; hierarchical is behind, within one standard error" } else { "" };
    r.record(
        "9",
        "comparative performance",
        verdict,
        format!(
            "mean token error over the SNR grid: hierarchical {:.4}, flat {:.4}; paired difference {gap:.4} +- {se:.4} (s.e.){note}",
            mean(&h),
            mean(&f)
        ),
    );
    Ok(())
}

fn trained_criteria(r: &mut Report) {
    let base = RunConfig::default();
    let hier = match load_biasing(r, &base) {
        Ok(h) => h,
        Err(e) => {
            r.error("6", "load-biasing behavior", e);
            return;
        }
    };
    if let Err(e) = hard_sweep(r, &base) {
        r.error("8", "hard-weight sweep", e);
    }
    if let Err(e) = comparative(r, &base, &hier) {
        r.error("9", "comparative performance", e);
    }
}

fn main() -> ExitCode {
    let mut r = Report::default();
    flops_anchors(&mut r);
    gradient_check(&mut r);
    routing_oracle(&mut r);
    loss_anchors(&mut r);
    strategy_equivalence(&mut r);
    trained_criteria(&mut r);
    determinism(&mut r);
    if r.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", r.failed);
        ExitCode::FAILURE
    }
}
