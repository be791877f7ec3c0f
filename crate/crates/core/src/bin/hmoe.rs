use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use hmoe::harness::{
    analyze_load, evaluate, flops, gradcheck, gradcheck_config, hard_weight_sweep, load_run, sweep_argmin, train,
    Condition, FlopsReport, RunConfig, DEFAULT_SWEEP_GRID, LOAD_REPORT_FILE,
};
use hmoe::model::ForwardOptions;
use hmoe::numkernel::GradCheckOptions;
use hmoe::routing::{ModalityTag, Strategy};
use hmoe::synthdata::NoisePlan;
use hmoe::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "hmoe", version, about = "Mixture-of-experts routing experiments on a synthetic audio-visual task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=500`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run per seed; each run directory gets config.txt,
    /// metrics.csv, model.ckpt, load_report.csv and eval.csv.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to train.out_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; one subdirectory `seed<N>` per seed
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Arithmetic of the training run
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Token error per SNR for one or more checkpoints (mean and std over them).
    Eval {
        #[arg(long = "ckpt", required = true, num_args = 1..)]
        ckpts: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Vec<f64>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inter-weighted expert frequencies and group mass per condition.
    AnalyzeLoad {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Vec<f64>,
        /// Fixed inter-modal group probabilities, e.g. 0.5,0.5
        #[arg(long, value_delimiter = ',')]
        force_q: Vec<f64>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token error of a hard-routing checkpoint over audio-group weights.
    SweepHard {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Vec<f64>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoder FLOPs per sequence for the configured model.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        #[arg(long, default_value_t = 50)]
        text_tokens: usize,
    },
    /// Finite-difference check of the full objective for every strategy.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
}

fn default_conditions(snr: &[f64]) -> Vec<Condition> {
    let mut c = vec![
        Condition::new(ModalityTag::AudioOnly, NoisePlan::Config),
        Condition::new(ModalityTag::VideoOnly, NoisePlan::Config),
        Condition::new(ModalityTag::AudioVisual, NoisePlan::Config),
    ];
    c.extend(snr.iter().map(|&db| Condition::av_snr(db)));
    c
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    match out {
        Some(p) => write_csv(p, header, rows),
        None => {
            println!("{}", header.join(","));
            for r in rows {
                println!("{}", r.join(","));
            }
            Ok(())
        }
    }
}

fn train_one<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let t0 = Instant::now();
    let out = train::<T>(cfg, Some(dir))?;
    let last = out.metrics.last();
    eprintln!(
        "{}: {} steps in {:.1}s, final L_CE {:.4}",
        dir.display(),
        cfg.train.steps,
        t0.elapsed().as_secs_f64(),
        last.map_or(f64::NAN, |m| m.ce)
    );
    let conds = default_conditions(&cfg.train.snr_grid);
    let n = cfg.train.eval_sequences;
    let rep = analyze_load(&out.model, &cfg.task, &conds, n, cfg.train.seed, &ForwardOptions::default())?;
    rep.write_csv(&dir.join(LOAD_REPORT_FILE))?;
    let rows = evaluate(&out.model, &cfg.task, &conds, n, cfg.train.seed, &ForwardOptions::default())?;
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.condition.clone(), r.token_error.to_string(), r.nll.to_string(), r.n_tokens.to_string()])
        .collect();
    write_csv(&dir.join("eval.csv"), &["condition", "token_error", "nll", "n_tokens"], &rows)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            cfg,
            out,
            seeds,
            precision,
        } => {
            let cfg = cfg.load()?;
            let root = out.unwrap_or_else(|| cfg.train.out_dir.clone());
            let runs: Vec<(RunConfig, PathBuf)> = if seeds.is_empty() {
                vec![(cfg.clone(), root)]
            } else {
                seeds.iter().map(|&s| (cfg.with_seed(s), root.join(format!("seed{s}")))).collect()
            };
            for (c, dir) in runs {
                match precision {
                    Precision::F64 => train_one::<f64>(&c, &dir)?,
                    Precision::F32 => train_one::<f32>(&c, &dir)?,
                }
            }
            Ok(())
        }
        Cmd::Eval {
            ckpts,
            snr,
            sequences,
            seed,
            out,
        } => {
            let mut per_ckpt = Vec::new();
            let mut labels = Vec::new();
            for p in &ckpts {
                let (cfg, model, _) = load_run::<f64>(p)?;
                let grid = if snr.is_empty() { cfg.train.snr_grid.clone() } else { snr.clone() };
                let conds: Vec<Condition> = grid.iter().map(|&db| Condition::av_snr(db)).collect();
                let n = sequences.unwrap_or(cfg.train.eval_sequences);
                let rows = evaluate(&model, &cfg.task, &conds, n, seed, &ForwardOptions::default())?;
                labels = rows.iter().map(|r| r.condition.clone()).collect();
                per_ckpt.push(rows.iter().map(|r| r.token_error).collect::<Vec<_>>());
            }
            let k = per_ckpt.len() as f64;
            let rows: Vec<Vec<String>> = labels
                .iter()
                .enumerate()
                .map(|(i, label)| {
                    let xs: Vec<f64> = per_ckpt.iter().map(|r| r[i]).collect();
                    let mean = xs.iter().sum::<f64>() / k;
                    let var = if xs.len() > 1 {
                        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
                    } else {
                        0.0
                    };
                    vec![label.clone(), mean.to_string(), var.sqrt().to_string(), xs.len().to_string()]
                })
                .collect();
            emit(out.as_deref(), &["condition", "token_error_mean", "token_error_std", "n_checkpoints"], &rows)
        }
        Cmd::AnalyzeLoad {
            ckpt,
            snr,
            force_q,
            sequences,
            seed,
            out,
        } => {
            let (cfg, model, _) = load_run::<f64>(&ckpt)?;
            let grid = if snr.is_empty() { cfg.train.snr_grid.clone() } else { snr };
            let opts = ForwardOptions {
                forced_q: (!force_q.is_empty()).then_some(force_q),
                ..ForwardOptions::default()
            };
            if opts.forced_q.is_some() && cfg.model.moe.strategy != Strategy::Hierarchical {
                return Err(Error::Config("--force-q needs a hierarchical checkpoint".into()));
            }
            let n = sequences.unwrap_or(cfg.train.eval_sequences);
            let rep = analyze_load(&model, &cfg.task, &default_conditions(&grid), n, seed, &opts)?;
            match out {
                Some(p) => rep.write_csv(&p),
                None => {
                    println!("layer,kind,index,condition,value");
                    for r in &rep.rows {
                        println!("{},{},{},{},{}", r.layer, r.kind, r.index, r.condition, r.value);
                    }
                    Ok(())
                }
            }
        }
        Cmd::SweepHard {
            ckpt,
            grid,
            snr,
            sequences,
            seed,
            out,
        } => {
            let (cfg, model, _) = load_run::<f64>(&ckpt)?;
            let grid = if grid.is_empty() { DEFAULT_SWEEP_GRID.to_vec() } else { grid };
            let snr = if snr.is_empty() { cfg.train.snr_grid.clone() } else { snr };
            let n = sequences.unwrap_or(cfg.train.eval_sequences);
            let rows = hard_weight_sweep(&model, &cfg.task, &grid, &snr, n, seed)?;
            for &db in &snr {
                if let Some(p) = sweep_argmin(&rows, db) {
                    eprintln!("snr {db} dB: best audio weight {p}");
                }
            }
            let rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![r.p_audio.to_string(), r.snr_db.to_string(), r.token_error.to_string(), r.nll.to_string()]
                })
                .collect();
            emit(out.as_deref(), &["p_audio", "snr_db", "token_error", "nll"], &rows)
        }
        Cmd::Flops {
            cfg,
            frames,
            text_tokens,
        } => {
            let cfg = cfg.load()?;
            let r = flops(&cfg.model, frames, text_tokens);
            let mut rows: Vec<Vec<String>> = r
                .rows()
                .into_iter()
                .map(|(k, v)| vec![k.to_string(), format!("{:.4}", FlopsReport::mflops(v))])
                .collect();
            rows.push(vec!["moe_over_dense_ffn".into(), format!("{:.6}", r.ratio())]);
            eprintln!(
                "assumptions: {frames} frames, {text_tokens} text tokens, {} layers, {} experts per token, MAC = 2 FLOPs",
                r.n_layers, r.activated_experts
            );
            emit(None, &["component", "mflops_per_sequence"], &rows)
        }
        Cmd::Gradcheck {
            seed,
            tolerance,
            epsilon,
        } => {
            let opts = GradCheckOptions {
                tolerance,
                epsilon,
                ..GradCheckOptions::default()
            };
            let strategies = [Strategy::Flat, Strategy::Hard, Strategy::Hierarchical];
            let checks = gradcheck(&gradcheck_config(), seed, &strategies, opts)?;
            let mut ok = true;
            for c in &checks {
                let r = &c.report;
                println!(
                    "{}: {} params, {} checked, {} skipped, max rel err {:.3e} {}",
                    c.strategy,
                    c.n_params,
                    r.checked,
                    r.skipped.len(),
                    r.max_rel_error,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                for (coord, err) in r.failures.iter().take(10) {
                    println!("  {}[{}]: rel err {err:.3e}", coord.param, coord.index);
                }
                ok &= r.passed();
            }
            if ok {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
