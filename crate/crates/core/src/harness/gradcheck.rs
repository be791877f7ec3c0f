use crate::error::Result;
use crate::losses::{LossWeights, ZLossScope};
use crate::model::{teacher_forcing_inputs, ForwardOptions, Model, ModelConfig};
use crate::numkernel::{finite_diff_check, Evaluation, GradCheckOptions, GradCheckReport, Tape};
use crate::routing::{ModalityTag, Strategy};
use crate::synthdata::{SampleBatch, Task, TaskConfig};

#[derive(Clone, Debug)]
pub struct StrategyCheck {
    pub strategy: Strategy,
    pub n_params: usize,
    pub report: GradCheckReport,
}

/// Small model for finite-difference checks (a few thousand parameters).
///
/// The larger init keeps gradients well above the relative-error floor.
pub fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        d_model: 8,
        d_ff: 16,
        vocab_size: 6,
        d_audio: 4,
        d_video: 4,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    cfg.moe.experts_per_group = 2;
    cfg.moe.d_model = cfg.d_model;
    cfg.moe.d_ff = cfg.d_ff;
    cfg
}

/// Checks the full objective (cross-entropy plus all auxiliary terms) of
/// each strategy on four one-frame sequences covering every modality tag.
pub fn gradcheck(
    base: &ModelConfig,
    seed: u64,
    strategies: &[Strategy],
    opts: GradCheckOptions,
) -> Result<Vec<StrategyCheck>> {
    let tags = [
        ModalityTag::AudioOnly,
        ModalityTag::VideoOnly,
        ModalityTag::AudioVisual,
        ModalityTag::AudioOnly,
    ];
    let task = Task::new(TaskConfig {
        vocab_size: base.vocab_size,
        n_clusters: 1,
        seq_len: 1,
        d_audio: base.d_audio,
        d_video: base.d_video,
        sigma_audio: 0.2,
        seed,
        ..TaskConfig::default()
    })?;
    let batch: SampleBatch<f64> = task.generate_batch(tags.len(), &mut Task::batch_rng(seed, 0));
    let weights = LossWeights::default();
    strategies
        .iter()
        .map(|&strategy| {
            let mut cfg = base.clone().with_strategy(strategy);
            cfg.seed = seed;
            let model = Model::<f64>::new(cfg)?;
            let mut params = model.params().to_vec();
            let report = finite_diff_check(
                &mut params,
                |ps, need| {
                    let mut tape = Tape::new();
                    let bound = model.bind_with(&mut tape, ps)?;
                    let enc = model.encode(&mut tape, &bound, &batch.audio, &batch.video, &tags)?;
                    let inputs = teacher_forcing_inputs(&batch.targets, model.bos());
                    let out = model.forward(&mut tape, &bound, &enc, &inputs, &ForwardOptions::default())?;
                    let lv = model.loss(&mut tape, &out, &batch.targets, &weights, ZLossScope::default())?;
                    let loss = tape.scalar(lv.total);
                    let fingerprint = out.layers.iter().flat_map(|s| s.fingerprint()).collect();
                    let grads = if need {
                        let g = tape.backward(lv.total)?;
                        bound.vars().iter().zip(ps).map(|(&v, p)| g.get_or_zeros(v, &p.value)).collect()
                    } else {
                        Vec::new()
                    };
                    Ok(Evaluation { loss, grads, fingerprint })
                },
                opts,
            )?;
            Ok(StrategyCheck {
                strategy,
                n_params: model.n_params(),
                report,
            })
        })
        .collect()
}
