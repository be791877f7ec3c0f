use crate::model::ModelConfig;
use crate::routing::Strategy;

/// Per-sequence FLOP counts of the decoder; one multiply-accumulate is two
/// FLOPs.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub frames: usize,
    pub text_tokens: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub activated_experts: usize,
    /// Router outputs computed per token.
    pub router_logits: usize,
    /// One dense FFN over all text tokens, per layer.
    pub dense_ffn: f64,
    /// Activated experts over all text tokens, per layer.
    pub moe_experts: f64,
    pub router: f64,
    /// `moe_experts + router`, per layer.
    pub moe_ffn: f64,
    /// Cross-attention projections, scores and mixing, per layer.
    pub attention: f64,
    pub total_dense: f64,
    pub total_moe: f64,
}

impl FlopsReport {
    pub fn mflops(v: f64) -> f64 {
        v / 1e6
    }

    /// MoE over dense FFN cost.
    pub fn ratio(&self) -> f64 {
        self.moe_ffn / self.dense_ffn
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("dense_ffn_per_layer", self.dense_ffn),
            ("moe_experts_per_layer", self.moe_experts),
            ("router_per_layer", self.router),
            ("moe_ffn_per_layer", self.moe_ffn),
            ("attention_per_layer", self.attention),
            ("total_dense", self.total_dense),
            ("total_moe", self.total_moe),
        ]
    }
}

/// FLOPs of `cfg`'s decoder for one sequence of `frames` encoder frames and
/// `text_tokens` decoder tokens.
pub fn flops(cfg: &ModelConfig, frames: usize, text_tokens: usize) -> FlopsReport {
    let (d, ff, t, f) = (cfg.d_model as f64, cfg.d_ff as f64, text_tokens as f64, frames as f64);
    let moe = &cfg.moe;
    let dense_ffn = 2.0 * 2.0 * d * ff * t;
    let k = moe.activated_experts();
    let router_logits = match moe.strategy {
        Strategy::Flat | Strategy::Hard => moe.n_experts(),
        Strategy::Hierarchical => moe.n_groups + moe.n_experts(),
    };
    let moe_experts = k as f64 * dense_ffn;
    let router = 2.0 * d * router_logits as f64 * t;
    let moe_ffn = moe_experts + router;
    // q and output projections on tokens, k and v on frames, QK^T and PV
    let attention = 2.0 * (2.0 * d * d * t + 2.0 * d * d * f + 2.0 * t * f * d);
    let layers = cfg.n_decoder_layers as f64;
    FlopsReport {
        frames,
        text_tokens,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        n_layers: cfg.n_decoder_layers,
        activated_experts: k,
        router_logits,
        dense_ffn,
        moe_experts,
        router,
        moe_ffn,
        attention,
        total_dense: layers * (dense_ffn + attention),
        total_moe: layers * (moe_ffn + attention),
    }
}
