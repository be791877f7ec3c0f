//! Toy audio-visual encoder-decoder whose decoder feed-forward blocks are
//! mixture-of-experts layers.
//!
//! Encoder: per-frame fusion `act(mask_a * Linear_a(audio) + mask_v * Linear_v(video))`.
//! Decoder layer: single-head cross-attention over the encoder frames, then
//! an MoE feed-forward block, each with a residual connection. Fixed
//! sinusoidal positions are added to the attention queries and keys. With
//! `layer_norm` both sublayers and the output projection read a layer-normed
//! copy of the residual stream (pre-norm), and the encoder frames are
//! normalized once before the attention keys and values, so the routers see
//! unit-scale inputs in which the frame content is not dwarfed by the token
//! embedding.

mod checkpoint;

pub use checkpoint::{Checkpoint, LoadedExtras, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{join_key, parse_value, KvConfig};
use crate::error::{cfg_err, dim_err, Result};
use crate::losses::{layer_aux_losses, mean_over_layers, weighted_total, LayerAuxVars, LossWeights, ZLossScope};
use crate::numkernel::{argmax, Activation, Param, Tape, Tensor, Var};
use crate::routing::{
    dispatch, ffn, route_flat, route_hard, route_hierarchical, ExpertSelection, FfnVars, ModalityTag, MoEConfig,
    Strategy,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_decoder_layers: usize,
    /// Output vocabulary; the decoder input adds one begin-of-sequence id.
    pub vocab_size: usize,
    pub n_heads: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub activation: Activation,
    /// Pre-norm decoder sublayers and a final norm before the output projection.
    pub layer_norm: bool,
    /// Std of the normal initialization of every weight matrix.
    pub init_std: f64,
    /// Probability that a training sequence becomes unimodal.
    pub dropout_prob: f64,
    /// Share of the unimodal sequences that keep audio.
    pub audio_only_share: f64,
    pub seed: u64,
    pub moe: MoEConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let moe = MoEConfig::default();
        Self {
            d_model: moe.d_model,
            d_ff: moe.d_ff,
            n_decoder_layers: 2,
            vocab_size: 32,
            n_heads: 1,
            d_audio: 16,
            d_video: 16,
            activation: moe.activation,
            layer_norm: true,
            init_std: 0.02,
            dropout_prob: 0.25,
            audio_only_share: 0.5,
            seed: 1,
            moe,
        }
    }
}

impl ModelConfig {
    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.moe.strategy = strategy;
        self
    }

    /// Copies the shared sizes into the MoE section.
    fn sync(&mut self) {
        self.moe.d_model = self.d_model;
        self.moe.d_ff = self.d_ff;
        self.moe.activation = self.activation;
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.d_audio == 0 || self.d_video == 0 {
            return Err(cfg_err!("model dimensions must be positive"));
        }
        if self.n_decoder_layers == 0 {
            return Err(cfg_err!("need at least one decoder layer"));
        }
        if self.vocab_size < 2 {
            return Err(cfg_err!("vocab_size must be at least 2"));
        }
        if self.n_heads != 1 {
            return Err(cfg_err!("only single-head attention is supported (n_heads = {})", self.n_heads));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) || !(0.0..=1.0).contains(&self.audio_only_share) {
            return Err(cfg_err!("dropout_prob and audio_only_share must lie in [0, 1]"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(cfg_err!("init_std must be finite and non-negative"));
        }
        if self.moe.d_model != self.d_model || self.moe.d_ff != self.d_ff || self.moe.activation != self.activation {
            return Err(cfg_err!("MoE sizes disagree with the model sizes"));
        }
        self.moe.validate()
    }

    /// Total number of trainable scalars.
    pub fn n_params(&self) -> usize {
        Layout::new(self).specs.iter().map(|s| s.rows * s.cols).sum()
    }
}

impl KvConfig for ModelConfig {
    fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        let mut kv = vec![
            (join_key(prefix, "d_model"), self.d_model.to_string()),
            (join_key(prefix, "d_ff"), self.d_ff.to_string()),
            (join_key(prefix, "n_decoder_layers"), self.n_decoder_layers.to_string()),
            (join_key(prefix, "vocab_size"), self.vocab_size.to_string()),
            (join_key(prefix, "n_heads"), self.n_heads.to_string()),
            (join_key(prefix, "d_audio"), self.d_audio.to_string()),
            (join_key(prefix, "d_video"), self.d_video.to_string()),
            (join_key(prefix, "activation"), self.activation.to_string()),
            (join_key(prefix, "layer_norm"), self.layer_norm.to_string()),
            (join_key(prefix, "init_std"), self.init_std.to_string()),
            (join_key(prefix, "dropout_prob"), self.dropout_prob.to_string()),
            (join_key(prefix, "audio_only_share"), self.audio_only_share.to_string()),
            (join_key(prefix, "seed"), self.seed.to_string()),
        ];
        kv.extend(self.moe.to_kv(&join_key(prefix, "moe")));
        kv
    }

    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("moe.") {
            return self.moe.set_kv(rest, value);
        }
        match key {
            "d_model" => self.d_model = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "n_decoder_layers" => self.n_decoder_layers = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "d_audio" => self.d_audio = parse_value(key, value)?,
            "d_video" => self.d_video = parse_value(key, value)?,
            "activation" => self.activation = value.parse()?,
            "layer_norm" => self.layer_norm = parse_value(key, value)?,
            "init_std" => self.init_std = parse_value(key, value)?,
            "dropout_prob" => self.dropout_prob = parse_value(key, value)?,
            "audio_only_share" => self.audio_only_share = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(cfg_err!("unknown model key `{key}`")),
        }
        self.sync();
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

/// Gain and shift of one layer norm.
#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    shift: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm_attn: Option<NormIdx>,
    norm_ffn: Option<NormIdx>,
    flat: Option<usize>,
    intra: Vec<usize>,
    inter: Option<usize>,
    /// `w1, b1, w2, b2` per global expert.
    experts: Vec<[usize; 4]>,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    audio_w: usize,
    audio_b: usize,
    video_w: usize,
    video_b: usize,
    embed: usize,
    norm_memory: Option<NormIdx>,
    layers: Vec<LayerIdx>,
    norm_out: Option<NormIdx>,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, init: Init| {
            specs.push(ParamSpec { name, rows, cols, init });
            specs.len() - 1
        };
        let d = cfg.d_model;
        let norm = |add: &mut dyn FnMut(String, usize, usize, Init) -> usize, name: &str| {
            cfg.layer_norm.then(|| NormIdx {
                gain: add(format!("{name}.gain"), 1, d, Init::Ones),
                shift: add(format!("{name}.shift"), 1, d, Init::Zeros),
            })
        };
        let audio_w = add("enc.audio.w".into(), cfg.d_audio, d, Init::Normal);
        let audio_b = add("enc.audio.b".into(), 1, d, Init::Zeros);
        let video_w = add("enc.video.w".into(), cfg.d_video, d, Init::Normal);
        let video_b = add("enc.video.b".into(), 1, d, Init::Zeros);
        let embed = add("dec.embed".into(), cfg.vocab_size + 1, d, Init::Normal);
        let norm_memory = norm(&mut add, "dec.memory.norm");
        let moe = &cfg.moe;
        let epg = moe.experts_per_group;
        let mut layers = Vec::new();
        for l in 0..cfg.n_decoder_layers {
            let p = format!("dec.{l}");
            let norm_attn = norm(&mut add, &format!("{p}.attn.norm"));
            let wq = add(format!("{p}.attn.wq"), d, d, Init::Normal);
            let wk = add(format!("{p}.attn.wk"), d, d, Init::Normal);
            let wv = add(format!("{p}.attn.wv"), d, d, Init::Normal);
            let wo = add(format!("{p}.attn.wo"), d, d, Init::Normal);
            let norm_ffn = norm(&mut add, &format!("{p}.moe.norm"));
            let (mut flat, mut intra, mut inter) = (None, Vec::new(), None);
            match moe.strategy {
                Strategy::Flat => flat = Some(add(format!("{p}.moe.router"), d, moe.n_experts(), Init::Normal)),
                Strategy::Hard | Strategy::Hierarchical => {
                    for g in 0..moe.n_groups {
                        intra.push(add(format!("{p}.moe.intra.{g}"), d, epg, Init::Normal));
                    }
                    if moe.strategy == Strategy::Hierarchical {
                        inter = Some(add(format!("{p}.moe.inter"), d, moe.n_groups, Init::Normal));
                    }
                }
            }
            let experts = (0..moe.n_experts())
                .map(|e| {
                    let q = format!("{p}.moe.expert.{e}");
                    [
                        add(format!("{q}.w1"), d, cfg.d_ff, Init::Normal),
                        add(format!("{q}.b1"), 1, cfg.d_ff, Init::Zeros),
                        add(format!("{q}.w2"), cfg.d_ff, d, Init::Normal),
                        add(format!("{q}.b2"), 1, d, Init::Zeros),
                    ]
                })
                .collect();
            layers.push(LayerIdx {
                wq,
                wk,
                wv,
                wo,
                norm_attn,
                norm_ffn,
                flat,
                intra,
                inter,
                experts,
            });
        }
        let norm_out = norm(&mut add, "out.norm");
        let out_w = add("out.w".into(), d, cfg.vocab_size, Init::Normal);
        let out_b = add("out.b".into(), 1, cfg.vocab_size, Init::Zeros);
        Self {
            specs,
            audio_w,
            audio_b,
            video_w,
            video_b,
            embed,
            norm_memory,
            layers,
            norm_out,
            out_w,
            out_b,
        }
    }
}

/// Model parameters bound as leaves of one tape, in parameter order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Fused per-frame embeddings of a batch of sequences.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// `[n_seq * frames x d_model]`
    pub embeddings: Var,
    /// Per sequence; a dropped modality contributes exactly zero.
    pub tags: Vec<ModalityTag>,
    pub frames: usize,
}

impl EncodedSequence {
    pub fn n_seq(&self) -> usize {
        self.tags.len()
    }
}

/// Overrides used by the analyses and the dense reference.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<T> {
    /// Run this expert on every token instead of routing.
    pub dense_expert: Option<usize>,
    /// Fixed inter-modal group probabilities (hierarchical only).
    pub forced_q: Option<Vec<T>>,
    /// Audio-group weight for audio-visual tokens (hard routing only).
    pub hard_audio_weight: Option<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `[n_tokens x vocab_size]`, sequence-major.
    pub logits: Var,
    /// Routing of every MoE layer (empty for the dense reference).
    pub layers: Vec<ExpertSelection<T>>,
    /// Modality tag of every decoder token.
    pub token_tags: Vec<ModalityTag>,
}

/// Tape nodes of the training objective.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    /// Layer means of the auxiliary terms.
    pub aux: LayerAuxVars,
    pub per_layer: Vec<LayerAuxVars>,
}

/// Sinusoidal position code of `pos` in `d` dimensions.
pub fn position_code(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn position_block<T: Scalar>(positions: &[usize], repeats: usize, d: usize) -> Tensor<T> {
    let codes: Vec<Vec<f64>> = positions.iter().map(|&p| position_code(p, d)).collect();
    let mut data = Vec::with_capacity(repeats * positions.len() * d);
    for _ in 0..repeats {
        for c in &codes {
            data.extend(c.iter().map(|&v| T::lit(v)));
        }
    }
    Tensor::matrix(repeats * positions.len(), d, data).expect("sized above")
}

/// Decoder inputs under teacher forcing: begin-of-sequence, then the
/// targets shifted right by one.
pub fn teacher_forcing_inputs(targets: &[Vec<usize>], bos: usize) -> Vec<Vec<usize>> {
    targets
        .iter()
        .map(|t| std::iter::once(bos).chain(t.iter().copied().take(t.len().saturating_sub(1))).collect())
        .collect()
}

/// Tags for `n` sequences: with probability `p` a sequence becomes
/// unimodal, keeping audio with probability `audio_only_share` and video
/// otherwise.
pub fn modality_dropout<R: Rng>(n: usize, p: f64, audio_only_share: f64, rng: &mut R) -> Result<Vec<ModalityTag>> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&audio_only_share) {
        return Err(cfg_err!("dropout probabilities must lie in [0, 1] (p = {p}, share = {audio_only_share})"));
    }
    Ok((0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                if rng.random::<f64>() < audio_only_share {
                    ModalityTag::AudioOnly
                } else {
                    ModalityTag::VideoOnly
                }
            } else {
                ModalityTag::AudioVisual
            }
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization: weights ~ Normal(0, init_std^2), biases zero,
    /// norm gains one.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| cfg_err!("init_std: {e}"))?;
        let params = layout
            .specs
            .iter()
            .map(|s| {
                let data = (0..s.rows * s.cols)
                    .map(|_| match s.init {
                        Init::Normal => T::lit(normal.sample(&mut rng)),
                        Init::Zeros => T::zero(),
                        Init::Ones => T::one(),
                    })
                    .collect();
                Param::new(s.name.clone(), Tensor::matrix(s.rows, s.cols, data).expect("sized above"))
            })
            .collect();
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Id of the begin-of-sequence decoder input.
    pub fn bos(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Copies expert 0 of every layer into all other experts.
    pub fn tie_experts(&mut self) {
        for layer in &self.layout.layers {
            let first = layer.experts[0];
            for e in &layer.experts[1..] {
                for (dst, src) in e.iter().zip(first) {
                    let v = self.params[src].value.clone();
                    self.params[*dst].value = v;
                }
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p)).collect())
    }

    /// Binds a replacement parameter set with this model's layout.
    pub fn bind_with(&self, tape: &mut Tape<T>, params: &[Param<T>]) -> Result<Bound> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.value.shape() != b.value.shape())
        {
            return Err(dim_err!("parameter set does not match the model layout"));
        }
        Ok(Bound(params.iter().map(|p| tape.param(p)).collect()))
    }

    /// Like [`Model::bind`] but as constants (no gradients are tracked).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.value.clone())).collect())
    }

    /// Fuses `[n_seq * frames x d_a]` audio and `[n_seq * frames x d_v]`
    /// video features; one tag per sequence sets the modality masks.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        audio: &Tensor<T>,
        video: &Tensor<T>,
        tags: &[ModalityTag],
    ) -> Result<EncodedSequence> {
        let rows = audio.rows();
        if video.rows() != rows {
            return Err(dim_err!("{} audio frames but {} video frames", rows, video.rows()));
        }
        if audio.cols() != self.cfg.d_audio || video.cols() != self.cfg.d_video {
            return Err(dim_err!(
                "feature widths {}/{} but the encoder expects {}/{}",
                audio.cols(),
                video.cols(),
                self.cfg.d_audio,
                self.cfg.d_video
            ));
        }
        if tags.is_empty() || rows % tags.len() != 0 {
            return Err(dim_err!("{} frames do not split into {} sequences", rows, tags.len()));
        }
        let frames = rows / tags.len();
        let v = bound.vars();
        let mask = |keep: fn(ModalityTag) -> bool| {
            let data = tags
                .iter()
                .flat_map(|&t| std::iter::repeat_n(if keep(t) { T::one() } else { T::zero() }, frames))
                .collect();
            Tensor::matrix(rows, 1, data).expect("sized above")
        };
        let a_in = tape.constant(audio.clone());
        let a = tape.matmul(a_in, v[self.layout.audio_w])?;
        let a = tape.add(a, v[self.layout.audio_b])?;
        let ma = tape.constant(mask(ModalityTag::has_audio));
        let a = tape.mul(a, ma)?;
        let v_in = tape.constant(video.clone());
        let b = tape.matmul(v_in, v[self.layout.video_w])?;
        let b = tape.add(b, v[self.layout.video_b])?;
        let mv = tape.constant(mask(ModalityTag::has_video));
        let b = tape.mul(b, mv)?;
        let fused = tape.add(a, b)?;
        let embeddings = tape.activation(fused, self.cfg.activation)?;
        Ok(EncodedSequence {
            embeddings,
            tags: tags.to_vec(),
            frames,
        })
    }

    /// Layer norm with learned gain and shift; identity without one.
    fn norm(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, idx: Option<NormIdx>) -> Result<Var> {
        let Some(n) = idx else { return Ok(x) };
        let v = bound.vars();
        let z = tape.standardize(x, T::lit(NORM_EPS))?;
        let z = tape.mul(z, v[n.gain])?;
        tape.add(z, v[n.shift])
    }

    /// Per-layer attention keys and values over the encoder frames.
    fn cross_kv(&self, tape: &mut Tape<T>, bound: &Bound, enc: &EncodedSequence) -> Result<Vec<(Var, Var)>> {
        let v = bound.vars();
        let positions: Vec<usize> = (0..enc.frames).collect();
        let pos = tape.constant(position_block(&positions, enc.n_seq(), self.cfg.d_model));
        let memory = self.norm(tape, bound, enc.embeddings, self.layout.norm_memory)?;
        let k_in = tape.add(memory, pos)?;
        self.layout
            .layers
            .iter()
            .map(|l| Ok((tape.matmul(k_in, v[l.wk])?, tape.matmul(memory, v[l.wv])?)))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        kv: &[(Var, Var)],
        seq_tags: &[ModalityTag],
        inputs: &[Vec<usize>],
        positions: &[usize],
        opts: &ForwardOptions<T>,
    ) -> Result<ForwardOutput<T>> {
        let n_seq = seq_tags.len();
        if inputs.len() != n_seq || inputs.iter().any(|s| s.len() != positions.len()) {
            return Err(dim_err!(
                "decoder inputs must be {} sequences of {} tokens",
                n_seq,
                positions.len()
            ));
        }
        let bos = self.bos();
        let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
        if let Some(&bad) = flat.iter().find(|&&t| t > bos) {
            return Err(crate::error::Error::Index(format!("decoder input id {bad} exceeds {bos}")));
        }
        let token_tags: Vec<ModalityTag> = seq_tags
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, positions.len()))
            .collect();
        let v = bound.vars();
        let moe = &self.cfg.moe;
        let act = self.cfg.activation;
        let mut x = tape.gather_rows(v[self.layout.embed], flat)?;
        let pos = tape.constant(position_block(positions, n_seq, self.cfg.d_model));
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for (l, &(k, val)) in self.layout.layers.iter().zip(kv) {
            let h = self.norm(tape, bound, x, l.norm_attn)?;
            let q_in = tape.add(h, pos)?;
            let q = tape.matmul(q_in, v[l.wq])?;
            let a = tape.attention(q, k, val, n_seq)?;
            let a = tape.matmul(a, v[l.wo])?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, bound, x, l.norm_ffn)?;
            let bank: Vec<FfnVars> = l
                .experts
                .iter()
                .map(|e| FfnVars {
                    w1: v[e[0]],
                    b1: v[e[1]],
                    w2: v[e[2]],
                    b2: v[e[3]],
                })
                .collect();
            let y = if let Some(e) = opts.dense_expert {
                let w = bank
                    .get(e)
                    .ok_or_else(|| cfg_err!("dense expert {e} out of {} experts", bank.len()))?;
                ffn(tape, h, w, act)?
            } else {
                let sel = match moe.strategy {
                    Strategy::Flat => {
                        let r = v[l.flat.expect("flat router")];
                        route_flat(tape, h, r, moe.k_flat, moe.experts_per_group)?
                    }
                    Strategy::Hard => {
                        let intra = [v[l.intra[0]], v[l.intra[1]]];
                        route_hard(tape, h, &token_tags, intra, moe.k_hard, opts.hard_audio_weight)?
                    }
                    Strategy::Hierarchical => {
                        let intra: Vec<Var> = l.intra.iter().map(|&i| v[i]).collect();
                        route_hierarchical(
                            tape,
                            h,
                            &token_tags,
                            v[l.inter.expect("inter router")],
                            &intra,
                            moe.m_groups,
                            &moe.k_within,
                            opts.forced_q.as_deref(),
                        )?
                    }
                };
                let y = dispatch(tape, h, &bank, &sel, act)?;
                layers.push(sel);
                y
            };
            x = tape.add(x, y)?;
        }
        let x = self.norm(tape, bound, x, self.layout.norm_out)?;
        let logits = tape.matmul(x, v[self.layout.out_w])?;
        let logits = tape.add(logits, v[self.layout.out_b])?;
        Ok(ForwardOutput {
            logits,
            layers,
            token_tags,
        })
    }

    /// Teacher-forced decoder pass over `inputs` (one id list per sequence,
    /// positions `0..len`).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        enc: &EncodedSequence,
        inputs: &[Vec<usize>],
        opts: &ForwardOptions<T>,
    ) -> Result<ForwardOutput<T>> {
        let kv = self.cross_kv(tape, bound, enc)?;
        let len = inputs.first().map_or(0, Vec::len);
        let positions: Vec<usize> = (0..len).collect();
        self.decode(tape, bound, &kv, &enc.tags, inputs, &positions, opts)
    }

    /// Greedy decoding of `len` tokens per sequence, feeding back the argmax.
    pub fn greedy_decode(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        enc: &EncodedSequence,
        len: usize,
        opts: &ForwardOptions<T>,
    ) -> Result<Vec<Vec<usize>>> {
        let kv = self.cross_kv(tape, bound, enc)?;
        let n = enc.n_seq();
        let mut out = vec![Vec::with_capacity(len); n];
        let mut prev = vec![vec![self.bos()]; n];
        for t in 0..len {
            let step = self.decode(tape, bound, &kv, &enc.tags, &prev, &[t], opts)?;
            let logits = tape.value(step.logits);
            for (s, seq) in out.iter_mut().enumerate() {
                let tok = argmax(logits.row(s));
                seq.push(tok);
                prev[s][0] = tok;
            }
        }
        Ok(out)
    }

    /// Cross-entropy plus the weighted auxiliary losses, averaged over layers.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        out: &ForwardOutput<T>,
        targets: &[Vec<usize>],
        weights: &LossWeights,
        scope: ZLossScope,
    ) -> Result<LossVars> {
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        let n = tape.value(out.logits).rows();
        if flat.len() != n {
            return Err(dim_err!("{} targets for {} logit rows", flat.len(), n));
        }
        if let Some(&bad) = flat.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(crate::error::Error::Index(format!("target {bad} outside the vocabulary")));
        }
        let lse = tape.logsumexp(out.logits)?;
        let coords = flat.iter().enumerate().map(|(r, &t)| (r, t)).collect();
        let picked = tape.pick(out.logits, coords, &[n, 1])?;
        let nll = tape.sub(lse, picked)?;
        let ce = tape.mean(nll)?;
        let per_layer = out
            .layers
            .iter()
            .map(|sel| layer_aux_losses(tape, sel, &out.token_tags, scope))
            .collect::<Result<Vec<_>>>()?;
        let aux = mean_over_layers(tape, &per_layer)?;
        let total = weighted_total(tape, ce, &aux, weights)?;
        Ok(LossVars {
            total,
            ce,
            aux,
            per_layer,
        })
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}
