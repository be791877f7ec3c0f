//! Token dispatch: flat top-k routing, modality-hard routing and two-level
//! hierarchical gating, plus the expert combine step.
//!
//! Routing decisions (which experts run) are taken on plain values and are
//! constants for differentiation; gradients reach the routers only through
//! the renormalized combine weights, which are built on the tape as a softmax
//! over the selected logits (identical to renormalizing the selected
//! probabilities).

use std::fmt;
use std::str::FromStr;

use crate::config::{join_key, parse_list, parse_value, render_list, KvConfig};
use crate::error::{cfg_err, dim_err, Error, Result};
use crate::numkernel::{argmax, top_k, Activation, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Group index of the audio experts.
pub const AUDIO_GROUP: usize = 0;
/// Group index of the visual experts.
pub const VISUAL_GROUP: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    AudioOnly,
    VideoOnly,
    AudioVisual,
}

impl ModalityTag {
    pub fn has_audio(self) -> bool {
        !matches!(self, ModalityTag::VideoOnly)
    }

    pub fn has_video(self) -> bool {
        !matches!(self, ModalityTag::AudioOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::AudioOnly => "audio_only",
            ModalityTag::VideoOnly => "video_only",
            ModalityTag::AudioVisual => "audio_visual",
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Flat,
    Hard,
    Hierarchical,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(Strategy::Flat),
            "hard" => Ok(Strategy::Hard),
            "hierarchical" | "hier" => Ok(Strategy::Hierarchical),
            other => Err(cfg_err!("unknown routing strategy `{other}`")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Flat => "flat",
            Strategy::Hard => "hard",
            Strategy::Hierarchical => "hierarchical",
        })
    }
}

/// Expert layout and activation counts of one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEConfig {
    pub strategy: Strategy,
    pub n_groups: usize,
    pub experts_per_group: usize,
    /// Flat top-k over all experts.
    pub k_flat: usize,
    /// Experts per unimodal token under hard routing (half per group for
    /// audio-visual tokens).
    pub k_hard: usize,
    /// Top-m groups under hierarchical gating.
    pub m_groups: usize,
    /// Experts chosen within each group under hierarchical gating.
    pub k_within: Vec<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub activation: Activation,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hierarchical,
            n_groups: 2,
            experts_per_group: 4,
            k_flat: 2,
            k_hard: 2,
            m_groups: 2,
            k_within: vec![1, 1],
            d_model: 64,
            d_ff: 256,
            activation: Activation::Gelu,
        }
    }
}

impl MoEConfig {
    pub fn n_experts(&self) -> usize {
        self.n_groups * self.experts_per_group
    }

    /// Experts run per token (for audio-visual tokens under hard routing).
    pub fn activated_experts(&self) -> usize {
        match self.strategy {
            Strategy::Flat => self.k_flat,
            Strategy::Hard => self.k_hard,
            Strategy::Hierarchical => {
                // the top-m groups with the largest k_within bound the count
                let mut ks = self.k_within.clone();
                ks.sort_unstable_by(|a, b| b.cmp(a));
                ks.iter().take(self.m_groups).sum()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.experts_per_group == 0 {
            return Err(cfg_err!("MoE needs at least one group and one expert per group"));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(cfg_err!("d_model and d_ff must be positive"));
        }
        if self.k_flat == 0 || self.k_flat > self.n_experts() {
            return Err(cfg_err!(
                "k_flat = {} outside [1, {}]",
                self.k_flat,
                self.n_experts()
            ));
        }
        if self.m_groups == 0 || self.m_groups > self.n_groups {
            return Err(cfg_err!("m_groups = {} outside [1, {}]", self.m_groups, self.n_groups));
        }
        if self.k_within.len() != self.n_groups {
            return Err(cfg_err!(
                "k_within has {} entries for {} groups",
                self.k_within.len(),
                self.n_groups
            ));
        }
        if let Some(&k) = self
            .k_within
            .iter()
            .find(|&&k| k == 0 || k > self.experts_per_group)
        {
            return Err(cfg_err!(
                "k_within entry {k} outside [1, {}]",
                self.experts_per_group
            ));
        }
        if self.strategy == Strategy::Hard {
            if self.n_groups != 2 {
                return Err(cfg_err!("hard routing needs exactly an audio and a visual group"));
            }
            if self.k_hard == 0 || self.k_hard > self.experts_per_group {
                return Err(cfg_err!(
                    "k_hard = {} outside [1, {}]",
                    self.k_hard,
                    self.experts_per_group
                ));
            }
        }
        if self.strategy == Strategy::Hierarchical && self.n_groups < 2 {
            return Err(cfg_err!("hierarchical gating needs at least two groups"));
        }
        Ok(())
    }
}

impl KvConfig for MoEConfig {
    /// Layer sizes and the activation live with the model configuration.
    fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (join_key(prefix, "strategy"), self.strategy.to_string()),
            (join_key(prefix, "n_groups"), self.n_groups.to_string()),
            (join_key(prefix, "experts_per_group"), self.experts_per_group.to_string()),
            (join_key(prefix, "k_flat"), self.k_flat.to_string()),
            (join_key(prefix, "k_hard"), self.k_hard.to_string()),
            (join_key(prefix, "m_groups"), self.m_groups.to_string()),
            (join_key(prefix, "k_within"), render_list(&self.k_within)),
        ]
    }

    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "strategy" => self.strategy = value.parse()?,
            "n_groups" => self.n_groups = parse_value(key, value)?,
            "experts_per_group" => self.experts_per_group = parse_value(key, value)?,
            "k_flat" => self.k_flat = parse_value(key, value)?,
            "k_hard" => self.k_hard = parse_value(key, value)?,
            "m_groups" => self.m_groups = parse_value(key, value)?,
            "k_within" => self.k_within = parse_list(key, value)?,
            _ => return Err(cfg_err!("unknown MoE key `{key}`")),
        }
        Ok(())
    }
}

/// Router matrices bound on a tape for one layer; only the ones used by the
/// strategy are present. Each is `d_model x n_outputs`, without bias.
#[derive(Clone, Debug, Default)]
pub struct RouterVars {
    pub flat: Option<Var>,
    pub intra: Vec<Var>,
    pub inter: Option<Var>,
}

/// Weights of one expert FFN bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `Linear(d -> d_ff) -> activation -> Linear(d_ff -> d)`.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &FfnVars, act: Activation) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add(h, w.b1)?;
    let h = tape.activation(h, act)?;
    let o = tape.matmul(h, w.w2)?;
    tape.add(o, w.b2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterKind {
    Flat,
    Intra(usize),
    Inter,
}

/// Logits and probabilities of one router over the tokens it scored.
#[derive(Clone, Debug)]
pub struct RouterOutput<T> {
    pub kind: RouterKind,
    /// Token indices (rows of the layer input) this router scored.
    pub rows: Vec<usize>,
    pub logits: Var,
    pub probs: Var,
    pub prob_values: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice<T> {
    pub group: usize,
    pub expert: usize,
    pub weight: T,
}

impl<T> Choice<T> {
    pub fn global(&self, experts_per_group: usize) -> usize {
        self.group * experts_per_group + self.expert
    }
}

/// Per-token routing result of one MoE layer.
#[derive(Clone, Debug)]
pub struct ExpertSelection<T> {
    pub n_tokens: usize,
    pub n_groups: usize,
    pub experts_per_group: usize,
    /// Selected experts per token with their combine weights.
    pub choices: Vec<Vec<Choice<T>>>,
    /// Group-level weight per token (q-tilde, the fixed hard-routing split,
    /// or for flat routing the combine mass falling in each group).
    pub group_weights: Vec<Vec<T>>,
    /// Dense `[T x n_experts]` combine weights on the tape.
    pub combine: Var,
    pub routers: Vec<RouterOutput<T>>,
}

impl<T: Scalar> ExpertSelection<T> {
    pub fn n_experts(&self) -> usize {
        self.n_groups * self.experts_per_group
    }

    pub fn router(&self, kind: RouterKind) -> Option<&RouterOutput<T>> {
        self.routers.iter().find(|r| r.kind == kind)
    }

    /// Every discrete decision: chosen experts and each router's argmax.
    pub fn fingerprint(&self) -> Vec<usize> {
        let epg = self.experts_per_group;
        let mut fp = Vec::new();
        for cs in &self.choices {
            fp.push(cs.len());
            fp.extend(cs.iter().map(|c| c.global(epg)));
        }
        for r in &self.routers {
            for i in 0..r.prob_values.rows() {
                fp.push(argmax(r.prob_values.row(i)));
            }
        }
        fp
    }

    /// Tokens routed to each global expert, in token order.
    pub fn tokens_per_expert(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_experts()];
        for (t, cs) in self.choices.iter().enumerate() {
            for c in cs {
                out[c.global(self.experts_per_group)].push(t);
            }
        }
        out
    }
}

/// Brute-force top-k by full sort with a stable lowest-index tie-break.
pub fn topk_oracle<T: Scalar>(p: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

struct Piece {
    var: Var,
    /// `(token, global expert)` of each element of `var`, row-major.
    targets: Vec<(usize, usize)>,
}

fn logits_and_probs<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<(Var, Var)> {
    let h = tape.matmul(x, w)?;
    let p = tape.softmax(h)?;
    Ok((h, p))
}

/// Renormalized weights of the `sel[i]` entries of each row `rows[i]` of `logits`.
fn renormalized<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    local_rows: &[usize],
    sel: &[Vec<usize>],
) -> Result<Var> {
    let k = sel.first().map_or(0, Vec::len);
    let coords: Vec<(usize, usize)> = local_rows
        .iter()
        .zip(sel)
        .flat_map(|(&r, s)| s.iter().map(move |&c| (r, c)))
        .collect();
    let picked = tape.pick(logits, coords, &[local_rows.len(), k])?;
    tape.softmax(picked)
}

fn assemble<T: Scalar>(
    tape: &mut Tape<T>,
    pieces: Vec<Piece>,
    n_tokens: usize,
    n_groups: usize,
    epg: usize,
    group_weights: Vec<Vec<T>>,
    routers: Vec<RouterOutput<T>>,
) -> Result<ExpertSelection<T>> {
    let n_experts = n_groups * epg;
    let mut choices: Vec<Vec<Choice<T>>> = vec![Vec::new(); n_tokens];
    let mut parts = Vec::with_capacity(pieces.len());
    for piece in pieces {
        let vals = tape.value(piece.var).data().to_vec();
        for (&(t, e), &w) in piece.targets.iter().zip(&vals) {
            choices[t].push(Choice {
                group: e / epg,
                expert: e % epg,
                weight: w,
            });
        }
        parts.push(tape.scatter_elems(piece.var, piece.targets, &[n_tokens, n_experts])?);
    }
    for cs in choices.iter_mut() {
        cs.sort_by_key(|c| (c.group, c.expert));
    }
    let combine = if parts.is_empty() {
        tape.constant(Tensor::zeros(&[n_tokens, n_experts]))
    } else {
        tape.add_all(&parts)?
    };
    Ok(ExpertSelection {
        n_tokens,
        n_groups,
        experts_per_group: epg,
        choices,
        group_weights,
        combine,
        routers,
    })
}

/// Flat top-k routing over all `n_groups * experts_per_group` experts.
pub fn route_flat<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    router: Var,
    k: usize,
    experts_per_group: usize,
) -> Result<ExpertSelection<T>> {
    let n_tokens = tape.value(x).rows();
    let n_experts = tape.value(router).cols();
    if k == 0 || k > n_experts {
        return Err(cfg_err!("flat top-{k} over {n_experts} experts"));
    }
    if experts_per_group == 0 || n_experts % experts_per_group != 0 {
        return Err(cfg_err!(
            "{n_experts} experts do not split into groups of {experts_per_group}"
        ));
    }
    let n_groups = n_experts / experts_per_group;
    let (h, p) = logits_and_probs(tape, x, router)?;
    let pv = tape.value(p).clone();
    let sel: Vec<Vec<usize>> = (0..n_tokens).map(|t| top_k(pv.row(t), k)).collect();
    let rows: Vec<usize> = (0..n_tokens).collect();
    let w = renormalized(tape, h, &rows, &sel)?;
    let targets: Vec<(usize, usize)> = sel
        .iter()
        .enumerate()
        .flat_map(|(t, s)| s.iter().map(move |&e| (t, e)))
        .collect();
    let wv = tape.value(w).clone();
    let mut group_weights = vec![vec![T::zero(); n_groups]; n_tokens];
    for (t, s) in sel.iter().enumerate() {
        for (j, &e) in s.iter().enumerate() {
            group_weights[t][e / experts_per_group] += wv.at(t, j);
        }
    }
    let routers = vec![RouterOutput {
        kind: RouterKind::Flat,
        rows,
        logits: h,
        probs: p,
        prob_values: pv,
    }];
    assemble(
        tape,
        vec![Piece { var: w, targets }],
        n_tokens,
        n_groups,
        experts_per_group,
        group_weights,
        routers,
    )
}

/// Modality-hard routing over an audio group (index 0) and a visual group
/// (index 1).
///
/// Unimodal tokens use top-`k` of their own group; audio-visual tokens use
/// top-`k/2` of each group with group weights `(audio_weight, 1 - audio_weight)`
/// (0.5 by default).
pub fn route_hard<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    tags: &[ModalityTag],
    intra: [Var; 2],
    k: usize,
    audio_weight: Option<T>,
) -> Result<ExpertSelection<T>> {
    let n_tokens = tape.value(x).rows();
    if tags.len() != n_tokens {
        return Err(dim_err!("{} tags for {} tokens", tags.len(), n_tokens));
    }
    let epg = tape.value(intra[0]).cols();
    if tape.value(intra[1]).cols() != epg {
        return Err(cfg_err!("audio and visual groups differ in size"));
    }
    let has_av = tags.contains(&ModalityTag::AudioVisual);
    if k == 0 || k > epg {
        return Err(cfg_err!("hard top-{k} within groups of {epg}"));
    }
    if has_av && k % 2 != 0 {
        return Err(cfg_err!("odd k = {k} cannot split across groups for audio-visual tokens"));
    }
    let pa = audio_weight.unwrap_or_else(|| T::lit(0.5));
    if !(T::zero()..=T::one()).contains(&pa) {
        return Err(cfg_err!("audio group weight {pa} outside [0, 1]"));
    }
    let split = [pa, T::one() - pa];

    let mut group_weights = vec![vec![T::zero(); 2]; n_tokens];
    for (t, tag) in tags.iter().enumerate() {
        group_weights[t] = match tag {
            ModalityTag::AudioOnly => vec![T::one(), T::zero()],
            ModalityTag::VideoOnly => vec![T::zero(), T::one()],
            ModalityTag::AudioVisual => split.to_vec(),
        };
    }

    let mut pieces = Vec::new();
    let mut routers = Vec::new();
    for (g, &w_g) in intra.iter().enumerate() {
        let rows: Vec<usize> = (0..n_tokens)
            .filter(|&t| if g == AUDIO_GROUP { tags[t].has_audio() } else { tags[t].has_video() })
            .collect();
        if rows.is_empty() {
            continue;
        }
        let xg = tape.gather_rows(x, rows.clone())?;
        let (h, p) = logits_and_probs(tape, xg, w_g)?;
        let pv = tape.value(p).clone();
        for bimodal in [false, true] {
            let kk = if bimodal { k / 2 } else { k };
            let local: Vec<usize> = (0..rows.len())
                .filter(|&i| (tags[rows[i]] == ModalityTag::AudioVisual) == bimodal)
                .collect();
            if local.is_empty() {
                continue;
            }
            let sel: Vec<Vec<usize>> = local.iter().map(|&i| top_k(pv.row(i), kk)).collect();
            let mut w = renormalized(tape, h, &local, &sel)?;
            if bimodal {
                w = tape.scale(w, split[g])?;
            }
            let rows = &rows;
            let targets = local
                .iter()
                .zip(&sel)
                .flat_map(|(&i, s)| s.iter().map(move |&j| (rows[i], g * epg + j)))
                .collect();
            pieces.push(Piece { var: w, targets });
        }
        routers.push(RouterOutput {
            kind: RouterKind::Intra(g),
            rows,
            logits: h,
            probs: p,
            prob_values: pv,
        });
    }
    assemble(tape, pieces, n_tokens, 2, epg, group_weights, routers)
}

/// Hierarchical gating: the inter-modal router weights the top-`m` groups of
/// every token regardless of modality; intra-modal routers choose
/// `k_within[g]` experts inside each selected group.
///
/// With `k_within[g] == 1` the intra weight is the Kronecker delta at the
/// group's argmax, so the expert weight is the group weight itself.
/// `forced_q` replaces the inter-modal probabilities by a fixed vector
/// (analysis only; no gradient reaches the inter router through the output).
#[allow(clippy::too_many_arguments)]
pub fn route_hierarchical<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    tags: &[ModalityTag],
    inter: Var,
    intra: &[Var],
    m: usize,
    k_within: &[usize],
    forced_q: Option<&[T]>,
) -> Result<ExpertSelection<T>> {
    let n_tokens = tape.value(x).rows();
    if tags.len() != n_tokens {
        return Err(dim_err!("{} tags for {} tokens", tags.len(), n_tokens));
    }
    let n_groups = tape.value(inter).cols();
    if intra.len() != n_groups || k_within.len() != n_groups {
        return Err(cfg_err!(
            "{} groups but {} intra routers and {} k_within entries",
            n_groups,
            intra.len(),
            k_within.len()
        ));
    }
    if m == 0 || m > n_groups {
        return Err(cfg_err!("top-{m} of {n_groups} groups"));
    }
    let epg = tape.value(intra[0]).cols();
    if intra.iter().any(|&w| tape.value(w).cols() != epg) {
        return Err(cfg_err!("expert groups differ in size"));
    }
    if let Some(&k) = k_within.iter().find(|&&k| k == 0 || k > epg) {
        return Err(cfg_err!("top-{k} within groups of {epg}"));
    }

    let (u, q) = logits_and_probs(tape, x, inter)?;
    let qv = tape.value(q).clone();
    let rows: Vec<usize> = (0..n_tokens).collect();

    // group selection and q-tilde
    let (group_sel, q_tilde): (Vec<Vec<usize>>, Var) = match forced_q {
        Some(fq) => {
            if fq.len() != n_groups {
                return Err(dim_err!("forced q has {} entries for {} groups", fq.len(), n_groups));
            }
            let sel = top_k(fq, m);
            let total: T = sel.iter().map(|&g| fq[g]).sum();
            let row: Vec<T> = sel.iter().map(|&g| fq[g] / total).collect();
            let data = row.iter().copied().cycle().take(n_tokens * m).collect();
            let qt = tape.constant(Tensor::matrix(n_tokens, m, data)?);
            (vec![sel; n_tokens], qt)
        }
        None => {
            let sel: Vec<Vec<usize>> = (0..n_tokens).map(|t| top_k(qv.row(t), m)).collect();
            let qt = renormalized(tape, u, &rows, &sel)?;
            (sel, qt)
        }
    };
    let qtv = tape.value(q_tilde).clone();
    let mut group_weights = vec![vec![T::zero(); n_groups]; n_tokens];
    for t in 0..n_tokens {
        for (slot, &g) in group_sel[t].iter().enumerate() {
            group_weights[t][g] = qtv.at(t, slot);
        }
    }

    let mut pieces = Vec::new();
    let mut routers = Vec::with_capacity(n_groups + 1);
    for g in 0..n_groups {
        let (h, p) = logits_and_probs(tape, x, intra[g])?;
        let pv = tape.value(p).clone();
        let members: Vec<(usize, usize)> = (0..n_tokens)
            .filter_map(|t| group_sel[t].iter().position(|&s| s == g).map(|slot| (t, slot)))
            .collect();
        if !members.is_empty() {
            let toks: Vec<usize> = members.iter().map(|&(t, _)| t).collect();
            let qcol = tape.pick(q_tilde, members.clone(), &[members.len(), 1])?;
            let kk = k_within[g];
            let sel: Vec<Vec<usize>> = if kk == 1 {
                toks.iter().map(|&t| vec![argmax(pv.row(t))]).collect()
            } else {
                toks.iter().map(|&t| top_k(pv.row(t), kk)).collect()
            };
            let w = if kk == 1 {
                qcol
            } else {
                let p_tilde = renormalized(tape, h, &toks, &sel)?;
                tape.mul(p_tilde, qcol)?
            };
            let targets = toks
                .iter()
                .zip(&sel)
                .flat_map(|(&t, s)| s.iter().map(move |&j| (t, g * epg + j)))
                .collect();
            pieces.push(Piece { var: w, targets });
        }
        routers.push(RouterOutput {
            kind: RouterKind::Intra(g),
            rows: rows.clone(),
            logits: h,
            probs: p,
            prob_values: pv,
        });
    }
    routers.push(RouterOutput {
        kind: RouterKind::Inter,
        rows,
        logits: u,
        probs: q,
        prob_values: qv,
    });
    assemble(tape, pieces, n_tokens, n_groups, epg, group_weights, routers)
}

/// Weighted sum of the selected experts' outputs, `[T x d]`.
///
/// Gradient reaches `x` through every selected expert and the routers
/// through `sel.combine`.
pub fn dispatch<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    experts: &[FfnVars],
    sel: &ExpertSelection<T>,
    act: Activation,
) -> Result<Var> {
    if experts.len() != sel.n_experts() {
        return Err(dim_err!(
            "{} experts in the bank, selection expects {}",
            experts.len(),
            sel.n_experts()
        ));
    }
    let n_tokens = tape.value(x).rows();
    if n_tokens != sel.n_tokens {
        return Err(dim_err!("{} tokens but selection covers {}", n_tokens, sel.n_tokens));
    }
    let d = tape.value(x).cols();
    let mut placed = Vec::new();
    for (e, toks) in sel.tokens_per_expert().into_iter().enumerate() {
        if toks.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, toks.clone())?;
        let out = ffn(tape, xe, &experts[e], act)?;
        let coords: Vec<(usize, usize)> = toks.iter().map(|&t| (t, e)).collect();
        let wcol = tape.pick(sel.combine, coords, &[toks.len(), 1])?;
        let scaled = tape.mul(out, wcol)?;
        placed.push(tape.scatter_rows(scaled, toks, n_tokens)?);
    }
    if placed.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[n_tokens, d])));
    }
    tape.add_all(&placed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_row(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    /// Router producing the given logits for a single one-hot token.
    fn one_token_router(tape: &mut Tape<f64>, logits: &[f64]) -> (Var, Var) {
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let w = tape.leaf(Tensor::matrix(1, logits.len(), logits.to_vec()).unwrap());
        (x, w)
    }

    #[test]
    fn flat_renormalizes_top_k() {
        let mut tape = Tape::new();
        let (x, w) = one_token_router(&mut tape, &logits_row(&[0.5, 0.3, 0.2]));
        let sel = route_flat(&mut tape, x, w, 2, 3).unwrap();
        let c = &sel.choices[0];
        assert_eq!(c.iter().map(|c| c.expert).collect::<Vec<_>>(), vec![0, 1]);
        assert!((c[0].weight - 0.625).abs() < 1e-12);
        assert!((c[1].weight - 0.375).abs() < 1e-12);
    }

    #[test]
    fn flat_uniform_tie_break_and_full_k() {
        let mut tape = Tape::new();
        let (x, w) = one_token_router(&mut tape, &[0.0; 8]);
        let sel = route_flat(&mut tape, x, w, 2, 4).unwrap();
        let c = &sel.choices[0];
        assert_eq!(c.iter().map(|c| c.global(4)).collect::<Vec<_>>(), vec![0, 1]);
        assert!(c.iter().all(|c| (c.weight - 0.5).abs() < 1e-15));

        let probs = [0.1, 0.2, 0.3, 0.4];
        let (x, w) = one_token_router(&mut tape, &logits_row(&probs));
        let sel = route_flat(&mut tape, x, w, 4, 4).unwrap();
        for (c, p) in sel.choices[0].iter().zip(probs) {
            assert!((c.weight - p).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_rejects_k_above_expert_count() {
        let mut tape = Tape::new();
        let (x, w) = one_token_router(&mut tape, &[0.0; 4]);
        assert!(matches!(route_flat(&mut tape, x, w, 5, 4), Err(Error::Config(_))));
    }

    #[test]
    fn topk_oracle_examples() {
        assert_eq!(topk_oracle(&[0.1, 0.7, 0.2], 1), vec![1]);
        assert_eq!(topk_oracle(&[0.4, 0.4, 0.2], 1), vec![0]);
        assert_eq!(topk_oracle(&[0.3, 0.3, 0.3, 0.1], 2), vec![0, 1]);
    }

    #[test]
    fn hard_audio_only_uses_audio_group() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let wa = tape.leaf(Tensor::matrix(1, 4, logits_row(&[0.5, 0.3, 0.1, 0.1])).unwrap());
        let wv = tape.leaf(Tensor::matrix(1, 4, vec![3.0, 1.0, 0.0, 2.0]).unwrap());
        let sel = route_hard(&mut tape, x, &[ModalityTag::AudioOnly], [wa, wv], 2, None).unwrap();
        let c = &sel.choices[0];
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| c.group == AUDIO_GROUP));
        assert!((c[0].weight - 0.625).abs() < 1e-12 && (c[1].weight - 0.375).abs() < 1e-12);
        assert_eq!(sel.routers.len(), 1);
    }

    #[test]
    fn hard_audio_visual_takes_top_one_per_group_at_half_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let wa = tape.leaf(Tensor::matrix(1, 4, vec![0.0, 2.0, 1.0, 0.0]).unwrap());
        let wv = tape.leaf(Tensor::matrix(1, 4, vec![0.0, 0.0, 0.0, 5.0]).unwrap());
        let sel = route_hard(&mut tape, x, &[ModalityTag::AudioVisual], [wa, wv], 2, None).unwrap();
        let c = &sel.choices[0];
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].group, c[0].expert, c[0].weight), (0, 1, 0.5));
        assert_eq!((c[1].group, c[1].expert, c[1].weight), (1, 3, 0.5));
    }

    #[test]
    fn hard_rejects_odd_k_with_audio_visual_tokens() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let wa = tape.leaf(Tensor::zeros(&[1, 4]));
        let wv = tape.leaf(Tensor::zeros(&[1, 4]));
        let tags = [ModalityTag::AudioOnly, ModalityTag::AudioVisual];
        assert!(matches!(
            route_hard(&mut tape, x, &tags, [wa, wv], 3, None),
            Err(Error::Config(_))
        ));
        // fine without audio-visual tokens
        let tags = [ModalityTag::AudioOnly, ModalityTag::VideoOnly];
        assert!(route_hard(&mut tape, x, &tags, [wa, wv], 3, None).is_ok());
    }

    #[test]
    fn hierarchical_weights_are_group_probabilities() {
        // q = [0.6, 0.4]: with scalar experts 1.0 and 2.0 the mixture is 1.4
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let inter = tape.leaf(Tensor::matrix(1, 2, logits_row(&[0.6, 0.4])).unwrap());
        let wa = tape.leaf(Tensor::matrix(1, 2, vec![0.3, 0.1]).unwrap());
        let wv = tape.leaf(Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap());
        let sel = route_hierarchical(
            &mut tape,
            x,
            &[ModalityTag::AudioVisual],
            inter,
            &[wa, wv],
            2,
            &[1, 1],
            None,
        )
        .unwrap();
        let c = &sel.choices[0];
        assert_eq!((c[0].group, c[0].expert), (0, 0));
        assert_eq!((c[1].group, c[1].expert), (1, 1));
        let expert_out = |c: &Choice<f64>| if c.group == 0 { 1.0 } else { 2.0 };
        let y: f64 = c.iter().map(|c| c.weight * expert_out(c)).sum();
        assert!((y - 1.4).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_single_group_has_unit_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let inter = tape.leaf(Tensor::matrix(1, 2, vec![0.2, 0.9]).unwrap());
        let wa = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 0.0, 1.0]).unwrap());
        let wv = tape.leaf(Tensor::matrix(1, 3, logits_row(&[0.5, 0.3, 0.2])).unwrap());
        let sel = route_hierarchical(
            &mut tape,
            x,
            &[ModalityTag::AudioOnly],
            inter,
            &[wa, wv],
            1,
            &[1, 2],
            None,
        )
        .unwrap();
        let c = &sel.choices[0];
        assert_eq!(sel.group_weights[0], vec![0.0, 1.0]);
        assert_eq!(c.len(), 2);
        assert!((c[0].weight - 0.625).abs() < 1e-12 && (c[1].weight - 0.375).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_rejects_m_above_group_count() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let inter = tape.leaf(Tensor::zeros(&[1, 2]));
        let wa = tape.leaf(Tensor::zeros(&[1, 2]));
        let wv = tape.leaf(Tensor::zeros(&[1, 2]));
        let r = route_hierarchical(
            &mut tape,
            x,
            &[ModalityTag::AudioOnly],
            inter,
            &[wa, wv],
            3,
            &[1, 1],
            None,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn dispatch_weighted_sum_of_scalar_experts() {
        // two constant experts returning 8 and 0 (zero weights, bias only)
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let router = tape.leaf(Tensor::matrix(1, 2, logits_row(&[0.625, 0.375])).unwrap());
        let sel = route_flat(&mut tape, x, router, 2, 2).unwrap();
        let mk = |tape: &mut Tape<f64>, bias: f64| FfnVars {
            w1: tape.leaf(Tensor::zeros(&[1, 2])),
            b1: tape.leaf(Tensor::zeros(&[1, 2])),
            w2: tape.leaf(Tensor::zeros(&[2, 1])),
            b2: tape.leaf(Tensor::matrix(1, 1, vec![bias]).unwrap()),
        };
        let experts = [mk(&mut tape, 8.0), mk(&mut tape, 0.0)];
        let y = dispatch(&mut tape, x, &experts, &sel, Activation::Gelu).unwrap();
        assert!((tape.value(y).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MoEConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.activated_experts(), 2);
        cfg.k_within = vec![1, 5];
        assert!(cfg.validate().is_err());
        cfg.k_within = vec![1, 2];
        assert_eq!(cfg.activated_experts(), 3);
        cfg.m_groups = 3;
        assert!(cfg.validate().is_err());
        let flat = MoEConfig {
            strategy: Strategy::Flat,
            k_flat: 9,
            ..MoEConfig::default()
        };
        assert!(flat.validate().is_err());
    }
}
