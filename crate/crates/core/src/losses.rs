//! Auxiliary routing losses and the total training objective.
//!
//! * load balancing: `|E| * sum_i f_i * P_i`, with `f` the top-1 frequency
//!   (detached) and `P` the mean router probability (differentiable);
//! * router z-loss: mean squared `logsumexp` of the router logits;
//! * load biasing: `(1 - g^A_audio Q^A_audio) + (1 - g^V_visual Q^V_visual)`
//!   over the audio-only and video-only tokens of the batch.

use crate::error::{Error, Result};
use crate::numkernel::{argmax, Tape, Tensor, Var};
use crate::routing::{ExpertSelection, ModalityTag, RouterKind, AUDIO_GROUP, VISUAL_GROUP};
use crate::scalar::Scalar;

/// Per-expert top-1 frequency and mean probability over a batch.
#[derive(Clone, Debug)]
pub struct LoadStats<T> {
    pub f: Vec<T>,
    pub p: Vec<T>,
    pub tokens: usize,
    /// `P` as a `[1 x E]` node on the tape.
    pub p_node: Var,
}

/// Inter-router frequency and mean probability over one modality subset.
#[derive(Clone, Debug)]
pub struct SubsetStats<T> {
    pub g: Vec<T>,
    pub q: Vec<T>,
    pub size: usize,
    pub q_node: Var,
}

/// Group statistics over the audio-only and video-only subsets; a subset
/// with no tokens is `None`.
#[derive(Clone, Debug)]
pub struct GroupLoadStats<T> {
    pub audio: Option<SubsetStats<T>>,
    pub video: Option<SubsetStats<T>>,
}

impl<T> GroupLoadStats<T> {
    pub fn is_empty(&self) -> bool {
        self.audio.is_none() && self.video.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub c_b: f64,
    pub c_s: f64,
    pub c_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            c_b: 1e-2,
            c_s: 1e-2,
            c_z: 1e-3,
        }
    }
}

/// Which routers the z-loss covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZLossScope {
    /// Flat and intra-modal routers.
    pub expert_routers: bool,
    /// Inter-modal (group) router.
    pub group_router: bool,
}

impl Default for ZLossScope {
    fn default() -> Self {
        Self {
            expert_routers: true,
            group_router: true,
        }
    }
}

/// Auxiliary terms of one MoE layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerAux<T> {
    pub lb: T,
    pub ls: T,
    pub lz: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub ce: T,
    pub lb: T,
    pub ls: T,
    pub lz: T,
    pub total: T,
    pub weights: LossWeights,
    pub per_layer: Vec<LayerAux<T>>,
}

/// Tape nodes of one layer's auxiliary terms.
#[derive(Clone, Copy, Debug)]
pub struct LayerAuxVars {
    pub lb: Var,
    pub ls: Var,
    pub lz: Var,
}

fn mean_rows<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    // (1/T) * 1^T x, as a matmul so P stays on the tape
    let n = tape.value(x).rows();
    let ones = Tensor::full(&[1, n], T::one() / T::lit(n as f64));
    let ones = tape.constant(ones);
    tape.matmul(ones, x)
}

/// `f` and `P` of a `[T x E]` probability node.
pub fn expert_stats<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<LoadStats<T>> {
    let pv = tape.value(probs);
    let (n, e) = (pv.rows(), pv.cols());
    if n == 0 {
        return Err(Error::Stat("expert statistics over an empty batch".into()));
    }
    let mut f = vec![T::zero(); e];
    let inv = T::one() / T::lit(n as f64);
    for r in 0..n {
        f[argmax(pv.row(r))] += inv;
    }
    let p_node = mean_rows(tape, probs)?;
    let p = tape.value(p_node).data().to_vec();
    Ok(LoadStats {
        f,
        p,
        tokens: n,
        p_node,
    })
}

/// `|E| * sum_i f_i * P_i`.
pub fn load_balance_loss<T: Scalar>(tape: &mut Tape<T>, stats: &LoadStats<T>) -> Result<Var> {
    let e = stats.f.len();
    let f = tape.constant(Tensor::matrix(e, 1, stats.f.clone())?);
    let dot = tape.matmul(stats.p_node, f)?;
    tape.scale(dot, T::lit(e as f64))
}

/// Mean over rows of `logsumexp(row)^2`.
pub fn z_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    if tape.value(logits).rows() == 0 {
        return Err(Error::Stat("z-loss over an empty batch".into()));
    }
    let lse = tape.logsumexp(logits)?;
    let sq = tape.mul(lse, lse)?;
    tape.mean(sq)
}

/// Group frequency `g` and mean probability `Q` of the inter-modal router
/// over the audio-only and the video-only tokens. Audio-visual tokens are
/// excluded.
pub fn group_stats<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    tags: &[ModalityTag],
) -> Result<GroupLoadStats<T>> {
    let qv = tape.value(q);
    if qv.rows() != tags.len() {
        return Err(Error::Dimension(format!(
            "{} group-probability rows for {} tags",
            qv.rows(),
            tags.len()
        )));
    }
    let mut subset = |tag: ModalityTag| -> Result<Option<SubsetStats<T>>> {
        let rows: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == tag).collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let qv = tape.value(q);
        let inv = T::one() / T::lit(rows.len() as f64);
        let mut g = vec![T::zero(); qv.cols()];
        for &r in &rows {
            g[argmax(qv.row(r))] += inv;
        }
        let size = rows.len();
        let sub = tape.gather_rows(q, rows)?;
        let q_node = mean_rows(tape, sub)?;
        let qm = tape.value(q_node).data().to_vec();
        Ok(Some(SubsetStats {
            g,
            q: qm,
            size,
            q_node,
        }))
    };
    let audio = subset(ModalityTag::AudioOnly)?;
    let video = subset(ModalityTag::VideoOnly)?;
    Ok(GroupLoadStats { audio, video })
}

/// `(1 - g^A_audio * Q^A_audio) + (1 - g^V_visual * Q^V_visual)`; an empty
/// subset contributes nothing.
pub fn load_bias_loss<T: Scalar>(tape: &mut Tape<T>, gs: &GroupLoadStats<T>) -> Result<Var> {
    let mut terms = Vec::new();
    for (stats, group) in [(&gs.audio, AUDIO_GROUP), (&gs.video, VISUAL_GROUP)] {
        let Some(s) = stats else { continue };
        if group >= s.g.len() {
            return Err(Error::Stat(format!("no group {group} among {} groups", s.g.len())));
        }
        let q = tape.pick(s.q_node, vec![(0, group)], &[1, 1])?;
        terms.push(tape.affine(q, -s.g[group], T::one())?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Load balancing, load biasing and z-loss of one MoE layer.
///
/// Load balancing sums over the flat or intra-modal routers (each over the
/// tokens it scored); load biasing applies only when an inter-modal router
/// is present.
pub fn layer_aux_losses<T: Scalar>(
    tape: &mut Tape<T>,
    sel: &ExpertSelection<T>,
    tags: &[ModalityTag],
    scope: ZLossScope,
) -> Result<LayerAuxVars> {
    let mut lb_terms = Vec::new();
    let mut lz_terms = Vec::new();
    let mut ls = None;
    for r in &sel.routers {
        match r.kind {
            RouterKind::Flat | RouterKind::Intra(_) => {
                let stats = expert_stats(tape, r.probs)?;
                lb_terms.push(load_balance_loss(tape, &stats)?);
                if scope.expert_routers {
                    lz_terms.push(z_loss(tape, r.logits)?);
                }
            }
            RouterKind::Inter => {
                let row_tags: Vec<ModalityTag> = r.rows.iter().map(|&t| tags[t]).collect();
                let gs = group_stats(tape, r.probs, &row_tags)?;
                ls = Some(load_bias_loss(tape, &gs)?);
                if scope.group_router {
                    lz_terms.push(z_loss(tape, r.logits)?);
                }
            }
        }
    }
    let lb = if lb_terms.is_empty() {
        zero(tape)
    } else {
        tape.add_all(&lb_terms)?
    };
    let lz = if lz_terms.is_empty() {
        zero(tape)
    } else {
        tape.add_all(&lz_terms)?
    };
    let ls = match ls {
        Some(v) => v,
        None => zero(tape),
    };
    Ok(LayerAuxVars { lb, ls, lz })
}

/// Arithmetic mean of each auxiliary term across layers.
pub fn mean_over_layers<T: Scalar>(tape: &mut Tape<T>, layers: &[LayerAuxVars]) -> Result<LayerAuxVars> {
    if layers.is_empty() {
        let z = zero(tape);
        return Ok(LayerAuxVars { lb: z, ls: z, lz: z });
    }
    let inv = T::one() / T::lit(layers.len() as f64);
    let mut avg = |pick: fn(&LayerAuxVars) -> Var| -> Result<Var> {
        let terms: Vec<Var> = layers.iter().map(pick).collect();
        let s = tape.add_all(&terms)?;
        tape.scale(s, inv)
    };
    Ok(LayerAuxVars {
        lb: avg(|l| l.lb)?,
        ls: avg(|l| l.ls)?,
        lz: avg(|l| l.lz)?,
    })
}

/// `ce + c_B lb + c_S ls + c_Z lz` on the tape.
pub fn weighted_total<T: Scalar>(
    tape: &mut Tape<T>,
    ce: Var,
    aux: &LayerAuxVars,
    w: &LossWeights,
) -> Result<Var> {
    let lb = tape.scale(aux.lb, T::lit(w.c_b))?;
    let ls = tape.scale(aux.ls, T::lit(w.c_s))?;
    let lz = tape.scale(aux.lz, T::lit(w.c_z))?;
    tape.add_all(&[ce, lb, ls, lz])
}

/// Weighted objective from already-computed terms.
pub fn total_loss<T: Scalar>(ce: T, lb: T, ls: T, lz: T, w: &LossWeights) -> Result<LossBreakdown<T>> {
    for (name, v) in [("L_CE", ce), ("L_B", lb), ("L_S", ls), ("L_Z", lz)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite ({v})")));
        }
    }
    let total = ce + T::lit(w.c_b) * lb + T::lit(w.c_s) * ls + T::lit(w.c_z) * lz;
    Ok(LossBreakdown {
        ce,
        lb,
        ls,
        lz,
        total,
        weights: *w,
        per_layer: Vec::new(),
    })
}
