//! Loss construction: per-image cross-entropy, the summed triplet
//! classification loss, cosine similarities between the triplet's feature
//! vectors, and the combined objective, all built as graph fragments so
//! gradients flow end to end.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Node handles for every reported component of one triplet's loss.
/// Components absent in the current mode are None and read as zero.
#[derive(Clone, Copy, Debug)]
pub struct TripletLoss {
    pub l_f: NodeId,
    pub l_replace: Option<NodeId>,
    pub l_mask: Option<NodeId>,
    pub l_cls: NodeId,
    pub c_replace_mask: Option<NodeId>,
    pub c_replace_f: Option<NodeId>,
    pub l_cos: Option<NodeId>,
    pub total: NodeId,
}

/// Scalar values of one triplet's loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_f: f64,
    pub l_replace: f64,
    pub l_mask: f64,
    pub l_cls: f64,
    pub c_replace_mask: f64,
    pub c_replace_f: f64,
    pub l_cos: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_graph(g: &Graph, nodes: &TripletLoss) -> Result<LossBreakdown> {
        let read = |id: Option<NodeId>| -> Result<f64> {
            id.map_or(Ok(0.0), |id| g.scalar_value(id))
        };
        Ok(LossBreakdown {
            l_f: g.scalar_value(nodes.l_f)?,
            l_replace: read(nodes.l_replace)?,
            l_mask: read(nodes.l_mask)?,
            l_cls: g.scalar_value(nodes.l_cls)?,
            c_replace_mask: read(nodes.c_replace_mask)?,
            c_replace_f: read(nodes.c_replace_f)?,
            l_cos: read(nodes.l_cos)?,
            total: g.scalar_value(nodes.total)?,
        })
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.l_f += other.l_f;
        self.l_replace += other.l_replace;
        self.l_mask += other.l_mask;
        self.l_cls += other.l_cls;
        self.c_replace_mask += other.c_replace_mask;
        self.c_replace_f += other.c_replace_f;
        self.l_cos += other.l_cos;
        self.total += other.total;
    }

    pub fn scale(&mut self, factor: f64) {
        self.l_f *= factor;
        self.l_replace *= factor;
        self.l_mask *= factor;
        self.l_cls *= factor;
        self.c_replace_mask *= factor;
        self.c_replace_f *= factor;
        self.l_cos *= factor;
        self.total *= factor;
    }
}

/// -log softmax(logits)[label], via the numerically stable log-sum-exp form.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, label: usize) -> Result<NodeId> {
    let k = g.value(logits).numel();
    if label >= k {
        return Err(Error::LabelOutOfRange { label, k });
    }
    let log_probs = g.log_softmax(logits)?;
    let picked = g.gather(log_probs, label)?;
    g.scale(picked, -1.0)
}

/// Sum of the three cross-entropies, all against the same ground-truth label.
pub fn classification_loss(
    g: &mut Graph,
    logits_f: NodeId,
    logits_replace: NodeId,
    logits_mask: NodeId,
    label: usize,
) -> Result<NodeId> {
    let k = g.value(logits_f).numel();
    for other in [logits_replace, logits_mask] {
        let len = g.value(other).numel();
        if len != k {
            return Err(Error::DimensionMismatch { left: k, right: len });
        }
    }
    let l_f = cross_entropy(g, logits_f, label)?;
    let l_replace = cross_entropy(g, logits_replace, label)?;
    let l_mask = cross_entropy(g, logits_mask, label)?;
    let partial = g.add(l_f, l_replace)?;
    g.add(partial, l_mask)
}

/// (u . v) / (max(|u|, eps) * max(|v|, eps)).
pub fn cosine_similarity(g: &mut Graph, u: NodeId, v: NodeId, eps: f64) -> Result<NodeId> {
    let (du, dv) = (g.value(u).numel(), g.value(v).numel());
    if du != dv {
        return Err(Error::DimensionMismatch { left: du, right: dv });
    }
    if !(eps > 0.0) {
        return Err(Error::ConfigInvariant(format!("eps must be positive, got {}", eps)));
    }
    let nu = g.l2_norm(u, eps)?;
    let nv = g.l2_norm(v, eps)?;
    let denom = g.mul(nu, nv)?;
    let num = g.dot(u, v)?;
    g.scalar_div(num, denom)
}

/// Cosine pieces of the objective: the two similarities and their loss.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityParts {
    pub c_replace_mask: NodeId,
    pub c_replace_f: NodeId,
    pub l_cos: NodeId,
}

/// (1 - C(replace, mask)) + (1 - C(replace, f)); `extra_pair` adds
/// (1 - C(f, mask)) for experimentation.
pub fn similarity_loss(
    g: &mut Graph,
    v_f: NodeId,
    v_replace: NodeId,
    v_mask: NodeId,
    eps: f64,
    extra_pair: bool,
) -> Result<SimilarityParts> {
    let c_rm = cosine_similarity(g, v_replace, v_mask, eps)?;
    let c_rf = cosine_similarity(g, v_replace, v_f, eps)?;
    let one_a = g.scalar_const(1.0)?;
    let one_b = g.scalar_const(1.0)?;
    let t_rm = g.sub(one_a, c_rm)?;
    let t_rf = g.sub(one_b, c_rf)?;
    let mut l_cos = g.add(t_rm, t_rf)?;
    if extra_pair {
        let c_fm = cosine_similarity(g, v_f, v_mask, eps)?;
        let one_c = g.scalar_const(1.0)?;
        let t_fm = g.sub(one_c, c_fm)?;
        l_cos = g.add(l_cos, t_fm)?;
    }
    Ok(SimilarityParts { c_replace_mask: c_rm, c_replace_f: c_rf, l_cos })
}

/// Plain cross-entropy on the original image only.
pub fn baseline_loss(g: &mut Graph, logits_f: NodeId, label: usize) -> Result<TripletLoss> {
    let l_f = cross_entropy(g, logits_f, label)?;
    Ok(TripletLoss {
        l_f,
        l_replace: None,
        l_mask: None,
        l_cls: l_f,
        c_replace_mask: None,
        c_replace_f: None,
        l_cos: None,
        total: l_f,
    })
}

/// Full objective over one triplet. With `include_cos` false the total is the
/// classification sum alone; otherwise the cosine loss is added, scaled by
/// `cos_weight` (1 reproduces the unweighted sum).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    logits: [NodeId; 3],
    features: [NodeId; 3],
    label: usize,
    eps: f64,
    include_cos: bool,
    cos_weight: f64,
    extra_pair: bool,
) -> Result<TripletLoss> {
    let [logits_f, logits_replace, logits_mask] = logits;
    let k = g.value(logits_f).numel();
    for other in [logits_replace, logits_mask] {
        let len = g.value(other).numel();
        if len != k {
            return Err(Error::DimensionMismatch { left: k, right: len });
        }
    }
    let l_f = cross_entropy(g, logits_f, label)?;
    let l_replace = cross_entropy(g, logits_replace, label)?;
    let l_mask = cross_entropy(g, logits_mask, label)?;
    let partial = g.add(l_f, l_replace)?;
    let l_cls = g.add(partial, l_mask)?;
    if !include_cos {
        return Ok(TripletLoss {
            l_f,
            l_replace: Some(l_replace),
            l_mask: Some(l_mask),
            l_cls,
            c_replace_mask: None,
            c_replace_f: None,
            l_cos: None,
            total: l_cls,
        });
    }
    let [v_f, v_replace, v_mask] = features;
    let parts = similarity_loss(g, v_f, v_replace, v_mask, eps, extra_pair)?;
    let weighted = g.scale(parts.l_cos, cos_weight)?;
    let total = g.add(l_cls, weighted)?;
    Ok(TripletLoss {
        l_f,
        l_replace: Some(l_replace),
        l_mask: Some(l_mask),
        l_cls,
        c_replace_mask: Some(parts.c_replace_mask),
        c_replace_f: Some(parts.c_replace_f),
        l_cos: Some(parts.l_cos),
        total,
    })
}
