//! Training objectives.
//!
//! Scores entering the ranking terms are foreground probabilities in
//! `[0, 1]` (two-class softmax of the classification map), never logits.
//! All pair and threshold comparisons are strict: ties select nothing.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::LabelMap;
use crate::numerics::{Graph, Var};

/// Ranking margin of the classification ranking loss.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Sharpness of the classification ranking loss.
pub const DEFAULT_BETA: f64 = 4.0;
/// Sharpness of the IoU-guided ranking loss.
pub const DEFAULT_GAMMA: f64 = 3.0;
/// Hard-negative confidence threshold.
pub const DEFAULT_TAU_NEG: f64 = 0.5;
/// Largest positive set paired exhaustively by the IoU ranking terms.
pub const DEFAULT_PAIR_CAP: usize = 256;

/// Foreground logit `a_fg − a_bg` per location of a `2×H×W` classification map.
pub fn fg_logits(g: &mut Graph, cls: Var) -> Result<Var> {
    let (h, w) = match *g.shape(cls) {
        [2, h, w] => (h, w),
        ref s => {
            return Err(Error::shape(
                "classification map",
                format!("expected 2×H×W, got {s:?}"),
            ))
        }
    };
    let n = h * w;
    let bg: Vec<usize> = (0..n).collect();
    let fg: Vec<usize> = (n..2 * n).collect();
    let bg = g.gather(cls, &bg)?;
    let fg = g.gather(cls, &fg)?;
    g.sub(fg, bg)
}

/// Foreground probability per location (two-class softmax over channels).
pub fn fg_probs(g: &mut Graph, cls: Var) -> Result<Var> {
    let z = fg_logits(g, cls)?;
    g.sigmoid(z)
}

/// Mean `−ln σ(z)` over `idx` of logits `z`.
fn mean_neg_log_sigmoid(g: &mut Graph, z: Var, idx: &[usize]) -> Result<Var> {
    let zi = g.gather(z, idx)?;
    let nz = g.neg(zi)?;
    let sp = g.softplus(nz)?;
    g.mean(sp)
}

/// Mean `−ln(1 − σ(z))` over `idx` of logits `z`.
fn mean_neg_log_one_minus_sigmoid(g: &mut Graph, z: Var, idx: &[usize]) -> Result<Var> {
    let zi = g.gather(z, idx)?;
    let sp = g.softplus(zi)?;
    g.mean(sp)
}

/// Binary cross-entropy averaged separately over positives and negatives,
/// then summed. Ignored locations do not contribute.
pub fn cross_entropy(g: &mut Graph, cls: Var, labels: &LabelMap) -> Result<Var> {
    let z = fg_logits(g, cls)?;
    if g.value(z).len() != labels.labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} scores for {} labels", g.value(z).len(), labels.labels.len()),
        ));
    }
    let (pos, neg) = (labels.positives(), labels.negatives());
    match (pos.is_empty(), neg.is_empty()) {
        (true, true) => Err(Error::Invalid(
            "cross_entropy needs at least one positive or negative location".into(),
        )),
        (false, true) => mean_neg_log_sigmoid(g, z, &pos),
        (true, false) => mean_neg_log_one_minus_sigmoid(g, z, &neg),
        (false, false) => {
            let lp = mean_neg_log_sigmoid(g, z, &pos)?;
            let ln = mean_neg_log_one_minus_sigmoid(g, z, &neg)?;
            g.add(lp, ln)
        }
    }
}

/// Cross-entropy followed by a second cross-entropy stage over the negatives
/// whose foreground probability exceeds `tau_neg`.
pub fn two_stage_ce(g: &mut Graph, cls: Var, labels: &LabelMap, tau_neg: f64) -> Result<Var> {
    let first = cross_entropy(g, cls, labels)?;
    let p = fg_probs(g, cls)?;
    let neg = labels.negatives();
    let neg_p: Vec<f64> = neg.iter().map(|&i| g.value(p)[i]).collect();
    let hard: Vec<usize> = hard_negative_indices(&neg_p, tau_neg)
        .into_iter()
        .map(|k| neg[k])
        .collect();
    if hard.is_empty() {
        return Ok(first);
    }
    let z = fg_logits(g, cls)?;
    let second = mean_neg_log_one_minus_sigmoid(g, z, &hard)?;
    g.add(first, second)
}

/// Positions in `neg_scores` strictly above `tau_neg`, in order.
pub fn hard_negative_indices(neg_scores: &[f64], tau_neg: f64) -> Vec<usize> {
    neg_scores
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| (s > tau_neg).then_some(i))
        .collect()
}

/// Scores strictly above `tau_neg`, order preserved.
pub fn hard_negative_set(neg_scores: &[f64], tau_neg: f64) -> Vec<f64> {
    neg_scores.iter().copied().filter(|&s| s > tau_neg).collect()
}

/// Expected positive and hard-negative confidence.
#[derive(Debug, Clone, Copy)]
pub struct Expectations {
    pub p_plus: Var,
    pub p_minus: Var,
}

/// `P+` is the plain mean of positive scores; `P−` weights each hard
/// negative by the softmax of the hard-negative scores.
pub fn expectations(g: &mut Graph, pos_scores: Var, hard_negs: Var) -> Result<Expectations> {
    let p_plus = g.mean(pos_scores)?;
    let w = g.softmax(hard_negs)?;
    let wp = g.mul(w, hard_negs)?;
    let p_minus = g.sum(wp)?;
    Ok(Expectations { p_plus, p_minus })
}

/// `(1/β)·log(1 + exp(β·(P− − P+ + α)))`.
pub fn rank_cls_loss(g: &mut Graph, p_minus: Var, p_plus: Var, alpha: f64, beta: f64) -> Result<Var> {
    if alpha < 0.0 || beta <= 0.0 {
        return Err(Error::Invalid(format!(
            "rank_cls_loss needs alpha >= 0 and beta > 0, got {alpha}, {beta}"
        )));
    }
    let gap = g.sub(p_minus, p_plus)?;
    let arg = g.offset(gap, alpha)?;
    let arg = g.scale(arg, beta)?;
    let sp = g.softplus(arg)?;
    g.scale(sp, 1.0 / beta)
}

/// Classification ranking term for one image.
#[derive(Debug, Clone, Copy)]
pub struct RankClsTerm {
    /// `None` when the image has no hard negatives and is skipped.
    pub loss: Option<Var>,
    pub expectations: Option<Expectations>,
}

impl RankClsTerm {
    pub fn skipped(&self) -> bool {
        self.loss.is_none()
    }
}

/// Filters hard negatives out of `neg_scores`, forms the expectations and
/// ranks them. Images without positives or hard negatives are skipped.
pub fn rank_cls_term(
    g: &mut Graph,
    pos_scores: Option<Var>,
    neg_scores: Option<Var>,
    tau_neg: f64,
    alpha: f64,
    beta: f64,
) -> Result<RankClsTerm> {
    let skipped = RankClsTerm {
        loss: None,
        expectations: None,
    };
    let (Some(pos), Some(neg)) = (pos_scores, neg_scores) else {
        return Ok(skipped);
    };
    let hard = hard_negative_indices(g.value(neg), tau_neg);
    if hard.is_empty() {
        return Ok(skipped);
    }
    let hard = g.gather(neg, &hard)?;
    let e = expectations(g, pos, hard)?;
    let loss = rank_cls_loss(g, e.p_minus, e.p_plus, alpha, beta)?;
    Ok(RankClsTerm {
        loss: Some(loss),
        expectations: Some(e),
    })
}

/// Ordered index pairs `(i, j)` with `key[i] > key[j]`.
pub fn ordered_pairs(key: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for (i, a) in key.iter().enumerate() {
        for (j, b) in key.iter().enumerate() {
            if a > b {
                hi.push(i);
                lo.push(j);
            }
        }
    }
    (hi, lo)
}

/// Sum over pairs `(i, j)` of `exp(−γ·(x_i − y_j))`.
fn pair_exp_sum(g: &mut Graph, x: Var, y: Var, hi: &[usize], lo: &[usize], gamma: f64) -> Result<Option<Var>> {
    if hi.is_empty() {
        return Ok(None);
    }
    let xi = g.gather(x, hi)?;
    let yj = g.gather(y, lo)?;
    let d = g.sub(xi, yj)?;
    let d = g.scale(d, -gamma)?;
    let e = g.exp(d)?;
    Ok(Some(g.sum(e)?))
}

/// IoU-guided ranking loss with an explicit source for the frozen IoUs.
///
/// Pairs ordered by IoU push the confidences apart (both receive gradient).
/// Pairs ordered by confidence push the higher-ranked IoU up against the
/// lower one read from `v_frozen`. [`rank_iou_loss`] passes a detached copy
/// of `v`; gradient checks pass a constant.
pub fn rank_iou_loss_frozen(g: &mut Graph, p: Var, v: Var, v_frozen: Var, gamma: f64) -> Result<Var> {
    if gamma <= 0.0 {
        return Err(Error::Invalid(format!("gamma must be positive, got {gamma}")));
    }
    let n = g.value(p).len();
    if g.value(v).len() != n || g.value(v_frozen).len() != n {
        return Err(Error::shape("rank_iou_loss", "scores and IoUs differ in length"));
    }
    let (v_hi, v_lo) = ordered_pairs(g.value(v));
    let (p_hi, p_lo) = ordered_pairs(g.value(p));
    let by_iou = pair_exp_sum(g, p, p, &v_hi, &v_lo, gamma)?;
    let by_conf = pair_exp_sum(g, v, v_frozen, &p_hi, &p_lo, gamma)?;
    let total = match (by_iou, by_conf) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Ok(g.scalar(0.0)),
    };
    let count = g.scalar(n as f64);
    g.div(total, count)
}

/// IoU-guided ranking loss over positive confidences `p` and IoUs `v`.
pub fn rank_iou_loss(g: &mut Graph, p: Var, v: Var, gamma: f64) -> Result<Var> {
    let frozen = g.detach(v);
    rank_iou_loss_frozen(g, p, v, frozen, gamma)
}

/// Coupled pairwise baseline: mean over ordered pairs `i ≠ j` of
/// `(1/α)·log(1 + exp(−α·(p_i − p_j)(v_i − v_j)))`.
pub fn rank_iou_loss_ori(g: &mut Graph, p: Var, v: Var, alpha: f64) -> Result<Var> {
    if alpha <= 0.0 {
        return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    let n = g.value(p).len();
    if g.value(v).len() != n {
        return Err(Error::shape("rank_iou_loss_ori", "scores and IoUs differ in length"));
    }
    if n < 2 {
        return Ok(g.scalar(0.0));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a.push(i);
                b.push(j);
            }
        }
    }
    let pi = g.gather(p, &a)?;
    let pj = g.gather(p, &b)?;
    let vi = g.gather(v, &a)?;
    let vj = g.gather(v, &b)?;
    let dp = g.sub(pi, pj)?;
    let dv = g.sub(vi, vj)?;
    let prod = g.mul(dp, dv)?;
    let arg = g.scale(prod, -alpha)?;
    let sp = g.softplus(arg)?;
    let m = g.mean(sp)?;
    g.scale(m, 1.0 / alpha)
}

/// Uniform subsample of `indices` down to `cap` entries, order preserved.
pub fn subsample_positives<R: Rng + ?Sized>(indices: &[usize], cap: usize, rng: &mut R) -> Vec<usize> {
    if indices.len() <= cap {
        return indices.to_vec();
    }
    let mut pick = sample(rng, indices.len(), cap).into_vec();
    pick.sort_unstable();
    pick.into_iter().map(|k| indices[k]).collect()
}

/// Weights applied to (cls + loc), the classification ranking term and the
/// IoU ranking term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub base: f64,
    pub rank_cls: f64,
    pub rank_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            base: 1.0,
            rank_cls: 0.5,
            rank_iou: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub rank_cls: f64,
    pub rank_iou: f64,
    pub total: f64,
    pub skipped_rank_cls: bool,
}

/// Value-level combination of the loss parts. A skipped classification
/// ranking term contributes 0 regardless of `rank_cls`.
pub fn combine(
    cls: f64,
    loc: f64,
    rank_cls: f64,
    rank_iou: f64,
    skipped_rank_cls: bool,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if ![cls, loc, rank_cls, rank_iou].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "combine" });
    }
    let rank_cls = if skipped_rank_cls { 0.0 } else { rank_cls };
    Ok(LossBreakdown {
        cls,
        loc,
        rank_cls,
        rank_iou,
        total: (cls + loc) * w.base + rank_cls * w.rank_cls + rank_iou * w.rank_iou,
        skipped_rank_cls,
    })
}

/// Recorded loss parts of one image.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub loc: Option<Var>,
    pub rank_cls: Option<Var>,
    pub rank_iou: Option<Var>,
}

impl LossTerms {
    /// Weighted total on the graph, matching [`combine`].
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Result<Var> {
        let mut base = self.cls;
        if let Some(loc) = self.loc {
            base = g.add(base, loc)?;
        }
        let mut total = g.scale(base, w.base)?;
        for (term, weight) in [(self.rank_cls, w.rank_cls), (self.rank_iou, w.rank_iou)] {
            if let Some(t) = term {
                let s = g.scale(t, weight)?;
                total = g.add(total, s)?;
            }
        }
        if !g.value(total)[0].is_finite() {
            return Err(Error::NonFinite { op: "combine" });
        }
        Ok(total)
    }

    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> Result<LossBreakdown> {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.item(v));
        combine(
            g.item(self.cls),
            val(self.loc),
            val(self.rank_cls),
            val(self.rank_iou),
            self.rank_cls.is_none(),
            w,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assign_labels, BBox, HeadGrid, Label};
    use crate::numerics::{compare_gradients, finite_diff_check, Tensor};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Two-location map: one positive, one negative.
    fn two_point_labels() -> LabelMap {
        let grid = HeadGrid {
            rows: 1,
            cols: 2,
            stride: 40.0,
            origin: 20.0,
            extent: 80.0,
        };
        let gt = BBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        let map = assign_labels(&grid, &gt);
        assert_eq!(map.labels, vec![Label::Positive, Label::Negative]);
        map
    }

    fn cls_map(g: &mut Graph, fg_logit: &[f64]) -> Var {
        let n = fg_logit.len();
        let mut data = vec![0.0; n];
        data.extend_from_slice(fg_logit);
        g.param(&Tensor::new(&[2, 1, n], data).unwrap())
    }

    #[test]
    fn cross_entropy_examples() {
        let labels = two_point_labels();
        let mut g = Graph::new();
        let cls = cls_map(&mut g, &[20.0, -20.0]);
        let l = cross_entropy(&mut g, cls, &labels).unwrap();
        assert!(g.item(l) < 1e-6);

        let cls = cls_map(&mut g, &[0.0, 0.0]);
        let l = cross_entropy(&mut g, cls, &labels).unwrap();
        assert_abs_diff_eq!(g.item(l), 2.0 * 2f64.ln(), epsilon = 1e-15);

        let cls = cls_map(&mut g, &[logit(0.8), logit(0.4)]);
        let l = cross_entropy(&mut g, cls, &labels).unwrap();
        assert_abs_diff_eq!(g.item(l), -(0.8f64.ln()) - 0.6f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(g.item(l), 0.2231 + 0.5108, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_without_samples_errors() {
        let mut labels = two_point_labels();
        labels.labels = vec![Label::Ignore, Label::Ignore];
        let mut g = Graph::new();
        let cls = cls_map(&mut g, &[0.0, 0.0]);
        assert!(cross_entropy(&mut g, cls, &labels).is_err());
    }

    #[test]
    fn two_stage_examples() {
        let labels = two_point_labels();
        let mut g = Graph::new();
        let cls = cls_map(&mut g, &[logit(0.8), logit(0.3)]);
        let a = cross_entropy(&mut g, cls, &labels).unwrap();
        let b = two_stage_ce(&mut g, cls, &labels, 0.5).unwrap();
        assert_eq!(g.item(a), g.item(b));

        let cls = cls_map(&mut g, &[logit(0.9), logit(0.8)]);
        let a = cross_entropy(&mut g, cls, &labels).unwrap();
        let b = two_stage_ce(&mut g, cls, &labels, 0.5).unwrap();
        assert_abs_diff_eq!(g.item(b) - g.item(a), -(0.2f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(-(0.2f64.ln()), 1.6094, epsilon = 1e-4);

        let cls = cls_map(&mut g, &[20.0, -20.0]);
        let b = two_stage_ce(&mut g, cls, &labels, 0.5).unwrap();
        assert!(g.item(b) < 1e-6);
    }

    #[test]
    fn hard_negative_threshold_is_strict() {
        assert_eq!(hard_negative_set(&[0.6, 0.4], 0.5), vec![0.6]);
        assert!(hard_negative_set(&[0.1, 0.2, 0.3], 0.5).is_empty());
        assert!(hard_negative_set(&[0.5], 0.5).is_empty());
        assert_eq!(hard_negative_set(&[0.9, 0.2, 0.7], 0.5), vec![0.9, 0.7]);
    }

    fn expectations_of(pos: &[f64], hard: &[f64]) -> (f64, f64) {
        let mut g = Graph::new();
        let p = g.vector(pos.to_vec()).unwrap();
        let h = g.vector(hard.to_vec()).unwrap();
        let e = expectations(&mut g, p, h).unwrap();
        (g.item(e.p_plus), g.item(e.p_minus))
    }

    #[test]
    fn expectation_examples() {
        assert_eq!(expectations_of(&[0.5], &[0.8]).1, 0.8);
        let pm = expectations_of(&[0.5], &[0.6, 0.8]).1;
        let w1 = 0.8f64.exp() / (0.6f64.exp() + 0.8f64.exp());
        assert_abs_diff_eq!(pm, 0.6 * (1.0 - w1) + 0.8 * w1, epsilon = 1e-15);
        assert_abs_diff_eq!(pm, 0.7100, epsilon = 5e-5);
        assert_abs_diff_eq!(expectations_of(&[0.2, 0.4, 0.6], &[0.9]).0, 0.4, epsilon = 1e-15);
    }

    fn rank_cls_of(pm: f64, pp: f64, alpha: f64, beta: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.param(&Tensor::scalar(pm));
        let b = g.param(&Tensor::scalar(pp));
        let l = rank_cls_loss(&mut g, a, b, alpha, beta).unwrap();
        g.item(l)
    }

    #[test]
    fn rank_cls_examples() {
        let v = rank_cls_of(0.9, 0.6, 0.5, 4.0);
        assert_abs_diff_eq!(v, 0.25 * (1.0 + 3.2f64.exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.8100, epsilon = 5e-5);
        let v = rank_cls_of(0.1, 0.95, 0.5, 4.0);
        assert_abs_diff_eq!(v, 0.25 * (1.0 + (-1.4f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.0551, epsilon = 5e-5);
        let v = rank_cls_of(0.2, 0.7, 0.5, 4.0);
        assert_abs_diff_eq!(v, 2f64.ln() / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.1733, epsilon = 5e-5);
    }

    #[test]
    fn skip_rule_without_hard_negatives() {
        let mut g = Graph::new();
        let pos = g.vector(vec![0.9, 0.8]).unwrap();
        let neg = g.vector(vec![0.1, 0.5, 0.3]).unwrap();
        let t = rank_cls_term(&mut g, Some(pos), Some(neg), 0.5, 0.5, 4.0).unwrap();
        assert!(t.skipped());
        let t = rank_cls_term(&mut g, Some(pos), None, 0.5, 0.5, 4.0).unwrap();
        assert!(t.skipped());
        let neg = g.vector(vec![0.1, 0.7]).unwrap();
        let t = rank_cls_term(&mut g, Some(pos), Some(neg), 0.5, 0.5, 4.0).unwrap();
        assert!(!t.skipped());
        let e = t.expectations.unwrap();
        assert_eq!(g.item(e.p_minus), 0.7);
    }

    fn rank_iou_of(p: &[f64], v: &[f64], gamma: f64) -> f64 {
        let mut g = Graph::new();
        let pv = g.vector(p.to_vec()).unwrap();
        let vv = g.vector(v.to_vec()).unwrap();
        let l = rank_iou_loss(&mut g, pv, vv, gamma).unwrap();
        g.item(l)
    }

    #[test]
    fn rank_iou_examples() {
        assert_eq!(rank_iou_of(&[0.7], &[0.4], 3.0), 0.0);
        let v = rank_iou_of(&[0.8, 0.6], &[0.9, 0.5], 3.0);
        assert_abs_diff_eq!(v, ((-0.6f64).exp() + (-1.2f64).exp()) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.4250, epsilon = 5e-5);
        assert_eq!(rank_iou_of(&[0.5; 4], &[0.3; 4], 3.0), 0.0);
        let mut g = Graph::new();
        let p = g.vector(vec![0.1, 0.2]).unwrap();
        assert!(rank_iou_loss(&mut g, p, p, 0.0).is_err());
    }

    fn rank_iou_ori_of(p: &[f64], v: &[f64], alpha: f64) -> f64 {
        let mut g = Graph::new();
        let pv = g.vector(p.to_vec()).unwrap();
        let vv = g.vector(v.to_vec()).unwrap();
        let l = rank_iou_loss_ori(&mut g, pv, vv, alpha).unwrap();
        g.item(l)
    }

    #[test]
    fn rank_iou_ori_examples() {
        assert_eq!(rank_iou_ori_of(&[0.7], &[0.4], 4.0), 0.0);
        let v = rank_iou_ori_of(&[0.9, 0.1], &[0.9, 0.1], 4.0);
        assert_abs_diff_eq!(v, 0.25 * (1.0 + (-2.56f64).exp()).ln(), epsilon = 1e-12);
        let v = rank_iou_ori_of(&[0.4, 0.4], &[0.9, 0.1], 4.0);
        assert_abs_diff_eq!(v, 2f64.ln() / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn combine_examples() {
        let w = LossWeights::default();
        let b = combine(0.6, 0.4, 0.2, 0.4, false, &w).unwrap();
        assert_abs_diff_eq!(b.total, 1.2, epsilon = 1e-15);
        let b = combine(0.6, 0.4, 0.0, 0.0, false, &w).unwrap();
        assert_eq!(b.total, 1.0);
        assert_eq!(combine(0.0, 0.0, 0.0, 0.0, true, &w).unwrap().total, 0.0);
        let b = combine(0.6, 0.4, 0.9, 0.0, true, &w).unwrap();
        assert_eq!(b.rank_cls, 0.0);
        assert!(combine(f64::NAN, 0.0, 0.0, 0.0, false, &w).is_err());
    }

    #[test]
    fn graph_total_matches_combine() {
        let mut g = Graph::new();
        let cls = g.param(&Tensor::scalar(0.7));
        let loc = g.param(&Tensor::scalar(0.3));
        let rc = g.param(&Tensor::scalar(0.2));
        let ri = g.param(&Tensor::scalar(0.4));
        let terms = LossTerms {
            cls,
            loc: Some(loc),
            rank_cls: Some(rc),
            rank_iou: Some(ri),
        };
        let w = LossWeights::default();
        let t = terms.total(&mut g, &w).unwrap();
        let b = terms.breakdown(&g, &w).unwrap();
        assert_eq!(g.item(t), b.total);
        g.backward(t).unwrap();
        assert_eq!(g.grad(rc).unwrap(), &[0.5]);
        assert_eq!(g.grad(ri).unwrap(), &[0.25]);
    }

    #[test]
    fn subsample_caps_and_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx: Vec<usize> = (100..400).collect();
        let s = subsample_positives(&idx, 256, &mut rng);
        assert_eq!(s.len(), 256);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_positives(&idx[..10], 256, &mut rng), idx[..10].to_vec());
    }

    #[test]
    fn freeze_rule_zeroes_lower_iou_gradient() {
        // p1 > p2 and v1 > v2: only the second sum touches v
        let mut g = Graph::new();
        let p = g.vector(vec![0.8, 0.3]).unwrap();
        let v = g.param(&Tensor::from_vec(vec![0.7, 0.4]).unwrap());
        let l = rank_iou_loss(&mut g, p, v, 3.0).unwrap();
        g.backward(l).unwrap();
        let gv = g.grad(v).unwrap();
        assert_eq!(gv[1], 0.0);
        assert!(gv[0] < 0.0);
        assert_abs_diff_eq!(gv[0], -3.0 * (-3.0f64 * 0.3).exp() / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let n = 5;
            let pts: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.05..0.95)).collect();
            let point = Tensor::from_vec(pts.clone()).unwrap();
            let frozen = pts[n..].to_vec();
            let pi: Vec<usize> = (0..n).collect();
            let vi: Vec<usize> = (n..2 * n).collect();
            let err = finite_diff_check(
                |g, x| {
                    let p = g.gather(x, &pi)?;
                    let v = g.gather(x, &vi)?;
                    let vf = g.vector(frozen.clone())?;
                    rank_iou_loss_frozen(g, p, v, vf, 3.0)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "rank_iou {err}");

            let err = finite_diff_check(
                |g, x| {
                    let p = g.gather(x, &pi)?;
                    let v = g.gather(x, &vi)?;
                    rank_iou_loss_ori(g, p, v, 4.0)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "rank_iou_ori {err}");

            let err = finite_diff_check(
                |g, x| {
                    let p = g.gather(x, &[0, 1, 2])?;
                    let h = g.gather(x, &[3, 4, 5, 6])?;
                    let e = expectations(g, p, h)?;
                    rank_cls_loss(g, e.p_minus, e.p_plus, 0.5, 4.0)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "rank_cls {err}");
        }
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let labels = two_point_labels();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let pts: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let point = Tensor::new(&[2, 1, 2], pts).unwrap();
            let c = compare_gradients(|g, x| cross_entropy(g, x, &labels), &point, 1e-5).unwrap();
            assert!(c.max_relative_error() < 1e-4);
            let c = compare_gradients(|g, x| two_stage_ce(g, x, &labels, 0.5), &point, 1e-5).unwrap();
            assert!(c.max_relative_error() < 1e-4);
        }
    }

    /// Direct pair enumeration, written independently of the gather-based path.
    fn brute_rank_iou(p: &[f64], v: &[f64], gamma: f64) -> f64 {
        let n = p.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if v[i] > v[j] {
                    s += (-gamma * (p[i] - p[j])).exp();
                }
            }
        }
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                if p[i] > p[j] {
                    t += (-gamma * (v[i] - v[j])).exp();
                }
            }
        }
        (s + t) / n as f64
    }

    proptest! {
        #[test]
        fn rank_iou_close_to_enumeration(
            pv in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..20)
        ) {
            let (p, v): (Vec<f64>, Vec<f64>) = pv.into_iter().unzip();
            let a = rank_iou_of(&p, &v, 3.0);
            let b = brute_rank_iou(&p, &v, 3.0);
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }

        #[test]
        fn p_minus_is_convex_combination(h in prop::collection::vec(0.0..1.0f64, 1..30)) {
            let pm = expectations_of(&[0.5], &h).1;
            let lo = h.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pm >= lo - 1e-15 && pm <= hi + 1e-15);
        }

        #[test]
        fn rank_cls_monotone(pm in 0.0..1.0f64, pp in 0.0..1.0f64) {
            let mut g = Graph::new();
            let a = g.param(&Tensor::scalar(pm));
            let b = g.param(&Tensor::scalar(pp));
            let l = rank_cls_loss(&mut g, a, b, 0.5, 4.0).unwrap();
            prop_assert!(g.item(l) >= 0.0);
            g.backward(l).unwrap();
            prop_assert!(g.grad(a).unwrap()[0] > 0.0);
            prop_assert!(g.grad(b).unwrap()[0] < 0.0);
        }

        #[test]
        fn losses_non_negative(pv in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..12)) {
            let (p, v): (Vec<f64>, Vec<f64>) = pv.into_iter().unzip();
            prop_assert!(rank_iou_of(&p, &v, 3.0) >= 0.0);
            prop_assert!(rank_iou_ori_of(&p, &v, 4.0) >= 0.0);
        }
    }
}
