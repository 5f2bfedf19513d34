use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{forward, raster_tensor, Arch, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{assign_labels, iou_vars, BoxVars, LabelMap};
use crate::losses::{
    cross_entropy, fg_probs, rank_cls_term, rank_iou_loss, rank_iou_loss_frozen, rank_iou_loss_ori, subsample_positives,
    two_stage_ce, LossBreakdown, LossTerms,
};
use crate::numerics::{softmax, Graph, Var};
use crate::synthdata::{context_side, crop_pair_shifted, gen_sequence, CropPair, SpecSampler};

/// Offsets the subsampling stream from the data stream.
const PAIR_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// One training pair drawn from `scene_seed`: a two-frame scene, template
/// from frame 0 and a search crop on frame 1 shifted by up to `jitter`
/// search-crop pixels in each axis.
pub fn draw_pair(
    sampler: &SpecSampler,
    scene_seed: u64,
    template_size: usize,
    search_size: usize,
    jitter: f64,
) -> Result<CropPair> {
    let spec = sampler.sample(scene_seed);
    let seq = gen_sequence(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ PAIR_STREAM);
    let gt = seq.gt[1];
    let px_per_crop = context_side(gt.width(), gt.height()) / template_size as f64;
    let mut shift = || {
        if jitter > 0.0 {
            rng.random_range(-jitter..=jitter) * px_per_crop
        } else {
            0.0
        }
    };
    let (dx, dy) = (shift(), shift());
    crop_pair_shifted(&seq, 1, template_size, search_size, (dx, dy))
}

/// Recorded loss of one image plus its logged margin.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub terms: LossTerms,
    /// Mean positive score minus the softmax-weighted expectation over all
    /// negatives; `None` without positives or negatives.
    pub margin: Option<f64>,
    /// IoUs entering the IoU ranking term, after subsampling.
    pub ranked_ious: Option<Vec<f64>>,
}

fn channel_gather(g: &mut Graph, map: Var, channel: usize, plane: usize, idx: &[usize]) -> Result<Var> {
    let flat: Vec<usize> = idx.iter().map(|&i| channel * plane + i).collect();
    g.gather(map, &flat)
}

/// Builds the configured objective for one crop pair on `g`.
pub fn image_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &TrainConfig,
    params: &[Var],
    pair: &CropPair,
    rank_active: bool,
    rng: &mut R,
) -> Result<ImageLoss> {
    image_loss_frozen(g, cfg, params, pair, rank_active, rng, None)
}

/// [`image_loss`] with the frozen IoUs of the IoU ranking term supplied as
/// constants instead of a detached copy. Used to verify gradients, since the
/// detached copy makes the recorded gradient differ from the derivative of
/// the loss value.
pub fn image_loss_frozen<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &TrainConfig,
    params: &[Var],
    pair: &CropPair,
    rank_active: bool,
    rng: &mut R,
    frozen_ious: Option<&[f64]>,
) -> Result<ImageLoss> {
    let arch = Arch::from_config(cfg);
    let z = g.constant(&raster_tensor(&pair.template));
    let x = g.constant(&raster_tensor(&pair.search));
    let heads = forward(g, &arch, params, z, x)?;
    let grid = arch.grid();
    let labels: LabelMap = assign_labels(&grid, &pair.gt);
    let cls = if cfg.flags.two_stage_ce {
        two_stage_ce(g, heads.cls, &labels, cfg.tau_neg)?
    } else {
        cross_entropy(g, heads.cls, &labels)?
    };

    let (pos, neg) = (labels.positives(), labels.negatives());
    let probs = fg_probs(g, heads.cls)?;
    let plane = grid.len();
    let mut terms = LossTerms {
        cls,
        loc: None,
        rank_cls: None,
        rank_iou: None,
    };
    let mut ious = None;
    if !pos.is_empty() {
        let offsets = [0, 1, 2, 3].map(|c| channel_gather(g, heads.loc, c, plane, &pos));
        let [l, t, r, b] = offsets;
        let points: Vec<_> = pos.iter().map(|&i| grid.point(i)).collect();
        let boxes = BoxVars::from_offsets(g, &points, [l?, t?, r?, b?])?;
        let v = iou_vars(g, &boxes, &vec![pair.gt; pos.len()])?;
        let m = g.mean(v)?;
        let nm = g.neg(m)?;
        terms.loc = Some(g.offset(nm, 1.0)?);
        ious = Some(v);
    }

    if rank_active && cfg.flags.rank_cls && !pos.is_empty() && !neg.is_empty() {
        let ps = g.gather(probs, &pos)?;
        let ns = g.gather(probs, &neg)?;
        let term = rank_cls_term(g, Some(ps), Some(ns), cfg.tau_neg, cfg.alpha, cfg.beta)?;
        terms.rank_cls = term.loss;
    }

    let iou_ranking = cfg.flags.rank_iou || cfg.flags.rank_iou_ori;
    let mut ranked_ious = None;
    if let (true, true, Some(v)) = (rank_active, iou_ranking, ious) {
        if pos.len() >= 2 {
            let local: Vec<usize> = (0..pos.len()).collect();
            let keep = subsample_positives(&local, cfg.pair_cap, rng);
            let picked: Vec<usize> = keep.iter().map(|&k| pos[k]).collect();
            let p = g.gather(probs, &picked)?;
            let v = g.gather(v, &keep)?;
            ranked_ious = Some(g.value(v).to_vec());
            terms.rank_iou = Some(if cfg.flags.rank_iou {
                match frozen_ious {
                    Some(f) => {
                        let f = g.vector(f.to_vec())?;
                        rank_iou_loss_frozen(g, p, v, f, cfg.gamma)?
                    }
                    None => rank_iou_loss(g, p, v, cfg.gamma)?,
                }
            } else {
                rank_iou_loss_ori(g, p, v, cfg.alpha_ori)?
            });
        }
    }

    let margin = if pos.is_empty() || neg.is_empty() {
        None
    } else {
        let pv = g.value(probs);
        let p_plus = pos.iter().map(|&i| pv[i]).sum::<f64>() / pos.len() as f64;
        let ns: Vec<f64> = neg.iter().map(|&i| pv[i]).collect();
        let w = softmax(&ns)?;
        let p_minus: f64 = w.iter().zip(&ns).map(|(a, b)| a * b).sum();
        Some(p_plus - p_minus)
    };
    Ok(ImageLoss {
        terms,
        margin,
        ranked_ious,
    })
}

/// One row of the run log: batch means of the loss parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub margin: f64,
    /// Images in the batch whose classification ranking term was skipped.
    pub skipped: usize,
    /// Norm of the batch-mean gradient before clipping.
    pub grad_norm: f64,
}

pub const RUN_LOG_HEADER: &str = "iteration,cls,loc,rank_cls,rank_iou,total,margin";

pub fn run_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(RUN_LOG_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, l.cls, l.loc, l.rank_cls, l.rank_iou, l.total, r.margin
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            iteration,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Deterministic SGD with momentum. Identical configs give bit-identical
/// parameters and logs.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(cfg, |_| {})
}

/// [`train`] with a per-iteration observer.
pub fn train_with(cfg: &TrainConfig, mut observe: impl FnMut(&LogRow)) -> Result<TrainOutput> {
    cfg.validate()?;
    let arch = Arch::from_config(cfg);
    let mut model = ModelParams::init(arch, cfg.seed);
    let mut velocity: Vec<Vec<f64>> = model.tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let sampler = cfg.sampler();
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PAIR_STREAM);
    let mut log = Vec::with_capacity(cfg.iterations);
    let inv_batch = 1.0 / cfg.batch as f64;

    for it in 0..cfg.iterations {
        let rank_active = it >= cfg.warmup;
        let mut grads: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut sums = [0.0; 5];
        let (mut margin_sum, mut margin_n, mut skipped) = (0.0, 0usize, 0usize);
        for _ in 0..cfg.batch {
            let pair = draw_pair(&sampler, data_rng.random(), cfg.template_size, cfg.search_size, cfg.jitter)?;
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let step = (|| -> Result<LossBreakdown> {
                let img = image_loss(&mut g, cfg, &vars, &pair, rank_active, &mut pair_rng)?;
                let total = img.terms.total(&mut g, &cfg.weights)?;
                g.backward(total)?;
                if let Some(m) = img.margin {
                    margin_sum += m;
                    margin_n += 1;
                }
                img.terms.breakdown(&g, &cfg.weights)
            })()
            .map_err(|e| diverged(it, e))?;
            if cfg.flags.rank_cls && rank_active && step.skipped_rank_cls {
                skipped += 1;
            }
            for (acc, v) in sums.iter_mut().zip([step.cls, step.loc, step.rank_cls, step.rank_iou, step.total]) {
                *acc += v;
            }
            for (gsum, &var) in grads.iter_mut().zip(&vars) {
                if let Some(gr) = g.grad(var) {
                    for (a, b) in gsum.iter_mut().zip(gr) {
                        *a += b;
                    }
                }
            }
        }
        let grad_norm = grads.iter().flatten().map(|x| (x * inv_batch).powi(2)).sum::<f64>().sqrt();
        let clip = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            cfg.clip_norm / grad_norm
        } else {
            1.0
        };
        for ((gsum, vel), (_, t)) in grads.iter().zip(velocity.iter_mut()).zip(model.tensors.iter_mut()) {
            for ((w, v), gr) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(gsum) {
                *v = cfg.momentum * *v + gr * inv_batch * clip + cfg.weight_decay * *w;
                *w -= cfg.lr * *v;
            }
        }
        let [cls, loc, rank_cls, rank_iou, total] = sums.map(|s| s * inv_batch);
        let row = LogRow {
            iteration: it,
            loss: LossBreakdown {
                cls,
                loc,
                rank_cls,
                rank_iou,
                total,
                skipped_rank_cls: skipped == cfg.batch,
            },
            margin: if margin_n > 0 { margin_sum / margin_n as f64 } else { 0.0 },
            skipped,
            grad_norm,
        };
        if !model.is_finite() || !total.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                reason: format!("parameters left the finite range (batch loss {total})"),
            });
        }
        observe(&row);
        log.push(row);
    }
    Ok(TrainOutput { params: model, log })
}
