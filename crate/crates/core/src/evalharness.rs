//! Tracking metrics, ranking diagnostics and ablation tables.
//!
//! Success uses inclusive thresholds (`iou >= t`) over `t = 0, 0.05, …, 1`,
//! so a perfect tracker scores exactly 1. Ranking diagnostics are measured
//! on seeded, jittered search crops around the ground truth, independent of
//! tracker state, so every arm is scored on the same crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{assign_labels, center_distance, iou, BBox};
use crate::kv::{self, KvFile};
use crate::pipeline::{infer, track, Inference, LossFlags, ModelParams, TrackOptions};
use crate::synthdata::{context_side, crop_pair_shifted, gen_sequence, Sequence, SpecSampler};

/// Number of success thresholds.
pub const SUCCESS_STEPS: usize = 21;
/// Radius of the headline distance precision.
pub const DP_RADIUS: f64 = 20.0;
/// Largest radius of the precision curve.
pub const PRECISION_MAX_RADIUS: usize = 50;

const DIAG_STREAM: u64 = 0xd1b5_4a32_d192_ed03;

fn check_lengths(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "metric",
            format!("{} predictions vs {} ground-truth boxes", pred.len(), gt.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Empty { op: "metric" });
    }
    Ok(())
}

/// `(threshold, success rate)` pairs.
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<(f64, f64)>> {
    check_lengths(pred, gt)?;
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let n = overlaps.len() as f64;
    Ok((0..SUCCESS_STEPS)
        .map(|k| {
            let t = k as f64 / (SUCCESS_STEPS - 1) as f64;
            let hits = overlaps.iter().filter(|&&o| o >= t).count();
            (t, hits as f64 / n)
        })
        .collect())
}

/// Mean success rate over the thresholds.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let curve = success_curve(pred, gt)?;
    Ok(curve.iter().map(|(_, r)| r).sum::<f64>() / curve.len() as f64)
}

/// Fraction of frames whose centre error is at most `radius`.
pub fn dp_at(pred: &[BBox], gt: &[BBox], radius: f64) -> Result<f64> {
    check_lengths(pred, gt)?;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| center_distance(p, g) <= radius)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `(radius, precision)` for integer radii `0..=PRECISION_MAX_RADIUS`.
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<(f64, f64)>> {
    (0..=PRECISION_MAX_RADIUS)
        .map(|r| Ok((r as f64, dp_at(pred, gt, r as f64)?)))
        .collect()
}

/// `(concordant − discordant) / C(n, 2)`; pairs tied in either input count
/// as neither.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("kendall_tau", format!("{} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(format!("kendall_tau needs at least 2 items, got {n}")));
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if a[i] != a[j] && b[i] != b[j] {
                score += s as i64;
            }
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Held-out evaluation set and inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub sequences: usize,
    pub frames: usize,
    /// Sequence `i` is drawn from sampler seed `seed_base + i`.
    pub seed_base: u64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub similarity_min: f64,
    pub similarity_max: f64,
    pub motion_sigma: f64,
    pub jitter: f64,
    pub window_influence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sequences: 20,
            frames: 30,
            seed_base: 1_000_000,
            distractors_min: 2,
            distractors_max: 3,
            similarity_min: 0.7,
            similarity_max: 0.9,
            motion_sigma: 2.0,
            jitter: 24.0,
            window_influence: 0.0,
        }
    }
}

const EVAL_KEYS: &[&str] = &[
    "sequences",
    "frames",
    "seed_base",
    "distractors_min",
    "distractors_max",
    "similarity_min",
    "similarity_max",
    "motion_sigma",
    "jitter",
    "window_influence",
];

impl EvalConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(EVAL_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            sequences: kv.get("sequences", d.sequences)?,
            frames: kv.get("frames", d.frames)?,
            seed_base: kv.get("seed_base", d.seed_base)?,
            distractors_min: kv.get("distractors_min", d.distractors_min)?,
            distractors_max: kv.get("distractors_max", d.distractors_max)?,
            similarity_min: kv.get("similarity_min", d.similarity_min)?,
            similarity_max: kv.get("similarity_max", d.similarity_max)?,
            motion_sigma: kv.get("motion_sigma", d.motion_sigma)?,
            jitter: kv.get("jitter", d.jitter)?,
            window_influence: kv.get("window_influence", d.window_influence)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::config("sequences", "must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config("frames", "must be at least 2"));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::config("distractors_min", "exceeds distractors_max"));
        }
        let sim_ok = (0.0..=1.0).contains(&self.similarity_min)
            && (0.0..=1.0).contains(&self.similarity_max)
            && self.similarity_min <= self.similarity_max;
        if !sim_ok {
            return Err(Error::config("similarity_min", "similarity range must be ordered within [0, 1]"));
        }
        if !(self.motion_sigma >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::config("jitter", "motion and jitter must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.window_influence) {
            return Err(Error::config("window_influence", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("sequences", self.sequences.to_string()),
            ("frames", self.frames.to_string()),
            ("seed_base", self.seed_base.to_string()),
            ("distractors_min", self.distractors_min.to_string()),
            ("distractors_max", self.distractors_max.to_string()),
            ("similarity_min", self.similarity_min.to_string()),
            ("similarity_max", self.similarity_max.to_string()),
            ("motion_sigma", self.motion_sigma.to_string()),
            ("jitter", self.jitter.to_string()),
            ("window_influence", self.window_influence.to_string()),
        ])
    }

    pub fn sampler(&self) -> SpecSampler {
        SpecSampler {
            frames: self.frames,
            distractors: (self.distractors_min, self.distractors_max),
            similarity: (self.similarity_min, self.similarity_max),
            motion_sigma: self.motion_sigma,
            ..SpecSampler::default()
        }
    }

    /// The held-out sequences, in seed order.
    pub fn sequences(&self) -> Result<Vec<Sequence>> {
        let sampler = self.sampler();
        (0..self.sequences as u64)
            .map(|i| gen_sequence(&sampler.sample(self.seed_base + i)))
            .collect()
    }

    pub fn track_options(&self) -> TrackOptions {
        TrackOptions {
            window_influence: self.window_influence,
        }
    }

    pub fn diag_options(&self) -> DiagOptions {
        DiagOptions { jitter: self.jitter }
    }
}

/// Ranking diagnostics of one crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDiagnostics {
    /// The highest-scoring location lies inside the target box.
    pub on_target: bool,
    /// Best positive score minus best distractor-location score.
    pub margin: Option<f64>,
    /// Rank agreement between positive scores and their predicted-box IoUs.
    pub tau: Option<f64>,
}

/// Diagnostics for one inference against crop-space target and distractors.
pub fn frame_diagnostics(inf: &Inference, gt: &BBox, distractors: &[BBox]) -> Result<FrameDiagnostics> {
    let grid = inf.grid;
    let best = Inference::argmax(&inf.probs);
    let (bx, by) = grid.point(best);
    let labels = assign_labels(&grid, gt);
    let pos = labels.positives();
    let distractor_locs: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let (x, y) = grid.point(i);
            !gt.contains(x, y) && distractors.iter().any(|d| d.contains(x, y))
        })
        .collect();
    let max_of = |idx: &[usize]| idx.iter().map(|&i| inf.probs[i]).fold(f64::NEG_INFINITY, f64::max);
    let margin = (!pos.is_empty() && !distractor_locs.is_empty())
        .then(|| max_of(&pos) - max_of(&distractor_locs));
    let tau = if pos.len() >= 2 {
        let scores: Vec<f64> = pos.iter().map(|&i| inf.probs[i]).collect();
        let ious: Vec<f64> = pos.iter().map(|&i| iou(&inf.box_at(i), gt)).collect();
        Some(kendall_tau(&scores, &ious)?)
    } else {
        None
    };
    Ok(FrameDiagnostics {
        on_target: gt.contains(bx, by),
        margin,
        tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagOptions {
    /// Largest search-centre offset in search-crop pixels.
    pub jitter: f64,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self { jitter: 24.0 }
    }
}

/// Diagnostics over every frame of `seq`, on crops shifted by a stream
/// seeded from the sequence seed.
pub fn sequence_diagnostics(model: &ModelParams, seq: &Sequence, opts: &DiagOptions) -> Result<Vec<FrameDiagnostics>> {
    let (t, s) = (model.arch.template_size, model.arch.search_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seq.spec.seed ^ DIAG_STREAM);
    (0..seq.len())
        .map(|f| {
            let gt = seq.gt[f];
            let px = context_side(gt.width(), gt.height()) / t as f64;
            let mut shift = || {
                if opts.jitter > 0.0 {
                    rng.random_range(-opts.jitter..=opts.jitter) * px
                } else {
                    0.0
                }
            };
            let (dx, dy) = (shift(), shift());
            let pair = crop_pair_shifted(seq, f, t, s, (dx, dy))?;
            let inf = infer(model, &pair.template, &pair.search)?;
            frame_diagnostics(&inf, &pair.gt, &pair.distractors)
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Metrics of one sequence or their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub success_auc: f64,
    pub dp20: f64,
    pub rank_consistency: f64,
    pub distractor_margin: Option<f64>,
    pub kendall_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub seed: u64,
    pub metrics: Metrics,
    pub predictions: Vec<BBox>,
    pub gt: Vec<BBox>,
}

/// Per-sequence metrics and their unweighted means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub sequences: Vec<SequenceReport>,
    pub aggregate: Metrics,
}

pub fn evaluate_sequence(
    model: &ModelParams,
    seq: &Sequence,
    track_opts: &TrackOptions,
    diag_opts: &DiagOptions,
) -> Result<SequenceReport> {
    let preds = track(model, seq, track_opts)?;
    let diags = sequence_diagnostics(model, seq, diag_opts)?;
    let on_target = diags.iter().filter(|d| d.on_target).count();
    Ok(SequenceReport {
        seed: seq.spec.seed,
        metrics: Metrics {
            success_auc: success_auc(&preds, &seq.gt)?,
            dp20: dp_at(&preds, &seq.gt, DP_RADIUS)?,
            rank_consistency: on_target as f64 / diags.len() as f64,
            distractor_margin: mean_of(diags.iter().filter_map(|d| d.margin)),
            kendall_tau: mean_of(diags.iter().filter_map(|d| d.tau)),
        },
        predictions: preds,
        gt: seq.gt.clone(),
    })
}

pub fn aggregate(reports: &[SequenceReport]) -> Result<Metrics> {
    if reports.is_empty() {
        return Err(Error::Empty { op: "aggregate" });
    }
    let n = reports.len() as f64;
    let m = || reports.iter().map(|r| &r.metrics);
    Ok(Metrics {
        success_auc: m().map(|x| x.success_auc).sum::<f64>() / n,
        dp20: m().map(|x| x.dp20).sum::<f64>() / n,
        rank_consistency: m().map(|x| x.rank_consistency).sum::<f64>() / n,
        distractor_margin: mean_of(m().filter_map(|x| x.distractor_margin)),
        kendall_tau: mean_of(m().filter_map(|x| x.kendall_tau)),
    })
}

/// Evaluates sequences in order; the reduction order is fixed.
pub fn evaluate(
    model: &ModelParams,
    seqs: &[Sequence],
    track_opts: &TrackOptions,
    diag_opts: &DiagOptions,
) -> Result<MetricReport> {
    let sequences = seqs
        .iter()
        .map(|s| evaluate_sequence(model, s, track_opts, diag_opts))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&sequences)?;
    Ok(MetricReport { sequences, aggregate })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Version tag of the report CSV layouts.
pub const REPORT_SCHEMA: &str = "rbo-report-v1";

const METRIC_COLUMNS: &str = "success_auc,dp20,rank_consistency,distractor_margin,kendall_tau";

fn metric_cells(m: &Metrics) -> String {
    format!(
        "{},{},{},{},{}",
        m.success_auc,
        m.dp20,
        m.rank_consistency,
        opt(m.distractor_margin),
        opt(m.kendall_tau)
    )
}

/// Per-sequence rows plus a final `mean` row.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = format!("# {REPORT_SCHEMA}\nsequence,{METRIC_COLUMNS}\n");
    for s in &report.sequences {
        out.push_str(&format!("{},{}\n", s.seed, metric_cells(&s.metrics)));
    }
    out.push_str(&format!("mean,{}\n", metric_cells(&report.aggregate)));
    out
}

/// Curve pooled over all frames of all sequences.
pub fn curve_csv(header: &str, curve: &[(f64, f64)]) -> String {
    let mut out = format!("# {REPORT_SCHEMA}\n{header}\n");
    for (x, y) in curve {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

fn pooled(report: &MetricReport) -> (Vec<BBox>, Vec<BBox>) {
    let pred = report.sequences.iter().flat_map(|s| s.predictions.iter().copied()).collect();
    let gt = report.sequences.iter().flat_map(|s| s.gt.iter().copied()).collect();
    (pred, gt)
}

/// `(file name, contents)` of every report file of one run.
pub fn report_files(report: &MetricReport) -> Result<Vec<(String, String)>> {
    let (pred, gt) = pooled(report);
    Ok(vec![
        ("metrics.csv".into(), metrics_csv(report)),
        ("success.csv".into(), curve_csv("threshold,rate", &success_curve(&pred, &gt)?)),
        ("precision.csv".into(), curve_csv("radius,rate", &precision_curve(&pred, &gt)?)),
    ])
}

/// Loss-flag arms of the ablation, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    Cr,
    CrIgrOri,
    CrIgr,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Cr, Arm::CrIgrOri, Arm::CrIgr];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Cr => "cr",
            Arm::CrIgrOri => "cr_igr_ori",
            Arm::CrIgr => "cr_igr",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Cr => "+CR",
            Arm::CrIgrOri => "+CR+IGR-ori",
            Arm::CrIgr => "+CR+IGR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s || a.label() == s)
    }

    pub fn flags(self) -> LossFlags {
        LossFlags {
            rank_cls: self != Arm::Baseline,
            rank_iou: self == Arm::CrIgr,
            rank_iou_ori: self == Arm::CrIgrOri,
            two_stage_ce: false,
        }
    }

    /// The arm whose flags equal `flags`, ignoring the cross-entropy variant.
    pub fn from_flags(flags: &LossFlags) -> Option<Self> {
        Self::ALL.into_iter().find(|a| {
            let f = a.flags();
            f.rank_cls == flags.rank_cls && f.rank_iou == flags.rank_iou && f.rank_iou_ori == flags.rank_iou_ori
        })
    }
}

/// One trained and evaluated arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub config_digest: String,
    pub flags: LossFlags,
    /// Mean classification and IoU ranking losses over the last tenth of training.
    pub final_rank_cls: f64,
    pub final_rank_iou: f64,
    pub metrics: Metrics,
}

/// One row per arm of `required`, in [`Arm::ALL`] order; each must be present once.
pub fn ablation_table(results: &[ArmResult], required: &[Arm]) -> Result<String> {
    let mut out = format!(
        "# {REPORT_SCHEMA}\narm,seed,config_digest,{METRIC_COLUMNS},rank_cls_active,rank_cls_loss,rank_iou_active,rank_iou_loss\n"
    );
    for arm in Arm::ALL.into_iter().filter(|a| required.contains(a)) {
        let mut rows = results.iter().filter(|r| r.arm == arm);
        let r = rows
            .next()
            .ok_or_else(|| Error::config("arms", format!("missing arm `{}`", arm.name())))?;
        if rows.next().is_some() {
            return Err(Error::config("arms", format!("arm `{}` given twice", arm.name())));
        }
        let iou_active = r.flags.rank_iou || r.flags.rank_iou_ori;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            arm.label(),
            r.seed,
            r.config_digest,
            metric_cells(&r.metrics),
            if r.flags.rank_cls { "active" } else { "inactive" },
            r.final_rank_cls,
            if iou_active { "active" } else { "inactive" },
            r.final_rank_iou,
        ));
    }
    Ok(out)
}
