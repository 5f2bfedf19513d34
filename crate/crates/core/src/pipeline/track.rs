use super::model::{forward, raster_tensor, ModelParams};
use crate::error::Result;
use crate::geometry::{decode, BBox, HeadGrid};
use crate::losses::fg_probs;
use crate::numerics::Graph;
use crate::synthdata::{search_window, template_window, Raster, Sequence};

/// Per-location foreground probability and decoded offsets for one crop pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub grid: HeadGrid,
    pub probs: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
}

impl Inference {
    /// Box predicted at grid location `i`, in search-crop coordinates.
    pub fn box_at(&self, i: usize) -> BBox {
        decode(self.grid.point(i), self.offsets[i])
    }

    /// First location of the highest value of `scores`.
    pub fn argmax(scores: &[f64]) -> usize {
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }
}

pub fn infer(model: &ModelParams, template: &Raster, search: &Raster) -> Result<Inference> {
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let z = g.constant(&raster_tensor(template));
    let x = g.constant(&raster_tensor(search));
    let heads = forward(&mut g, &model.arch, &p, z, x)?;
    let probs_v = fg_probs(&mut g, heads.cls)?;
    let grid = model.arch.grid();
    let n = grid.len();
    let loc = g.value(heads.loc);
    let offsets = (0..n).map(|i| [loc[i], loc[n + i], loc[2 * n + i], loc[3 * n + i]]).collect();
    Ok(Inference {
        grid,
        probs: g.value(probs_v).to_vec(),
        offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackOptions {
    /// Blend weight of a Hann window prior; 0 disables it.
    pub window_influence: f64,
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Scores after the optional window prior.
pub fn windowed(inf: &Inference, influence: f64) -> Vec<f64> {
    if influence == 0.0 {
        return inf.probs.clone();
    }
    let (hr, hc) = (hann(inf.grid.rows), hann(inf.grid.cols));
    inf.probs
        .iter()
        .enumerate()
        .map(|(i, p)| (1.0 - influence) * p + influence * hr[i / inf.grid.cols] * hc[i % inf.grid.cols])
        .collect()
}

/// Frame-by-frame tracking from the first ground-truth box. Frame 0 returns
/// that box; later frames search around the previous prediction.
pub fn track(model: &ModelParams, seq: &Sequence, opts: &TrackOptions) -> Result<Vec<BBox>> {
    let (t, s) = (model.arch.template_size, model.arch.search_size);
    let (w, h) = (seq.spec.width as f64, seq.spec.height as f64);
    let first = seq.gt[0];
    let template = template_window(&first, t).extract(&seq.frames[0]);
    let mut preds = vec![first];
    let mut prev = first;
    for frame in &seq.frames[1..] {
        let win = search_window(prev.center(), prev.width(), prev.height(), t, s);
        let inf = infer(model, &template, &win.extract(frame))?;
        let best = Inference::argmax(&windowed(&inf, opts.window_influence));
        let raw = win.to_image(&inf.box_at(best));
        let mut next = raw.clamp_to(w, h);
        if next.width() < 1.0 || next.height() < 1.0 {
            // keep the previous size at the clamped centre
            let (cx, cy) = next.center();
            next = prev.translate(cx - prev.center().0, cy - prev.center().1).clamp_to(w, h);
        }
        preds.push(next);
        prev = next;
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrMode;
    use crate::pipeline::model::Arch;
    use crate::synthdata::{gen_sequence, SequenceSpec};

    #[test]
    fn first_frame_is_the_given_box_and_boxes_stay_inside() {
        let arch = Arch {
            mode: CorrMode::DepthWise,
            template_size: 64,
            search_size: 128,
            hidden: 8,
        };
        let model = ModelParams::init(arch, 1);
        let seq = gen_sequence(&SequenceSpec {
            frames: 4,
            ..SequenceSpec::default()
        })
        .unwrap();
        let preds = track(&model, &seq, &TrackOptions::default()).unwrap();
        assert_eq!(preds.len(), 4);
        assert_eq!(preds[0], seq.gt[0]);
        for b in &preds {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0);
            assert!(b.width() >= 1.0 && b.height() >= 1.0);
        }
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(Inference::argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
    }

    #[test]
    fn window_zero_is_identity() {
        let grid = HeadGrid {
            rows: 2,
            cols: 2,
            stride: 8.0,
            origin: 4.0,
            extent: 16.0,
        };
        let inf = Inference {
            grid,
            probs: vec![0.1, 0.2, 0.3, 0.4],
            offsets: vec![[1.0; 4]; 4],
        };
        assert_eq!(windowed(&inf, 0.0), inf.probs);
        let w = windowed(&inf, 1.0);
        assert!(w.iter().all(|v| (v - w[0]).abs() < 1e-12));
    }
}
