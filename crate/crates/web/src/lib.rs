//! WebAssembly bindings for the demo page in `www/`.
//!
//! The page offers three operations: render a synthetic distractor scene,
//! evaluate the classification ranking loss, and evaluate the IoU ranking
//! loss with its gradients. The logic lives in plain functions so it can be
//! tested natively; the exported wrappers only convert errors.

use rbo_core::evalharness::kendall_tau;
use rbo_core::losses::{rank_cls_loss, rank_iou_loss};
use rbo_core::numerics::{Graph, Tensor};
use rbo_core::synthdata::{gen_sequence, Sequence, SequenceSpec};
use rbo_core::Result;
use wasm_bindgen::prelude::*;

fn js(e: rbo_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A generated sequence held on the wasm side.
#[wasm_bindgen]
pub struct Scene {
    seq: Sequence,
}

impl Scene {
    pub fn build(seed: u32, distractors: u32, similarity: f64, frames: u32) -> Result<Self> {
        let spec = SequenceSpec {
            seed: seed as u64,
            distractors: distractors as usize,
            similarity,
            frames: frames as usize,
            ..SequenceSpec::default()
        };
        Ok(Self {
            seq: gen_sequence(&spec)?,
        })
    }

    /// Frame `k` as RGBA bytes, row-major. Out-of-range frames clamp to the last.
    pub fn rgba_of(&self, k: usize) -> Vec<u8> {
        let img = &self.seq.frames[k.min(self.seq.len() - 1)];
        let plane = img.width * img.height;
        let mut out = Vec::with_capacity(4 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    /// `x1, y1, x2, y2` per object at frame `k`, target first.
    pub fn boxes_of(&self, k: usize) -> Vec<f64> {
        let k = k.min(self.seq.len() - 1);
        std::iter::once(&self.seq.gt[k])
            .chain(&self.seq.distractors[k])
            .flat_map(|b| [b.x1, b.y1, b.x2, b.y2])
            .collect()
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, distractors: u32, similarity: f64, frames: u32) -> std::result::Result<Scene, JsError> {
        Self::build(seed, distractors, similarity, frames).map_err(js)
    }

    pub fn width(&self) -> u32 {
        self.seq.spec.width as u32
    }

    pub fn height(&self) -> u32 {
        self.seq.spec.height as u32
    }

    pub fn frames(&self) -> u32 {
        self.seq.len() as u32
    }

    pub fn rgba(&self, frame: u32) -> Vec<u8> {
        self.rgba_of(frame as usize)
    }

    pub fn boxes(&self, frame: u32) -> Vec<f64> {
        self.boxes_of(frame as usize)
    }
}

/// Loss value plus its derivatives with respect to `P−` and `P+`.
pub fn rank_cls_eval(p_minus: f64, p_plus: f64, alpha: f64, beta: f64) -> Result<[f64; 3]> {
    let mut g = Graph::new();
    let pm = g.param(&Tensor::scalar(p_minus));
    let pp = g.param(&Tensor::scalar(p_plus));
    let l = rank_cls_loss(&mut g, pm, pp, alpha, beta)?;
    g.backward(l)?;
    let d = |v| g.grad(v).map_or(0.0, |x| x[0]);
    Ok([g.item(l), d(pm), d(pp)])
}

#[wasm_bindgen]
pub fn rank_cls(p_minus: f64, p_plus: f64, alpha: f64, beta: f64) -> std::result::Result<Vec<f64>, JsError> {
    rank_cls_eval(p_minus, p_plus, alpha, beta).map(|r| r.to_vec()).map_err(js)
}

/// `[loss, tau, dL/dp..., dL/dv...]` for confidences `p` and IoUs `v`.
pub fn rank_iou_eval(p: &[f64], v: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let tau = kendall_tau(p, v)?;
    let mut g = Graph::new();
    let pv = g.param(&Tensor::from_vec(p.to_vec())?);
    let vv = g.param(&Tensor::from_vec(v.to_vec())?);
    let l = rank_iou_loss(&mut g, pv, vv, gamma)?;
    g.backward(l)?;
    let grad = |x| g.grad(x).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
    let mut out = vec![g.item(l), tau];
    out.extend(grad(pv));
    out.extend(grad(vv));
    Ok(out)
}

#[wasm_bindgen]
pub fn rank_iou(p: &[f64], v: &[f64], gamma: f64) -> std::result::Result<Vec<f64>, JsError> {
    rank_iou_eval(p, v, gamma).map_err(js)
}
