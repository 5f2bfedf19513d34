//! Template/search matching: depth-wise cross-correlation and a
//! simplified pixel-wise (attention-style) correlation.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrMode {
    DepthWise,
    PixelWise,
}

impl CorrMode {
    pub fn name(self) -> &'static str {
        match self {
            CorrMode::DepthWise => "dw",
            CorrMode::PixelWise => "pw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dw" => Some(CorrMode::DepthWise),
            "pw" => Some(CorrMode::PixelWise),
            _ => None,
        }
    }
}

fn chw(g: &Graph, v: Var, what: &str) -> Result<[usize; 3]> {
    match *g.shape(v) {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::shape(
            "correlation",
            format!("{what} must be C×H×W, got {s:?}"),
        )),
    }
}

/// Per-channel valid cross-correlation of `fx` with `fz` as the kernel.
/// Output is `C × (Hx−Hz+1) × (Wx−Wz+1)`.
pub fn dw_corr(g: &mut Graph, fz: Var, fx: Var) -> Result<Var> {
    let [cz, hz, wz] = chw(g, fz, "template")?;
    let [cx, hx, wx] = chw(g, fx, "search")?;
    if cz != cx {
        return Err(Error::shape("dw_corr", format!("channels {cz} vs {cx}")));
    }
    if hz > hx || wz > wx {
        return Err(Error::shape(
            "dw_corr",
            format!("template {hz}x{wz} larger than search {hx}x{wx}"),
        ));
    }
    let kernel = g.reshape(fz, &[cz, 1, hz, wz])?;
    g.conv2d(fx, kernel, None, 1, cz)
}

/// Output of [`pw_corr`].
#[derive(Debug, Clone, Copy)]
pub struct PwCorr {
    /// `2C × Hx × Wx`: search features followed by aggregated template features.
    pub similarity: Var,
    /// `(Hz·Wz) × (Hx·Wx)`; column `j` is a softmax over template positions.
    pub weights: Var,
}

/// `w[i, j] = softmax_i(Fz_i · Fx_j / √C)`, then `concat(Fx, Fzᵀ w)` along channels.
pub fn pw_corr(g: &mut Graph, fz: Var, fx: Var) -> Result<PwCorr> {
    let [cz, hz, wz] = chw(g, fz, "template")?;
    let [cx, hx, wx] = chw(g, fx, "search")?;
    if cz != cx {
        return Err(Error::shape("pw_corr", format!("channels {cz} vs {cx}")));
    }
    let c = cz;
    let (nz, nx) = (hz * wz, hx * wx);
    let zf = g.reshape(fz, &[c, nz])?;
    let xf = g.reshape(fx, &[c, nx])?;
    let xt = g.transpose(xf)?;
    // rows indexed by search position j, columns by template position k
    let scores = g.matmul(xt, zf)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let attn_t = g.transpose(attn)?;
    let agg = g.matmul(zf, attn_t)?;
    let agg = g.reshape(agg, &[c, hx, wx])?;
    let similarity = g.concat(&[fx, agg])?;
    Ok(PwCorr {
        similarity,
        weights: attn_t,
    })
}

/// Similarity map for either mode.
pub fn correlate(g: &mut Graph, mode: CorrMode, fz: Var, fx: Var) -> Result<Var> {
    match mode {
        CorrMode::DepthWise => dw_corr(g, fz, fx),
        CorrMode::PixelWise => Ok(pw_corr(g, fz, fx)?.similarity),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn dw_unit_template_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let fx = g.constant(&rand_tensor(&mut rng, &[3, 5, 6], -1.0, 1.0));
        let fz = g.constant(&Tensor::new(&[3, 1, 1], vec![1.0; 3]).unwrap());
        let s = dw_corr(&mut g, fz, fx).unwrap();
        assert_eq!(g.value(s), g.value(fx));
    }

    #[test]
    fn dw_shape_and_errors() {
        let mut g = Graph::new();
        let fz = g.constant(&Tensor::zeros(&[4, 3, 3]));
        let fx = g.constant(&Tensor::zeros(&[4, 7, 7]));
        let s = dw_corr(&mut g, fz, fx).unwrap();
        assert_eq!(g.shape(s), &[4, 5, 5]);
        assert!(dw_corr(&mut g, fx, fz).is_err());
        let other = g.constant(&Tensor::zeros(&[2, 7, 7]));
        assert!(dw_corr(&mut g, fz, other).is_err());
    }

    #[test]
    fn dw_peaks_at_matching_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 9, 9], 0.0, 1.0);
        let (r0, c0) = (3, 5);
        let mut crop = Vec::new();
        for c in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    crop.push(x.at3(c, r0 + y, c0 + xx));
                }
            }
        }
        let mut g = Graph::new();
        let fx = g.constant(&x);
        let fz = g.constant(&Tensor::new(&[2, 3, 3], crop).unwrap());
        let sv = dw_corr(&mut g, fz, fx).unwrap();
        let s = g.tensor(sv);
        // normalised response peaks where the template was cut out
        for c in 0..2 {
            let mut best = (0, 0);
            let mut best_v = f64::NEG_INFINITY;
            for r in 0..7 {
                for col in 0..7 {
                    let mut norm = 0.0;
                    for y in 0..3 {
                        for xx in 0..3 {
                            norm += x.at3(c, r + y, col + xx).powi(2);
                        }
                    }
                    let v = s.at3(c, r, col) / norm.sqrt();
                    if v > best_v {
                        best_v = v;
                        best = (r, col);
                    }
                }
            }
            assert_eq!(best, (r0, c0));
        }
    }

    #[test]
    fn dw_linear_in_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[3, 6, 6], -1.0, 1.0);
        let mut g = Graph::new();
        let fz = g.constant(&z);
        let fx = g.constant(&x);
        let a = 2.75;
        let ax = g.scale(fx, a).unwrap();
        let s1 = dw_corr(&mut g, fz, fx).unwrap();
        let s2 = dw_corr(&mut g, fz, ax).unwrap();
        for (u, v) in g.value(s1).iter().zip(g.value(s2)) {
            assert!((a * u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn pw_single_template_pixel_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let fz = g.constant(&rand_tensor(&mut rng, &[4, 1, 1], -1.0, 1.0));
        let fx = g.constant(&rand_tensor(&mut rng, &[4, 3, 5], -1.0, 1.0));
        let out = pw_corr(&mut g, fz, fx).unwrap();
        assert_eq!(g.shape(out.weights), &[1, 15]);
        assert!(g.value(out.weights).iter().all(|w| *w == 1.0));
        assert_eq!(g.shape(out.similarity), &[8, 3, 5]);
    }

    #[test]
    fn pw_identical_template_pixels_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pix: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        // C=3, two template pixels with identical features
        let zdata: Vec<f64> = pix.iter().flat_map(|v| [*v, *v]).collect();
        let mut g = Graph::new();
        let fz = g.constant(&Tensor::new(&[3, 1, 2], zdata).unwrap());
        let fx = g.constant(&rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0));
        let out = pw_corr(&mut g, fz, fx).unwrap();
        for w in g.value(out.weights) {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn pw_columns_normalised_and_search_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut g = Graph::new();
            let x = rand_tensor(&mut rng, &[4, 5, 5], -2.0, 2.0);
            let fz = g.constant(&rand_tensor(&mut rng, &[4, 3, 2], -2.0, 2.0));
            let fx = g.constant(&x);
            let out = pw_corr(&mut g, fz, fx).unwrap();
            let w = g.value(out.weights);
            let (nz, nx) = (6, 25);
            for j in 0..nx {
                let s: f64 = (0..nz).map(|i| w[i * nx + j]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            assert_eq!(&g.value(out.similarity)[..x.len()], x.data());
        }
    }

    #[test]
    fn both_modes_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, hz, hx) = (2, 2, 4);
        let nz = c * hz * hz;
        let point = rand_tensor(&mut rng, &[nz + c * hx * hx], -1.0, 1.0);
        let weights: Vec<f64> = (0..4 * c * hx * hx).map(|_| rng.random_range(-1.0..1.0)).collect();
        for mode in [CorrMode::DepthWise, CorrMode::PixelWise] {
            let weights = weights.clone();
            let err = finite_diff_check(
                move |g, v| {
                    let zi: Vec<usize> = (0..nz).collect();
                    let xi: Vec<usize> = (nz..nz + c * hx * hx).collect();
                    let z = g.gather(v, &zi)?;
                    let z = g.reshape(z, &[c, hz, hz])?;
                    let x = g.gather(v, &xi)?;
                    let x = g.reshape(x, &[c, hx, hx])?;
                    let s = correlate(g, mode, z, x)?;
                    let n = g.value(s).len();
                    let flat = g.reshape(s, &[n])?;
                    let wv = g.vector(weights[..n].to_vec())?;
                    let p = g.mul(flat, wv)?;
                    g.sum(p)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }
}
