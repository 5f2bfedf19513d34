use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{TrainConfig, STRIDE};
use crate::correlation::{dw_corr, pw_corr, CorrMode};
use crate::error::{Error, Result};
use crate::geometry::HeadGrid;
use crate::numerics::{Graph, Tensor, Var};
use crate::synthdata::{Raster, CHANNELS};

/// Backbone channel widths after each stride-2 layer.
pub const BACKBONE: [usize; 3] = [16, 32, 32];

/// Pixel values are centred and scaled by this factor before the backbone.
pub const INPUT_SCALE: f64 = 4.0;

const CHECKPOINT_MAGIC: &str = "rbo-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub mode: CorrMode,
    pub template_size: usize,
    pub search_size: usize,
    pub hidden: usize,
}

impl Arch {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            mode: cfg.mode,
            template_size: cfg.template_size,
            search_size: cfg.search_size,
            hidden: cfg.hidden,
        }
    }

    fn feature_side(size: usize) -> usize {
        size / STRIDE
    }

    /// Channels entering the heads.
    pub fn head_channels(&self) -> usize {
        match self.mode {
            CorrMode::DepthWise => BACKBONE[2],
            CorrMode::PixelWise => 2 * BACKBONE[2],
        }
    }

    /// Head-grid geometry in search-crop pixels.
    pub fn grid(&self) -> HeadGrid {
        let (fz, fx) = (Self::feature_side(self.template_size), Self::feature_side(self.search_size));
        let s = STRIDE as f64;
        let cell_centre = s / 2.0;
        let (side, origin) = match self.mode {
            CorrMode::DepthWise => (fx - fz + 1, cell_centre + s * (fz as f64 - 1.0) / 2.0),
            CorrMode::PixelWise => (fx, cell_centre),
        };
        HeadGrid {
            rows: side,
            cols: side,
            stride: s,
            origin,
            extent: self.search_size as f64,
        }
    }

    /// Ordered `(name, shape)` of every weight tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = CHANNELS;
        for (i, &c) in BACKBONE.iter().enumerate() {
            out.push((format!("backbone{}.w", i + 1), vec![c, c_in, 2, 2]));
            out.push((format!("backbone{}.b", i + 1), vec![c]));
            c_in = c;
        }
        let (hc, h) = (self.head_channels(), self.hidden);
        for (head, c_out) in [("cls", 2), ("loc", 4)] {
            if h == 0 {
                out.push((format!("{head}.w"), vec![c_out, hc, 1, 1]));
                out.push((format!("{head}.b"), vec![c_out]));
            } else {
                out.push((format!("{head}1.w"), vec![h, hc, 1, 1]));
                out.push((format!("{head}1.b"), vec![h]));
                out.push((format!("{head}2.w"), vec![c_out, h, 1, 1]));
                out.push((format!("{head}2.b"), vec![c_out]));
            }
        }
        out
    }
}

/// Named weight tensors of the tracker plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Uniform in `±1/√fan_in` for every weight and bias.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = arch.layout();
        let mut tensors = Vec::with_capacity(layout.len());
        let mut fan_in = 1;
        for (name, shape) in layout {
            if name.ends_with(".w") {
                fan_in = shape[1..].iter().product();
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let t = Tensor::new(&shape, data).expect("layout shapes are non-empty");
            tensors.push((name, t));
        }
        Self { arch, tensors }
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }

    /// Records every tensor as a gradient-carrying leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|(_, t)| g.param(t)).collect()
    }

    /// Records every tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|(_, t)| g.constant(t)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut head = format!(
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nmode {}\ntemplate_size {}\nsearch_size {}\nhidden {}\ntensors {}\n",
            a.mode.name(),
            a.template_size,
            a.search_size,
            a.hidden,
            self.tensors.len()
        );
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("{name} {} {}\n", t.shape().len(), dims.join(" ")));
        }
        head.push_str("data\n");
        let mut bytes = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: String| Error::format(path, why);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos.min(bytes.len())..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("non-utf8 header".into()))
        };
        let magic = next_line()?;
        if magic != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header `{magic}`")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = next_line()?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, got `{line}`")))
        };
        let num = |s: String, what: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(format!("bad {what} `{s}`")))
        };
        let mode_s = field("mode")?;
        let mode = CorrMode::parse(&mode_s).ok_or_else(|| bad(format!("unknown mode `{mode_s}`")))?;
        let arch = Arch {
            mode,
            template_size: num(field("template_size")?, "template_size")?,
            search_size: num(field("search_size")?, "search_size")?,
            hidden: num(field("hidden")?, "hidden")?,
        };
        let count = num(field("tensors")?, "tensor count")?;
        let layout = arch.layout();
        if count != layout.len() {
            return Err(bad(format!("{count} tensors, architecture needs {}", layout.len())));
        }
        let mut shapes = Vec::with_capacity(count);
        for (name, shape) in &layout {
            let line = next_line()?;
            let mut parts = line.split(' ');
            let got_name = parts.next().unwrap_or_default();
            let dims: Vec<usize> = parts
                .skip(1)
                .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in `{line}`"))))
                .collect::<Result<_>>()?;
            if got_name != name || &dims != shape {
                return Err(bad(format!("tensor `{line}` does not match `{name}` {shape:?}")));
            }
            shapes.push((name.clone(), dims));
        }
        if next_line()? != "data" {
            return Err(bad("missing data marker".into()));
        }
        let body = &bytes[pos..];
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(bad(format!("expected {} weight bytes, found {}", total * 8, body.len())));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in shapes {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { arch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Raster as a centred `3×H×W` tensor.
pub fn raster_tensor(img: &Raster) -> Tensor {
    let data = img.data.iter().map(|v| (v - 0.5) * INPUT_SCALE).collect();
    Tensor::new(&[CHANNELS, img.height, img.width], data).expect("raster dimensions are positive")
}

/// Raw head outputs on the graph.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    /// `2×H×W` class logits (background, foreground).
    pub cls: Var,
    /// `4×H×W` positive `(l, t, r, b)` offsets in search-crop pixels.
    pub loc: Var,
    pub similarity: Var,
}

fn conv_layer(g: &mut Graph, x: Var, w: Var, b: Var, stride: usize, relu: bool) -> Result<Var> {
    let y = g.conv2d(x, w, Some(b), stride, 1)?;
    if relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

fn backbone(g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let x = conv_layer(g, x, p[0], p[1], 2, true)?;
    let x = conv_layer(g, x, p[2], p[3], 2, true)?;
    conv_layer(g, x, p[4], p[5], 2, false)
}

/// One linear 1×1 layer, or two with a ReLU between them.
fn head(g: &mut Graph, p: &[Var], s: Var) -> Result<Var> {
    if p.len() == 2 {
        return conv_layer(g, s, p[0], p[1], 1, false);
    }
    let h = conv_layer(g, s, p[0], p[1], 1, true)?;
    conv_layer(g, h, p[2], p[3], 1, false)
}

/// `x / sqrt(mean(x²) + ε)`, so the response is linear in the search scale only.
fn rms_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let m = g.mean(sq)?;
    let m = g.offset(m, 1e-6)?;
    let l = g.log(m)?;
    let l = g.scale(l, -0.5)?;
    let inv = g.exp(l)?;
    g.mul(x, inv)
}

/// Backbone on both crops, correlation, then the two heads.
pub fn forward(g: &mut Graph, arch: &Arch, params: &[Var], template: Var, search: Var) -> Result<Heads> {
    let expect = |v: Var, size: usize, what: &str| -> Result<()> {
        if g.shape(v) != [CHANNELS, size, size] {
            return Err(Error::shape(
                "forward",
                format!("{what} must be {CHANNELS}×{size}×{size}, got {:?}", g.shape(v)),
            ));
        }
        Ok(())
    };
    expect(template, arch.template_size, "template")?;
    expect(search, arch.search_size, "search")?;
    let fz = backbone(g, &params[0..6], template)?;
    let fx = backbone(g, &params[0..6], search)?;
    let similarity = match arch.mode {
        CorrMode::DepthWise => {
            let fz = rms_normalize(g, fz)?;
            let s = dw_corr(g, fz, fx)?;
            let hz = Arch::feature_side(arch.template_size);
            g.scale(s, 1.0 / hz as f64)?
        }
        CorrMode::PixelWise => pw_corr(g, fz, fx)?.similarity,
    };
    let per_head = (params.len() - 6) / 2;
    let cls = head(g, &params[6..6 + per_head], similarity)?;
    let raw = head(g, &params[6 + per_head..], similarity)?;
    let pos = g.exp(raw)?;
    let loc = g.scale(pos, STRIDE as f64)?;
    Ok(Heads { cls, loc, similarity })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(mode: CorrMode) -> Arch {
        Arch {
            mode,
            template_size: 64,
            search_size: 128,
            hidden: 8,
        }
    }

    #[test]
    fn preset_grid_shapes() {
        let dw = arch(CorrMode::DepthWise).grid();
        assert_eq!((dw.rows, dw.cols), (9, 9));
        // symmetric about the search centre
        assert_eq!(dw.point(40), (64.0, 64.0));
        let pw = arch(CorrMode::PixelWise).grid();
        assert_eq!((pw.rows, pw.cols), (16, 16));
        assert_eq!(pw.point(0), (4.0, 4.0));
    }

    #[test]
    fn forward_shapes_match_grid() {
        for mode in [CorrMode::DepthWise, CorrMode::PixelWise] {
            let a = arch(mode);
            let m = ModelParams::init(a, 3);
            let mut g = Graph::new();
            let p = m.bind(&mut g);
            let z = g.constant(&Tensor::zeros(&[3, 64, 64]));
            let x = g.constant(&Tensor::new(&[3, 128, 128], vec![0.1; 3 * 128 * 128]).unwrap());
            let h = forward(&mut g, &a, &p, z, x).unwrap();
            let grid = a.grid();
            assert_eq!(g.shape(h.cls), &[2, grid.rows, grid.cols]);
            assert_eq!(g.shape(h.loc), &[4, grid.rows, grid.cols]);
            assert!(g.value(h.loc).iter().all(|v| *v > 0.0));
            assert!(forward(&mut g, &a, &p, x, z).is_err());
        }
    }

    #[test]
    fn pw_similarity_starts_with_search_features() {
        let a = arch(CorrMode::PixelWise);
        let m = ModelParams::init(a, 5);
        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
        };
        let z = g.constant(&rand(&[3, 64, 64]));
        let x = g.constant(&rand(&[3, 128, 128]));
        let h = forward(&mut g, &a, &p, z, x).unwrap();
        let fx = backbone(&mut g, &p[0..6], x).unwrap();
        let n = g.value(fx).len();
        assert_eq!(&g.value(h.similarity)[..n], g.value(fx));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = arch(CorrMode::DepthWise);
        let m = ModelParams::init(a, 9);
        assert_eq!(m, ModelParams::init(a, 9));
        assert_ne!(m, ModelParams::init(a, 10));
        let w1 = &m.tensors[0].1;
        let bound = 1.0 / 12f64.sqrt();
        assert!(w1.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = ModelParams::init(arch(CorrMode::PixelWise), 4);
        m.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in back.tensors.iter().zip(&m.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = ModelParams::init(arch(CorrMode::DepthWise), 4);
        let bytes = m.to_bytes();
        let p = Path::new("x");
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut wrong = bytes.clone();
        wrong[..14].copy_from_slice(b"not-a-checkpnt");
        assert!(ModelParams::from_bytes(&wrong, p).is_err());
        let text = String::from_utf8_lossy(&bytes[..200]).replace("hidden 8", "hidden 9");
        let mut swapped = text.into_bytes();
        swapped.extend_from_slice(&bytes[200..]);
        assert!(ModelParams::from_bytes(&swapped, p).is_err());
    }
}
