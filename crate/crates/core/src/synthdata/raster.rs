use crate::geometry::BBox;

/// Three-channel image with values in `[0, 1]`, stored channel-major (`C×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Raster {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; CHANNELS * plane];
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = color[c]);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.width * self.height;
        let mut out = [0.0; 3];
        for (c, chunk) in self.data.chunks(plane).enumerate() {
            out[c] = chunk.iter().sum::<f64>() / plane as f64;
        }
        out
    }

    /// Mean and variance of all channels over pixels whose centers fall in `b`.
    pub fn box_stats(&self, b: &BBox) -> Option<(f64, f64)> {
        let mut vals = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if b.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..CHANNELS {
                        vals.push(self.get(c, y, x));
                    }
                }
            }
        }
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var))
    }

    /// Bilinear sample at continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
    /// Neighbours outside the image read as `pad`.
    fn sample(&self, c: usize, x: f64, y: f64, pad: f64) -> f64 {
        let (sx, sy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let read = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                pad
            } else {
                self.get(c, yi as usize, xi as usize)
            }
        };
        let top = read(x0, y0) * (1.0 - fx) + read(x0 + 1.0, y0) * fx;
        let bottom = read(x0, y0 + 1.0) * (1.0 - fx) + read(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Square window of side `side` centred at `(cx, cy)`, resampled to `out × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    /// Image coordinates to crop coordinates.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        let (ox, oy) = self.origin();
        let s = self.scale();
        BBox {
            x1: (b.x1 - ox) * s,
            y1: (b.y1 - oy) * s,
            x2: (b.x2 - ox) * s,
            y2: (b.y2 - oy) * s,
        }
    }

    /// Crop coordinates back to image coordinates.
    pub fn to_image(&self, b: &BBox) -> BBox {
        let (ox, oy) = self.origin();
        let s = self.scale();
        BBox {
            x1: b.x1 / s + ox,
            y1: b.y1 / s + oy,
            x2: b.x2 / s + ox,
            y2: b.y2 / s + oy,
        }
    }

    /// Bilinear resampling; out-of-frame area takes the per-channel mean.
    pub fn extract(&self, img: &Raster) -> Raster {
        let means = img.channel_means();
        let (ox, oy) = self.origin();
        let step = self.side / self.out as f64;
        let mut out = Raster::filled(self.out, self.out, [0.0; 3]);
        for (c, &mean) in means.iter().enumerate() {
            for v in 0..self.out {
                let y = oy + (v as f64 + 0.5) * step;
                for u in 0..self.out {
                    let x = ox + (u as f64 + 0.5) * step;
                    out.set(c, v, u, img.sample(c, x, y, mean));
                }
            }
        }
        out
    }
}

/// Side of the template window around a `w×h` target: `sqrt((w+p)(h+p))`
/// with context `p = (w+h)/2`.
pub fn context_side(w: f64, h: f64) -> f64 {
    let p = 0.5 * (w + h);
    ((w + p) * (h + p)).sqrt()
}
