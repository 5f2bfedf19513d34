//! Sequence export: binary PPM frames, a box annotation file and the spec.
//!
//! `annotations.txt` holds one block per object, target first. Each block
//! starts with a `# target` or `# distractor k` comment followed by one
//! `frame,x1,y1,x2,y2` line per frame. Blocks are separated by a blank line.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::raster::{Raster, CHANNELS};
use super::{gen_sequence, Sequence, SequenceSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kv::KvFile;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 with maxval 255.
pub fn write_ppm(path: &Path, img: &Raster) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..CHANNELS {
                bytes.push(quantize(img.get(c, y, x)));
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary P5 of a single-channel map, min-max normalised to the full range.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Invalid(format!(
            "pgm: {} values for a {width}x{height} map",
            values.len()
        )));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| quantize((v - lo) / span)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_tokens<'a>(bytes: &'a [u8], path: &Path) -> Result<(Vec<&'a str>, usize)> {
    // magic, width, height, maxval separated by whitespace, comments allowed
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| Error::format(path, "non-ascii header"))?;
        tokens.push(tok);
    }
    // exactly one whitespace byte before the raster
    Ok((tokens, i + 1))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tok, start) = header_tokens(&bytes, path)?;
    if tok[0] != "P6" {
        return Err(Error::format(path, format!("expected P6, got {}", tok[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad {what} `{s}`")))
    };
    let (w, h, maxval) = (parse(tok[1], "width")?, parse(tok[2], "height")?, parse(tok[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let body = bytes.get(start..).unwrap_or_default();
    if body.len() != w * h * CHANNELS {
        return Err(Error::format(
            path,
            format!("expected {} raster bytes, found {}", w * h * CHANNELS, body.len()),
        ));
    }
    let mut img = Raster::filled(w, h, [0.0; 3]);
    for (i, px) in body.chunks(CHANNELS).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            img.set(c, i / w, i % w, b as f64 / 255.0);
        }
    }
    Ok(img)
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

fn write_block(out: &mut String, title: &str, boxes: impl Iterator<Item = BBox>) {
    out.push_str(&format!("# {title}\n"));
    for (f, b) in boxes.enumerate() {
        out.push_str(&format!("{f},{},{},{},{}\n", b.x1, b.y1, b.x2, b.y2));
    }
}

/// Writes frames, `annotations.txt` and `spec.txt` into `dir`.
pub fn export_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        write_ppm(&dir.join(frame_name(i)), f)?;
    }
    let mut ann = String::new();
    write_block(&mut ann, "target", seq.gt.iter().copied());
    let n_distractors = seq.distractors.first().map_or(0, Vec::len);
    for k in 0..n_distractors {
        ann.push('\n');
        write_block(
            &mut ann,
            &format!("distractor {}", k + 1),
            seq.distractors.iter().map(|d| d[k]),
        );
    }
    let ann_path = dir.join("annotations.txt");
    fs::File::create(&ann_path)
        .and_then(|mut f| f.write_all(ann.as_bytes()))
        .map_err(|e| Error::io(&ann_path, e))?;
    let spec_path = dir.join("spec.txt");
    fs::write(&spec_path, seq.spec.to_kv()).map_err(|e| Error::io(&spec_path, e))
}

/// Parses `annotations.txt` into per-object box tracks, target first.
pub fn read_annotations(path: &Path) -> Result<Vec<Vec<BBox>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tracks: Vec<Vec<BBox>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            tracks.push(Vec::new());
            continue;
        }
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", n + 1));
        let track = tracks.last_mut().ok_or_else(|| bad("box before any object header"))?;
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric field"))?;
        let [f, x1, y1, x2, y2] = <[f64; 5]>::try_from(vals).map_err(|_| bad("expected 5 fields"))?;
        if f as usize != track.len() {
            return Err(bad("frames must be consecutive from 0"));
        }
        track.push(BBox::new(x1, y1, x2, y2).map_err(|e| bad(&e.to_string()))?);
    }
    if tracks.is_empty() || tracks.iter().any(|t| t.len() != tracks[0].len()) {
        return Err(Error::format(path, "object blocks missing or of unequal length"));
    }
    Ok(tracks)
}

/// Reads an exported directory. Frames come back 8-bit quantised.
pub fn import_sequence(dir: &Path) -> Result<Sequence> {
    let spec_path = dir.join("spec.txt");
    let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec = SequenceSpec::from_kv(&KvFile::parse(&spec_text)?)?;
    let mut tracks = read_annotations(&dir.join("annotations.txt"))?.into_iter();
    let gt = tracks.next().unwrap_or_default();
    let others: Vec<Vec<BBox>> = tracks.collect();
    let distractors = (0..gt.len())
        .map(|f| others.iter().map(|t| t[f]).collect())
        .collect();
    let frames = (0..gt.len())
        .map(|i| read_ppm(&dir.join(frame_name(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        spec,
        frames,
        gt,
        distractors,
    })
}

/// Regenerates from a spec file and checks it against the stored annotations.
pub fn regenerate(dir: &Path) -> Result<Sequence> {
    let stored = import_sequence(dir)?;
    let fresh = gen_sequence(&stored.spec)?;
    if fresh.gt != stored.gt || fresh.distractors != stored.distractors {
        return Err(Error::format(dir, "annotations do not match the spec"));
    }
    Ok(fresh)
}
