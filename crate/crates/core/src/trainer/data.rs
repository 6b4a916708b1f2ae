//! Dataset ingestion: a deterministic synthetic two-blob set for training
//! checks, plus binary PGM/PPM directory loading with a filename-to-class
//! index. Pixels live in [-1, 1].

use std::io::{Read, Write};
use std::path::Path;

use super::TrainError;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// each image is `[H, W, C]`, f32, in [-1, 1]
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub flip_augment: bool,
}

/// 8x8 single-channel images of one Gaussian blob: class 0 centers in the
/// top-left quadrant, class 1 in the bottom-right. Blob position and
/// amplitude jitter deterministically from the seed; classes alternate, so
/// the set is balanced.
pub fn two_gaussians_8x8(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::seed_stream(seed, 0xDA7A);
    let (h, w) = (8usize, 8usize);
    let sigma = 1.3f64;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (cy, cx) = if class == 0 { (2.0, 2.0) } else { (5.0, 5.0) };
        let jy = cy + rng.uniform() - 0.5;
        let jx = cx + rng.uniform() - 0.5;
        let amp = 0.8 + 0.2 * rng.uniform();
        let mut vals = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let r2 = (y as f64 - jy).powi(2) + (x as f64 - jx).powi(2);
                let v = -1.0 + 2.0 * amp * (-r2 / (2.0 * sigma * sigma)).exp();
                vals.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
        images.push(Tensor::from_f32(&[h, w, 1], vals).unwrap());
        labels.push(class);
    }
    Dataset {
        images,
        labels: Some(labels),
        num_classes: 2,
        h,
        w,
        c: 1,
        flip_augment: false,
    }
}

/// Resolve a dataset source: a builtin name (`two-gaussians-8x8`, optionally
/// suffixed `:count`) or a directory of PGM/PPM files with an `index.csv`.
pub fn load_dataset(source: &str, default_count: usize, seed: u64) -> Result<Dataset, TrainError> {
    if let Some(rest) = source.strip_prefix("two-gaussians-8x8") {
        let count = match rest.strip_prefix(':') {
            Some(c) => c
                .parse()
                .map_err(|_| TrainError::Config(format!("bad dataset count in '{source}'")))?,
            None if rest.is_empty() => default_count,
            _ => return Err(TrainError::Config(format!("unknown dataset '{source}'"))),
        };
        return Ok(two_gaussians_8x8(count, seed));
    }
    load_dir(Path::new(source))
}

/// Directory layout: `index.csv` with a `filename,class` header; the class
/// column may be empty throughout for unconditional data.
pub fn load_dir(dir: &Path) -> Result<Dataset, TrainError> {
    let index = std::fs::read_to_string(dir.join("index.csv"))
        .map_err(|e| TrainError::Config(format!("cannot read {}/index.csv: {e}", dir.display())))?;
    let mut images = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut any_label = false;
    let mut geometry: Option<(usize, usize, usize)> = None;
    for (lineno, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("filename")) {
            continue;
        }
        let (fname, class) = match line.split_once(',') {
            Some((f, c)) => (f.trim(), c.trim()),
            None => (line, ""),
        };
        let img = read_pnm(&dir.join(fname))?;
        let sh = img.shape().to_vec();
        let geo = (sh[0], sh[1], sh[2]);
        match geometry {
            None => geometry = Some(geo),
            Some(g) if g != geo => {
                return Err(TrainError::Config(format!(
                    "{fname}: geometry {geo:?} differs from {g:?}"
                )))
            }
            _ => {}
        }
        images.push(img);
        if !class.is_empty() {
            any_label = true;
            labels.push(class.parse().map_err(|_| {
                TrainError::Config(format!("line {}: bad class '{class}'", lineno + 1))
            })?);
        } else {
            labels.push(0);
        }
    }
    if images.is_empty() {
        return Err(TrainError::Config(format!(
            "no images listed in {}/index.csv",
            dir.display()
        )));
    }
    let (h, w, c) = geometry.unwrap();
    let num_classes = if any_label {
        labels.iter().max().unwrap() + 1
    } else {
        0
    };
    Ok(Dataset {
        images,
        labels: any_label.then_some(labels),
        num_classes,
        h,
        w,
        c,
        flip_augment: false,
    })
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6)
// ---------------------------------------------------------------------------

/// Write `[H, W, 1]` as binary PGM or `[H, W, 3]` as binary PPM, mapping
/// [-1, 1] to 0..=255.
pub fn write_pnm(path: &Path, img: &Tensor) -> Result<(), TrainError> {
    let sh = img.shape();
    if sh.len() != 3 || (sh[2] != 1 && sh[2] != 3) {
        return Err(TrainError::Config(format!(
            "pnm writer expects [H, W, 1|3], got {sh:?}"
        )));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(32 + h * w * c);
    out.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    for i in 0..h * w * c {
        let v = img.data().get(i);
        let byte = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        out.push(byte);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read binary PGM/PPM into `[H, W, C]` f32 in [-1, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let bad = |msg: &str| TrainError::Config(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, TrainError> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(TrainError::Config(format!(
                "{}: truncated header",
                path.display()
            )));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    let c = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * c;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let vals: Vec<f32> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 127.5 - 1.0)
        .collect();
    Ok(Tensor::from_f32(&[h, w, c], vals).unwrap())
}
