//! Synthetic additive-mixture data: procedural layer generation, blur-and-
//! attenuate mixing with an exactly additive mode, PPM file I/O, and paired
//! directory ingestion under the `root/{T,R[,I]}/NNNN.ppm` layout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// A plain 3-channel image in CHW layout, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// `3 * h * w` values, channel-major.
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(h: usize, w: usize) -> Image {
        Image { h, w, data: vec![0.0; Self::CHANNELS * h * w] }
    }

    pub fn numel(&self) -> usize {
        Self::CHANNELS * self.h * self.w
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    /// Crop a `size`×`size` window whose top-left corner is (oy, ox).
    pub fn crop(&self, oy: usize, ox: usize, size: usize) -> Result<Image> {
        if oy + size > self.h || ox + size > self.w {
            return Err(Error::Contract(format!(
                "crop {size}×{size} at ({oy},{ox}) exceeds image {}×{}",
                self.h, self.w
            )));
        }
        let mut out = Image::zeros(size, size);
        for c in 0..Self::CHANNELS {
            for y in 0..size {
                for x in 0..size {
                    *out.at_mut(c, y, x) = self.at(c, oy + y, ox + x);
                }
            }
        }
        Ok(out)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.numel() as f64
    }
}

/// How a mixture observation is formed from the two layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixMode {
    /// Transmission is attenuated so I = T + R holds bit-exactly in [0, 1].
    Exact,
    /// I = clip(T + R', 0, 1); the clipped positions are recorded.
    Realistic,
}

/// One observation with its ground-truth layers and generation metadata.
#[derive(Clone, Debug)]
pub struct MixtureSample {
    pub i: Image,
    pub t: Image,
    pub r: Image,
    pub seed: u64,
    pub sigma: f32,
    pub alpha: f32,
    /// Realistic mode only: true where the sum was clipped.
    pub clip_mask: Option<Vec<bool>>,
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    /// Fully procedural layers; `count` samples.
    Procedural,
    /// Paired files under `path/{T,R[,I]}/`; the pair count defines the
    /// dataset length.
    Directory(PathBuf),
}

/// Deterministic description of a dataset: (spec, seed, index) fully
/// determines every sample.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub source: Source,
    /// Square crop edge; procedural layers are generated with an 8-pixel
    /// jitter margin and randomly cropped down to this.
    pub crop: usize,
    /// Sample count for procedural sources (directories use the pair count).
    pub count: usize,
    pub seed: u64,
    pub mode: MixMode,
    /// Mixing coefficient range [lo, hi), drawn per sample; 0 ≤ lo ≤ hi < 1.
    pub alpha: (f32, f32),
    /// Blur σ range [lo, hi), drawn per sample; nonnegative.
    pub sigma: (f32, f32),
}

impl DatasetSpec {
    /// Desk-scale training defaults: 2000 procedural 32×32 Exact samples.
    pub fn procedural_default(seed: u64) -> DatasetSpec {
        DatasetSpec {
            source: Source::Procedural,
            crop: 32,
            count: 2000,
            seed,
            mode: MixMode::Exact,
            alpha: (0.35, 0.65),
            sigma: (0.5, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop < 8 {
            return Err(Error::Config("crop size must be ≥ 8".into()));
        }
        let (al, ah) = self.alpha;
        if !(0.0..1.0).contains(&al) || !(0.0..1.0).contains(&ah) || al > ah {
            return Err(Error::Config(format!(
                "alpha range [{al}, {ah}] must satisfy 0 ≤ lo ≤ hi < 1"
            )));
        }
        let (sl, sh) = self.sigma;
        if sl < 0.0 || sh < sl || !sl.is_finite() || !sh.is_finite() {
            return Err(Error::Config(format!(
                "sigma range [{sl}, {sh}] must satisfy 0 ≤ lo ≤ hi"
            )));
        }
        Ok(())
    }
}

const JITTER: usize = 8;

/// Procedural layer: a smooth directional gradient overlaid with random
/// rectangles, ellipses, and sinusoidal stripes, min-max normalized into
/// [0.03, 0.97] so the result is never constant and never clipped.
pub fn gen_procedural_layer(seed: u64, h: usize, w: usize) -> Result<Image> {
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!("procedural layer needs extents ≥ 8, got {h}×{w}")));
    }
    let mut r = rng::stream(seed, "proc-layer", 0);
    let mut field = vec![0.0f64; 3 * h * w];
    let idx = |c: usize, y: usize, x: usize| (c * h + y) * w + x;

    // smooth base gradient, one direction shared by the channels with
    // per-channel offset and strength
    let theta: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    for c in 0..3 {
        let amp: f64 = r.gen_range(0.5..1.5);
        let phase: f64 = r.gen_range(-0.5..0.5);
        for y in 0..h {
            for x in 0..w {
                let u = dx * x as f64 / w as f64 + dy * y as f64 / h as f64;
                field[idx(c, y, x)] = amp * u + phase;
            }
        }
    }

    // rectangles: constant per-channel offsets over a random box
    for _ in 0..r.gen_range(2..6) {
        let y0 = r.gen_range(0..h);
        let x0 = r.gen_range(0..w);
        let bh = r.gen_range(h / 8..=h / 2).max(1);
        let bw = r.gen_range(w / 8..=w / 2).max(1);
        let vals: [f64; 3] = [r.gen_range(-0.8..0.8), r.gen_range(-0.8..0.8), r.gen_range(-0.8..0.8)];
        for c in 0..3 {
            for y in y0..(y0 + bh).min(h) {
                for x in x0..(x0 + bw).min(w) {
                    field[idx(c, y, x)] += vals[c];
                }
            }
        }
    }

    // ellipses
    for _ in 0..r.gen_range(1..4) {
        let cy = r.gen_range(0.0..h as f64);
        let cx = r.gen_range(0.0..w as f64);
        let ry = r.gen_range(h as f64 / 8.0..h as f64 / 2.5);
        let rx = r.gen_range(w as f64 / 8.0..w as f64 / 2.5);
        let vals: [f64; 3] = [r.gen_range(-0.8..0.8), r.gen_range(-0.8..0.8), r.gen_range(-0.8..0.8)];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let e = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                    if e <= 1.0 {
                        field[idx(c, y, x)] += vals[c];
                    }
                }
            }
        }
    }

    // sinusoidal stripes: line-like texture with guaranteed gradient energy
    let stripes = r.gen_range(1..3);
    for _ in 0..stripes {
        let ang: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        let (sy, sx) = ang.sin_cos();
        let freq: f64 = r.gen_range(2.0..8.0);
        let amp: f64 = r.gen_range(0.05..0.3);
        let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let u = sx * x as f64 / w as f64 + sy * y as f64 / h as f64;
                    field[idx(c, y, x)] += amp * (freq * std::f64::consts::TAU * u + phase).sin();
                }
            }
        }
    }

    // min-max normalize into a margin inside [0,1]; the stripe term makes a
    // degenerate (constant) field impossible, but guard anyway
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 1e-9 { hi - lo } else { 1.0 };
    let data =
        field.iter().map(|&v| (0.03 + 0.94 * (v - lo) / span) as f32).collect();
    Ok(Image { h, w, data })
}

/// Separable Gaussian blur with wrap-around boundary, so the normalized
/// kernel preserves total intensity exactly (up to rounding). σ = 0 is the
/// identity. Accumulation in f64.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let s = sigma as f64;
    let radius = (3.0 * s).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for k in -(radius as isize)..=(radius as isize) {
        kernel.push((-(k as f64).powi(2) / (2.0 * s * s)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let (h, w) = (img.h, img.w);
    let n = Image::CHANNELS;
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0f64; src.len()];
    // horizontal pass
    for c in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = (x + w).wrapping_add(ki).wrapping_sub(radius) % w;
                    acc += kv * src[(c * h + y) * w + xx];
                }
                tmp[(c * h + y) * w + x] = acc;
            }
        }
    }
    // vertical pass
    let mut out = Image::zeros(h, w);
    for c in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = (y + h).wrapping_add(ki).wrapping_sub(radius) % h;
                    acc += kv * tmp[(c * h + yy) * w + x];
                }
                *out.at_mut(c, y, x) = acc as f32;
            }
        }
    }
    out
}

/// Blur-and-attenuate mixing. R' = α·blur(R, σ); Exact mode rescales
/// T' = (1−α)·T and stores I = T' + R' (bit-exact additivity, no clipping
/// possible); Realistic mode keeps T and clips I = clip(T + R', 0, 1),
/// recording the clip mask. The `seed` metadata field is stamped by the
/// dataset layer; standalone calls leave it 0.
pub fn synthesize_mixture(
    t: &Image,
    r: &Image,
    mode: MixMode,
    alpha: f32,
    sigma: f32,
) -> Result<MixtureSample> {
    if t.h != r.h || t.w != r.w {
        return Err(Error::Contract(format!(
            "layer shapes differ: {}×{} vs {}×{}",
            t.h, t.w, r.h, r.w
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be finite and ≥ 0, got {sigma}")));
    }
    let blurred = gaussian_blur(r, sigma);
    let r2 = Image {
        h: r.h,
        w: r.w,
        data: blurred.data.iter().map(|&v| alpha * v).collect(),
    };
    match mode {
        MixMode::Exact => {
            let t2 = Image {
                h: t.h,
                w: t.w,
                data: t.data.iter().map(|&v| (1.0 - alpha) * v).collect(),
            };
            let i = Image {
                h: t.h,
                w: t.w,
                data: t2.data.iter().zip(&r2.data).map(|(&a, &b)| a + b).collect(),
            };
            Ok(MixtureSample { i, t: t2, r: r2, seed: 0, sigma, alpha, clip_mask: None })
        }
        MixMode::Realistic => {
            let mut mask = vec![false; t.numel()];
            let mut i = Image::zeros(t.h, t.w);
            for (k, (a, b)) in t.data.iter().zip(&r2.data).enumerate() {
                let s = a + b;
                let clipped = s.clamp(0.0, 1.0);
                mask[k] = s != clipped;
                i.data[k] = clipped;
            }
            Ok(MixtureSample {
                i,
                t: t.clone(),
                r: r2,
                seed: 0,
                sigma,
                alpha,
                clip_mask: Some(mask),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// PPM I/O (binary P6, maxval 255)
// ---------------------------------------------------------------------------

/// Write as binary PPM; values are clamped to [0,1] and rounded to 8 bits.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", img.w, img.h)?;
    let mut buf = Vec::with_capacity(img.numel());
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..Image::CHANNELS {
                buf.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Read a binary PPM (maxval 255) back into [0,1] floats.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes =
        fs::read(path).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    let fail = |detail: &str| Error::data(path.display().to_string(), detail.to_string());

    // header: magic, width, height, maxval as whitespace/comment-separated
    // tokens, then exactly one whitespace byte before the raster
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes).ok_or_else(|| fail("missing PPM magic"))?;
    if magic != "P6" {
        return Err(fail(&format!("unsupported magic {magic:?}, expected P6")));
    }
    let w: usize =
        token(&bytes).and_then(|t| t.parse().ok()).ok_or_else(|| fail("bad width"))?;
    let h: usize =
        token(&bytes).and_then(|t| t.parse().ok()).ok_or_else(|| fail("bad height"))?;
    let maxval: usize =
        token(&bytes).and_then(|t| t.parse().ok()).ok_or_else(|| fail("bad maxval"))?;
    if maxval != 255 {
        return Err(fail(&format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(fail("zero extent"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| fail("truncated raster"))?;
    let mut img = Image::zeros(h, w);
    let mut k = 0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..Image::CHANNELS {
                *img.at_mut(c, y, x) = raster[k] as f32 / 255.0;
                k += 1;
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct PairPaths {
    t: PathBuf,
    r: PathBuf,
    i: Option<PathBuf>,
}

/// A deterministic sample source; (spec, index) fully determines each
/// sample.
#[derive(Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    pairs: Option<Vec<PairPaths>>,
}

impl Dataset {
    pub fn open(spec: DatasetSpec) -> Result<Dataset> {
        spec.validate()?;
        let pairs = match &spec.source {
            Source::Procedural => None,
            Source::Directory(root) => Some(Self::scan(root)?),
        };
        Ok(Dataset { spec, pairs })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    fn scan(root: &Path) -> Result<Vec<PairPaths>> {
        let t_dir = root.join("T");
        let r_dir = root.join("R");
        let i_dir = root.join("I");
        if !t_dir.is_dir() {
            // an empty or absent layout is an empty dataset, not an error
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = fs::read_dir(&t_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "ppm"))
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let mut pairs = Vec::with_capacity(names.len());
        for name in names {
            let r_path = r_dir.join(&name);
            if !r_path.is_file() {
                return Err(Error::data(
                    r_path.display().to_string(),
                    "missing R member of the pair",
                ));
            }
            let i_path = i_dir.join(&name);
            pairs.push(PairPaths {
                t: t_dir.join(&name),
                r: r_path,
                i: i_path.is_file().then_some(i_path),
            });
        }
        Ok(pairs)
    }

    pub fn len(&self) -> usize {
        match &self.pairs {
            Some(p) => p.len(),
            None => self.spec.count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic sample by index.
    pub fn get(&self, index: usize) -> Result<MixtureSample> {
        if index >= self.len() {
            return Err(Error::Contract(format!(
                "sample index {index} out of range (len {})",
                self.len()
            )));
        }
        let spec = &self.spec;
        let mut r = rng::stream(spec.seed, "data:sample", index as u64);
        let alpha = if spec.alpha.0 == spec.alpha.1 {
            spec.alpha.0
        } else {
            r.gen_range(spec.alpha.0..spec.alpha.1)
        };
        let sigma = if spec.sigma.0 == spec.sigma.1 {
            spec.sigma.0
        } else {
            r.gen_range(spec.sigma.0..spec.sigma.1)
        };

        let (t_img, r_img) = match &self.pairs {
            None => {
                let seed_t: u64 = r.gen();
                let seed_r: u64 = r.gen();
                let (gh, gw) = (spec.crop + JITTER, spec.crop + JITTER);
                let t_full = gen_procedural_layer(seed_t, gh, gw)?;
                let r_full = gen_procedural_layer(seed_r, gh, gw)?;
                let oy = r.gen_range(0..=JITTER);
                let ox = r.gen_range(0..=JITTER);
                (t_full.crop(oy, ox, spec.crop)?, r_full.crop(oy, ox, spec.crop)?)
            }
            Some(pairs) => {
                let pair = &pairs[index];
                let t_full = read_ppm(&pair.t)?;
                let r_full = read_ppm(&pair.r)?;
                if t_full.h != r_full.h || t_full.w != r_full.w {
                    return Err(Error::data(
                        pair.t.display().to_string(),
                        format!(
                            "pair members disagree on shape: {}×{} vs {}×{}",
                            t_full.h, t_full.w, r_full.h, r_full.w
                        ),
                    ));
                }
                if t_full.h < spec.crop || t_full.w < spec.crop {
                    return Err(Error::data(
                        pair.t.display().to_string(),
                        format!("image {}×{} smaller than crop {}", t_full.h, t_full.w, spec.crop),
                    ));
                }
                let oy = r.gen_range(0..=t_full.h - spec.crop);
                let ox = r.gen_range(0..=t_full.w - spec.crop);
                // a stored observation is only honored when no crop/blur/mix
                // reprocessing is active; otherwise it would no longer match
                if let Some(ipath) = &pair.i {
                    let i_full = read_ppm(ipath)?;
                    if i_full.h == t_full.h && i_full.w == t_full.w {
                        return Ok(MixtureSample {
                            i: i_full.crop(oy, ox, spec.crop)?,
                            t: t_full.crop(oy, ox, spec.crop)?,
                            r: r_full.crop(oy, ox, spec.crop)?,
                            seed: mix_seed(spec.seed, index),
                            sigma: 0.0,
                            alpha: 0.0,
                            clip_mask: None,
                        });
                    }
                }
                (t_full.crop(oy, ox, spec.crop)?, r_full.crop(oy, ox, spec.crop)?)
            }
        };

        let mut sample = match (&self.pairs, spec.mode) {
            // directory pairs are already final layers: mix them as-is
            (Some(_), MixMode::Exact) => {
                let mut t2 = t_img;
                let mut r2 = r_img;
                let max_sum = t2
                    .data
                    .iter()
                    .zip(&r2.data)
                    .map(|(&a, &b)| a + b)
                    .fold(0.0f32, f32::max);
                if max_sum > 1.0 {
                    // rescale both layers so the sum stays in range and the
                    // additive identity holds without clipping
                    let s = 1.0 / max_sum;
                    for v in t2.data.iter_mut() {
                        *v *= s;
                    }
                    for v in r2.data.iter_mut() {
                        *v *= s;
                    }
                }
                let i = Image {
                    h: t2.h,
                    w: t2.w,
                    data: t2.data.iter().zip(&r2.data).map(|(&a, &b)| a + b).collect(),
                };
                MixtureSample { i, t: t2, r: r2, seed: 0, sigma: 0.0, alpha: 0.0, clip_mask: None }
            }
            (Some(_), MixMode::Realistic) => synthesize_mixture(&t_img, &r_img, spec.mode, 0.0, 0.0)?,
            (None, mode) => synthesize_mixture(&t_img, &r_img, mode, alpha, sigma)?,
        };
        sample.seed = mix_seed(spec.seed, index);
        Ok(sample)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<MixtureSample>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

fn mix_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// Write one sample under `root/{T,R[,I]}/NNNN.ppm`. Indices are
/// zero-padded to four digits.
pub fn write_sample(root: &Path, index: usize, sample: &MixtureSample, write_i: bool) -> Result<()> {
    if index > 9999 {
        return Err(Error::Config("the NNNN.ppm layout caps sample indices at 9999".into()));
    }
    let name = format!("{index:04}.ppm");
    for sub in ["T", "R"].iter().chain(write_i.then_some(&"I")) {
        fs::create_dir_all(root.join(sub))?;
    }
    write_ppm(&root.join("T").join(&name), &sample.t)?;
    write_ppm(&root.join("R").join(&name), &sample.r)?;
    if write_i {
        write_ppm(&root.join("I").join(&name), &sample.i)?;
    }
    Ok(())
}
