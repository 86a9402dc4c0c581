//! Dataset manifests, stratified splits, P6 pixmap I/O, augmentation and
//! resizing.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::kernels;
use crate::labels::WasteClass;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("duplicate path {0:?} in manifest")]
    DuplicatePath(String),
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("class {0} has no entries")]
    EmptyClass(WasteClass),
    #[error("not a binary pixmap (expected P6 magic)")]
    BadMagic,
    #[error("malformed pixmap header: {0}")]
    BadHeader(String),
    #[error("pixel data has {actual} bytes, header implies {expected}")]
    TruncatedPixels { expected: usize, actual: usize },
    #[error("image tensor must be [H, W, 3] or [1, H, W, 3], got {0:?}")]
    BadImageShape(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Trashnet,
    Collected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub label: WasteClass,
    pub source: Source,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn new(entries: Vec<Entry>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(DataError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries per class, in class order.
    pub fn class_counts(&self) -> BTreeMap<WasteClass, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.label).or_default() += 1;
        }
        m
    }

    /// Parse `path,label,source` CSV with a header row.
    pub fn from_csv(reader: impl Read) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let entries = rdr.deserialize().collect::<Result<Vec<Entry>, _>>()?;
        Manifest::new(entries)
    }

    pub fn to_csv(&self, writer: impl Write) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Manifest::from_csv(fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.to_csv(fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

fn check_ratios(r: [f64; 3]) -> Result<(), DataError> {
    let sum: f64 = r.iter().sum();
    if r.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(DataError::BadRatios(r));
    }
    Ok(())
}

/// Largest-remainder allocation of `n` items over `ratios`: each part is
/// within 1 of `n * ratio` and the parts sum to `n`. Ties go to the earlier
/// part.
pub fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| n as f64 * r);
    let mut parts = exact.map(|e| e.floor() as usize);
    let mut left = n - parts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Per-class `[train, val, test]` sizes for the given class counts.
pub fn split_sizes(
    counts: &BTreeMap<WasteClass, usize>,
    ratios: [f64; 3],
) -> Result<BTreeMap<WasteClass, [usize; 3]>, DataError> {
    check_ratios(ratios)?;
    counts
        .iter()
        .map(|(&c, &n)| {
            if n == 0 {
                Err(DataError::EmptyClass(c))
            } else {
                Ok((c, allocate(n, ratios)))
            }
        })
        .collect()
}

/// Stratified, seeded train/validation/test partition.
pub fn split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Split, DataError> {
    let sizes = split_sizes(&manifest.class_counts(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<Entry>; 3] = Default::default();
    for (class, [train, val, _]) in sizes {
        let mut members: Vec<&Entry> = manifest.entries.iter().filter(|e| e.label == class).collect();
        members.shuffle(&mut rng);
        for (i, e) in members.into_iter().enumerate() {
            let part = if i < train {
                0
            } else if i < train + val {
                1
            } else {
                2
            };
            parts[part].push(e.clone());
        }
    }
    let [train, val, test] = parts.map(|entries| Manifest { entries });
    Ok(Split { train, val, test })
}

/// Decode a binary (P6) portable pixmap into `[H, W, 3]` values in [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(DataError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::BadHeader(format!("expected a number at byte {start}")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(DataError::BadHeader(format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(DataError::BadHeader(format!("maxval {maxval}, only 8-bit 255 is supported")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::BadHeader("missing separator before pixel data".into()));
    }
    let pixels = &bytes[pos + 1..];
    let expected = w * h * 3;
    if pixels.len() != expected {
        return Err(DataError::TruncatedPixels {
            expected,
            actual: pixels.len(),
        });
    }
    let data = pixels.iter().map(|&v| f32::from(v) / 255.0).collect();
    Ok(Tensor::from_f32(vec![h, w, 3], data).expect("size checked"))
}

fn image_dims(image: &Tensor) -> Result<(usize, usize), DataError> {
    match *image.shape() {
        [h, w, 3] | [1, h, w, 3] => Ok((h, w)),
        _ => Err(DataError::BadImageShape(image.shape().to_vec())),
    }
}

/// Encode `[H, W, 3]` (or `[1, H, W, 3]`) values as an 8-bit P6 pixmap;
/// values are clamped to [0, 1] and rounded.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, DataError> {
    let (h, w) = image_dims(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.to_f32().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    decode_ppm(&fs::read(path)?)
}

/// Debug writer; `load_image` of the result is exact for 8-bit data.
pub fn save_image(image: &Tensor, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Add a leading batch axis: `[H, W, C]` becomes `[1, H, W, C]`.
pub fn to_batch(image: Tensor) -> Tensor {
    let mut shape = image.shape().to_vec();
    if shape.len() == 3 {
        shape.insert(0, 1);
    }
    image.reshaped(shape).expect("same element count")
}

/// Half-pixel bilinear resize to `(width, height)`; keeps the input rank.
pub fn resize_bilinear(image: &Tensor, target: (usize, usize)) -> Result<Tensor, DataError> {
    let (h, w) = image_dims(image)?;
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(DataError::BadImageShape(vec![th, tw, 3]));
    }
    let data = kernels::resize_bilinear(&image.to_f32(), &[1, h, w, 3], th, tw);
    let shape = if image.shape().len() == 4 { vec![1, th, tw, 3] } else { vec![th, tw, 3] };
    Ok(Tensor::from_f32(shape, data).expect("resize output size"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    #[default]
    None,
    H,
    V,
    Hv,
}

impl FromStr for Flip {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Flip::None),
            "h" => Ok(Flip::H),
            "v" => Ok(Flip::V),
            "hv" => Ok(Flip::Hv),
            other => Err(format!("unknown flip mode {other:?}")),
        }
    }
}

/// Bounds for random augmentation. Each allowed flip axis is applied with
/// probability 1/2; the other parameters are drawn uniformly from
/// `[-max, max]` (zoom: scale in `[1 - max_zoom_frac, 1 + max_zoom_frac]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: Flip,
    pub max_rotation_deg: f64,
    pub max_translation_frac: f64,
    pub max_zoom_frac: f64,
    pub max_shear_frac: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            flip: Flip::None,
            max_rotation_deg: 0.0,
            max_translation_frac: 0.0,
            max_zoom_frac: 0.0,
            max_shear_frac: 0.0,
            seed: 0,
        }
    }

    /// Flip both ways, 180 degree rotation, 10% shift and 75% zoom.
    pub fn jetson_training() -> Self {
        AugmentConfig {
            flip: Flip::Hv,
            max_rotation_deg: 180.0,
            max_translation_frac: 0.1,
            max_zoom_frac: 0.75,
            max_shear_frac: 0.0,
            seed: 0,
        }
    }

    /// The K210 training recipe: 20% shifts and 50% shear.
    pub fn k210_training() -> Self {
        AugmentConfig {
            flip: Flip::None,
            max_rotation_deg: 0.0,
            max_translation_frac: 0.2,
            max_zoom_frac: 0.0,
            max_shear_frac: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fracs = [self.max_translation_frac, self.max_zoom_frac, self.max_shear_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err("fractions must lie in [0, 1]".into());
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err("rotation must lie in [0, 180] degrees".into());
        }
        Ok(())
    }

    /// Draw the concrete transform for one image.
    pub fn sample(&self, draw_seed: u64) -> Transform {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(draw_seed)));
        let mut sym = |max: f64| if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
        let rotation_deg = sym(self.max_rotation_deg);
        let translate = (sym(self.max_translation_frac), sym(self.max_translation_frac));
        let zoom = 1.0 + sym(self.max_zoom_frac);
        let shear = sym(self.max_shear_frac);
        let (h, v) = match self.flip {
            Flip::None => (false, false),
            Flip::H => (rng.gen_bool(0.5), false),
            Flip::V => (false, rng.gen_bool(0.5)),
            Flip::Hv => (rng.gen_bool(0.5), rng.gen_bool(0.5)),
        };
        Transform {
            flip_h: h,
            flip_v: v,
            rotation_deg,
            translate,
            zoom,
            shear,
        }
    }
}

/// One concrete geometric augmentation, applied about the image centre:
/// zoom, then shear, rotation and translation (fractions of width/height),
/// then the flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_deg: f64,
    pub translate: (f64, f64),
    pub zoom: f64,
    pub shear: f64,
}

impl Default for Transform {
    fn default() -> Self {
        Transform {
            flip_h: false,
            flip_v: false,
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
            zoom: 1.0,
            shear: 0.0,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-image seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// cos/sin with exact values at multiples of 90 degrees.
fn cos_sin(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

/// Apply `t` with bilinear sampling; samples outside the frame read as zero.
pub fn apply_transform(image: &Tensor, t: &Transform) -> Result<Tensor, DataError> {
    let (h, w) = image_dims(image)?;
    let src = image.to_f32();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (c, s) = cos_sin(t.rotation_deg);
    let zoom = t.zoom.max(1e-3);
    let (tx, ty) = (t.translate.0 * w as f64, t.translate.1 * h as f64);
    let at = |y: i64, x: i64, ch: usize| -> f32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[(y as usize * w + x as usize) * 3 + ch]
        }
    };
    let mut out = Vec::with_capacity(h * w * 3);
    for oy in 0..h {
        for ox in 0..w {
            let x = if t.flip_h { w - 1 - ox } else { ox };
            let y = if t.flip_v { h - 1 - oy } else { oy };
            // invert translation, rotation, shear and zoom in turn
            let (u, v) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let (u, v) = (c * u + s * v, -s * u + c * v);
            let u = u - t.shear * v;
            let (sx, sy) = (u / zoom + cx, v / zoom + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..3 {
                let top = kernels::lerp(at(y0, x0, ch), at(y0, x0 + 1, ch), fx);
                let bottom = kernels::lerp(at(y0 + 1, x0, ch), at(y0 + 1, x0 + 1, ch), fx);
                out.push(kernels::lerp(top, bottom, fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::from_f32(image.shape().to_vec(), out).expect("same size"))
}

/// Randomly augment one image; the same config and draw seed always give the
/// same output.
pub fn augment(image: &Tensor, config: &AugmentConfig, draw_seed: u64) -> Result<Tensor, DataError> {
    apply_transform(image, &config.sample(draw_seed))
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "flip_h={} flip_v={} rot={:.1} shift=({:.3},{:.3}) zoom={:.3} shear={:.3}",
            self.flip_h, self.flip_v, self.rotation_deg, self.translate.0, self.translate.1, self.zoom, self.shear
        )
    }
}
