//! Manifest ingestion, experiment class splits, image preprocessing and
//! the synthetic toy-polyp generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_HEADER: [&str; 7] = [
    "image_path",
    "polyp_id",
    "patient_id",
    "label",
    "device",
    "light",
    "focus",
];

macro_rules! tag_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        concat!("invalid ", stringify!($name), " {:?} (expected one of: {})"),
                        s,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

tag_enum!(Label {
    Hyperplastic => "hyperplastic",
    Serrated => "serrated",
    Adenoma => "adenoma",
});

tag_enum!(Device {
    Standard => "standard",
    DualFocus => "dual-focus",
});

tag_enum!(Light {
    Nbi => "NBI",
    Wl => "WL",
    None => "none",
});

tag_enum!(Focus {
    Near => "near",
    Far => "far",
    None => "none",
});

/// One image of one polyp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub image_path: String,
    pub polyp_id: String,
    pub patient_id: String,
    pub label: Label,
    pub device: Device,
    pub light: Light,
    pub focus: Focus,
}

/// Records kept for one experiment and their binary labels (1 = positive).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSplit {
    pub experiment_id: u8,
    pub records: Vec<SampleRecord>,
    pub labels: Vec<usize>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, &path.display().to_string())
}

/// Parse manifest text; `source` names it in error messages.
pub fn parse_manifest(text: &str, source: &str) -> Result<Vec<SampleRecord>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if text.trim().is_empty() {
        return Err(parse_err(1, "missing header".into()));
    }
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields != MANIFEST_HEADER {
        return Err(parse_err(
            1,
            format!("header must be {:?}, got {fields:?}", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize| row.get(i).unwrap_or("").trim();
        let field = |i: usize| -> Result<String> {
            let v = get(i);
            if v.is_empty() {
                Err(parse_err(line, format!("empty {}", MANIFEST_HEADER[i])))
            } else {
                Ok(v.to_string())
            }
        };
        // a missing tag means none
        let tag = |i: usize| if get(i).is_empty() { "none" } else { get(i) };
        records.push(SampleRecord {
            image_path: field(0)?,
            polyp_id: field(1)?,
            patient_id: field(2)?,
            label: get(3).parse().map_err(|m| parse_err(line, m))?,
            device: get(4).parse().map_err(|m| parse_err(line, m))?,
            light: tag(5).parse().map_err(|m| parse_err(line, m))?,
            focus: tag(6).parse().map_err(|m| parse_err(line, m))?,
        });
    }
    validate_records(&records)?;
    Ok(records)
}

/// Structural invariants: dual-focus images carry both tags, standard
/// images carry no focus tag, each polyp belongs to one patient and has
/// one histology, and no polyp has two images of the same imaging type.
pub fn validate_records(records: &[SampleRecord]) -> Result<()> {
    let mut patient: HashMap<&str, &str> = HashMap::new();
    let mut label: HashMap<&str, Label> = HashMap::new();
    let mut seen = BTreeSet::new();
    for r in records {
        let id = &r.polyp_id;
        match r.device {
            Device::DualFocus if r.light == Light::None || r.focus == Focus::None => {
                return Err(Error::Data(format!(
                    "polyp {id}: dual-focus image {} lacks light/focus tags",
                    r.image_path
                )));
            }
            Device::Standard if r.focus != Focus::None => {
                return Err(Error::Data(format!(
                    "polyp {id}: standard-scope image {} has a focus tag",
                    r.image_path
                )));
            }
            _ => {}
        }
        if let Some(&p) = patient.get(id.as_str()) {
            if p != r.patient_id {
                return Err(Error::Data(format!(
                    "polyp {id} appears under patients {p} and {}",
                    r.patient_id
                )));
            }
        }
        patient.insert(id, &r.patient_id);
        if let Some(&l) = label.get(id.as_str()) {
            if l != r.label {
                return Err(Error::Data(format!("polyp {id} is labelled both {l} and {}", r.label)));
            }
        }
        label.insert(id, r.label);
        if !seen.insert((id.as_str(), r.light, r.focus)) {
            return Err(Error::Data(format!(
                "polyp {id} has more than one {}/{} image",
                r.light, r.focus
            )));
        }
    }
    Ok(())
}

pub fn manifest_to_string(records: &[SampleRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.image_path.as_str(),
            &r.polyp_id,
            &r.patient_id,
            r.label.as_str(),
            r.device.as_str(),
            r.light.as_str(),
            r.focus.as_str(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("manifest fields are UTF-8"))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    fs::write(path, manifest_to_string(records)?)?;
    Ok(())
}

/// Keep and binarise records for one of the three class splits.
/// Hyperplastic is always negative. Training needs both classes present.
pub fn build_experiment(records: &[SampleRecord], experiment_id: u8) -> Result<ExperimentSplit> {
    let split = select_experiment(records, experiment_id)?;
    let classes: BTreeSet<usize> = split.labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "experiment {experiment_id} keeps {} records of a single class",
            split.records.len()
        )));
    }
    Ok(split)
}

/// Like [`build_experiment`] but accepts a single class, as a held-out
/// set may. Errors when no record is kept.
pub fn select_experiment(records: &[SampleRecord], experiment_id: u8) -> Result<ExperimentSplit> {
    let positive = |l: Label| -> Option<usize> {
        match (experiment_id, l) {
            (_, Label::Hyperplastic) => Some(0),
            (1, Label::Adenoma) | (2, Label::Adenoma) | (2, Label::Serrated) => Some(1),
            (3, Label::Serrated) => Some(1),
            _ => None,
        }
    };
    if !(1..=3).contains(&experiment_id) {
        return Err(Error::config(format!(
            "experiment must be 1, 2 or 3, got {experiment_id}"
        )));
    }
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        if let Some(y) = positive(r.label) {
            kept.push(r.clone());
            labels.push(y);
        }
    }
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no records left for experiment {experiment_id}"
        )));
    }
    Ok(ExperimentSplit {
        experiment_id,
        records: kept,
        labels,
    })
}

/// Resolve a record's image path against the manifest directory.
pub fn resolve_path(base: &Path, record: &SampleRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Decode, bilinearly resize to `height x width` and scale to [0, 1].
/// Output is `[height, width, 3]`.
pub fn preprocess(bytes: &[u8], height: usize, width: usize) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    Ok(rgb_to_tensor(&img, height, width))
}

pub fn rgb_to_tensor(img: &RgbImage, height: usize, width: usize) -> Tensor<f32> {
    let (w0, h0) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f64> = img.as_raw().iter().map(|&v| f64::from(v)).collect();
    let resized = resize_bilinear(&raw, h0, w0, 3, height, width);
    Tensor::new(
        vec![height, width, 3],
        resized.iter().map(|&v| (v / 255.0) as f32).collect(),
    )
    .expect("resize produces height*width*3 values")
}

/// Bilinear resampling of an HWC image with half-pixel centres: output
/// pixel `i` samples input coordinate `(i + 0.5) * in / out - 0.5`,
/// clamped to the image.
pub fn resize_bilinear(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let taps = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = taps(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Load and preprocess every record's image, in record order.
pub fn load_images(
    base: &Path,
    records: &[SampleRecord],
    height: usize,
    width: usize,
) -> Result<Vec<Tensor<f32>>> {
    records
        .par_iter()
        .map(|r| {
            let path = resolve_path(base, r);
            let bytes = fs::read(&path).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
            })?;
            preprocess(&bytes, height, width)
        })
        .collect()
}

/// Generated images with their manifest records.
pub struct ToyDataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<RgbImage>,
}

/// Imaging slots a synthetic polyp can fill: the four dual-focus modes
/// and one untagged standard-scope image.
const SLOTS: [(Device, Light, Focus); 5] = [
    (Device::DualFocus, Light::Nbi, Focus::Far),
    (Device::DualFocus, Light::Nbi, Focus::Near),
    (Device::DualFocus, Light::Wl, Focus::Far),
    (Device::DualFocus, Light::Wl, Focus::Near),
    (Device::Standard, Light::None, Focus::None),
];

pub const MAX_IMAGES_PER_POLYP: usize = SLOTS.len();

/// Seeded synthetic polyps. Even-numbered polyps are class 0
/// (hyperplastic, smooth outline); odd-numbered are class 1 (adenoma,
/// serrated outline). Every image redraws rotation, scale, brightness,
/// position and background clutter.
pub fn generate_toy_dataset(
    n_polyps: usize,
    images_per_polyp: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<ToyDataset> {
    if n_polyps < 4 {
        return Err(Error::config(format!("need at least 4 polyps, got {n_polyps}")));
    }
    if !(1..=MAX_IMAGES_PER_POLYP).contains(&images_per_polyp) {
        return Err(Error::config(format!(
            "images per polyp must be in 1..={MAX_IMAGES_PER_POLYP} (one per imaging type), got {images_per_polyp}"
        )));
    }
    if height < 8 || width < 8 {
        return Err(Error::config(format!("toy images must be at least 8x8, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut images = Vec::new();
    for i in 0..n_polyps {
        let serrated = i % 2 == 1;
        let shape = PolypShape::sample(&mut rng, serrated);
        let mut slots = SLOTS.to_vec();
        slots.shuffle(&mut rng);
        slots.truncate(images_per_polyp);
        slots.sort();
        for (j, (device, light, focus)) in slots.into_iter().enumerate() {
            let view = View::sample(&mut rng, focus);
            images.push(render(&shape, &view, height, width, &mut rng));
            records.push(SampleRecord {
                image_path: format!("images/polyp{i:03}_{j}.png"),
                polyp_id: format!("polyp{i:03}"),
                patient_id: format!("patient{:03}", i / 2),
                label: if serrated { Label::Adenoma } else { Label::Hyperplastic },
                device,
                light,
                focus,
            });
        }
    }
    Ok(ToyDataset { records, images })
}

/// Write `manifest.csv` and `images/*.png` under `dir`.
pub fn write_toy_dataset(dir: &Path, data: &ToyDataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    for (r, img) in data.records.iter().zip(&data.images) {
        img.save_with_format(dir.join(&r.image_path), image::ImageFormat::Png)?;
    }
    write_manifest(&dir.join("manifest.csv"), &data.records)
}

/// Outline shared by every image of one polyp.
struct PolypShape {
    harmonics: Vec<(f64, f64, f64)>,
    color: [f64; 3],
}

impl PolypShape {
    fn sample(rng: &mut ChaCha8Rng, serrated: bool) -> Self {
        let mut harmonics = vec![(2.0, rng.gen_range(0.04..0.10), rng.gen_range(0.0..6.3))];
        if serrated {
            let f = f64::from(rng.gen_range(9..15u32));
            harmonics.push((f, rng.gen_range(0.14..0.22), rng.gen_range(0.0..6.3)));
            harmonics.push((2.0 * f + 1.0, rng.gen_range(0.04..0.08), rng.gen_range(0.0..6.3)));
        } else {
            harmonics.push((3.0, rng.gen_range(0.02..0.06), rng.gen_range(0.0..6.3)));
        }
        let color = [
            rng.gen_range(190.0..235.0),
            rng.gen_range(110.0..160.0),
            rng.gen_range(100.0..150.0),
        ];
        PolypShape { harmonics, color }
    }

    fn radius(&self, theta: f64) -> f64 {
        1.0 + self
            .harmonics
            .iter()
            .map(|&(f, a, p)| a * (f * theta + p).sin())
            .sum::<f64>()
    }
}

/// Per-image nuisance parameters.
struct View {
    rotation: f64,
    scale: f64,
    brightness: f64,
    center: (f64, f64),
}

impl View {
    fn sample(rng: &mut ChaCha8Rng, focus: Focus) -> Self {
        let zoom = match focus {
            Focus::Near => 1.1,
            Focus::Far => 0.9,
            Focus::None => 1.0,
        };
        View {
            rotation: rng.gen_range(0.0..std::f64::consts::TAU),
            scale: rng.gen_range(0.7..1.3) * zoom,
            brightness: rng.gen_range(0.6..1.4),
            center: (rng.gen_range(0.42..0.58), rng.gen_range(0.42..0.58)),
        }
    }
}

fn render(shape: &PolypShape, view: &View, h: usize, w: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let base_r = 0.26 * h.min(w) as f64 * view.scale;
    let (cy, cx) = (view.center.0 * h as f64, view.center.1 * w as f64);
    // Background: dark tissue tone with a few faint folds.
    let folds: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..5))
        .map(|_| {
            (
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(0.0..w.max(h) as f64),
                rng.gen_range(1.0..3.0),
                rng.gen_range(10.0..30.0),
            )
        })
        .collect();
    let bg = [rng.gen_range(40.0..70.0), rng.gen_range(15.0..30.0), rng.gen_range(15.0..30.0)];
    let noise_seed: u64 = rng.gen();
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut px_val = bg;
            for &(angle, offset, width, gain) in &folds {
                let d = (px * angle.cos() + py * angle.sin() - offset).abs();
                let k = (-d * d / (2.0 * width * width)).exp() * gain;
                px_val[0] += k;
                px_val[1] += 0.5 * k;
                px_val[2] += 0.5 * k;
            }
            let (dy, dx) = (py - cy, px - cx);
            let dist = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx) - view.rotation;
            let edge = base_r * shape.radius(theta);
            // one-pixel soft edge
            let inside = (edge - dist + 0.5).clamp(0.0, 1.0);
            if inside > 0.0 {
                let shade = 0.75 + 0.25 * (1.0 - (dist / edge).min(1.0));
                for c in 0..3 {
                    let v = shape.color[c] * view.brightness * shade;
                    px_val[c] = px_val[c] * (1.0 - inside) + v * inside;
                }
            }
            let jitter = noise.gen_range(-4.0..4.0);
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb(px_val.map(|v: f64| (v + jitter).round().clamp(0.0, 255.0) as u8)),
            );
        }
    }
    img
}

/// Outline roughness of the bright foreground: boundary pixel count over
/// the square root of the foreground area, after thresholding luminance
/// halfway between the darkest and brightest pixel.
pub fn boundary_complexity(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let lum: Vec<f64> = img
        .pixels()
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect();
    let lo = lum.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = 0.5 * (lo + hi);
    let fg = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && lum[y as usize * w + x as usize] > cut
    };
    let (mut area, mut perimeter) = (0usize, 0usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) {
                area += 1;
                if !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                    perimeter += 1;
                }
            }
        }
    }
    if area == 0 {
        0.0
    } else {
        perimeter as f64 / (area as f64).sqrt()
    }
}

/// Polyp ids in first-appearance order with their record indices.
pub fn group_indices(keys: &[String]) -> BTreeMap<&str, Vec<usize>> {
    let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        out.entry(k.as_str()).or_default().push(i);
    }
    out
}
