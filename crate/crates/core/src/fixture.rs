//! Synthetic attribute-glyph corpus: one glyph per class composited on a
//! textured background, with recorded bounding boxes, manifest, truth
//! labels, planted duplicates and fragment titles.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::IconClass;
use crate::error::{Error, Result};
use crate::ingest::{record_id, RawEntry};

pub const FIXTURE_SOURCE: &str = "fixture";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const METADATA_FIGURES: &str = "figures";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Original,
    /// Byte copy of another image.
    ExactDuplicate,
    /// Re-encoded copy with a slight brightness shift.
    NearDuplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureImage {
    pub uri: String,
    pub record_id: String,
    pub class: IconClass,
    /// Glyph bounds `[x, y, w, h]` in image pixels.
    pub bbox: [u32; 4],
    pub width: u32,
    pub height: u32,
    pub kind: FixtureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copy_of: Option<String>,
    /// Title carries a fragment keyword.
    #[serde(default)]
    pub fragment_title: bool,
    /// Title names no saint, so keyword labeling leaves it unannotated.
    #[serde(default)]
    pub unlabeled_title: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureOptions {
    pub n_per_class: usize,
    pub seed: u64,
    pub exact_duplicates: usize,
    pub near_duplicates: usize,
    pub fragment_titles: usize,
    pub unlabeled_titles: usize,
}

impl FixtureOptions {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        let total = n_per_class * IconClass::ALL.len();
        FixtureOptions {
            n_per_class,
            seed,
            exact_duplicates: 5,
            near_duplicates: 5,
            fragment_titles: (total / 100).max(2),
            unlabeled_titles: (total / 100).max(2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    pub images: Vec<FixtureImage>,
}

impl Fixture {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn originals(&self) -> impl Iterator<Item = &FixtureImage> {
        self.images.iter().filter(|i| i.kind == FixtureKind::Original)
    }

    pub fn by_record(&self) -> BTreeMap<&str, &FixtureImage> {
        self.images.iter().map(|i| (i.record_id.as_str(), i)).collect()
    }

    /// Reads a fixture written by [`make_synthetic_fixture`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TRUTH_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let images = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Fixture {
            dir: dir.to_path_buf(),
            images,
        })
    }
}

const PALETTE: [[u8; 3]; 10] = [
    [245, 245, 235],
    [125, 70, 30],
    [215, 25, 30],
    [40, 165, 60],
    [235, 185, 35],
    [150, 165, 205],
    [40, 205, 215],
    [250, 115, 15],
    [120, 20, 150],
    [30, 60, 225],
];

fn title_for(class: IconClass) -> &'static str {
    match class {
        IconClass::AntonyOfPadua => "Saint Anthony of Padua",
        IconClass::Francis => "Saint Francis of Assisi receiving the stigmata",
        IconClass::Jerome => "Saint Jerome in the wilderness",
        IconClass::JohnTheBaptist => "Saint John the Baptist preaching",
        IconClass::MaryMagdalene => "Penitent Mary Magdalene",
        IconClass::Paul => "Saint Paul the apostle",
        IconClass::Peter => "Saint Peter enthroned",
        IconClass::Dominic => "Saint Dominic in prayer",
        IconClass::Sebastian => "Martyrdom of Saint Sebastian",
        IconClass::VirginMary => "Madonna and Child",
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn in_circle(u: f64, v: f64, cx: f64, cy: f64, r: f64) -> bool {
    (u - cx).powi(2) + (v - cy).powi(2) < r * r
}

fn in_rect(u: f64, v: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
    u >= x0 && u <= x1 && v >= y0 && v <= y1
}

/// Whether unit-square point `(u, v)` lies inside the class glyph.
fn glyph_contains(class: IconClass, u: f64, v: f64) -> bool {
    match class {
        // lily: stem and three petals
        IconClass::AntonyOfPadua => {
            in_rect(u, v, 0.45, 0.55, 0.35, 0.98)
                || in_circle(u, v, 0.5, 0.2, 0.16)
                || in_circle(u, v, 0.26, 0.34, 0.14)
                || in_circle(u, v, 0.74, 0.34, 0.14)
        }
        // tau cross
        IconClass::Francis => in_rect(u, v, 0.05, 0.95, 0.08, 0.3) || in_rect(u, v, 0.38, 0.62, 0.08, 0.97),
        // cardinal's hat
        IconClass::Jerome => {
            (u - 0.5).powi(2) / 0.47f64.powi(2) + (v - 0.78).powi(2) / 0.13f64.powi(2) < 1.0
                || (v < 0.78 && (u - 0.5).powi(2) / 0.24f64.powi(2) + (v - 0.62).powi(2) / 0.42f64.powi(2) < 1.0)
        }
        // reed cross with banner
        IconClass::JohnTheBaptist => {
            in_rect(u, v, 0.44, 0.56, 0.02, 0.98)
                || in_rect(u, v, 0.2, 0.8, 0.2, 0.3)
                || (in_rect(u, v, 0.56, 0.95, 0.38, 0.58) && v < 0.58 - (u - 0.56) * 0.25)
        }
        // ointment jar
        IconClass::MaryMagdalene => {
            (u - 0.5).powi(2) / 0.36f64.powi(2) + (v - 0.66).powi(2) / 0.32f64.powi(2) < 1.0
                || in_rect(u, v, 0.38, 0.62, 0.2, 0.42)
                || in_rect(u, v, 0.26, 0.74, 0.06, 0.2)
        }
        // sword
        IconClass::Paul => {
            seg_dist((u, v), (0.32, 0.68), (0.92, 0.08)) < 0.07
                || seg_dist((u, v), (0.15, 0.55), (0.45, 0.85)) < 0.06
                || seg_dist((u, v), (0.08, 0.92), (0.3, 0.7)) < 0.07
        }
        // key
        IconClass::Peter => {
            let r = ((u - 0.28).powi(2) + (v - 0.28).powi(2)).sqrt();
            (0.12..0.25).contains(&r)
                || seg_dist((u, v), (0.4, 0.4), (0.9, 0.9)) < 0.07
                || seg_dist((u, v), (0.72, 0.72), (0.58, 0.86)) < 0.06
                || seg_dist((u, v), (0.85, 0.85), (0.71, 0.99)) < 0.06
        }
        // five-pointed star
        IconClass::Dominic => {
            let (x, y) = (u - 0.5, v - 0.52);
            let r = (x * x + y * y).sqrt();
            let a = y.atan2(x) + PI / 2.0;
            let k = (a.rem_euclid(2.0 * PI / 5.0) - PI / 5.0).abs() / (PI / 5.0);
            r < 0.2 + 0.28 * (1.0 - k)
        }
        // three arrows
        IconClass::Sebastian => (0..3).any(|i| {
            let o = f64::from(i) * 0.27 - 0.27;
            let tail = (0.1 + o, 0.9);
            let tip = (0.55 + o, 0.12);
            let shaft = seg_dist((u, v), tail, tip) < 0.06;
            let head = seg_dist((u, v), tip, (tip.0 - 0.14, tip.1 + 0.06)) < 0.06
                || seg_dist((u, v), tip, (tip.0 + 0.02, tip.1 + 0.16)) < 0.06;
            shaft || head
        }),
        // crescent moon
        IconClass::VirginMary => in_circle(u, v, 0.5, 0.5, 0.46) && !in_circle(u, v, 0.66, 0.4, 0.38),
    }
}

pub(crate) fn background(w: u32, h: u32, rng: &mut impl Rng) -> RgbImage {
    let muted = |rng: &mut dyn rand::RngCore| -> [f64; 3] {
        let base: f64 = rng.random_range(70.0..190.0);
        [0, 1, 2].map(|_| (base + rng.random_range(-45.0..45.0)).clamp(0.0, 255.0))
    };
    let a = muted(rng);
    let b = muted(rng);
    let period: f64 = rng.random_range(6.0..20.0);
    let angle: f64 = rng.random_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-10.0..10.0)).collect();
    RgbImage::from_fn(w, h, |x, y| {
        let (xf, yf) = (f64::from(x), f64::from(y));
        let stripe = 0.5 + 0.5 * ((xf * ca + yf * sa) * 2.0 * PI / period).sin();
        let blob: f64 = waves.iter().map(|&(fx, fy, ph)| (xf * fx + yf * fy + ph).sin()).sum::<f64>() / 6.0 + 0.5;
        let t = (0.6 * stripe + 0.4 * blob).clamp(0.0, 1.0);
        let n = noise[(y * w + x) as usize];
        Rgb([0, 1, 2].map(|c| (a[c] * (1.0 - t) + b[c] * t + n).clamp(0.0, 255.0) as u8))
    })
}

/// Renders one glyph image and returns it with the glyph's pixel bounds.
pub fn render_glyph_image(class: IconClass, rng: &mut impl Rng) -> (RgbImage, [u32; 4]) {
    let sizes = [(80, 64), (64, 80), (72, 72), (96, 72), (72, 96)];
    let (w, h) = sizes[rng.random_range(0..sizes.len())];
    let mut img = background(w, h, rng);
    let side = (f64::from(w.min(h)) * rng.random_range(0.38..0.46)).round() as u32;
    let gx = rng.random_range(2..w - side - 1);
    let gy = rng.random_range(2..h - side - 1);
    let jitter: f64 = rng.random_range(-18.0..18.0);
    let color = PALETTE[class.index()].map(|c| (f64::from(c) + jitter).clamp(0.0, 255.0));
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    const SS: u32 = 3;
    for py in 0..side {
        for px in 0..side {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = (f64::from(px) + (f64::from(sx) + 0.5) / f64::from(SS)) / f64::from(side);
                    let v = (f64::from(py) + (f64::from(sy) + 0.5) / f64::from(SS)) / f64::from(side);
                    hits += u32::from(glyph_contains(class, u, v));
                }
            }
            if hits == 0 {
                continue;
            }
            let cov = f64::from(hits) / f64::from(SS * SS);
            let (x, y) = (gx + px, gy + py);
            let p = img.get_pixel_mut(x, y);
            for c in 0..3 {
                p[c] = (f64::from(p[c]) * (1.0 - cov) + color[c] * cov).round() as u8;
            }
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    (img, [x0, y0, x1 - x0 + 1, y1 - y0 + 1])
}

fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("png encoding to memory");
    buf.into_inner()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the corpus to `out_dir`: `images/*.png`, `manifest.jsonl` (one raw
/// entry per image, uris relative to `out_dir`) and `truth.jsonl`. The same
/// options always produce byte-identical files.
pub fn make_synthetic_fixture(out_dir: &Path, opts: &FixtureOptions) -> Result<Fixture> {
    if opts.n_per_class < 10 {
        return Err(Error::InvalidArgument(format!(
            "n_per_class must be at least 10, got {}",
            opts.n_per_class
        )));
    }
    let total = opts.n_per_class * IconClass::ALL.len();
    if opts.exact_duplicates + opts.near_duplicates > total || opts.fragment_titles + opts.unlabeled_titles > total {
        return Err(Error::InvalidArgument("more planted items than images".into()));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut images = Vec::with_capacity(total + opts.exact_duplicates + opts.near_duplicates);
    let mut entries = Vec::new();
    let mut pixels = Vec::with_capacity(total);
    // Round-robin over classes so planted items spread across classes.
    for i in 0..opts.n_per_class {
        for class in IconClass::ALL {
            let k = images.len();
            let (img, bbox) = render_glyph_image(class, &mut rng);
            let uri = format!("images/img_{k:05}.png");
            write(&out_dir.join(&uri), &png_bytes(&img))?;
            let fragment_title = k < opts.fragment_titles;
            let unlabeled_title = !fragment_title && k < opts.fragment_titles + opts.unlabeled_titles;
            let mut entry = RawEntry::new(&uri);
            entry.title = Some(if fragment_title {
                format!("Detail of {}", title_for(class))
            } else if unlabeled_title {
                format!("Devotional panel no. {}", i + 1)
            } else {
                title_for(class).to_string()
            });
            entry.tags = vec!["painting".into()];
            entry.metadata.insert(METADATA_FIGURES.into(), "1".into());
            entries.push(entry);
            images.push(FixtureImage {
                record_id: record_id(FIXTURE_SOURCE, &uri),
                uri,
                class,
                bbox,
                width: img.width(),
                height: img.height(),
                kind: FixtureKind::Original,
                copy_of: None,
                fragment_title,
                unlabeled_title,
            });
            pixels.push(img);
        }
    }
    // Planted duplicates copy plain originals only.
    let plain: Vec<usize> = (0..total)
        .filter(|&k| !images[k].fragment_title && !images[k].unlabeled_title)
        .collect();
    let picks = rand::seq::index::sample(&mut rng, plain.len(), opts.exact_duplicates + opts.near_duplicates).into_vec();
    for (j, &p) in picks.iter().enumerate() {
        let src = plain[p];
        let exact = j < opts.exact_duplicates;
        let uri = format!("images/{}_{j:03}.png", if exact { "copy" } else { "rescan" });
        let bytes = if exact {
            png_bytes(&pixels[src])
        } else {
            let mut img = pixels[src].clone();
            for px in img.pixels_mut() {
                for c in 0..3 {
                    px[c] = px[c].saturating_add(4);
                }
            }
            png_bytes(&img)
        };
        write(&out_dir.join(&uri), &bytes)?;
        let mut entry = entries[src].clone();
        entry.uri = uri.clone();
        entries.push(entry);
        let orig = images[src].clone();
        images.push(FixtureImage {
            record_id: record_id(FIXTURE_SOURCE, &uri),
            uri,
            kind: if exact { FixtureKind::ExactDuplicate } else { FixtureKind::NearDuplicate },
            copy_of: Some(orig.record_id.clone()),
            ..orig
        });
    }

    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&serde_json::to_string(e)?);
        manifest.push('\n');
    }
    write(&out_dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    let mut truth = String::new();
    for i in &images {
        truth.push_str(&serde_json::to_string(i)?);
        truth.push('\n');
    }
    write(&out_dir.join(TRUTH_FILE), truth.as_bytes())?;
    Ok(Fixture {
        dir: out_dir.to_path_buf(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_boxes_are_small_and_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in IconClass::ALL {
            for _ in 0..20 {
                let (img, b) = render_glyph_image(class, &mut rng);
                let area = f64::from(b[2] * b[3]) / f64::from(img.width() * img.height());
                assert!(area < 0.25, "{class:?}: {area}");
                assert!(area > 0.03, "{class:?}: {area}");
                assert!(b[0] + b[2] <= img.width() && b[1] + b[3] <= img.height());
            }
        }
    }

    #[test]
    fn fixture_is_byte_identical_for_a_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let opts = FixtureOptions::new(10, 11);
        let fa = make_synthetic_fixture(a.path(), &opts).unwrap();
        make_synthetic_fixture(b.path(), &opts).unwrap();
        assert_eq!(fa.images.len(), 110);
        for name in [MANIFEST_FILE, TRUTH_FILE] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        for img in &fa.images {
            assert_eq!(fs::read(a.path().join(&img.uri)).unwrap(), fs::read(b.path().join(&img.uri)).unwrap());
        }
        let loaded = Fixture::load(a.path()).unwrap();
        assert_eq!(loaded.images, fa.images);
    }

    #[test]
    fn too_few_per_class_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        assert!(make_synthetic_fixture(d.path(), &FixtureOptions::new(9, 0)).is_err());
    }
}
