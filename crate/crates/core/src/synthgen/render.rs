use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BackgroundTexture, ClassId, Domain, DomainStyle, Polarity, SynthError, CLASS_UNIVERSE};

pub const BACKGROUND_LEVEL: f64 = 0.15;
pub const FOREGROUND_LEVEL: f64 = 0.85;

const SUPERSAMPLE: usize = 4;
const CANVAS: f64 = 32.0;

/// Single-channel image, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            pixels: vec![v; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.w + x]
    }
}

/// One rendered image with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Image,
    /// Absent in target training views.
    pub class_label: Option<ClassId>,
    pub domain: Domain,
    pub bbox: BBox,
    pub instance_seed: u64,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { cx: f64, cy: f64, half: f64 },
    /// Upward-pointing isosceles triangle inside a `2·half` box.
    Triangle { cx: f64, cy: f64, half: f64 },
    Cross { cx: f64, cy: f64, arm: f64, thick: f64 },
    Bar { cx: f64, cy: f64, half_len: f64, thick: f64, vertical: bool },
}

use Primitive::*;

fn bar(cx: f64, cy: f64, half_len: f64, vertical: bool) -> Primitive {
    Bar { cx, cy, half_len, thick: 1.5, vertical }
}

/// Class layouts on a 32-unit canvas centred at (16, 16).
fn layout(class: ClassId) -> Vec<Primitive> {
    match class {
        0 => vec![Circle { cx: 16.0, cy: 13.0, r: 6.0 }, bar(16.0, 23.0, 8.0, false)],
        1 => vec![
            Square { cx: 14.0, cy: 17.0, half: 6.0 },
            Circle { cx: 22.0, cy: 9.0, r: 3.5 },
        ],
        2 => vec![Triangle { cx: 13.0, cy: 16.0, half: 7.0 }, bar(23.0, 16.0, 8.0, true)],
        3 => vec![
            Cross { cx: 13.0, cy: 16.0, arm: 7.0, thick: 1.5 },
            Circle { cx: 22.0, cy: 22.0, r: 3.5 },
        ],
        4 => vec![
            Circle { cx: 10.0, cy: 14.0, r: 4.5 },
            Circle { cx: 22.0, cy: 14.0, r: 4.5 },
            bar(16.0, 23.0, 9.0, false),
        ],
        5 => vec![
            Square { cx: 11.0, cy: 20.0, half: 5.0 },
            Triangle { cx: 21.0, cy: 12.0, half: 5.5 },
        ],
        6 => vec![
            bar(16.0, 9.0, 8.0, false),
            bar(9.0, 16.0, 8.0, true),
            Circle { cx: 19.0, cy: 19.0, r: 4.0 },
        ],
        7 => vec![
            Triangle { cx: 16.0, cy: 11.0, half: 6.0 },
            Cross { cx: 16.0, cy: 22.0, arm: 5.0, thick: 1.5 },
        ],
        8 => vec![
            Square { cx: 11.0, cy: 11.0, half: 4.5 },
            Square { cx: 21.0, cy: 21.0, half: 4.5 },
        ],
        _ => vec![
            Circle { cx: 10.0, cy: 10.0, r: 4.0 },
            Square { cx: 22.0, cy: 12.0, half: 4.0 },
            Triangle { cx: 15.0, cy: 22.0, half: 5.0 },
        ],
    }
}

impl Primitive {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Square { cx, cy, half } => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Triangle { cx, cy, half } => {
                let t = (y - (cy - half)) / (2.0 * half);
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= half * t
            }
            Cross { cx, cy, arm, thick } => {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx <= arm && dy <= thick) || (dy <= arm && dx <= thick)
            }
            Bar { cx, cy, half_len, thick, vertical } => {
                let (along, across) = if vertical {
                    ((y - cy).abs(), (x - cx).abs())
                } else {
                    ((x - cx).abs(), (y - cy).abs())
                };
                along <= half_len && across <= thick
            }
        }
    }
}

/// Fraction of each pixel covered by the class shape, after jitter.
fn coverage(class: ClassId, h: usize, w: usize, dx: f64, dy: f64, scale: f64) -> Vec<f64> {
    let prims = layout(class);
    let unit = w.min(h) as f64 / CANVAS;
    let (ccx, ccy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut cov = vec![0.0; h * w];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    // Map back to canvas units before jitter and scale.
                    let u = ((px - ccx - dx) / (scale * unit)) + CANVAS / 2.0;
                    let v = ((py - ccy - dy) / (scale * unit)) + CANVAS / 2.0;
                    if prims.iter().any(|p| p.contains(u, v)) {
                        hits += 1;
                    }
                }
            }
            cov[y * w + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    cov
}

fn tight_bbox(cov: &[f64], h: usize, w: usize) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for y in 0..h {
        for x in 0..w {
            if cov[y * w + x] > 0.0 {
                let bb = b.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                bb.x0 = bb.x0.min(x);
                bb.y0 = bb.y0.min(y);
                bb.x1 = bb.x1.max(x + 1);
                bb.y1 = bb.y1.max(y + 1);
            }
        }
    }
    b
}

fn background(style: &DomainStyle, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match style.background {
        BackgroundTexture::Plain => vec![BACKGROUND_LEVEL; h * w],
        BackgroundTexture::Stripes => {
            let period = rng.gen_range(5..9);
            let phase = rng.gen_range(0..period);
            let diagonal = rng.gen_bool(0.5);
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    let t = if diagonal { x + y } else { x } + phase;
                    if (t / (period / 2).max(1)) % 2 == 0 {
                        BACKGROUND_LEVEL
                    } else {
                        BACKGROUND_LEVEL + 0.25
                    }
                })
                .collect()
        }
        BackgroundTexture::Speckle => (0..h * w)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    BACKGROUND_LEVEL + rng.gen_range(0.2..0.45)
                } else {
                    BACKGROUND_LEVEL
                }
            })
            .collect(),
    }
}

fn box_blur(px: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return px.to_vec();
    }
    let r = r as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    let norm = (2 * r + 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| px[y * w + clamp(x as isize + d, w)]).sum();
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| tmp[clamp(y as isize + d, h) * w + x]).sum();
            out[y * w + x] = s / norm;
        }
    }
    out
}

/// Renders one instance of `class` as a pure function of its arguments.
///
/// Shapes are drawn with 4×4 supersampled coverage over the background
/// texture, then blurred, optionally inverted, and finally perturbed with
/// Gaussian noise and clamped to [0, 1].
pub fn render_instance(
    class: ClassId,
    style: &DomainStyle,
    seed: u64,
    size: usize,
) -> Result<ImageSample, SynthError> {
    if class >= CLASS_UNIVERSE {
        return Err(SynthError::UnknownClass(class));
    }
    style.validate()?;
    let (h, w) = (size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = size as f64 / CANVAS;
    let dx = rng.gen_range(-2.0..=2.0) * unit;
    let dy = rng.gen_range(-2.0..=2.0) * unit;
    let scale = rng.gen_range(0.9..=1.1);
    let cov = coverage(class, h, w, dx, dy, scale);
    let bbox = tight_bbox(&cov, h, w).expect("every layout covers at least one pixel");
    let bg = background(style, h, w, &mut rng);
    let mut px: Vec<f64> = bg
        .iter()
        .zip(&cov)
        .map(|(b, c)| b * (1.0 - c) + FOREGROUND_LEVEL * c)
        .collect();
    px = box_blur(&px, h, w, style.blur_radius);
    if style.polarity == Polarity::Inverted {
        px.iter_mut().for_each(|p| *p = 1.0 - *p);
    }
    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).expect("finite sigma");
        px.iter_mut()
            .for_each(|p| *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(ImageSample {
        pixels: Image { h, w, pixels: px },
        class_label: Some(class),
        domain: style.domain,
        bbox,
        instance_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> DomainStyle {
        DomainStyle::clean_source()
    }

    #[test]
    fn deterministic() {
        let s = DomainStyle::shifted_target();
        assert_eq!(render_instance(3, &s, 99, 32).unwrap(), render_instance(3, &s, 99, 32).unwrap());
    }

    #[test]
    fn clean_render_is_two_level_plus_antialiasing() {
        for class in 0..CLASS_UNIVERSE {
            let img = render_instance(class, &plain(), 11 + class as u64, 32).unwrap().pixels;
            // Oracle: coverage is a multiple of 1/16, so every pixel must be
            // bg + k/16 (fg - bg) for some k in 0..=16.
            let mut seen_bg = false;
            let mut seen_fg = false;
            for &p in &img.pixels {
                let k = (p - BACKGROUND_LEVEL) / (FOREGROUND_LEVEL - BACKGROUND_LEVEL) * 16.0;
                assert!((k - k.round()).abs() < 1e-9 && (0.0..=16.0).contains(&k.round()));
                seen_bg |= p == BACKGROUND_LEVEL;
                seen_fg |= (p - FOREGROUND_LEVEL).abs() < 1e-12;
            }
            assert!(seen_bg && seen_fg, "class {class}");
        }
    }

    #[test]
    fn inversion_identity() {
        for bg in [BackgroundTexture::Plain, BackgroundTexture::Stripes, BackgroundTexture::Speckle] {
            let normal = DomainStyle {
                domain: Domain::Target,
                background: bg,
                polarity: Polarity::Normal,
                noise_sigma: 0.0,
                blur_radius: 1,
            };
            let inverted = DomainStyle {
                polarity: Polarity::Inverted,
                ..normal.clone()
            };
            let a = render_instance(5, &normal, 7, 32).unwrap();
            let b = render_instance(5, &inverted, 7, 32).unwrap();
            assert_eq!(a.bbox, b.bbox);
            for (x, y) in a.pixels.pixels.iter().zip(&b.pixels.pixels) {
                assert!((1.0 - x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bbox_is_tight_and_inside() {
        for seed in 0..50 {
            let class = (seed % 10) as ClassId;
            let sample = render_instance(class, &plain(), seed, 32).unwrap();
            let (img, b) = (sample.pixels, sample.bbox);
            assert!(b.x1 <= 32 && b.y1 <= 32 && b.area() > 0);
            // Rows/columns just outside the box are pure background.
            let clean = |y: usize, x: usize| img.at(y, x) == BACKGROUND_LEVEL;
            if b.y0 > 0 {
                assert!((0..32).all(|x| clean(b.y0 - 1, x)));
            }
            if b.x1 < 32 {
                assert!((0..32).all(|y| clean(y, b.x1)));
            }
            assert!((b.x0..b.x1).any(|x| !clean(b.y0, x)));
        }
    }

    #[test]
    fn unknown_class_rejected() {
        assert!(matches!(
            render_instance(CLASS_UNIVERSE, &plain(), 0, 32),
            Err(SynthError::UnknownClass(_))
        ));
    }

    #[test]
    fn pixels_in_unit_interval() {
        let s = DomainStyle {
            noise_sigma: 0.5,
            ..DomainStyle::shifted_target()
        };
        for seed in 0..20 {
            let img = render_instance((seed % 10) as ClassId, &s, seed, 32).unwrap().pixels;
            assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
