//! Synthetic shape scenes, atmospheric-scattering fog, gamma darkening,
//! the 2:1 adverse/clear sampler and on-disk datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detect::{BBox, BoxTarget, DetectionTarget};
use crate::error::{GdipError, Result};
use crate::io::{read_image, write_image};
use crate::tensor::Image;

pub const FOG_LEVELS: usize = 10;
pub const BETA_MIN: f64 = 0.05;
pub const BETA_MAX: f64 = 1.0;
pub const LIGHT_RANGE: (f64, f64) = (0.7, 1.0);
pub const DARK_GAMMA_RANGE: (f64, f64) = (1.5, 5.0);
pub const ADVERSE_PROBABILITY: f64 = 2.0 / 3.0;
pub const MAX_OBJECTS: usize = 5;

/// Object radius range as a fraction of the canvas side.
const RADIUS_FRACTION: (f64, f64) = (0.1, 0.2);
const PLACEMENT_ATTEMPTS: usize = 200;

/// Extinction coefficient of fog level `0..=9`.
pub fn beta_for_level(level: usize) -> f64 {
    BETA_MIN + level as f64 * (BETA_MAX - BETA_MIN) / (FOG_LEVELS - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FogParams {
    pub level: usize,
    pub atmospheric_light: f64,
    pub beta: f64,
}

impl FogParams {
    pub fn new(level: usize, atmospheric_light: f64) -> Result<Self> {
        if level >= FOG_LEVELS {
            return Err(GdipError::invalid(format!("fog level {level} outside 0..=9")));
        }
        FogParams::with_beta(beta_for_level(level), atmospheric_light).map(|p| FogParams { level, ..p })
    }

    /// Arbitrary extinction coefficient (level reported as 0).
    pub fn with_beta(beta: f64, atmospheric_light: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(GdipError::invalid("beta must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&atmospheric_light) {
            return Err(GdipError::invalid("atmospheric light outside [0, 1]"));
        }
        Ok(FogParams {
            level: 0,
            atmospheric_light,
            beta,
        })
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let level = rng.gen_range(0..FOG_LEVELS);
        let a = rng.gen_range(LIGHT_RANGE.0..=LIGHT_RANGE.1);
        FogParams::new(level, a).expect("sampled within range")
    }
}

/// Normalized distance of each pixel center from the image center.
pub fn depth_map(h: usize, w: usize) -> Vec<f64> {
    let half_diag = ((h * h + w * w) as f64).sqrt() / 2.0;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut d = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            d.push((dx * dx + dy * dy).sqrt() / half_diag);
        }
    }
    d
}

pub fn transmission_map(h: usize, w: usize, beta: f64) -> Vec<f64> {
    depth_map(h, w).into_iter().map(|d| (-beta * d).exp()).collect()
}

/// `I t + A (1 - t)` with `t = exp(-beta d)`.
pub fn apply_fog(img: &Image, p: &FogParams) -> Image {
    let (h, w) = img.dims();
    let t = transmission_map(h, w, p.beta);
    let data = img
        .data()
        .chunks_exact(3)
        .zip(&t)
        .flat_map(|(px, &t)| px.iter().map(move |&v| v * t + p.atmospheric_light * (1.0 - t)))
        .collect();
    Image::from_clamped(h, w, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarkParams {
    pub gamma: f64,
}

impl DarkParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(DARK_GAMMA_RANGE.0..=DARK_GAMMA_RANGE.1).contains(&gamma) {
            return Err(GdipError::invalid(format!("dark gamma {gamma} outside [1.5, 5]")));
        }
        Ok(DarkParams { gamma })
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        DarkParams {
            gamma: rng.gen_range(DARK_GAMMA_RANGE.0..=DARK_GAMMA_RANGE.1),
        }
    }
}

/// `I^gamma` elementwise.
pub fn apply_dark(img: &Image, p: &DarkParams) -> Image {
    let data = img.data().iter().map(|v| v.powf(p.gamma)).collect();
    Image::from_clamped(img.height(), img.width(), data)
}

/// Imaging condition of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Clear,
    Fog(FogParams),
    Dark(DarkParams),
}

impl Condition {
    pub fn apply(&self, img: &Image) -> Image {
        match self {
            Condition::Clear => img.clone(),
            Condition::Fog(p) => apply_fog(img, p),
            Condition::Dark(p) => apply_dark(img, p),
        }
    }

    /// Manifest tag: `clear`, `fog:<level>` or `dark:<gamma>`.
    pub fn tag(&self) -> String {
        match self {
            Condition::Clear => "clear".into(),
            Condition::Fog(p) => format!("fog:{}", p.level),
            Condition::Dark(p) => format!("dark:{:.4}", p.gamma),
        }
    }

    pub fn is_adverse(&self) -> bool {
        !matches!(self, Condition::Clear)
    }
}

/// Kind of degradation drawn for adverse samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adversity {
    Fog,
    Dark,
    /// Fog or darkness with equal probability.
    Mixed,
}

impl Adversity {
    pub fn sample(self, rng: &mut impl Rng) -> Condition {
        let fog = match self {
            Adversity::Fog => true,
            Adversity::Dark => false,
            Adversity::Mixed => rng.gen_bool(0.5),
        };
        if fog {
            Condition::Fog(FogParams::sample(rng))
        } else {
            Condition::Dark(DarkParams::sample(rng))
        }
    }

    /// Adverse with probability 2/3, clear otherwise.
    pub fn sample_hybrid(self, rng: &mut impl Rng) -> Condition {
        if rng.gen_bool(ADVERSE_PROBABILITY) {
            self.sample(rng)
        } else {
            Condition::Clear
        }
    }
}

/// One draw of the hybrid stream: a clear source index and its condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridDraw {
    pub source: usize,
    pub condition: Condition,
}

/// Endless 2:1 adverse/clear stream over a pool of clear samples.
#[derive(Debug, Clone)]
pub struct HybridSampler {
    pool: usize,
    adversity: Adversity,
    rng: ChaCha8Rng,
}

impl HybridSampler {
    pub fn new(pool: usize, adversity: Adversity, seed: u64) -> Result<Self> {
        if pool == 0 {
            return Err(GdipError::invalid("hybrid sampler needs a non-empty pool"));
        }
        Ok(HybridSampler {
            pool,
            adversity,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for HybridSampler {
    type Item = HybridDraw;

    fn next(&mut self) -> Option<HybridDraw> {
        let source = self.rng.gen_range(0..self.pool);
        let condition = self.adversity.sample_hybrid(&mut self.rng);
        Some(HybridDraw { source, condition })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn class(self) -> usize {
        self as usize
    }

    /// Whether the point lies inside the shape of radius `r` centered at
    /// `(cx, cy)`; every shape spans exactly `[c - r, c + r]` on both axes.
    fn contains(self, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => {
                // apex (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r)
                dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Half extent in pixels.
    pub radius: f64,
}

impl ObjectSpec {
    pub fn bbox(&self, size: usize) -> BBox {
        let s = size as f64;
        BBox {
            cx: self.cx / s,
            cy: self.cy / s,
            w: 2.0 * self.radius / s,
            h: 2.0 * self.radius / s,
        }
    }
}

/// Smooth background: a linear color gradient plus sinusoidal stripes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background {
    pub base: [f64; 3],
    pub gradient: [f64; 3],
    pub direction: f64,
    pub stripe_amplitude: f64,
    pub stripe_frequency: f64,
    pub stripe_phase: f64,
}

impl Background {
    fn value(&self, x: f64, y: f64, c: usize) -> f64 {
        let (s, co) = self.direction.sin_cos();
        let u = x * co + y * s;
        let v = -x * s + y * co;
        let stripes = self.stripe_amplitude * (self.stripe_frequency * v + self.stripe_phase).sin();
        (self.base[c] + self.gradient[c] * (u - 0.5) + stripes).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
}

/// Generator for image `index` of run `seed`.
pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    // a saturated hue with high value
    let hue = rng.gen_range(0.0..6.0f64);
    let sector = hue.floor() as usize;
    let f = hue - sector as f64;
    let (hi, lo) = (rng.gen_range(0.75..1.0), rng.gen_range(0.0..0.25));
    let mid_up = lo + (hi - lo) * f;
    let mid_down = hi - (hi - lo) * f;
    match sector {
        0 => [hi, mid_up, lo],
        1 => [mid_down, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_down, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_down],
    }
}

impl SceneSpec {
    /// Random scene with `1..=max_objects` non-overlapping objects.
    pub fn random(seed: u64, index: u64, size: usize, max_objects: usize) -> Result<Self> {
        if size < 16 {
            return Err(GdipError::invalid("scene size must be at least 16 px"));
        }
        if !(1..=MAX_OBJECTS).contains(&max_objects) {
            return Err(GdipError::invalid("max_objects must be in 1..=5"));
        }
        let mut rng = rng_for(seed, index);
        let s = size as f64;
        let gray = rng.gen_range(0.25..0.55);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.06..0.06));
        let background = Background {
            base: std::array::from_fn(|c| gray + tint[c]),
            gradient: std::array::from_fn(|_| rng.gen_range(-0.15..0.15)),
            direction: rng.gen_range(0.0..std::f64::consts::TAU),
            stripe_amplitude: rng.gen_range(0.0..0.06),
            stripe_frequency: rng.gen_range(4.0..20.0),
            stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        let count = rng.gen_range(1..=max_objects);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
        for _ in 0..PLACEMENT_ATTEMPTS {
            if objects.len() == count {
                break;
            }
            let radius = (rng.gen_range(RADIUS_FRACTION.0..RADIUS_FRACTION.1) * s).round().max(2.0);
            let cx = rng.gen_range(radius + 1.0..s - radius - 1.0).round();
            let cy = rng.gen_range(radius + 1.0..s - radius - 1.0).round();
            let shape = Shape::ALL[rng.gen_range(0..3)];
            let color = random_color(&mut rng);
            let overlaps = objects.iter().any(|o| {
                (o.cx - cx).abs() < o.radius + radius + 1.0 && (o.cy - cy).abs() < o.radius + radius + 1.0
            });
            if !overlaps {
                objects.push(ObjectSpec {
                    shape,
                    color,
                    cx,
                    cy,
                    radius,
                });
            }
        }
        Ok(SceneSpec {
            seed,
            size,
            objects,
            background,
        })
    }
}

/// Renders the scene; boxes are the geometric extents of the shapes.
pub fn synth_scene(spec: &SceneSpec) -> Result<(Image, DetectionTarget)> {
    let size = spec.size;
    let s = size as f64;
    let img = Image::from_fn(size, size, |y, x, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        spec.objects
            .iter()
            .rev()
            .find(|o| o.shape.contains(px, py, o.cx, o.cy, o.radius))
            .map_or_else(|| spec.background.value(px / s, py / s, c), |o| o.color[c])
    })?;
    let target = DetectionTarget::new(
        spec.objects
            .iter()
            .map(|o| BoxTarget {
                class: o.shape.class(),
                bbox: o.bbox(size),
            })
            .collect(),
    )?;
    Ok((img, target))
}

/// Which conditions a generated dataset contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    Clear,
    Fog,
    Dark,
    /// Hybrid 2:1 adverse/clear with fog and darkness mixed.
    Mixed,
}

impl std::str::FromStr for ConditionKind {
    type Err = GdipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clear" => Ok(ConditionKind::Clear),
            "fog" => Ok(ConditionKind::Fog),
            "dark" => Ok(ConditionKind::Dark),
            "mixed" => Ok(ConditionKind::Mixed),
            other => Err(GdipError::invalid(format!("unknown condition {other:?}"))),
        }
    }
}

impl ConditionKind {
    pub fn draw(self, rng: &mut impl Rng) -> Condition {
        match self {
            ConditionKind::Clear => Condition::Clear,
            ConditionKind::Fog => Adversity::Fog.sample(rng),
            ConditionKind::Dark => Adversity::Dark.sample(rng),
            ConditionKind::Mixed => Adversity::Mixed.sample_hybrid(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenOptions {
    pub count: usize,
    pub condition: ConditionKind,
    pub seed: u64,
    pub size: usize,
    pub max_objects: usize,
}

/// Scene `index` of a run and its drawn condition.
pub fn generate_sample(opts: &GenOptions, index: usize) -> Result<(Image, Image, DetectionTarget, Condition)> {
    let spec = SceneSpec::random(opts.seed, 2 * index as u64, opts.size, opts.max_objects)?;
    let (clear, target) = synth_scene(&spec)?;
    let condition = opts.condition.draw(&mut rng_for(opts.seed, 2 * index as u64 + 1));
    let adverse = condition.apply(&clear);
    Ok((adverse, clear, target, condition))
}

pub const MANIFEST_NAME: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "image,target,condition,clear";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub image: String,
    pub target: String,
    pub condition: String,
    pub clear: String,
}

/// Dataset index; paths are relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.image, r.target, r.condition, r.clear);
        }
        s
    }

    /// Loads `manifest.csv` from a dataset directory (or a manifest path).
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_NAME))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&file)?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(GdipError::format("manifest", format!("{} lacks header", file.display())));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(GdipError::format("manifest", format!("row {l:?}")));
                }
                Ok(ManifestRow {
                    image: f[0].into(),
                    target: f[1].into(),
                    condition: f[2].into(),
                    clear: f[3].into(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Manifest { root, rows })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn adverse_fraction(&self) -> f64 {
        let n = self.rows.iter().filter(|r| r.condition != "clear").count();
        n as f64 / self.rows.len().max(1) as f64
    }
}

/// Writes images, clear references, targets and the manifest.
pub fn generate_dataset(out: &Path, opts: &GenOptions) -> Result<Manifest> {
    for sub in ["images", "clear", "targets"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let rows = (0..opts.count)
        .into_par_iter()
        .map(|i| {
            let (adverse, clear, target, condition) = generate_sample(opts, i)?;
            let image = format!("images/{i:05}.png");
            let clear_rel = if condition.is_adverse() {
                let p = format!("clear/{i:05}.png");
                write_image(&out.join(&p), &clear)?;
                p
            } else {
                image.clone()
            };
            write_image(&out.join(&image), &adverse)?;
            let target_rel = format!("targets/{i:05}.txt");
            fs::write(out.join(&target_rel), target.to_string())?;
            Ok(ManifestRow {
                image,
                target: target_rel,
                condition: condition.tag(),
                clear: clear_rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out.to_path_buf(),
        rows,
    };
    fs::write(out.join(MANIFEST_NAME), manifest.to_csv())?;
    Ok(manifest)
}

/// A loaded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub adverse: Image,
    pub clear: Option<Image>,
    pub target: DetectionTarget,
    pub condition: String,
}

/// Reads every manifest row; `with_clear` also loads the clear references.
pub fn load_samples(manifest: &Manifest, with_clear: bool) -> Result<Vec<Sample>> {
    manifest
        .rows
        .par_iter()
        .map(|r| {
            let adverse = read_image(&manifest.resolve(&r.image))?;
            let clear = if !with_clear {
                None
            } else if r.clear.is_empty() {
                return Err(GdipError::MissingClear(r.image.clone()));
            } else {
                let p = manifest.resolve(&r.clear);
                if !p.exists() {
                    return Err(GdipError::MissingClear(p.display().to_string()));
                }
                Some(read_image(&p)?)
            };
            let target = fs::read_to_string(manifest.resolve(&r.target))?.parse()?;
            Ok(Sample {
                adverse,
                clear,
                target,
                condition: r.condition.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_schedule() {
        assert!((beta_for_level(0) - 0.05).abs() < 1e-15);
        assert!((beta_for_level(9) - 1.0).abs() < 1e-12);
        for l in 0..9 {
            assert!(beta_for_level(l + 1) > beta_for_level(l));
        }
        assert!(FogParams::new(10, 0.8).is_err());
        assert!(FogParams::new(3, 1.1).is_err());
    }

    #[test]
    fn fog_formula_cases() {
        let img = Image::from_fn(6, 8, |y, x, c| ((y + x + c) % 5) as f64 / 4.0).unwrap();
        let none = FogParams::with_beta(0.0, 0.9).unwrap();
        assert_eq!(apply_fog(&img, &none), img);
        // t = 0.5 everywhere at depth 1 corners needs beta = ln 2; check a corner-free oracle
        let black = Image::filled(4, 4, 0.0).unwrap();
        let p = FogParams::with_beta(std::f64::consts::LN_2, 1.0).unwrap();
        let fogged = apply_fog(&black, &p);
        let d = depth_map(4, 4);
        for (i, v) in fogged.data().iter().enumerate() {
            let t = 0.5f64.powf(d[i / 3]);
            assert!((v - (1.0 - t)).abs() < 1e-12);
        }
        let corner_depth = d[0];
        assert!((corner_depth - (4.5f64).sqrt() / 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn transmission_decreases_with_level() {
        let mut prev = f64::MAX;
        for l in 0..FOG_LEVELS {
            let t = transmission_map(24, 32, beta_for_level(l));
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            assert!(mean < prev);
            prev = mean;
        }
    }

    #[test]
    fn dark_cases() {
        let one = Image::filled(2, 2, 1.0).unwrap();
        assert_eq!(apply_dark(&one, &DarkParams::new(1.5).unwrap()), one);
        let half = Image::filled(2, 2, 0.5).unwrap();
        assert_eq!(apply_dark(&half, &DarkParams::new(2.0).unwrap()).data()[0], 0.25);
        assert!(DarkParams::new(1.4).is_err());
        assert!(DarkParams::new(5.1).is_err());
    }

    #[test]
    fn scenes_are_deterministic_and_boxed() {
        let a = SceneSpec::random(7, 3, 96, 5).unwrap();
        let b = SceneSpec::random(7, 3, 96, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(synth_scene(&a).unwrap(), synth_scene(&b).unwrap());
        let (_, t) = synth_scene(&a).unwrap();
        assert_eq!(t.boxes.len(), a.objects.len());
        for o in &a.objects {
            assert!(o.cx - o.radius >= 0.0 && o.cx + o.radius <= 96.0);
            assert!(o.cy - o.radius >= 0.0 && o.cy + o.radius <= 96.0);
        }
        let one = SceneSpec::random(1, 0, 64, 1).unwrap();
        assert_eq!(synth_scene(&one).unwrap().1.boxes.len(), 1);
    }

    #[test]
    fn rendered_extent_matches_box() {
        for shape in Shape::ALL {
            let spec = SceneSpec {
                seed: 0,
                size: 64,
                objects: vec![ObjectSpec {
                    shape,
                    color: [1.0, 0.0, 0.0],
                    cx: 30.0,
                    cy: 34.0,
                    radius: 10.0,
                }],
                background: Background {
                    base: [0.0; 3],
                    gradient: [0.0; 3],
                    direction: 0.0,
                    stripe_amplitude: 0.0,
                    stripe_frequency: 1.0,
                    stripe_phase: 0.0,
                },
            };
            let (img, target) = synth_scene(&spec).unwrap();
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    if img.get(y, x, 0) > 0.5 {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            let b = target.boxes[0].bbox;
            let (bx0, by0, bx1, by1) = b.corners();
            // pixel-center sampling loses at most one pixel per side
            for (px, bv) in [(x0, bx0), (y0, by0), (x1, bx1), (y1, by1)] {
                assert!((px as f64 / 64.0 - bv).abs() <= 1.0 / 64.0 + 1e-12, "{shape:?}");
            }
            assert_eq!(target.boxes[0].class, shape.class());
        }
        let circle = ObjectSpec {
            shape: Shape::Circle,
            color: [0.0; 3],
            cx: 40.0,
            cy: 24.0,
            radius: 8.0,
        };
        assert_eq!(circle.bbox(64), BBox { cx: 40.0 / 64.0, cy: 24.0 / 64.0, w: 0.25, h: 0.25 });
    }

    #[test]
    fn hybrid_stream_ratio_and_determinism() {
        let draws: Vec<HybridDraw> = HybridSampler::new(50, Adversity::Mixed, 3).unwrap().take(9000).collect();
        let adverse = draws.iter().filter(|d| d.condition.is_adverse()).count() as f64 / 9000.0;
        assert!((adverse - 2.0 / 3.0).abs() < 0.02, "{adverse}");
        let again: Vec<HybridDraw> = HybridSampler::new(50, Adversity::Mixed, 3).unwrap().take(9000).collect();
        assert_eq!(draws, again);
        assert!(draws.iter().all(|d| d.source < 50));
        assert!(HybridSampler::new(0, Adversity::Fog, 0).is_err());
    }

    #[test]
    fn targets_are_adversity_invariant() {
        let opts = GenOptions {
            count: 4,
            condition: ConditionKind::Fog,
            seed: 9,
            size: 48,
            max_objects: 3,
        };
        let clear_opts = GenOptions {
            condition: ConditionKind::Clear,
            ..opts
        };
        for i in 0..4 {
            let (adv, clear, t, c) = generate_sample(&opts, i).unwrap();
            let (adv2, clear2, t2, c2) = generate_sample(&clear_opts, i).unwrap();
            assert_eq!((clear.clone(), t.clone()), (clear2, t2));
            assert!(c.is_adverse() && !c2.is_adverse());
            assert_ne!(adv, adv2);
            assert_eq!(adv.dims(), clear.dims());
        }
    }
}
