//! Procedural captioned scenes with ground-truth masks.
//!
//! A scene is one flat-colored shape on a flat background, rendered on a
//! 32×32 canvas. Captions follow the fixed grammar
//! `"a {size} {color} {shape} on a {bg} background"`. The factor oracle
//! inverts rendering analytically (connected components + color histograms)
//! and serves as the evaluation judge, so it shares no failure modes with
//! the generative model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::io;
use crate::rng::StageRng;
use crate::types::{ImageTensor, Mask, ResolutionTag};

pub const CANVAS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FgShape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FgColor {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FgSize {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FgPosition {
    Left,
    Center,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BgStyle {
    Blue,
    Green,
    Sand,
    Gray,
}

pub const SHAPES: [FgShape; 3] = [FgShape::Square, FgShape::Circle, FgShape::Triangle];
pub const COLORS: [FgColor; 4] = [FgColor::Red, FgColor::Green, FgColor::Blue, FgColor::Yellow];
pub const SIZES: [FgSize; 2] = [FgSize::Small, FgSize::Large];
pub const POSITIONS: [FgPosition; 3] = [FgPosition::Left, FgPosition::Center, FgPosition::Right];
pub const BGS: [BgStyle; 4] = [BgStyle::Blue, BgStyle::Green, BgStyle::Sand, BgStyle::Gray];

impl FgShape {
    pub fn word(self) -> &'static str {
        match self {
            FgShape::Square => "square",
            FgShape::Circle => "circle",
            FgShape::Triangle => "triangle",
        }
    }
}

impl FgColor {
    pub fn word(self) -> &'static str {
        match self {
            FgColor::Red => "red",
            FgColor::Green => "green",
            FgColor::Blue => "blue",
            FgColor::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            FgColor::Red => [0.85, 0.10, 0.10],
            FgColor::Green => [0.10, 0.70, 0.15],
            FgColor::Blue => [0.10, 0.20, 0.85],
            FgColor::Yellow => [0.95, 0.90, 0.10],
        }
    }
}

impl FgSize {
    pub fn word(self) -> &'static str {
        match self {
            FgSize::Small => "small",
            FgSize::Large => "large",
        }
    }

    /// Shape extent (bounding-box side) in pixels.
    pub fn extent(self) -> usize {
        match self {
            FgSize::Small => 9,
            FgSize::Large => 15,
        }
    }
}

impl FgPosition {
    pub fn word(self) -> &'static str {
        match self {
            FgPosition::Left => "left",
            FgPosition::Center => "center",
            FgPosition::Right => "right",
        }
    }

    pub fn center_x(self) -> usize {
        match self {
            FgPosition::Left => 8,
            FgPosition::Center => 16,
            FgPosition::Right => 24,
        }
    }
}

impl BgStyle {
    pub fn word(self) -> &'static str {
        match self {
            BgStyle::Blue => "blue",
            BgStyle::Green => "green",
            BgStyle::Sand => "sand",
            BgStyle::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            BgStyle::Blue => [0.55, 0.65, 0.90],
            BgStyle::Green => [0.60, 0.85, 0.60],
            BgStyle::Sand => [0.90, 0.85, 0.65],
            BgStyle::Gray => [0.60, 0.60, 0.60],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneFactors {
    pub fg_shape: FgShape,
    pub fg_color: FgColor,
    pub fg_size: FgSize,
    pub fg_position: FgPosition,
    pub bg_style: BgStyle,
}

impl SceneFactors {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} on a {} background",
            self.fg_size.word(),
            self.fg_color.word(),
            self.fg_shape.word(),
            self.bg_style.word()
        )
    }

    /// Full factor grid, 3·4·2·3·4 = 288 points.
    pub fn grid() -> Vec<SceneFactors> {
        let mut out = Vec::with_capacity(288);
        for &fg_shape in &SHAPES {
            for &fg_color in &COLORS {
                for &fg_size in &SIZES {
                    for &fg_position in &POSITIONS {
                        for &bg_style in &BGS {
                            out.push(SceneFactors {
                                fg_shape,
                                fg_color,
                                fg_size,
                                fg_position,
                                bg_style,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: ImageTensor,
    pub caption: String,
    pub mask: Mask,
    pub factors: SceneFactors,
}

fn shape_covers(shape: FgShape, dx: i64, dy: i64, extent: usize) -> bool {
    let h = (extent as i64 - 1) / 2;
    match shape {
        FgShape::Square => dx.abs() <= h && dy.abs() <= h,
        FgShape::Circle => {
            let r = extent as f64 / 2.0;
            (dx * dx + dy * dy) as f64 <= r * r
        }
        FgShape::Triangle => {
            // Apex at the top row, base at the bottom.
            if dy.abs() > h {
                return false;
            }
            let half_width = ((dy + h) * h) / (2 * h);
            dx.abs() <= half_width
        }
    }
}

/// Renders a scene. The seed jitters the vertical placement by up to ±2
/// pixels so a corpus is not perfectly grid-aligned; everything else is a
/// pure function of the factors.
pub fn render_scene(factors: SceneFactors, seed: u64) -> SceneSample {
    let mut rng = StageRng::new(seed, "render");
    let jitter = rng.uniform_int(0, 4) as i64 - 2;
    let cx = factors.fg_position.center_x() as i64;
    let cy = (CANVAS / 2) as i64 + jitter;
    let extent = factors.fg_size.extent();
    let fg = factors.fg_color.rgb();
    let bg = factors.bg_style.rgb();

    let mut img = vec![0.0f64; CANVAS * CANVAS * 3];
    let mut mask = vec![0.0f64; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let covered = shape_covers(factors.fg_shape, x as i64 - cx, y as i64 - cy, extent);
            let c = if covered { fg } else { bg };
            let i = (y * CANVAS + x) * 3;
            img[i] = c[0];
            img[i + 1] = c[1];
            img[i + 2] = c[2];
            if covered {
                mask[y * CANVAS + x] = 1.0;
            }
        }
    }
    SceneSample {
        image: ImageTensor::new(img, CANVAS, CANVAS).expect("palette colors are in range"),
        caption: factors.caption(),
        mask: Mask::new(mask, CANVAS, CANVAS, ResolutionTag::Image).expect("binary by construction"),
        factors,
    }
}

/// Uniform sample over the factor grid, deterministic given the seed.
pub fn sample_corpus(n: usize, seed: u64) -> Result<Vec<SceneSample>> {
    if n < 1 {
        return Err(Error::Range("corpus size must be >= 1".into()));
    }
    let mut rng = StageRng::new(seed, "corpus");
    let draws: Vec<(SceneFactors, u64)> = (0..n)
        .map(|_| {
            let factors = SceneFactors {
                fg_shape: SHAPES[rng.uniform_int(0, 2) as usize],
                fg_color: COLORS[rng.uniform_int(0, 3) as usize],
                fg_size: SIZES[rng.uniform_int(0, 1) as usize],
                fg_position: POSITIONS[rng.uniform_int(0, 2) as usize],
                bg_style: BGS[rng.uniform_int(0, 3) as usize],
            };
            let render_seed = rng.uniform_int(0, u64::MAX - 1);
            (factors, render_seed)
        })
        .collect();
    Ok(exec::map_indexed(n, |i| render_scene(draws[i].0, draws[i].1)))
}

// ---------------------------------------------------------------------------
// Factor oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgReport {
    pub shape: FgShape,
    pub color: FgColor,
    pub size: FgSize,
    pub position: FgPosition,
    pub shape_conf: f64,
    pub color_conf: f64,
    pub size_conf: f64,
    pub position_conf: f64,
}

/// Oracle output: background style plus the foreground fields, or `None`
/// when no foreground component is detectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub bg: BgStyle,
    pub bg_conf: f64,
    pub fg: Option<FgReport>,
}

impl OracleReport {
    pub fn matches(&self, expected: &SceneFactors) -> bool {
        if self.bg != expected.bg_style {
            return false;
        }
        match &self.fg {
            None => false,
            Some(fg) => {
                fg.shape == expected.fg_shape
                    && fg.color == expected.fg_color
                    && fg.size == expected.fg_size
                    && fg.position == expected.fg_position
            }
        }
    }

    pub fn factors(&self) -> Option<SceneFactors> {
        self.fg.map(|fg| SceneFactors {
            fg_shape: fg.shape,
            fg_color: fg.color,
            fg_size: fg.size,
            fg_position: fg.position,
            bg_style: self.bg,
        })
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest_fg_color(px: [f64; 3]) -> (FgColor, f64, f64) {
    let mut best = (COLORS[0], f64::INFINITY);
    let mut second = f64::INFINITY;
    for &c in &COLORS {
        let d = dist2(px, c.rgb());
        if d < best.1 {
            second = best.1;
            best = (c, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

/// Recovers scene factors by border-vote background estimation, nearest-color
/// foreground segmentation, and connected-component geometry. Exact on clean
/// renders; nearest-factor with per-field confidence on noisy inputs.
pub fn factor_oracle(image: &ImageTensor) -> Result<OracleReport> {
    if image.height() != CANVAS || image.width() != CANVAS {
        return Err(Error::shape(
            format!("{CANVAS}x{CANVAS} image"),
            format!("{}x{}", image.height(), image.width()),
        ));
    }

    // Background: majority vote of nearest bg palette color over the border.
    let mut votes = [0usize; 4];
    let mut border = 0usize;
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            if y != 0 && y != CANVAS - 1 && x != 0 && x != CANVAS - 1 {
                continue;
            }
            border += 1;
            let px = image.pixel(y, x);
            let mut best = (0usize, f64::INFINITY);
            for (i, bg) in BGS.iter().enumerate() {
                let d = dist2(px, bg.rgb());
                if d < best.1 {
                    best = (i, d);
                }
            }
            votes[best.0] += 1;
        }
    }
    let (bg_idx, bg_votes) = votes
        .iter()
        .enumerate()
        .max_by_key(|(_, v)| **v)
        .map(|(i, v)| (i, *v))
        .expect("four candidates");
    let bg = BGS[bg_idx];
    let bg_conf = bg_votes as f64 / border as f64;
    let bg_rgb = bg.rgb();

    // Foreground segmentation: pixel is fg when some fg palette color is
    // closer than the estimated background color.
    let mut fg_px = vec![false; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let px = image.pixel(y, x);
            let (_, dfg, _) = nearest_fg_color(px);
            if dfg < dist2(px, bg_rgb) {
                fg_px[y * CANVAS + x] = true;
            }
        }
    }

    // Largest 4-connected component.
    let mut labels = vec![0u32; CANVAS * CANVAS];
    let mut sizes: Vec<usize> = vec![0];
    for start in 0..CANVAS * CANVAS {
        if !fg_px[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        let mut stack = vec![start];
        labels[start] = id;
        while let Some(i) = stack.pop() {
            sizes[id as usize] += 1;
            let (y, x) = (i / CANVAS, i % CANVAS);
            let mut push = |j: usize| {
                if fg_px[j] && labels[j] == 0 {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - CANVAS);
            }
            if y + 1 < CANVAS {
                push(i + CANVAS);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < CANVAS {
                push(i + 1);
            }
        }
    }
    let (comp, comp_size) = sizes
        .iter()
        .enumerate()
        .skip(1)
        .max_by_key(|(_, s)| **s)
        .map(|(i, s)| (i as u32, *s))
        .unwrap_or((0, 0));
    if comp_size < 4 {
        return Ok(OracleReport { bg, bg_conf, fg: None });
    }

    // Component statistics.
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (CANVAS, 0usize, CANVAS, 0usize);
    let mut sum_x = 0.0f64;
    let mut mean = [0.0f64; 3];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            if labels[y * CANVAS + x] != comp {
                continue;
            }
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            sum_x += x as f64;
            let px = image.pixel(y, x);
            for k in 0..3 {
                mean[k] += px[k];
            }
        }
    }
    for k in 0..3 {
        mean[k] /= comp_size as f64;
    }

    let (color, dbest, dsecond) = nearest_fg_color(mean);
    let color_conf = if dsecond > 0.0 {
        (1.0 - dbest / dsecond).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let bbox_w = max_x - min_x + 1;
    let bbox_h = max_y - min_y + 1;
    let extent = bbox_w.max(bbox_h) as f64;
    let size = if extent >= 12.0 { FgSize::Large } else { FgSize::Small };
    let size_conf = ((extent - 12.0).abs() / 3.0).clamp(0.0, 1.0);

    let fill = comp_size as f64 / (bbox_w * bbox_h) as f64;
    let (shape, shape_conf) = if fill > 0.92 {
        (FgShape::Square, ((fill - 0.92) / 0.08).clamp(0.0, 1.0))
    } else if fill > 0.65 {
        let margin = (fill - 0.65).min(0.92 - fill);
        (FgShape::Circle, (margin / 0.135).clamp(0.0, 1.0))
    } else {
        (FgShape::Triangle, ((0.65 - fill) / 0.15).clamp(0.0, 1.0))
    };

    let centroid_x = sum_x / comp_size as f64;
    let third = CANVAS as f64 / 3.0;
    let position = if centroid_x < third {
        FgPosition::Left
    } else if centroid_x < 2.0 * third {
        FgPosition::Center
    } else {
        FgPosition::Right
    };
    let to_boundary = (centroid_x - third).abs().min((centroid_x - 2.0 * third).abs());
    let position_conf = (to_boundary / (third / 2.0)).clamp(0.0, 1.0);

    Ok(OracleReport {
        bg,
        bg_conf,
        fg: Some(FgReport {
            shape,
            color,
            size,
            position,
            shape_conf,
            color_conf,
            size_conf,
            position_conf,
        }),
    })
}

// ---------------------------------------------------------------------------
// Corpus export
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: String,
    pub caption: String,
    pub factors: SceneFactors,
}

/// Writes a corpus as PNG images + mask PNGs + a JSON-lines manifest.
pub fn export_corpus(samples: &[SceneSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img_name = format!("scene_{i:05}.png");
        let mask_name = format!("scene_{i:05}_mask.png");
        io::image_to_png(&s.image, &dir.join(&img_name))?;
        io::mask_to_png(&s.mask, &dir.join(&mask_name))?;
        let rec = ManifestRecord {
            image: img_name,
            mask: mask_name,
            caption: s.caption.clone(),
            factors: s.factors,
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        manifest.push('\n');
    }
    let mpath = dir.join("manifest.jsonl");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}
