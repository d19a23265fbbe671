//! Toy glyph world: a procedural generator/embedder pair in which category
//! presence is checkable from pixels, plus a template-driven instruction LLM.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    find_mentions, GeneratorCapabilities, InstructionLlmBackend, TextToImageBackend,
    VisionLanguageEmbedder,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

pub const BACKGROUND: [u8; 3] = [128, 128, 128];
/// Relative weight of the background bin in image embeddings.
const BACKGROUND_WEIGHT: f64 = 0.05;
/// Minimum exact-colour pixels for the pixel oracle to call a glyph present.
const MIN_GLYPH_PIXELS: usize = 8;
const GRID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GlyphShape {
    Square,
    Disc,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

const SHAPES: [GlyphShape; 6] = [
    GlyphShape::Square,
    GlyphShape::Disc,
    GlyphShape::Triangle,
    GlyphShape::Cross,
    GlyphShape::Diamond,
    GlyphShape::Ring,
];

impl GlyphShape {
    /// Whether cell-local point (x, y) in [0,1]^2 lies inside the shape.
    fn contains(self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - 0.5, y - 0.5);
        match self {
            GlyphShape::Square => (0.1..=0.9).contains(&x) && (0.1..=0.9).contains(&y),
            GlyphShape::Disc => dx * dx + dy * dy <= 0.42 * 0.42,
            GlyphShape::Triangle => (0.1..=0.9).contains(&y) && dx.abs() <= (y - 0.1) * 0.55,
            GlyphShape::Cross => {
                (dx.abs() <= 0.14 && dy.abs() <= 0.42) || (dy.abs() <= 0.14 && dx.abs() <= 0.42)
            }
            GlyphShape::Diamond => dx.abs() + dy.abs() <= 0.45,
            GlyphShape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.24 * 0.24..=0.44 * 0.44).contains(&r2)
            }
        }
    }
}

/// Distinct saturated colours on the hue circle, never equal to the background.
fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let hue = (i as f64 * 360.0 / n.max(1) as f64 + 7.0) % 360.0;
            let value = if n > 24 && i % 2 == 1 { 0.7 } else { 1.0 };
            hsv_to_rgb(hue, 1.0, value)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

fn to_unit(rgb: [u8; 3]) -> [f32; 3] {
    [
        rgb[0] as f32 / 255.0,
        rgb[1] as f32 / 255.0,
        rgb[2] as f32 / 255.0,
    ]
}

fn quantize(px: [f32; 3]) -> [u8; 3] {
    [
        (px[0] * 255.0).round() as u8,
        (px[1] * 255.0).round() as u8,
        (px[2] * 255.0).round() as u8,
    ]
}

#[derive(Debug, Clone)]
pub struct ToyGlyphWorld {
    categories: Vec<String>,
    glyphs: Vec<(GlyphShape, [u8; 3])>,
    canvas_size: u32,
    miss_rate: f64,
    embed_noise: f64,
    text_smoothing: f64,
}

impl ToyGlyphWorld {
    pub fn new<S: AsRef<str>>(categories: &[S], canvas_size: u32) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::EmptyInput("toy world needs categories".into()));
        }
        if canvas_size < 3 * GRID * 4 {
            return Err(Error::UnsupportedResolution {
                requested: canvas_size,
                supported: vec![64],
            });
        }
        let colors = palette(categories.len());
        let glyphs = colors
            .into_iter()
            .enumerate()
            .map(|(i, c)| (SHAPES[i % SHAPES.len()], c))
            .collect();
        Ok(ToyGlyphWorld {
            categories: categories.iter().map(|s| s.as_ref().to_string()).collect(),
            glyphs,
            canvas_size,
            miss_rate: 0.0,
            embed_noise: 0.0,
            text_smoothing: 0.1,
        })
    }

    /// Probability that each named target is left out of a generated image.
    pub fn with_miss_rate(mut self, miss_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&miss_rate) {
            return Err(Error::InvalidConfig(format!(
                "miss_rate must lie in [0, 1], got {miss_rate}"
            )));
        }
        self.miss_rate = miss_rate;
        Ok(self)
    }

    /// Standard deviation of Gaussian noise added to unit image embeddings.
    pub fn with_embed_noise(mut self, noise: f64) -> Result<Self> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::InvalidConfig(format!("embed_noise must be >= 0, got {noise}")));
        }
        self.embed_noise = noise;
        Ok(self)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn canvas_size(&self) -> u32 {
        self.canvas_size
    }

    pub fn miss_rate(&self) -> f64 {
        self.miss_rate
    }

    pub fn glyph(&self, category: usize) -> (GlyphShape, [u8; 3]) {
        self.glyphs[category]
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Categories named in `text`.
    pub fn mentions(&self, text: &str) -> Vec<usize> {
        find_mentions(text, &self.categories)
    }

    /// Draw the given categories (up to nine) in distinct grid cells chosen by `layout_seed`.
    pub fn render(&self, categories: &[usize], layout_seed: u64) -> Image {
        let size = self.canvas_size;
        let mut img = Image::filled(size, size, to_unit(BACKGROUND));
        let mut cells: Vec<u32> = (0..GRID * GRID).collect();
        cells.shuffle(&mut seed::rng(layout_seed));
        let cell = size / GRID;
        for (&c, &slot) in categories.iter().zip(cells.iter()) {
            let (shape, color) = self.glyphs[c];
            let rgb = to_unit(color);
            let (cx, cy) = ((slot % GRID) * cell, (slot / GRID) * cell);
            for py in 0..cell {
                for px in 0..cell {
                    let x = (px as f64 + 0.5) / cell as f64;
                    let y = (py as f64 + 0.5) / cell as f64;
                    if shape.contains(x, y) {
                        img.set_pixel(cx + px, cy + py, rgb);
                    }
                }
            }
        }
        img
    }

    /// Pixel-scan oracle: categories whose exact glyph colour covers enough pixels.
    /// Independent of the embedder.
    pub fn detect(&self, image: &Image) -> BTreeSet<usize> {
        let counts = self.color_counts(image);
        (0..self.categories.len())
            .filter(|&c| counts[c] >= MIN_GLYPH_PIXELS)
            .collect()
    }

    fn color_counts(&self, image: &Image) -> Vec<usize> {
        let mut counts = vec![0usize; self.categories.len() + 1];
        for px in image.pixels() {
            let q = quantize(px);
            match self.glyphs.iter().position(|(_, c)| *c == q) {
                Some(i) => counts[i] += 1,
                None => counts[self.categories.len()] += 1,
            }
        }
        counts
    }

    /// Targets named in `prompt` that survive the per-target miss draw.
    pub fn drawn_targets(&self, prompt: &str, seed: u64) -> Vec<usize> {
        let targets = self.mentions(prompt);
        let mut rng = seed::rng(seed::derive(seed, seed::hash_str(prompt)));
        targets
            .into_iter()
            .filter(|_| rng.random::<f64>() >= self.miss_rate)
            .collect()
    }
}

impl TextToImageBackend for ToyGlyphWorld {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            resolutions: vec![self.canvas_size],
            supports_text_encoder_gradients: false,
        }
    }

    fn generate(&self, prompt: &str, resolution: u32, seed: u64) -> Result<Image> {
        if resolution != self.canvas_size {
            return Err(Error::UnsupportedResolution {
                requested: resolution,
                supported: vec![self.canvas_size],
            });
        }
        let drawn = self.drawn_targets(prompt, seed);
        Ok(self.render(&drawn, seed::derive(seed, 1)))
    }
}

impl VisionLanguageEmbedder for ToyGlyphWorld {
    fn embedding_dim(&self) -> usize {
        self.categories.len() + 1
    }

    /// Normalized colour histogram over the glyph palette plus a down-weighted background bin.
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let counts = self.color_counts(image);
        let total = counts.iter().sum::<usize>().max(1) as f64;
        let n = self.categories.len();
        let mut v: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
        v[n] *= BACKGROUND_WEIGHT;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        if self.embed_noise > 0.0 {
            let bytes: Vec<u8> = image.pixels().flat_map(quantize).collect();
            let mut hasher_seed = 0xA5A5_5A5Au64;
            for chunk in bytes.chunks(8) {
                let mut b = [0u8; 8];
                b[..chunk.len()].copy_from_slice(chunk);
                hasher_seed = seed::mix(hasher_seed ^ u64::from_le_bytes(b));
            }
            let mut rng = seed::rng(hasher_seed);
            for x in v.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += self.embed_noise * z;
            }
        }
        Ok(v)
    }

    /// Smoothed one-hot over the palette colours of every category mentioned in `text`.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let n = self.categories.len();
        let mentioned = self.mentions(text);
        let s = self.text_smoothing;
        let mut v = vec![0.0; n + 1];
        if mentioned.is_empty() {
            v[..n].iter_mut().for_each(|x| *x = 1.0 / n as f64);
        } else {
            for &c in &mentioned {
                v[c] += 1.0 - s;
            }
            v[..n]
                .iter_mut()
                .for_each(|x| *x += s * mentioned.len() as f64 / n as f64);
        }
        Ok(v)
    }
}

const SINGLE_TEMPLATES: &[&str] = &[
    "A {0} resting in a sunlit meadow.",
    "A close-up of a {0} on a wooden table.",
    "A {0} in the middle of a quiet street at dawn.",
    "A lone {0} photographed against a plain studio backdrop.",
    "A {0} seen through a rain-streaked window.",
    "A faded postcard showing a {0} by the sea.",
];

const PAIR_TEMPLATES: &[&str] = &[
    "A {0} perched on top of a {1} next to a bustling city street.",
    "A {0} and a {1} sharing a cozy corner of a living room.",
    "A {1} parked beside a {0} under a cloudy sky.",
    "A curious {0} peeking out from behind a {1} in the park.",
    "A {0} sitting quietly next to a {1} on a rainy afternoon.",
    "In a busy market, a {0} stands near a {1}.",
    "A vintage photograph of a {0} beside a {1}.",
    "A {1} in the foreground with a {0} just behind it, warm evening light.",
    "A {0} resting against a {1} in a snowy backyard.",
    "A playful {0} circling around a {1} at the beach.",
    "A {0} and a {1} framed by autumn leaves in a small garden.",
    "Early morning mist surrounds a {0} waiting by a {1}.",
];

const GROUP_TEMPLATES: &[&str] = &[
    "A bright room where {list} are arranged together.",
    "A lively street scene with {list} side by side.",
    "A wide-angle photo showing {list} in an open field.",
    "A cluttered workshop containing {list}.",
];

/// Deterministic stand-in for an instruction-following LLM.
///
/// Reads the object list from the `Objects:` line of the instruction and
/// elaborates it with scene templates chosen by a seeded draw.
#[derive(Debug, Clone)]
pub struct ToyInstructionLlm {
    seed: u64,
}

impl ToyInstructionLlm {
    pub fn new(seed: u64) -> Self {
        ToyInstructionLlm { seed }
    }

    fn objects(instruction: &str) -> Vec<String> {
        instruction
            .lines()
            .find_map(|l| l.trim().strip_prefix("Objects:"))
            .map(|rest| {
                rest.split('|')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn article_list(objs: &[String]) -> String {
    let parts: Vec<String> = objs.iter().map(|o| format!("a {o}")).collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

impl InstructionLlmBackend for ToyInstructionLlm {
    fn complete(&self, instruction: &str, n: usize) -> Result<Vec<String>> {
        let objs = Self::objects(instruction);
        if objs.is_empty() {
            return Err(Error::Backend("instruction names no objects".into()));
        }
        let base = seed::derive(self.seed, seed::hash_str(instruction));
        let out = (0..n)
            .map(|i| {
                let mut rng = seed::rng(seed::derive(base, i as u64));
                match objs.len() {
                    1 => {
                        let t = SINGLE_TEMPLATES[rng.random_range(0..SINGLE_TEMPLATES.len())];
                        t.replace("{0}", &objs[0])
                    }
                    2 => {
                        let t = PAIR_TEMPLATES[rng.random_range(0..PAIR_TEMPLATES.len())];
                        t.replace("{0}", &objs[0]).replace("{1}", &objs[1])
                    }
                    _ => {
                        let t = GROUP_TEMPLATES[rng.random_range(0..GROUP_TEMPLATES.len())];
                        t.replace("{list}", &article_list(&objs))
                    }
                }
            })
            .collect();
        Ok(out)
    }
}
