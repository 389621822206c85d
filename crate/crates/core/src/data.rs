//! Procedural seven-segment glyph datasets.
//!
//! In-distribution images are the ten digits; the out-of-distribution
//! companion uses six letter glyphs drawn with the same segments. Every
//! sample is a pure function of `(seed, split, index)`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageBatch, LabelVector};

pub const CANVAS: usize = 32;
pub const NUM_DIGITS: usize = 10;
const BOX_W: usize = 14;
const BOX_H: usize = 24;
const THICK: usize = 3;

// Segment bit order: A B C D E F G -> bits 0..6.
const A: u8 = 1 << 0;
const B: u8 = 1 << 1;
const C: u8 = 1 << 2;
const D: u8 = 1 << 3;
const E: u8 = 1 << 4;
const F: u8 = 1 << 5;
const G: u8 = 1 << 6;

pub const DIGIT_SEGMENTS: [u8; NUM_DIGITS] = [
    A | B | C | D | E | F,     // 0
    B | C,                     // 1
    A | B | D | E | G,         // 2
    A | B | C | D | G,         // 3
    B | C | F | G,             // 4
    A | C | D | F | G,         // 5
    A | C | D | E | F | G,     // 6
    A | B | C,                 // 7
    A | B | C | D | E | F | G, // 8
    A | B | C | D | F | G,     // 9
];

/// Letter glyphs A, C, E, F, H, P.
pub const OOD_GLYPHS: [(char, u8); 6] = [
    ('A', A | B | C | E | F | G),
    ('C', A | D | E | F),
    ('E', A | D | E | F | G),
    ('F', A | E | F | G),
    ('H', B | C | E | F | G),
    ('P', A | B | E | F | G),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self, ood: bool) -> u64 {
        let base: u64 = match self {
            Split::Train => 0x5452,
            Split::Val => 0x5641,
            Split::Test => 0x5445,
        };
        let family = if ood { 0x4F4F_0000 } else { 0x4944_0000 };
        (base | family) << 32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub jitter_px: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            n_per_class: 100,
            noise_sigma: 0.3,
            jitter_px: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::invalid(format!(
                "noise_sigma must lie in [0,1], got {}",
                self.noise_sigma
            )));
        }
        if self.jitter_px > 6 {
            return Err(Error::invalid(format!(
                "jitter_px must be at most 6, got {}",
                self.jitter_px
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::invalid("n_per_class must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: LabelVector,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.select(idx),
            labels: self.labels.select(idx),
            split,
        }
    }
}

/// Row where the upper and lower vertical segments meet. It sits above the
/// box centre so that no glyph is invariant under a half turn.
const WAIST: usize = 10;

/// Pixel rectangles `(row0, col0, rows, cols)` of each segment relative to the glyph box.
fn segment_rects() -> [(usize, usize, usize, usize); 7] {
    let lower = BOX_H - WAIST;
    let mid = WAIST - THICK / 2;
    [
        (0, 0, THICK, BOX_W),                 // A top
        (0, BOX_W - THICK, WAIST, THICK),     // B upper right
        (WAIST, BOX_W - THICK, lower, THICK), // C lower right
        (BOX_H - THICK, 0, THICK, BOX_W),     // D bottom
        (WAIST, 0, lower, THICK),             // E lower left
        (0, 0, WAIST, THICK),                 // F upper left
        (mid, 0, THICK, BOX_W),               // G middle
    ]
}

/// Noiseless glyph at the given integer offset, `CANVAS x CANVAS` row-major.
pub fn render_glyph(segments: u8, dx: i64, dy: i64) -> Vec<f64> {
    let mut img = vec![0.0; CANVAS * CANVAS];
    let top = ((CANVAS - BOX_H) / 2) as i64 + dy;
    let left = ((CANVAS - BOX_W) / 2) as i64 + dx;
    for (bit, &(r0, c0, h, w)) in segment_rects().iter().enumerate() {
        if segments & (1 << bit) == 0 {
            continue;
        }
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                let (y, x) = (top + r as i64, left + c as i64);
                if (0..CANVAS as i64).contains(&y) && (0..CANVAS as i64).contains(&x) {
                    img[y as usize * CANVAS + x as usize] = 1.0;
                }
            }
        }
    }
    img
}

fn render_sample(cfg: &GenConfig, segments: u8, stream_seed: u64) -> Vec<f32> {
    let mut rng = Rng::new(stream_seed);
    let j = cfg.jitter_px as i64;
    let dx = rng.int_inclusive(-j, j);
    let dy = rng.int_inclusive(-j, j);
    let mut img = render_glyph(segments, dx, dy);
    if cfg.noise_sigma > 0.0 {
        for v in &mut img {
            *v = (*v + cfg.noise_sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }
    img.into_iter().map(|v| v as f32).collect()
}

fn generate(cfg: &GenConfig, split: Split, glyphs: &[u8], ood: bool) -> Result<Dataset> {
    cfg.validate()?;
    let k = glyphs.len();
    let n = k * cfg.n_per_class;
    let tag = split.tag(ood);
    let mut data = Vec::with_capacity(n * CANVAS * CANVAS);
    let mut labels = Vec::with_capacity(n);
    // Class-major order: index i belongs to class i / n_per_class.
    for i in 0..n {
        let class = i / cfg.n_per_class;
        data.extend(render_sample(cfg, glyphs[class], cfg.seed ^ tag ^ i as u64));
        labels.push(class);
    }
    Ok(Dataset {
        images: ImageBatch::new(n, 1, CANVAS, CANVAS, data)?,
        labels: LabelVector::new(labels, k)?,
        split,
    })
}

/// Ten-class seven-segment digit dataset.
pub fn generate_id_dataset(cfg: &GenConfig, split: Split) -> Result<Dataset> {
    generate(cfg, split, &DIGIT_SEGMENTS, false)
}

/// Letter-glyph dataset used as out-of-distribution data.
pub fn generate_ood_dataset(cfg: &GenConfig, split: Split) -> Result<Dataset> {
    let glyphs: Vec<u8> = OOD_GLYPHS.iter().map(|&(_, s)| s).collect();
    generate(cfg, split, &glyphs, true)
}

/// Split a labelled pool into (train, validation), holding out the last
/// `ceil(fraction * n_c)` samples of every class.
pub fn carve_validation(pool: &Dataset, fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::invalid(format!(
            "validation fraction must lie in (0,1), got {fraction}"
        )));
    }
    let k = pool.labels.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in pool.labels.as_slice().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for idx in by_class {
        let hold = (fraction * idx.len() as f64).ceil() as usize;
        if hold == 0 || hold >= idx.len() {
            return Err(Error::invalid("validation split leaves a class empty"));
        }
        let cut = idx.len() - hold;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((pool.select(&train, Split::Train), pool.select(&val, Split::Val)))
}
