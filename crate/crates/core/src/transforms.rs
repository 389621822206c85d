//! Geometric transformations that define probing tasks.
//!
//! Rotations are counter-clockwise quarter turns. Translations fill exposed
//! pixels by mirroring without repeating the border pixel: a source index
//! `i < 0` maps to `-i`, and `i >= n` maps to `2n - 2 - i`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    Rotate { quarter_turns: u8 },
    /// Content shift; positive `dx` moves content toward larger column indices.
    Translate { dx: i32, dy: i32 },
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        matches!(
            self,
            Transform::Rotate { quarter_turns: 0 } | Transform::Translate { dx: 0, dy: 0 }
        )
    }

    /// Apply to a single `C x H x W` image; returns the output and its `(h, w)`.
    pub fn apply(&self, img: &[f32], c: usize, h: usize, w: usize) -> Result<(Vec<f32>, usize, usize)> {
        match *self {
            Transform::Rotate { quarter_turns } => rotate_quarter(img, c, h, w, quarter_turns),
            Transform::Translate { dx, dy } => translate_reflect(img, c, h, w, dx, dy).map(|out| (out, h, w)),
        }
    }

    /// Filesystem-safe token used in exchange file names.
    pub fn file_token(&self) -> String {
        match *self {
            Transform::Rotate { quarter_turns } => format!("{}", quarter_turns as u32 * 90),
            Transform::Translate { dx, dy } => format!("{dx}_{dy}"),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Transform::Rotate { quarter_turns } => write!(f, "{}", quarter_turns as u32 * 90),
            Transform::Translate { dx, dy } => write!(f, "{dx}:{dy}"),
        }
    }
}

/// Rotate every channel plane by `k` counter-clockwise quarter turns.
///
/// One quarter turn maps `out[r][c] = in[c][W-1-r]`.
pub fn rotate_quarter(img: &[f32], c: usize, h: usize, w: usize, k: u8) -> Result<(Vec<f32>, usize, usize)> {
    if k > 3 {
        return Err(Error::invalid(format!("quarter turns must be in 0..=3, got {k}")));
    }
    if k % 2 == 1 && h != w {
        return Err(Error::invalid(format!(
            "odd quarter turns need a square image, got {h}x{w}"
        )));
    }
    check_len(img, c, h, w)?;
    let mut out = vec![0.0f32; img.len()];
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = match k {
                    0 => (r, col),
                    1 => (col, w - 1 - r),
                    2 => (h - 1 - r, w - 1 - col),
                    _ => (w - 1 - col, r),
                };
                dst[r * w + col] = src[sr * w + sc];
            }
        }
    }
    Ok((out, h, w))
}

fn reflect(i: i64, n: i64) -> usize {
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    j as usize
}

/// Shift every channel plane by `(dx, dy)` with mirror padding.
pub fn translate_reflect(img: &[f32], c: usize, h: usize, w: usize, dx: i32, dy: i32) -> Result<Vec<f32>> {
    if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
        return Err(Error::invalid(format!(
            "shift ({dx},{dy}) must be smaller than the image {h}x{w}"
        )));
    }
    check_len(img, c, h, w)?;
    let mut out = vec![0.0f32; img.len()];
    let (hi, wi) = (h as i64, w as i64);
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            let sr = reflect(r as i64 - dy as i64, hi);
            for col in 0..w {
                let sc = reflect(col as i64 - dx as i64, wi);
                dst[r * w + col] = src[sr * w + sc];
            }
        }
    }
    Ok(out)
}

fn check_len(img: &[f32], c: usize, h: usize, w: usize) -> Result<()> {
    if img.len() != c * h * w {
        return Err(Error::invalid(format!(
            "image holds {} values, expected {c}x{h}x{w}",
            img.len()
        )));
    }
    Ok(())
}

/// A named set of transformations; index 0 is always the identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbingTask {
    name: String,
    transforms: Vec<Transform>,
}

impl ProbingTask {
    pub fn new(name: impl Into<String>, transforms: Vec<Transform>) -> Result<Self> {
        let name = name.into();
        if name.is_empty()
            || !name
                .chars()
                .all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-')
        {
            return Err(Error::invalid(format!("bad probing task name {name:?}")));
        }
        if transforms.len() < 2 {
            return Err(Error::invalid(format!("task {name} needs at least two transforms")));
        }
        if !transforms[0].is_identity() {
            return Err(Error::invalid(format!(
                "task {name}: first transform must be the identity, got {}",
                transforms[0]
            )));
        }
        for (i, t) in transforms.iter().enumerate() {
            if transforms[..i].contains(t) {
                return Err(Error::invalid(format!("task {name}: duplicate transform {t}")));
            }
        }
        Ok(ProbingTask { name, transforms })
    }

    /// Quarter-turn task from degree values, e.g. `[0, 90, 180, 270]`.
    pub fn rotation(name: impl Into<String>, degrees: &[u32]) -> Result<Self> {
        let ts = degrees
            .iter()
            .map(|&d| {
                if !d.is_multiple_of(90) || d >= 360 {
                    Err(Error::invalid(format!("rotation {d} is not a quarter turn")))
                } else {
                    Ok(Transform::Rotate {
                        quarter_turns: (d / 90) as u8,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ProbingTask::new(name, ts)
    }

    pub fn translation(name: impl Into<String>, offsets: &[(i32, i32)]) -> Result<Self> {
        let ts = offsets
            .iter()
            .map(|&(dx, dy)| Transform::Translate { dx, dy })
            .collect();
        ProbingTask::new(name, ts)
    }

    /// Four quarter turns.
    pub fn default_rotation() -> Self {
        ProbingTask::rotation("rotation", &[0, 90, 180, 270]).unwrap()
    }

    /// Identity plus eight-pixel shifts along each axis.
    pub fn default_translation() -> Self {
        ProbingTask::translation("translation", &[(0, 0), (-8, 0), (8, 0), (0, -8), (0, 8)]).unwrap()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Comma-separated transform list as written in config files.
    pub fn spec_string(&self) -> String {
        self.transforms
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl FromStr for Transform {
    type Err = Error;

    /// Parses `90` (rotation degrees) or `-8:0` (translation `dx:dy`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once(':') {
            let dx = a
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad dx in {s:?}")))?;
            let dy = b
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad dy in {s:?}")))?;
            Ok(Transform::Translate { dx, dy })
        } else {
            let d: u32 = s
                .parse()
                .map_err(|_| Error::invalid(format!("bad rotation degrees {s:?}")))?;
            if !d.is_multiple_of(90) || d >= 360 {
                return Err(Error::invalid(format!("rotation {d} is not a quarter turn")));
            }
            Ok(Transform::Rotate {
                quarter_turns: (d / 90) as u8,
            })
        }
    }
}

/// Expand a batch into one transformed copy per task transform.
///
/// Output is sample-major: all transforms of sample 0, then sample 1, and
/// so on. Labels are the transform indices.
pub fn apply_task(batch: &ImageBatch, task: &ProbingTask) -> Result<(ImageBatch, Vec<usize>)> {
    let [n, c, h, w] = batch.dims();
    let k = task.len();
    let mut data = Vec::with_capacity(n * k * c * h * w);
    let mut labels = Vec::with_capacity(n * k);
    for i in 0..n {
        for (j, t) in task.transforms().iter().enumerate() {
            let (out, oh, ow) = t.apply(batch.image(i), c, h, w)?;
            debug_assert_eq!((oh, ow), (h, w));
            data.extend(out);
            labels.push(j);
        }
    }
    Ok((ImageBatch::new(n * k, c, h, w, data)?, labels))
}
