//! Image-sequence representation and intensity normalization.
//!
//! An [`ImageStack`] is N frames of H×W scalar intensities plus optional
//! per-frame inversion times. Stacks are immutable after construction; every
//! operation that changes pixel data returns a new stack.

use ndarray::{Array2, Array3, ArrayView2, s};

use crate::error::{QmrError, Result};

/// Minimum frame count for a sequence.
pub const MIN_FRAMES: usize = 2;
/// Minimum height/width of a frame.
pub const MIN_DIM: usize = 8;

/// A quantitative MRI baseline sequence: N frames of H×W intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    frames: Array3<f64>,
    inversion_times_ms: Option<Vec<f64>>,
    spacing_mm: [f64; 2],
}

impl ImageStack {
    /// Build a stack, validating shape and finiteness.
    pub fn new(
        frames: Array3<f64>,
        inversion_times_ms: Option<Vec<f64>>,
        spacing_mm: [f64; 2],
    ) -> Result<Self> {
        let (n, h, w) = frames.dim();
        if n < MIN_FRAMES {
            return Err(QmrError::Validation(format!(
                "need at least {MIN_FRAMES} frames, got {n}"
            )));
        }
        if h < MIN_DIM || w < MIN_DIM {
            return Err(QmrError::Validation(format!(
                "frame dims {h}x{w} below minimum {MIN_DIM}x{MIN_DIM}"
            )));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(QmrError::Validation(
                "non-finite intensity in stack".into(),
            ));
        }
        if let Some(ti) = &inversion_times_ms {
            if ti.len() != n {
                return Err(QmrError::Validation(format!(
                    "{} inversion times for {} frames",
                    ti.len(),
                    n
                )));
            }
            if !ti.iter().all(|t| t.is_finite() && *t > 0.0) {
                return Err(QmrError::Validation(
                    "inversion times must be finite and strictly positive".into(),
                ));
            }
        }
        if !spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(QmrError::Validation("spacing must be positive".into()));
        }
        Ok(Self {
            frames,
            inversion_times_ms,
            spacing_mm,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(ndarray::Axis(0), i)
    }

    pub fn inversion_times_ms(&self) -> Option<&[f64]> {
        self.inversion_times_ms.as_deref()
    }

    pub fn spacing_mm(&self) -> [f64; 2] {
        self.spacing_mm
    }

    /// Replace the pixel data, keeping inversion times and spacing.
    pub fn with_frames(&self, frames: Array3<f64>) -> Result<Self> {
        Self::new(
            frames,
            self.inversion_times_ms.clone(),
            self.spacing_mm,
        )
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in self.frames.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Pixelwise mean over frames.
    pub fn mean_frame(&self) -> Array2<f64> {
        let (n, h, w) = self.frames.dim();
        let mut out = Array2::zeros((h, w));
        for i in 0..n {
            out += &self.frame(i);
        }
        out /= n as f64;
        out
    }

    /// Crop a centered window of `height`×`width` out of every frame.
    pub fn crop_center(&self, height: usize, width: usize) -> Result<Self> {
        let (_, h, w) = self.frames.dim();
        if height > h || width > w {
            return Err(QmrError::Config(format!(
                "crop {height}x{width} exceeds frame {h}x{w}"
            )));
        }
        let y0 = (h - height) / 2;
        let x0 = (w - width) / 2;
        let cropped = self
            .frames
            .slice(s![.., y0..y0 + height, x0..x0 + width])
            .to_owned();
        Self::new(
            cropped,
            self.inversion_times_ms.clone(),
            self.spacing_mm,
        )
    }
}

/// The shared affine map used by [`normalize_stack`]: `normalized = (v - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeParams {
    pub offset: f64,
    pub scale: f64,
}

impl NormalizeParams {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Linearly map the global min/max of the whole sequence onto [0, 1].
///
/// One affine map is shared by all frames so inter-frame intensity relations
/// survive; per-frame scaling would destroy the signal-model structure that
/// both the low-rank decomposition and T1 fitting depend on.
pub fn normalize_stack(stack: &ImageStack) -> Result<(ImageStack, NormalizeParams)> {
    let (lo, hi) = stack.min_max();
    if hi <= lo {
        return Err(QmrError::Degenerate(
            "constant stack cannot be normalized".into(),
        ));
    }
    let params = NormalizeParams {
        offset: lo,
        scale: hi - lo,
    };
    let frames = stack.frames().mapv(|v| params.apply(v));
    Ok((stack.with_frames(frames)?, params))
}

/// Boolean region-of-interest mask with a text tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    mask: Array2<bool>,
    label: String,
}

impl RoiMask {
    pub fn new(mask: Array2<bool>, label: impl Into<String>) -> Result<Self> {
        if !mask.iter().any(|&b| b) {
            return Err(QmrError::Validation("mask has no true pixels".into()));
        }
        Ok(Self {
            mask,
            label: label.into(),
        })
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn height(&self) -> usize {
        self.mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.mask.dim().1
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Check that the mask matches a stack's frame geometry.
    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.mask.dim() != (height, width) {
            return Err(QmrError::Validation(format!(
                "mask {}x{} does not match frames {}x{}",
                self.mask.dim().0,
                self.mask.dim().1,
                height,
                width
            )));
        }
        Ok(())
    }
}
