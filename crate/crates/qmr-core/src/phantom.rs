//! Synthetic MOLLI sequence generator with known ground truth.
//!
//! The phantom renders disk/annulus tissues whose signals follow the
//! three-parameter recovery model, deforms each frame by a random smooth
//! B-spline field concentrated in a central motion region, and adds Gaussian
//! noise. Frames are rendered analytically at inverted coordinates, so the
//! stored truth fields are exactly the fields a perfect registration would
//! output: warping the observed stack by `true_fields` re-aligns the scene.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bspline::{grid_dim_for, ControlGrid, DisplacementField};
use crate::error::{QmrError, Result};
use crate::stack::{ImageStack, RoiMask};
use crate::t1fit::forward_signal;

/// T1 regime of the simulated acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    PreGd,
    PostGd,
}

/// Simple tissue geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    Annulus {
        center: [f64; 2],
        inner: f64,
        outer: f64,
    },
}

impl Shape {
    /// Signed distance to the shape boundary, positive inside.
    fn sdf(&self, y: f64, x: f64) -> f64 {
        match self {
            Shape::Disk { center, radius } => {
                let d = ((y - center[0]).powi(2) + (x - center[1]).powi(2)).sqrt();
                radius - d
            }
            Shape::Annulus {
                center,
                inner,
                outer,
            } => {
                let d = ((y - center[0]).powi(2) + (x - center[1]).powi(2)).sqrt();
                (d - inner).min(outer - d)
            }
        }
    }

    fn max_extent(&self) -> f64 {
        match self {
            Shape::Disk { center, radius } => {
                center[0].abs().max(center[1].abs()) + radius
            }
            Shape::Annulus { center, outer, .. } => {
                center[0].abs().max(center[1].abs()) + outer
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tissue {
    pub label: String,
    pub shape: Shape,
    pub t1_star_ms: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub inversion_times_ms: Vec<f64>,
    /// Rendered back to front over the background tissue.
    pub background: Tissue,
    pub tissues: Vec<Tissue>,
    /// Peak planted displacement magnitude in pixels.
    pub motion_amplitude_px: f64,
    /// Control spacing of the planted fields; coarser than the registration
    /// grid so recovery is neither trivial nor out of model class.
    pub motion_spacing_px: usize,
    /// Gaussian noise sigma in signal units.
    pub noise_sigma: f64,
    /// Take the magnitude of the signed recovery signal.
    pub magnitude: bool,
    /// Soft tissue-edge half-width in pixels (0 renders hard edges).
    pub edge_width_px: f64,
    /// Amplitude of the smooth multiplicative texture applied to A and B
    /// (leaves T1* untouched, so the signal model stays exact per pixel).
    pub texture_amplitude: f64,
    pub contrast: ContrastMode,
    pub seed: u64,
}

impl PhantomConfig {
    /// Cardiac-like preset: blood-pool disk inside a myocardium annulus.
    /// Tissue T1 values are plausible design values, not measured data.
    pub fn preset(contrast: ContrastMode, seed: u64) -> Self {
        let (t1_blood, t1_myo, t1_bg) = match contrast {
            ContrastMode::PreGd => (1600.0, 1200.0, 300.0),
            ContrastMode::PostGd => (350.0, 500.0, 200.0),
        };
        let center = [56.0, 56.0];
        Self {
            height: 112,
            width: 112,
            inversion_times_ms: vec![
                100.0, 180.0, 260.0, 1100.0, 1180.0, 1260.0, 2100.0, 2180.0, 3100.0, 3180.0,
                4100.0,
            ],
            background: Tissue {
                label: "background".into(),
                shape: Shape::Disk {
                    center,
                    radius: 1e6,
                },
                t1_star_ms: t1_bg,
                a: 700.0,
                b: 1400.0,
            },
            tissues: vec![
                Tissue {
                    label: "myocardium".into(),
                    shape: Shape::Annulus {
                        center,
                        inner: 12.0,
                        outer: 22.0,
                    },
                    t1_star_ms: t1_myo,
                    a: 900.0,
                    b: 1800.0,
                },
                Tissue {
                    label: "blood-pool".into(),
                    shape: Shape::Disk {
                        center,
                        radius: 12.0,
                    },
                    t1_star_ms: t1_blood,
                    a: 1000.0,
                    b: 2000.0,
                },
            ],
            motion_amplitude_px: 4.0,
            motion_spacing_px: 8,
            noise_sigma: 0.0,
            magnitude: true,
            edge_width_px: 1.0,
            texture_amplitude: 0.08,
            contrast,
            seed,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.inversion_times_ms.len()
    }

    fn validate(&self) -> Result<()> {
        if self.n_frames() < 2 {
            return Err(QmrError::Config("need at least 2 frames".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(QmrError::Config("phantom smaller than 16x16".into()));
        }
        for t in &self.tissues {
            if t.shape.max_extent() > self.height.max(self.width) as f64 {
                return Err(QmrError::Config(format!(
                    "tissue {:?} extends outside the image",
                    t.label
                )));
            }
        }
        if self.motion_amplitude_px < 0.0 {
            return Err(QmrError::Config("negative motion amplitude".into()));
        }
        if self.motion_spacing_px < 2 {
            return Err(QmrError::Config("motion spacing must be >= 2".into()));
        }
        Ok(())
    }
}

/// Ground truth emitted alongside the observed sequence.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    /// Deformed, noiseless frames.
    pub clean_stack: ImageStack,
    /// Deformed frames plus noise; the registration input.
    pub observed_stack: ImageStack,
    /// Aligning fields: warping `observed_stack` by these re-aligns tissues.
    pub true_fields: DisplacementField,
    /// Interior tissue masks in the aligned frame of reference.
    pub masks: Vec<RoiMask>,
    /// Per-pixel true T1* in the aligned frame of reference.
    pub true_t1_star_map: Array2<f64>,
    /// Region containing all planted motion.
    pub motion_region: RoiMask,
}

/// Blend weight of a tissue at a point, a linear ramp of width
/// `2 * edge_width` across the boundary.
fn edge_weight(sdf: f64, edge_width: f64) -> f64 {
    if edge_width <= 0.0 {
        if sdf >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (sdf / (2.0 * edge_width) + 0.5).clamp(0.0, 1.0)
    }
}

struct Scene<'a> {
    config: &'a PhantomConfig,
}

impl Scene<'_> {
    /// Signed composite signal at a continuous point, with the multiplicative
    /// texture folded into A and B.
    fn signal(&self, y: f64, x: f64, ti: f64) -> f64 {
        let c = self.config;
        let texture = 1.0 + c.texture_amplitude * self.texture(y, x);
        let bg = &c.background;
        let mut s = forward_signal(bg.a * texture, bg.b * texture, bg.t1_star_ms, ti);
        for t in &c.tissues {
            let w = edge_weight(t.shape.sdf(y, x), c.edge_width_px);
            if w > 0.0 {
                let v = forward_signal(t.a * texture, t.b * texture, t.t1_star_ms, ti);
                s = (1.0 - w) * s + w * v;
            }
        }
        s
    }

    /// Smooth deterministic modulation in [-1, 1].
    fn texture(&self, y: f64, x: f64) -> f64 {
        let fy = y / self.config.height as f64;
        let fx = x / self.config.width as f64;
        0.6 * (5.1 * fy + 2.3 * fx).sin() * (3.7 * fx - 1.2 * fy + 0.8).cos()
            + 0.4 * (2.9 * (fx + fy)).sin()
    }

    fn t1_star_at(&self, y: f64, x: f64) -> f64 {
        let c = self.config;
        let mut t1 = c.background.t1_star_ms;
        for t in &c.tissues {
            if edge_weight(t.shape.sdf(y, x), c.edge_width_px) > 0.5 {
                t1 = t.t1_star_ms;
            }
        }
        t1
    }
}

/// Generate a phantom sequence and its ground truth. Deterministic per seed.
pub fn generate_phantom(config: &PhantomConfig) -> Result<PhantomTruth> {
    config.validate()?;
    let n = config.n_frames();
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let grids = planted_grids(config, &mut rng)?;
    let mut fields = Array4::<f64>::zeros((n, h, w, 2));
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v = grids.eval_at(f, y as f64, x as f64);
                fields[[f, y, x, 0]] = v[0];
                fields[[f, y, x, 1]] = v[1];
            }
        }
    }
    let true_fields = DisplacementField::new(fields)?;
    check_fold_free(&true_fields)?;

    // render observed frames at inverted coordinates: observed(y) = scene(x)
    // where x + t*(x) = y, so warping observed by t* re-aligns the scene
    let scene = Scene { config };
    let mut clean = Array3::<f64>::zeros((n, h, w));
    for f in 0..n {
        let ti = config.inversion_times_ms[f];
        for py in 0..h {
            for px in 0..w {
                let (sy, sx) = invert_at(&grids, f, py as f64, px as f64);
                let v = scene.signal(sy, sx, ti);
                clean[[f, py, px]] = if config.magnitude { v.abs() } else { v };
            }
        }
    }

    let mut observed = clean.clone();
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma)
            .map_err(|e| QmrError::Config(format!("bad noise sigma: {e}")))?;
        for v in observed.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    // aligned-space truth maps and interior masks
    let mut t1_map = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            t1_map[[y, x]] = scene.t1_star_at(y as f64, x as f64);
        }
    }
    let mut masks = Vec::new();
    for t in &config.tissues {
        let interior = Array2::from_shape_fn((h, w), |(y, x)| {
            t.shape.sdf(y as f64, x as f64) >= config.edge_width_px.max(0.5) + 1.0
        });
        if interior.iter().any(|&b| b) {
            masks.push(RoiMask::new(interior, t.label.clone())?);
        }
    }

    let motion_region = motion_region_mask(config)?;
    let tis = Some(config.inversion_times_ms.clone());
    Ok(PhantomTruth {
        clean_stack: ImageStack::new(clean, tis.clone(), [1.0, 1.0])?,
        observed_stack: ImageStack::new(observed, tis, [1.0, 1.0])?,
        true_fields,
        masks,
        true_t1_star_map: t1_map,
        motion_region,
    })
}

fn envelope_radius(config: &PhantomConfig) -> f64 {
    (config.height.min(config.width) as f64) / 4.0
}

/// Region guaranteed to contain all planted displacement: the compact
/// coefficient envelope plus two cells of B-spline support.
fn motion_region_mask(config: &PhantomConfig) -> Result<RoiMask> {
    let (h, w) = (config.height, config.width);
    let r = envelope_radius(config) + 2.0 * config.motion_spacing_px as f64;
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0;
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= r
    });
    RoiMask::new(mask, "motion-region")
}

/// Random smooth per-frame control grids: compactly enveloped around the
/// image center, zero-mean across frames, rescaled so the peak dense
/// displacement magnitude equals the configured amplitude.
fn planted_grids(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<ControlGrid> {
    let n = config.n_frames();
    let (h, w) = (config.height, config.width);
    let s = config.motion_spacing_px;
    let gh = grid_dim_for(h, s);
    let gw = grid_dim_for(w, s);
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0;
    let r_env = envelope_radius(config);

    let mut coeffs = Array4::<f64>::zeros((n, gh, gw, 2));
    for f in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let py = (gy as f64 - 1.0) * s as f64;
                let px = (gx as f64 - 1.0) * s as f64;
                let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
                // compact Wendland-style bump: exactly zero beyond r_env
                let env = if d < r_env {
                    let q = 1.0 - (d / r_env) * (d / r_env);
                    q * q
                } else {
                    0.0
                };
                for c in 0..2 {
                    // always consume randomness so the stream stays aligned
                    let raw: f64 = rng.random_range(-1.0..1.0);
                    coeffs[[f, gy, gx, c]] = raw * env;
                }
            }
        }
    }
    // zero-mean across frames keeps the planted motion centered, matching
    // the cyclic-consistency gauge the registration optimizes in
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..2 {
                let mean: f64 =
                    (0..n).map(|f| coeffs[[f, gy, gx, c]]).sum::<f64>() / n as f64;
                for f in 0..n {
                    coeffs[[f, gy, gx, c]] -= mean;
                }
            }
        }
    }
    let grid = ControlGrid::new(coeffs, s)?;
    if config.motion_amplitude_px == 0.0 {
        return ControlGrid::new(Array4::zeros((n, gh, gw, 2)), s);
    }
    // scale so the dense peak magnitude matches the amplitude exactly
    let field = crate::bspline::ffd_upsample(&grid, h, w)?;
    let peak = field.max_magnitude();
    if peak <= 0.0 {
        return Ok(grid);
    }
    let scale = config.motion_amplitude_px / peak;
    ControlGrid::new(grid.coeffs().mapv(|v| v * scale), s)
}

/// Solve `x + t*(x) = y` by fixed-point iteration (the planted fields are
/// contractions by the fold-free margin).
fn invert_at(grids: &ControlGrid, frame: usize, y: f64, x: f64) -> (f64, f64) {
    let mut sy = y;
    let mut sx = x;
    for _ in 0..12 {
        let u = grids.eval_at(frame, sy, sx);
        sy = y - u[0];
        sx = x - u[1];
    }
    (sy, sx)
}

/// Jacobian determinant of `x + u(x)` must stay positive everywhere.
fn check_fold_free(fields: &DisplacementField) -> Result<()> {
    let (n, h, w, _) = fields.u().dim();
    for f in 0..n {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let u = fields.u();
                let dyy = 1.0 + (u[[f, y + 1, x, 0]] - u[[f, y - 1, x, 0]]) / 2.0;
                let dyx = (u[[f, y, x + 1, 0]] - u[[f, y, x - 1, 0]]) / 2.0;
                let dxy = (u[[f, y + 1, x, 1]] - u[[f, y - 1, x, 1]]) / 2.0;
                let dxx = 1.0 + (u[[f, y, x + 1, 1]] - u[[f, y, x - 1, 1]]) / 2.0;
                let det = dyy * dxx - dyx * dxy;
                if det <= 0.05 {
                    return Err(QmrError::Config(format!(
                        "planted field folds at frame {f} pixel ({y},{x}): det {det:.3}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Mean and 95th-percentile endpoint error between estimated and true
/// fields over a region, after removing the common reference drift (the
/// per-pixel mean error over frames, which groupwise registration cannot
/// observe).
pub fn endpoint_error(
    estimated: &DisplacementField,
    truth: &DisplacementField,
    region: &RoiMask,
) -> Result<(f64, f64)> {
    let dim = estimated.u().dim();
    if truth.u().dim() != dim {
        return Err(QmrError::Validation(format!(
            "field dims {:?} vs {:?} differ",
            dim,
            truth.u().dim()
        )));
    }
    let (n, h, w, _) = dim;
    region.check_dims(h, w)?;

    let mut drift = Array3::<f64>::zeros((h, w, 2));
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                for c in 0..2 {
                    drift[[y, x, c]] +=
                        (estimated.u()[[f, y, x, c]] - truth.u()[[f, y, x, c]]) / n as f64;
                }
            }
        }
    }
    let mut errs = Vec::new();
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                if region.mask()[[y, x]] {
                    let ey = estimated.u()[[f, y, x, 0]] - truth.u()[[f, y, x, 0]]
                        - drift[[y, x, 0]];
                    let ex = estimated.u()[[f, y, x, 1]] - truth.u()[[f, y, x, 1]]
                        - drift[[y, x, 1]];
                    errs.push((ey * ey + ex * ex).sqrt());
                }
            }
        }
    }
    if errs.is_empty() {
        return Err(QmrError::Validation("empty evaluation region".into()));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p95 = errs[((errs.len() as f64 * 0.95).ceil() as usize - 1).min(errs.len() - 1)];
    Ok((mean, p95))
}
