//! Cubic B-spline free-form deformation.
//!
//! A [`ControlGrid`] holds per-frame 2-channel displacement coefficients on a
//! coarse lattice with uniform spacing `s`; control point `g` sits at pixel
//! coordinate `(g - 1) * s`, so the lattice carries one extra ring of border
//! coefficients on each side of the image (cubic support). [`ffd_upsample`]
//! evaluates the tensor-product spline at every pixel, producing a dense
//! [`DisplacementField`]. Warping is backward with bilinear sampling and
//! border clamping.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3};

use crate::error::{QmrError, Result};
use crate::stack::ImageStack;

/// Uniform cubic B-spline basis at local coordinate `u` in `[0, 1)`.
///
/// Returns the weights of the four control points spanning the cell:
/// `B0 = (1-u)^3/6`, `B1 = (3u^3-6u^2+4)/6`, `B2 = (-3u^3+3u^2+3u+1)/6`,
/// `B3 = u^3/6`. The weights always sum to one.
pub fn cubic_basis(u: f64) -> Result<[f64; 4]> {
    if !(0.0..1.0).contains(&u) {
        return Err(QmrError::Validation(format!(
            "basis coordinate {u} outside [0, 1)"
        )));
    }
    Ok(basis(u))
}

#[inline]
fn basis(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
        (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
        u * u * u / 6.0,
    ]
}

/// First derivatives of the four basis polynomials with respect to `u`.
#[inline]
fn basis_d1(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        -v * v / 2.0,
        (3.0 * u * u - 4.0 * u) / 2.0,
        (-3.0 * u * u + 2.0 * u + 1.0) / 2.0,
        u * u / 2.0,
    ]
}

/// Second derivatives of the four basis polynomials with respect to `u`.
#[inline]
fn basis_d2(u: f64) -> [f64; 4] {
    [1.0 - u, 3.0 * u - 2.0, -3.0 * u + 1.0, u]
}

/// Smallest lattice size whose cells cover pixels `0..extent` with cubic support.
pub fn grid_dim_for(extent: usize, spacing: usize) -> usize {
    (extent - 1) / spacing + 4
}

/// Per-frame 2-channel B-spline control lattice (channels = y/x displacement
/// in pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    coeffs: Array4<f64>,
    spacing: usize,
}

impl ControlGrid {
    pub fn new(coeffs: Array4<f64>, spacing: usize) -> Result<Self> {
        let (_, gh, gw, c) = coeffs.dim();
        if c != 2 {
            return Err(QmrError::Validation(format!(
                "control grid needs 2 channels, got {c}"
            )));
        }
        if gh < 4 || gw < 4 {
            return Err(QmrError::Validation(format!(
                "control grid {gh}x{gw} below cubic minimum 4x4"
            )));
        }
        if spacing == 0 {
            return Err(QmrError::Validation("control spacing must be >= 1".into()));
        }
        if !coeffs.iter().all(|v| v.is_finite()) {
            return Err(QmrError::Validation("non-finite control coefficient".into()));
        }
        Ok(Self { coeffs, spacing })
    }

    /// All-zero grid sized to cover an `height`×`width` image.
    pub fn zeros_for(n_frames: usize, height: usize, width: usize, spacing: usize) -> Self {
        let gh = grid_dim_for(height, spacing);
        let gw = grid_dim_for(width, spacing);
        Self {
            coeffs: Array4::zeros((n_frames, gh, gw, 2)),
            spacing,
        }
    }

    pub fn coeffs(&self) -> &Array4<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Array4<f64> {
        &mut self.coeffs
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn n_frames(&self) -> usize {
        self.coeffs.dim().0
    }

    pub fn grid_height(&self) -> usize {
        self.coeffs.dim().1
    }

    pub fn grid_width(&self) -> usize {
        self.coeffs.dim().2
    }

    fn check_covers(&self, height: usize, width: usize) -> Result<()> {
        let need_h = grid_dim_for(height, self.spacing);
        let need_w = grid_dim_for(width, self.spacing);
        if self.grid_height() < need_h || self.grid_width() < need_w {
            return Err(QmrError::Config(format!(
                "grid {}x{} at spacing {} cannot cover {}x{} (needs {}x{})",
                self.grid_height(),
                self.grid_width(),
                self.spacing,
                height,
                width,
                need_h,
                need_w
            )));
        }
        Ok(())
    }

    /// Evaluate the spline at a continuous pixel coordinate.
    ///
    /// Coordinates are clamped to the lattice extent, so slight excursions
    /// outside the image (as in field inversion fixed-point iterations) stay
    /// well-defined.
    pub fn eval_at(&self, frame: usize, y: f64, x: f64) -> [f64; 2] {
        let s = self.spacing as f64;
        let (iy, uy) = self.cell(y / s, self.grid_height());
        let (ix, ux) = self.cell(x / s, self.grid_width());
        let by = basis(uy);
        let bx = basis(ux);
        let c = self.coeffs.as_slice().expect("standard layout");
        let gw = self.grid_width();
        let mut out = [0.0; 2];
        for l in 0..4 {
            let row = (frame * self.grid_height() + iy + l) * gw;
            for m in 0..4 {
                let w = by[l] * bx[m];
                let base = (row + ix + m) * 2;
                out[0] += w * c[base];
                out[1] += w * c[base + 1];
            }
        }
        out
    }

    fn cell(&self, t: f64, g: usize) -> (usize, f64) {
        let max_cell = (g - 4) as f64;
        let tc = t.clamp(0.0, max_cell + 1.0 - 1e-9);
        let i = (tc.floor() as usize).min(g - 4);
        (i, tc - i as f64)
    }
}

/// Dense per-frame displacement field, channels = (dy, dx) in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    u: Array4<f64>,
}

impl DisplacementField {
    pub fn new(u: Array4<f64>) -> Result<Self> {
        if u.dim().3 != 2 {
            return Err(QmrError::Validation(format!(
                "displacement field needs 2 channels, got {}",
                u.dim().3
            )));
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(QmrError::Validation(
                "non-finite displacement component".into(),
            ));
        }
        Ok(Self { u })
    }

    pub fn zeros(n_frames: usize, height: usize, width: usize) -> Self {
        Self {
            u: Array4::zeros((n_frames, height, width, 2)),
        }
    }

    pub fn u(&self) -> &Array4<f64> {
        &self.u
    }

    pub fn n_frames(&self) -> usize {
        self.u.dim().0
    }

    pub fn height(&self) -> usize {
        self.u.dim().1
    }

    pub fn width(&self) -> usize {
        self.u.dim().2
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.u.index_axis(ndarray::Axis(0), i)
    }

    /// Mean per-pixel Euclidean displacement magnitude over all frames.
    pub fn mean_magnitude(&self) -> f64 {
        let (n, h, w, _) = self.u.dim();
        let mut sum = 0.0;
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let dy = self.u[[f, y, x, 0]];
                    let dx = self.u[[f, y, x, 1]];
                    sum += (dy * dy + dx * dx).sqrt();
                }
            }
        }
        sum / (n * h * w) as f64
    }

    /// Largest per-pixel Euclidean displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        let (n, h, w, _) = self.u.dim();
        let mut best: f64 = 0.0;
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let dy = self.u[[f, y, x, 0]];
                    let dx = self.u[[f, y, x, 1]];
                    best = best.max((dy * dy + dx * dx).sqrt());
                }
            }
        }
        best
    }
}

/// Dense field from a control grid via tensor-product cubic interpolation.
/// Linear in the coefficients.
pub fn ffd_upsample(grid: &ControlGrid, height: usize, width: usize) -> Result<DisplacementField> {
    grid.check_covers(height, width)?;
    let n = grid.n_frames();
    let gh = grid.grid_height();
    let gw = grid.grid_width();
    let ty = AxisTable::new(height, grid.spacing());
    let tx = AxisTable::new(width, grid.spacing());
    let c = grid.coeffs().as_slice().expect("standard layout");
    let mut u = Array4::zeros((n, height, width, 2));
    {
        let us = u.as_slice_mut().expect("standard layout");
        for f in 0..n {
            for y in 0..height {
                let iy = ty.cell[y];
                let wy = &ty.w[y];
                for x in 0..width {
                    let ix = tx.cell[x];
                    let wx = &tx.w[x];
                    let mut ay = 0.0;
                    let mut ax = 0.0;
                    for l in 0..4 {
                        let row = ((f * gh + iy + l) * gw + ix) * 2;
                        let wl = wy[l];
                        for m in 0..4 {
                            let wc = wl * wx[m];
                            ay += wc * c[row + 2 * m];
                            ax += wc * c[row + 2 * m + 1];
                        }
                    }
                    let o = ((f * height + y) * width + x) * 2;
                    us[o] = ay;
                    us[o + 1] = ax;
                }
            }
        }
    }
    DisplacementField::new(u)
}

/// Adjoint of [`ffd_upsample`]: scatter a dense-field gradient back onto the
/// control coefficients. `ffd_adjoint(g, dL/du) = dL/dcoeffs`.
pub fn ffd_adjoint(grid: &ControlGrid, dfield: &Array4<f64>) -> Result<Array4<f64>> {
    let (n, height, width, ch) = dfield.dim();
    if ch != 2 || n != grid.n_frames() {
        return Err(QmrError::Validation("field gradient shape mismatch".into()));
    }
    grid.check_covers(height, width)?;
    let gh = grid.grid_height();
    let gw = grid.grid_width();
    let ty = AxisTable::new(height, grid.spacing());
    let tx = AxisTable::new(width, grid.spacing());
    let df = dfield.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, gh, gw, 2));
    {
        let os = out.as_slice_mut().expect("standard layout");
        for f in 0..n {
            for y in 0..height {
                let iy = ty.cell[y];
                let wy = &ty.w[y];
                for x in 0..width {
                    let ix = tx.cell[x];
                    let wx = &tx.w[x];
                    let o = ((f * height + y) * width + x) * 2;
                    let gy = df[o];
                    let gx = df[o + 1];
                    for l in 0..4 {
                        let row = ((f * gh + iy + l) * gw + ix) * 2;
                        let wl = wy[l];
                        for m in 0..4 {
                            let wc = wl * wx[m];
                            os[row + 2 * m] += wc * gy;
                            os[row + 2 * m + 1] += wc * gx;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel cell indices and basis weights along one axis.
struct AxisTable {
    cell: Vec<usize>,
    w: Vec<[f64; 4]>,
    d1: Vec<[f64; 4]>,
    d2: Vec<[f64; 4]>,
}

impl AxisTable {
    fn new(extent: usize, spacing: usize) -> Self {
        let s = spacing as f64;
        let mut cell = Vec::with_capacity(extent);
        let mut w = Vec::with_capacity(extent);
        let mut d1 = Vec::with_capacity(extent);
        let mut d2 = Vec::with_capacity(extent);
        for p in 0..extent {
            let q = p / spacing;
            let u = (p - q * spacing) as f64 / s;
            cell.push(q);
            w.push(basis(u));
            let mut b1 = basis_d1(u);
            let mut b2 = basis_d2(u);
            for k in 0..4 {
                b1[k] /= s; // d/du -> d/dpixel
                b2[k] /= s * s;
            }
            d1.push(b1);
            d2.push(b2);
        }
        Self { cell, w, d1, d2 }
    }
}

/// Bilinear sample with border clamping. Returns the value only.
#[inline]
pub fn bilinear_sample(img: &ArrayView2<'_, f64>, py: f64, px: f64) -> f64 {
    bilinear_sample_grad(img, py, px).0
}

/// Bilinear sample with border clamping and its derivative with respect to
/// the sample position. The derivative is zero in a clamped direction.
#[inline]
pub fn bilinear_sample_grad(img: &ArrayView2<'_, f64>, py: f64, px: f64) -> (f64, f64, f64) {
    let (h, w) = img.dim();
    let max_y = (h - 1) as f64;
    let max_x = (w - 1) as f64;
    let cy = py.clamp(0.0, max_y);
    let cx = px.clamp(0.0, max_x);
    let y0 = (cy as usize).min(h - 2);
    let x0 = (cx as usize).min(w - 2);
    let fy = cy - y0 as f64;
    let fx = cx - x0 as f64;
    let v00 = img[[y0, x0]];
    let v01 = img[[y0, x0 + 1]];
    let v10 = img[[y0 + 1, x0]];
    let v11 = img[[y0 + 1, x0 + 1]];
    let val = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    let dvy = if py < 0.0 || py > max_y {
        0.0
    } else {
        (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    };
    let dvx = if px < 0.0 || px > max_x {
        0.0
    } else {
        (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    };
    (val, dvy, dvx)
}

/// Backward warp: `out(x) = image(x + u(x))` with bilinear interpolation and
/// border clamping. `field` is one frame of a displacement field, shape
/// `(H, W, 2)`.
pub fn warp_image(image: &ArrayView2<'_, f64>, field: &ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if field.dim() != (h, w, 2) {
        return Err(QmrError::Validation(format!(
            "field {:?} does not match image {}x{}",
            field.dim(),
            h,
            w
        )));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let py = y as f64 + field[[y, x, 0]];
            let px = x as f64 + field[[y, x, 1]];
            out[[y, x]] = bilinear_sample(image, py, px);
        }
    }
    Ok(out)
}

/// Warp every frame of a stack by the matching frame of `field`.
pub fn warp_stack(stack: &ImageStack, field: &DisplacementField) -> Result<ImageStack> {
    let (n, h, w) = stack.frames().dim();
    if field.u().dim() != (n, h, w, 2) {
        return Err(QmrError::Validation(format!(
            "field {:?} does not match stack {}x{}x{}",
            field.u().dim(),
            n,
            h,
            w
        )));
    }
    let mut frames = Array3::zeros((n, h, w));
    for i in 0..n {
        let warped = warp_image(&stack.frame(i), &field.frame(i))?;
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&warped);
    }
    stack.with_frames(frames)
}

/// Compose two displacement fields into one:
/// `warp(warp(img, inner), outer) == warp(img, compose(outer, inner))`.
///
/// With backward warping that identity requires
/// `u_total(x) = u_inner(x + u_outer(x)) + u_outer(x)`,
/// sampling the inner field bilinearly at the outer-shifted position.
pub fn compose_displacements(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    let dim = outer.u().dim();
    if inner.u().dim() != dim {
        return Err(QmrError::Validation(format!(
            "cannot compose fields {:?} and {:?}",
            dim,
            inner.u().dim()
        )));
    }
    let (n, h, w, _) = dim;
    let mut total = Array4::zeros(dim);
    for f in 0..n {
        let inner_f = inner.frame(f);
        let inner_y = inner_f.index_axis(ndarray::Axis(2), 0);
        let inner_x = inner_f.index_axis(ndarray::Axis(2), 1);
        for y in 0..h {
            for x in 0..w {
                let oy = outer.u()[[f, y, x, 0]];
                let ox = outer.u()[[f, y, x, 1]];
                let py = y as f64 + oy;
                let px = x as f64 + ox;
                total[[f, y, x, 0]] = bilinear_sample(&inner_y, py, px) + oy;
                total[[f, y, x, 1]] = bilinear_sample(&inner_x, py, px) + ox;
            }
        }
    }
    DisplacementField::new(total)
}

/// Bending energy of the dense field generated by `grid` over an
/// `height`×`width` image:
/// mean over frames and pixels of `Txx^2 + Tyy^2 + 2 Txy^2`, summed over both
/// displacement channels, with second derivatives taken analytically from the
/// B-spline bases. Zero exactly when the dense field is affine.
pub fn bending_energy(grid: &ControlGrid, height: usize, width: usize) -> Result<f64> {
    bending_impl(grid, height, width, false).map(|(e, _)| e)
}

/// Bending energy together with its analytic gradient with respect to every
/// control coefficient.
pub fn bending_energy_grad(
    grid: &ControlGrid,
    height: usize,
    width: usize,
) -> Result<(f64, Array4<f64>)> {
    let (e, g) = bending_impl(grid, height, width, true)?;
    Ok((e, g.expect("gradient requested")))
}

fn bending_impl(
    grid: &ControlGrid,
    height: usize,
    width: usize,
    with_grad: bool,
) -> Result<(f64, Option<Array4<f64>>)> {
    grid.check_covers(height, width)?;
    let n = grid.n_frames();
    let gh = grid.grid_height();
    let gw = grid.grid_width();
    let ty = AxisTable::new(height, grid.spacing());
    let tx = AxisTable::new(width, grid.spacing());
    let c = grid.coeffs().as_slice().expect("standard layout");
    let norm = 1.0 / (n * height * width) as f64;

    let mut energy = 0.0;
    let mut grad = with_grad.then(|| Array4::<f64>::zeros((n, gh, gw, 2)));
    let mut gslice: Option<&mut [f64]> = grad
        .as_mut()
        .map(|g| g.as_slice_mut().expect("standard layout"));

    for f in 0..n {
        for y in 0..height {
            let iy = ty.cell[y];
            let wy = &ty.w[y];
            let w1y = &ty.d1[y];
            let w2y = &ty.d2[y];
            for x in 0..width {
                let ix = tx.cell[x];
                let wx = &tx.w[x];
                let w1x = &tx.d1[x];
                let w2x = &tx.d2[x];
                for ch in 0..2 {
                    let mut dxx = 0.0;
                    let mut dyy = 0.0;
                    let mut dxy = 0.0;
                    for l in 0..4 {
                        let row = ((f * gh + iy + l) * gw + ix) * 2 + ch;
                        for m in 0..4 {
                            let v = c[row + 2 * m];
                            dxx += wy[l] * w2x[m] * v;
                            dyy += w2y[l] * wx[m] * v;
                            dxy += w1y[l] * w1x[m] * v;
                        }
                    }
                    energy += norm * (dxx * dxx + dyy * dyy + 2.0 * dxy * dxy);
                    if let Some(g) = gslice.as_deref_mut() {
                        let cxx = 2.0 * norm * dxx;
                        let cyy = 2.0 * norm * dyy;
                        let cxy = 4.0 * norm * dxy;
                        for l in 0..4 {
                            let row = ((f * gh + iy + l) * gw + ix) * 2 + ch;
                            for m in 0..4 {
                                g[row + 2 * m] +=
                                    cxx * wy[l] * w2x[m] + cyy * w2y[l] * wx[m] + cxy * w1y[l] * w1x[m];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((energy, grad))
}
