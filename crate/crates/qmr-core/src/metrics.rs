//! Similarity and evaluation metrics.
//!
//! NMI is estimated from a Parzen-window joint histogram with linear
//! partial-volume kernels, which makes the whole similarity pipeline
//! differentiable with respect to pixel intensities. Local NCC, the cyclic
//! consistency penalty and the PCA-based alignment score live here too.

use ndarray::{Array2, Array3, ArrayView2};

use crate::bspline::DisplacementField;
use crate::error::{QmrError, Result};
use crate::stack::ImageStack;

/// Default histogram bin count.
pub const DEFAULT_BINS: usize = 32;
/// Variance floor in the local NCC denominator.
pub const NCC_VARIANCE_FLOOR: f64 = 1e-5;
/// Probabilities are clamped to this floor inside logs so empty histogram
/// cells produce finite gradients.
const LOG_FLOOR: f64 = 1e-12;

/// Joint intensity distribution of two images over `[0, 1] x [0, 1]`.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    counts: Array2<f64>,
    bins: usize,
}

impl JointHistogram {
    pub fn counts(&self) -> &Array2<f64> {
        &self.counts
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Marginal of the first image (row sums).
    pub fn marginal_a(&self) -> Vec<f64> {
        (0..self.bins)
            .map(|k| (0..self.bins).map(|l| self.counts[[k, l]]).sum())
            .collect()
    }

    /// Marginal of the second image (column sums).
    pub fn marginal_b(&self) -> Vec<f64> {
        (0..self.bins)
            .map(|l| (0..self.bins).map(|k| self.counts[[k, l]]).sum())
            .collect()
    }
}

#[inline]
fn pv_weights(v: f64, bins: usize) -> (usize, f64) {
    // bin coordinate in [0, bins-1]; cell index clamped so i+1 stays valid
    let t = v * (bins - 1) as f64;
    let i = (t as usize).min(bins - 2);
    (i, t - i as f64)
}

fn check_pair(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, bins: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(QmrError::Validation(format!(
            "image dims {:?} vs {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if bins < 2 {
        return Err(QmrError::Config(format!("need at least 2 bins, got {bins}")));
    }
    for &v in a.iter().chain(b.iter()) {
        if !(0.0..=1.0).contains(&v) {
            return Err(QmrError::Validation(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Parzen-window joint histogram: every pixel pair spreads unit mass over
/// the 2x2 neighboring bin pairs with linear (hat) kernels. Normalized to
/// sum exactly one.
pub fn soft_joint_histogram(
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    bins: usize,
) -> Result<JointHistogram> {
    check_pair(a, b, bins)?;
    let mut counts = Array2::<f64>::zeros((bins, bins));
    let inv = 1.0 / a.len() as f64;
    for (&va, &vb) in a.iter().zip(b.iter()) {
        let (ia, fa) = pv_weights(va, bins);
        let (ib, fb) = pv_weights(vb, bins);
        counts[[ia, ib]] += (1.0 - fa) * (1.0 - fb) * inv;
        counts[[ia, ib + 1]] += (1.0 - fa) * fb * inv;
        counts[[ia + 1, ib]] += fa * (1.0 - fb) * inv;
        counts[[ia + 1, ib + 1]] += fa * fb * inv;
    }
    Ok(JointHistogram { counts, bins })
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    let mut h = 0.0;
    for v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

/// Normalized mutual information `2 MI / (Ha + Hb)` from the soft joint
/// histogram, natural logs. Equals 1 for identical images with bin-centered
/// intensities.
pub fn nmi(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, bins: usize) -> Result<f64> {
    check_not_constant(a)?;
    check_not_constant(b)?;
    let hist = soft_joint_histogram(a, b, bins)?;
    nmi_from_hist(&hist)
}

fn check_not_constant(img: &ArrayView2<'_, f64>) -> Result<()> {
    let first = img[[0, 0]];
    if img.iter().all(|&v| v == first) {
        return Err(QmrError::Degenerate(
            "constant image has zero entropy".into(),
        ));
    }
    Ok(())
}

pub fn nmi_from_hist(hist: &JointHistogram) -> Result<f64> {
    let pa = hist.marginal_a();
    let pb = hist.marginal_b();
    let ha = entropy(pa.iter().copied());
    let hb = entropy(pb.iter().copied());
    if ha <= 0.0 || hb <= 0.0 {
        return Err(QmrError::Degenerate(
            "constant image has zero entropy".into(),
        ));
    }
    let hab = entropy(hist.counts.iter().copied());
    Ok(2.0 * (ha + hb - hab) / (ha + hb))
}

/// NMI value together with its gradients with respect to both images.
pub(crate) fn nmi_partials(
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    bins: usize,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_not_constant(a)?;
    check_not_constant(b)?;
    let hist = soft_joint_histogram(a, b, bins)?;
    let pa = hist.marginal_a();
    let pb = hist.marginal_b();
    let ha = entropy(pa.iter().copied());
    let hb = entropy(pb.iter().copied());
    if ha <= 0.0 || hb <= 0.0 {
        return Err(QmrError::Degenerate(
            "constant image has zero entropy".into(),
        ));
    }
    let hab = entropy(hist.counts.iter().copied());
    let mi = ha + hb - hab;
    let denom = ha + hb;
    let value = 2.0 * mi / denom;

    // dNMI/dp[k][l] assembled from dMI, dHa, dHb
    let ln_pa: Vec<f64> = pa.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect();
    let ln_pb: Vec<f64> = pb.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect();
    let bins_n = hist.bins;
    let mut dp = Array2::<f64>::zeros((bins_n, bins_n));
    for k in 0..bins_n {
        for l in 0..bins_n {
            let ln_p = hist.counts[[k, l]].max(LOG_FLOOR).ln();
            let dmi = ln_p - ln_pa[k] - ln_pb[l] - 1.0;
            let dha = -(ln_pa[k] + 1.0);
            let dhb = -(ln_pb[l] + 1.0);
            dp[[k, l]] = (2.0 * dmi * denom - 2.0 * mi * (dha + dhb)) / (denom * denom);
        }
    }

    // chain to pixel intensities through the hat kernels
    let scale = (bins_n - 1) as f64 / a.len() as f64;
    let mut ga = Array2::<f64>::zeros(a.dim());
    let mut gb = Array2::<f64>::zeros(b.dim());
    for ((&va, &vb), (gav, gbv)) in a
        .iter()
        .zip(b.iter())
        .zip(ga.iter_mut().zip(gb.iter_mut()))
    {
        let (ia, fa) = pv_weights(va, bins_n);
        let (ib, fb) = pv_weights(vb, bins_n);
        let wa0 = 1.0 - fa;
        let wb0 = 1.0 - fb;
        *gav = scale
            * (wb0 * (dp[[ia + 1, ib]] - dp[[ia, ib]])
                + fb * (dp[[ia + 1, ib + 1]] - dp[[ia, ib + 1]]));
        *gbv = scale
            * (wa0 * (dp[[ia, ib + 1]] - dp[[ia, ib]])
                + fa * (dp[[ia + 1, ib + 1]] - dp[[ia + 1, ib]]));
    }
    Ok((value, ga, gb))
}

/// Groupwise similarity loss `-(1/N) sum_n NMI(warped_n, reference)`.
pub fn groupwise_nmi_loss(
    warped: &ImageStack,
    reference: &ArrayView2<'_, f64>,
    bins: usize,
) -> Result<f64> {
    let n = warped.n_frames();
    let mut acc = 0.0;
    for i in 0..n {
        acc += nmi(&warped.frame(i), reference, bins)?;
    }
    Ok(-acc / n as f64)
}

/// Groupwise NMI loss and its gradient with respect to every warped pixel,
/// with the implicit reference treated as the mean of the warped frames
/// (the chain rule runs through the mean).
pub(crate) fn groupwise_nmi_loss_grad(
    warped: &Array3<f64>,
    bins: usize,
) -> Result<(f64, Array3<f64>)> {
    let (n, h, w) = warped.dim();
    let mut reference = Array2::<f64>::zeros((h, w));
    for i in 0..n {
        reference += &warped.index_axis(ndarray::Axis(0), i);
    }
    reference /= n as f64;

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((n, h, w));
    let mut ref_accum = Array2::<f64>::zeros((h, w));
    for i in 0..n {
        let frame = warped.index_axis(ndarray::Axis(0), i);
        let (value, ga, gb) = nmi_partials(&frame, &reference.view(), bins)?;
        loss -= value * inv_n;
        grad.index_axis_mut(ndarray::Axis(0), i)
            .assign(&ga.mapv(|v| -v * inv_n));
        ref_accum += &gb;
    }
    // every frame moves the reference by 1/N
    ref_accum.mapv_inplace(|v| -v * inv_n * inv_n);
    for i in 0..n {
        grad.index_axis_mut(ndarray::Axis(0), i)
            .scaled_add(1.0, &ref_accum);
    }
    Ok((loss, grad))
}

fn check_window(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, window: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(QmrError::Validation(format!(
            "image dims {:?} vs {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if window < 3 || window % 2 == 0 {
        return Err(QmrError::Config(format!(
            "window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = a.dim();
    if window > h || window > w {
        return Err(QmrError::Config(format!(
            "window {window} exceeds image {h}x{w}"
        )));
    }
    Ok(())
}

/// Mean over pixels of the windowed normalized cross-correlation, with local
/// means/variances over the (border-clipped) window and a variance floor in
/// the denominator.
pub fn local_ncc(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, window: usize) -> Result<f64> {
    local_ncc_impl(a, b, window, false).map(|(v, _, _)| v)
}

/// Local NCC value and gradients with respect to both images.
pub(crate) fn local_ncc_partials(
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    window: usize,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    local_ncc_impl(a, b, window, true)
}

fn local_ncc_impl(
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    window: usize,
    with_grad: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_window(a, b, window)?;
    let (h, w) = a.dim();
    let r = window / 2;
    let inv_pixels = 1.0 / (h * w) as f64;
    let mut acc = 0.0;
    let mut ga = Array2::<f64>::zeros((h, w));
    let mut gb = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let mut sa = 0.0;
            let mut sb = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    sa += a[[yy, xx]];
                    sb += b[[yy, xx]];
                }
            }
            let ma = sa / count;
            let mb = sb / count;
            let mut cov = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let da = a[[yy, xx]] - ma;
                    let db = b[[yy, xx]] - mb;
                    cov += da * db;
                    va += da * da;
                    vb += db * db;
                }
            }
            let cov = cov / count;
            let va_raw = va / count;
            let vb_raw = vb / count;
            let va = va_raw.max(NCC_VARIANCE_FLOOR);
            let vb = vb_raw.max(NCC_VARIANCE_FLOOR);
            let denom = (va * vb).sqrt();
            acc += cov / denom;

            if with_grad {
                let dva_active = va_raw > NCC_VARIANCE_FLOOR;
                let dvb_active = vb_raw > NCC_VARIANCE_FLOOR;
                let common = inv_pixels / denom;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let da = a[[yy, xx]] - ma;
                        let db = b[[yy, xx]] - mb;
                        let mut da_term = db / count;
                        if dva_active {
                            da_term -= cov * da / (count * va);
                        }
                        ga[[yy, xx]] += common * da_term;
                        let mut db_term = da / count;
                        if dvb_active {
                            db_term -= cov * db / (count * vb);
                        }
                        gb[[yy, xx]] += common * db_term;
                    }
                }
            }
        }
    }
    Ok((acc * inv_pixels, ga, gb))
}

/// Groupwise NCC loss `-(1/N) sum_n NCC(warped_n, reference)`.
pub fn groupwise_ncc_loss(
    warped: &ImageStack,
    reference: &ArrayView2<'_, f64>,
    window: usize,
) -> Result<f64> {
    let n = warped.n_frames();
    let mut acc = 0.0;
    for i in 0..n {
        acc += local_ncc(&warped.frame(i), reference, window)?;
    }
    Ok(-acc / n as f64)
}

/// Groupwise NCC loss and gradient, chain rule through the mean reference.
pub(crate) fn groupwise_ncc_loss_grad(
    warped: &Array3<f64>,
    window: usize,
) -> Result<(f64, Array3<f64>)> {
    let (n, h, w) = warped.dim();
    let mut reference = Array2::<f64>::zeros((h, w));
    for i in 0..n {
        reference += &warped.index_axis(ndarray::Axis(0), i);
    }
    reference /= n as f64;

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((n, h, w));
    let mut ref_accum = Array2::<f64>::zeros((h, w));
    for i in 0..n {
        let frame = warped.index_axis(ndarray::Axis(0), i);
        let (value, ga, gb) = local_ncc_partials(&frame, &reference.view(), window)?;
        loss -= value * inv_n;
        grad.index_axis_mut(ndarray::Axis(0), i)
            .assign(&ga.mapv(|v| -v * inv_n));
        ref_accum += &gb;
    }
    ref_accum.mapv_inplace(|v| -v * inv_n * inv_n);
    for i in 0..n {
        grad.index_axis_mut(ndarray::Axis(0), i)
            .scaled_add(1.0, &ref_accum);
    }
    Ok((loss, grad))
}

/// Cyclic consistency: RMS (over pixels, averaged over the two channels) of
/// the per-pixel sum of all frames' displacements. Zero exactly when the
/// fields sum to zero everywhere, which pins the implicit reference at the
/// group center.
pub fn cyclic_loss(fields: &DisplacementField) -> f64 {
    cyclic_loss_grad_impl(fields, false).0
}

/// Cyclic loss and gradient with respect to every displacement component.
pub(crate) fn cyclic_loss_grad(fields: &DisplacementField) -> (f64, ndarray::Array4<f64>) {
    let (v, g) = cyclic_loss_grad_impl(fields, true);
    (v, g.expect("gradient requested"))
}

fn cyclic_loss_grad_impl(
    fields: &DisplacementField,
    with_grad: bool,
) -> (f64, Option<ndarray::Array4<f64>>) {
    let (n, h, w, _) = fields.u().dim();
    let mut sums = Array3::<f64>::zeros((h, w, 2));
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                sums[[y, x, 0]] += fields.u()[[f, y, x, 0]];
                sums[[y, x, 1]] += fields.u()[[f, y, x, 1]];
            }
        }
    }
    let mut q = 0.0;
    for v in sums.iter() {
        q += v * v;
    }
    let norm = 1.0 / (2.0 * (h * w) as f64);
    let value = (q * norm).sqrt();
    if !with_grad {
        return (value, None);
    }
    let mut grad = ndarray::Array4::<f64>::zeros((n, h, w, 2));
    if value > 0.0 {
        let scale = norm / value;
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    grad[[f, y, x, 0]] = scale * sums[[y, x, 0]];
                    grad[[f, y, x, 1]] = scale * sums[[y, x, 1]];
                }
            }
        }
    }
    (value, Some(grad))
}

/// Alignment score: percentage of the frame correlation matrix spectrum
/// captured by the top K eigenvalues. 100 means all frames are identical up
/// to positive affine intensity maps.
pub fn d_pca(stack: &ImageStack, top_k: usize) -> Result<f64> {
    let (n, h, w) = stack.frames().dim();
    if top_k == 0 || top_k > n {
        return Err(QmrError::Config(format!("top_k {top_k} outside 1..={n}")));
    }
    let pixels = (h * w) as f64;
    // standardized frames
    let mut z = Array2::<f64>::zeros((n, h * w));
    for i in 0..n {
        let frame = stack.frame(i);
        let mean = frame.iter().sum::<f64>() / pixels;
        let var = frame.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / pixels;
        if var <= 0.0 {
            return Err(QmrError::Degenerate(format!(
                "frame {i} is constant; correlation undefined"
            )));
        }
        let inv_sd = 1.0 / var.sqrt();
        for (j, &v) in frame.iter().enumerate() {
            z[[i, j]] = (v - mean) * inv_sd;
        }
    }
    if top_k == n {
        // trace identity: the spectrum sums to n
        return Ok(100.0);
    }
    let mut corr = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        corr[(i, i)] = 1.0;
        for j in i + 1..n {
            let mut acc = 0.0;
            for p in 0..h * w {
                acc += z[[i, p]] * z[[j, p]];
            }
            let c = acc / pixels;
            corr[(i, j)] = c;
            corr[(j, i)] = c;
        }
    }
    let mut eig: Vec<f64> = corr.symmetric_eigen().eigenvalues.iter().cloned().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top: f64 = eig[..top_k].iter().map(|v| v.max(0.0)).sum();
    // denominator is the exact trace
    Ok((100.0 * top / n as f64).min(100.0))
}
