//! Quantitative evaluation: toy Fréchet distance over frozen features,
//! mask-alignment IoU, and saturation diagnostics.
//!
//! Toy-FID absolute values are not comparable to anything outside this
//! project; only orderings between models evaluated with the same frozen
//! extractor are meaningful.

use crate::error::{Error, Result};
use crate::models::FeatureExtractor;
use crate::nn::{bilinear_up2x, ParamSet};
use ndarray::{Array2, ArrayD, Axis, IxDyn};

/// Fréchet distance between Gaussian fits of two feature sets.
#[derive(Debug, Clone, Copy)]
pub struct FrechetResult {
    pub distance: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// Extractor stage the features came from (0-based; 2 = deepest).
    pub stage: usize,
}

fn moments(x: &Array2<f32>) -> (Vec<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mut mu = vec![0.0f64; d];
    for row in x.axis_iter(Axis(0)) {
        for (m, &v) in mu.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in x.axis_iter(Axis(0)) {
        let c: Vec<f64> = row.iter().zip(&mu).map(|(&v, &m)| v as f64 - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mu, cov)
}

fn sqrtm_psd(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    // Symmetric eigendecomposition with negative eigenvalues clamped at 0.
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Standard Fréchet form: `|mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// Each set needs at least `dim + 1` rows so the covariances have full-rank
/// sample support.
pub fn frechet_distance(a: &Array2<f32>, b: &Array2<f32>) -> Result<FrechetResult> {
    let (na, da) = a.dim();
    let (nb, db) = b.dim();
    if da != db {
        return Err(Error::Shape(format!(
            "feature dims differ: {da} vs {db}"
        )));
    }
    if na < da + 1 || nb < db + 1 {
        return Err(Error::Parameter(format!(
            "need at least dim+1 = {} samples per set, got {na} and {nb}",
            da + 1
        )));
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);

    let ca = nalgebra::DMatrix::from_fn(da, da, |i, j| cov_a[(i, j)]);
    let cb = nalgebra::DMatrix::from_fn(da, da, |i, j| cov_b[(i, j)]);
    let sa = sqrtm_psd(&ca);
    // Tr sqrt(S1 S2) via the symmetric similarity sqrt(S1) S2 sqrt(S1).
    let mut inner = &sa * &cb * &sa;
    // Symmetrize against numerical drift before the eigensolve.
    for i in 0..da {
        for j in (i + 1)..da {
            let v = 0.5 * (inner[(i, j)] + inner[(j, i)]);
            inner[(i, j)] = v;
            inner[(j, i)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();

    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..da).map(|i| cov_a[(i, i)]).sum();
    let tr_b: f64 = (0..da).map(|i| cov_b[(i, i)]).sum();
    let distance = (mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0);
    Ok(FrechetResult {
        distance,
        n_a: na,
        n_b: nb,
        stage: 2,
    })
}

/// Bring a batch to the extractor's canonical resolution by bilinear 2x
/// upsampling (base-model outputs are half-resolution).
pub fn to_extractor_res(images: &ArrayD<f32>, target_hw: usize) -> Result<ArrayD<f32>> {
    let hw = images.shape()[2];
    if hw == target_hw {
        return Ok(images.clone());
    }
    if hw * 2 != target_hw {
        return Err(Error::Shape(format!(
            "cannot lift {hw}x{hw} images to {target_hw}x{target_hw}"
        )));
    }
    let n = images.shape()[0];
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, 3, target_hw, target_hw]));
    for (i, img) in images.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&bilinear_up2x(&img.to_owned().into_dyn()));
    }
    Ok(out)
}

/// Fréchet distance between pooled deepest-stage features of two image sets.
pub fn toy_fid(
    fx: &FeatureExtractor,
    fx_ps: &ParamSet,
    images_a: &ArrayD<f32>,
    images_b: &ArrayD<f32>,
) -> Result<FrechetResult> {
    let a = fx.pooled_features(fx_ps, &to_extractor_res(images_a, fx.input_hw)?)?;
    let b = fx.pooled_features(fx_ps, &to_extractor_res(images_b, fx.input_hw)?)?;
    frechet_distance(&a, &b)
}

/// Classify each pixel to the nearest canonical color and report the mean
/// IoU against the conditioning mask over its foreground classes.
pub fn mask_alignment(image: &ArrayD<f32>, mask: &ndarray::Array2<u8>) -> f64 {
    use crate::data::{BG_PALETTES, CLASS_COLORS};
    let v = image
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("[3,H,W]");
    let (_, h, w) = v.dim();

    // Bring the mask to the image resolution by 2x2 majority vote.
    let mask_at = |y: usize, x: usize| -> u8 {
        if mask.dim().0 == h {
            mask[(y, x)]
        } else {
            debug_assert_eq!(mask.dim().0, 2 * h);
            let mut counts = [0u8; 5];
            for dy in 0..2 {
                for dx in 0..2 {
                    counts[mask[(2 * y + dy, 2 * x + dx)] as usize] += 1;
                }
            }
            let mut best = 0u8;
            let mut best_n = 0u8;
            for (c, &n) in counts.iter().enumerate() {
                if n > best_n {
                    best_n = n;
                    best = c as u8;
                }
            }
            best
        }
    };

    // Candidate colors: all background palettes map to class 0.
    let mut candidates: Vec<([f32; 3], u8)> = Vec::new();
    for p in BG_PALETTES {
        candidates.push((
            [
                p[0] as f32 / 127.5 - 1.0,
                p[1] as f32 / 127.5 - 1.0,
                p[2] as f32 / 127.5 - 1.0,
            ],
            0,
        ));
    }
    for (ci, c) in CLASS_COLORS.iter().enumerate() {
        candidates.push((
            [
                c[0] as f32 / 127.5 - 1.0,
                c[1] as f32 / 127.5 - 1.0,
                c[2] as f32 / 127.5 - 1.0,
            ],
            ci as u8 + 1,
        ));
    }

    let mut inter = [0u64; 5];
    let mut union = [0u64; 5];
    let mut present = [false; 5];
    for y in 0..h {
        for x in 0..w {
            let px = [v[(0, y, x)], v[(1, y, x)], v[(2, y, x)]];
            let mut best = 0u8;
            let mut best_d = f32::INFINITY;
            for (col, cls) in &candidates {
                let d = (px[0] - col[0]).powi(2)
                    + (px[1] - col[1]).powi(2)
                    + (px[2] - col[2]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = *cls;
                }
            }
            let truth = mask_at(y, x);
            present[truth as usize] = true;
            for c in 1..5u8 {
                let p = best == c;
                let t = truth == c;
                if p && t {
                    inter[c as usize] += 1;
                }
                if p || t {
                    union[c as usize] += 1;
                }
            }
        }
    }

    let mut sum = 0.0f64;
    let mut n = 0usize;
    for c in 1..5usize {
        if present[c] {
            let iou = if union[c] == 0 {
                0.0
            } else {
                inter[c] as f64 / union[c] as f64
            };
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        // Empty conditioning mask: score background agreement instead.
        let mut agree = 0u64;
        for y in 0..h {
            for x in 0..w {
                let px = [v[(0, y, x)], v[(1, y, x)], v[(2, y, x)]];
                let mut best = 0u8;
                let mut best_d = f32::INFINITY;
                for (col, cls) in &candidates {
                    let d = (px[0] - col[0]).powi(2)
                        + (px[1] - col[1]).powi(2)
                        + (px[2] - col[2]).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = *cls;
                    }
                }
                if best == 0 {
                    agree += 1;
                }
            }
        }
        return agree as f64 / (h * w) as f64;
    }
    sum / n as f64
}

/// Saturation diagnostics of one image in canonical range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationMetrics {
    /// Fraction of pixels within 1/255 of the range limits.
    pub clipped_fraction: f64,
    /// Standard deviation of luminance.
    pub contrast: f64,
    /// Mean absolute deviation of the channel means from zero.
    pub channel_offset: f64,
}

pub fn saturation_metrics(image: &ArrayD<f32>) -> SaturationMetrics {
    let v = image
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("[3,H,W]");
    let (_, h, w) = v.dim();
    let limit = 1.0 - 1.0 / 255.0;
    let mut clipped = 0u64;
    let mut lum_sum = 0.0f64;
    let mut lum_sumsq = 0.0f64;
    let mut chan = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            let px = [v[(0, y, x)], v[(1, y, x)], v[(2, y, x)]];
            if px.iter().any(|&c| c.abs() >= limit) {
                clipped += 1;
            }
            let lum = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            lum_sum += lum;
            lum_sumsq += lum * lum;
            for c in 0..3 {
                chan[c] += px[c] as f64;
            }
        }
    }
    let n = (h * w) as f64;
    let mean = lum_sum / n;
    let var = (lum_sumsq / n - mean * mean).max(0.0);
    SaturationMetrics {
        clipped_fraction: clipped as f64 / n,
        contrast: var.sqrt(),
        channel_offset: chan.iter().map(|c| (c / n).abs()).sum::<f64>() / 3.0,
    }
}

/// One metrics CSV row: `metric,model,split,value,seed`.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub metric: String,
    pub model: String,
    pub split: String,
    pub value: f64,
    pub seed: u64,
}

pub fn metrics_to_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from("metric,model,split,value,seed\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.metric, r.model, r.split, r.value, r.seed
        ));
    }
    s
}

/// Tile a batch `[N,3,H,W]` into one `[3, rows*H, cols*W]` grid image.
pub fn montage(images: &ArrayD<f32>, cols: usize) -> ArrayD<f32> {
    let n = images.shape()[0];
    let h = images.shape()[2];
    let w = images.shape()[3];
    let rows = n.div_ceil(cols);
    let mut out = ArrayD::<f32>::from_elem(IxDyn(&[3, rows * h, cols * w]), -1.0);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, r * h + y, c * w + x]] = images[[i, ch, y, x]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, render};
    use crate::models::ExtractorArch;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss_features(n: usize, d: usize, mean: f32, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| {
            mean + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32
        })
    }

    #[test]
    fn frechet_identical_sets_zero_and_symmetric() {
        let a = gauss_features(40, 6, 0.0, 1);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d.distance < 1e-8, "self distance {}", d.distance);

        let b = gauss_features(50, 6, 0.5, 2);
        let ab = frechet_distance(&a, &b).unwrap().distance;
        let ba = frechet_distance(&b, &a).unwrap().distance;
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
    }

    #[test]
    fn frechet_shifted_gaussians_approach_closed_form() {
        // 1-D N(0,1) vs N(1,1): distance -> (mu difference)^2 = 1.
        let a = gauss_features(20_000, 1, 0.0, 3);
        let b = gauss_features(20_000, 1, 1.0, 4);
        let d = frechet_distance(&a, &b).unwrap().distance;
        assert!((d - 1.0).abs() < 0.05, "distance {d}");
    }

    #[test]
    fn frechet_insufficient_samples_error() {
        let a = gauss_features(6, 6, 0.0, 5);
        let b = gauss_features(40, 6, 0.0, 6);
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn frechet_invariant_to_sample_order() {
        let a = gauss_features(30, 4, 0.0, 7);
        let b = gauss_features(30, 4, 0.3, 8);
        let mut a_rev = a.clone();
        for i in 0..15 {
            let top = a.row(i).to_owned();
            let bot = a.row(29 - i).to_owned();
            a_rev.row_mut(i).assign(&bot);
            a_rev.row_mut(29 - i).assign(&top);
        }
        let d1 = frechet_distance(&a, &b).unwrap().distance;
        let d2 = frechet_distance(&a_rev, &b).unwrap().distance;
        assert!((d1 - d2).abs() < 1e-9);
    }

    #[test]
    fn rendered_image_aligns_with_own_mask() {
        for seed in 0..20u64 {
            let s = render(&generate_scene(seed));
            let iou = mask_alignment(&s.image, &s.mask);
            assert!(iou > 0.95, "seed {seed}: IoU {iou}");
        }
    }

    #[test]
    fn uniform_background_zero_foreground_iou() {
        let s = render(&generate_scene(3));
        // Ensure the scene has at least one object.
        assert!(s.mask.iter().any(|&m| m > 0));
        let uniform = ArrayD::from_elem(IxDyn(&[3, 32, 32]), crate::data::BG_PALETTES[0][0] as f32 / 127.5 - 1.0);
        let iou = mask_alignment(&uniform, &s.mask);
        assert_eq!(iou, 0.0);
    }

    #[test]
    fn iou_is_bounded_and_halfres_images_supported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 30..40u64 {
            let s = render(&generate_scene(seed));
            let noise = randn(&[3, 16, 16], 0.5, &mut rng);
            let iou = mask_alignment(&noise, &s.mask);
            assert!((0.0..=1.0).contains(&iou));
            let iou16 = mask_alignment(&s.image16(), &s.mask);
            assert!((0.0..=1.0).contains(&iou16));
            assert!(iou16 > 0.5, "half-res self IoU {iou16}");
        }
    }

    #[test]
    fn saturation_extremes() {
        let gray = ArrayD::<f32>::zeros(IxDyn(&[3, 8, 8]));
        let m = saturation_metrics(&gray);
        assert_eq!(m.clipped_fraction, 0.0);
        assert_eq!(m.contrast, 0.0);
        assert_eq!(m.channel_offset, 0.0);

        let white = ArrayD::<f32>::from_elem(IxDyn(&[3, 8, 8]), 1.0);
        let m = saturation_metrics(&white);
        assert_eq!(m.clipped_fraction, 1.0);
    }

    #[test]
    fn toy_fid_runs_on_extractor_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let arch = ExtractorArch {
            widths: vec![4, 8, 8],
            input_hw: 32,
            groups: 4,
            num_classes: 4,
        };
        let fx = FeatureExtractor::new(&arch);
        let mut ps = ParamSet::new();
        fx.init_params(&mut ps, &mut rng);
        let a = randn(&[12, 3, 32, 32], 1.0, &mut rng);
        let b16 = randn(&[12, 3, 16, 16], 1.0, &mut rng);
        let d = toy_fid(&fx, &ps, &a, &b16).unwrap();
        assert!(d.distance.is_finite());
        let same = toy_fid(&fx, &ps, &a, &a).unwrap();
        assert!(same.distance < 1e-8);
    }

    #[test]
    fn montage_tiles_in_row_major_order() {
        let mut imgs = ArrayD::<f32>::zeros(IxDyn(&[3, 3, 2, 2]));
        imgs.index_axis_mut(Axis(0), 1).fill(0.5);
        imgs.index_axis_mut(Axis(0), 2).fill(1.0);
        let grid = montage(&imgs, 2);
        assert_eq!(grid.shape(), &[3, 4, 4]);
        assert_eq!(grid[[0, 0, 0]], 0.0);
        assert_eq!(grid[[0, 0, 2]], 0.5);
        assert_eq!(grid[[0, 2, 0]], 1.0);
        // Padding cell stays at the canonical floor.
        assert_eq!(grid[[0, 2, 2]], -1.0);
    }
}
