//! Synthetic sensor noise, depth-hole inpainting, and random training
//! augmentation. Images are `H x W x C` arrays with values in `[0, 1]`.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::Sample;
use crate::error::{Error, Result};
use crate::seeds;

/// Side length of both smoothing kernels.
pub const KERNEL: usize = 9;

/// Which synthetic noises to apply, how strongly, and how often.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePolicy {
    pub p_gaussian: f64,
    pub p_salt_pepper: f64,
    pub p_blur: f64,
    pub p_bilateral: f64,
    pub gaussian_sigma: f32,
    pub salt_pepper_rate: f32,
    pub blur_kernel: (usize, usize),
    pub bilateral_sigma_spatial: f32,
    pub bilateral_sigma_range: f32,
    pub apply_to_depth: bool,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self {
            p_gaussian: 0.25,
            p_salt_pepper: 0.25,
            p_blur: 0.25,
            p_bilateral: 0.25,
            gaussian_sigma: 0.03,
            salt_pepper_rate: 0.02,
            blur_kernel: (KERNEL, KERNEL),
            bilateral_sigma_spatial: 3.0,
            bilateral_sigma_range: 0.1,
            apply_to_depth: true,
        }
    }
}

impl NoisePolicy {
    /// Every noise disabled.
    pub fn off() -> Self {
        Self {
            p_gaussian: 0.0,
            p_salt_pepper: 0.0,
            p_blur: 0.0,
            p_bilateral: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_gaussian", self.p_gaussian),
            ("p_salt_pepper", self.p_salt_pepper),
            ("p_blur", self.p_blur),
            ("p_bilateral", self.p_bilateral),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.blur_kernel != (KERNEL, KERNEL) {
            return Err(Error::InvalidParam(format!(
                "blur kernel must be ({KERNEL}, {KERNEL}), got {:?}",
                self.blur_kernel
            )));
        }
        if !(0.0..=1.0).contains(&self.salt_pepper_rate) {
            return Err(Error::InvalidParam("salt_pepper_rate outside [0, 1]".into()));
        }
        for (name, s) in [
            ("gaussian_sigma", self.gaussian_sigma),
            ("bilateral_sigma_spatial", self.bilateral_sigma_spatial),
            ("bilateral_sigma_range", self.bilateral_sigma_range),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Geometric and photometric augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// `(height, width)` of the random crop.
    pub crop: (usize, usize),
    pub gamma_range: (f32, f32),
    pub gamma_probability: f64,
    pub flip_probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop: (240, 240),
            gamma_range: (0.7, 1.5),
            gamma_probability: 0.5,
            flip_probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// No-op policy for a given frame size.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop: (height, width),
            gamma_range: (1.0, 1.0),
            gamma_probability: 0.0,
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParam(format!("gamma range {:?} is not positive", self.gamma_range)));
        }
        for p in [self.gamma_probability, self.flip_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::InvalidParam("crop size is zero".into()));
        }
        Ok(())
    }
}

/// Additive `N(0, sigma)` per element, clamped to `[0, 1]`.
pub fn add_gaussian_noise(img: &Array3<f32>, sigma: f32, seed: u64) -> Result<Array3<f32>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParam(format!("gaussian sigma {sigma}")));
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("gaussian")]);
    let normal = Normal::new(0.0f32, sigma).expect("validated sigma");
    Ok(img.mapv(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)))
}

/// Each pixel independently becomes black or white (equal odds) with
/// probability `p`, across all channels.
pub fn add_salt_pepper(img: &Array3<f32>, p: f32, seed: u64) -> Result<Array3<f32>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParam(format!("salt-and-pepper rate {p} outside [0, 1]")));
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("salt_pepper")]);
    let mut out = img.clone();
    for mut px in out.lanes_mut(Axis(2)) {
        let hit = rng.random::<f32>() < p;
        let white = rng.random::<bool>();
        if hit {
            px.fill(if white { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

fn check_kernel_fits(img: &Array3<f32>) -> Result<()> {
    let (h, w, _) = img.dim();
    if h < KERNEL || w < KERNEL {
        return Err(Error::InvalidParam(format!(
            "image {h}x{w} smaller than the {KERNEL}x{KERNEL} kernel"
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps for the 9-tap kernel. Sigma follows the
/// usual size-derived rule `0.3 * ((n - 1) / 2 - 1) + 0.8`.
pub fn gaussian_taps() -> [f32; KERNEL] {
    let sigma = 0.3 * ((KERNEL as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (KERNEL / 2) as f64;
    let mut taps = [0.0f64; KERNEL];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| (t / sum) as f32)
}

/// Separable 9x9 Gaussian blur with reflect borders.
pub fn gaussian_blur(img: &Array3<f32>) -> Result<Array3<f32>> {
    check_kernel_fits(img)?;
    let taps = gaussian_taps();
    let (h, w, c) = img.dim();
    let r = (KERNEL / 2) as isize;
    let mut tmp = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * img[[y, reflect(x as isize + k as isize - r, w), ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * tmp[[reflect(y as isize + k as isize - r, h), x, ch]];
                }
                out[[y, x, ch]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// 9x9 edge-preserving bilateral filter with reflect borders. The range term
/// uses the Euclidean distance over all channels.
pub fn bilateral_filter(img: &Array3<f32>, sigma_spatial: f32, sigma_range: f32) -> Result<Array3<f32>> {
    check_kernel_fits(img)?;
    if !(sigma_spatial > 0.0 && sigma_range > 0.0) {
        return Err(Error::InvalidParam("bilateral sigmas must be positive".into()));
    }
    let (h, w, c) = img.dim();
    let r = (KERNEL / 2) as isize;
    let mut spatial = [[0.0f32; KERNEL]; KERNEL];
    for (dy, row) in spatial.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (fy, fx) = ((dy as isize - r) as f32, (dx as isize - r) as f32);
            *v = (-(fx * fx + fy * fy) / (2.0 * sigma_spatial * sigma_spatial)).exp();
        }
    }
    let range_k = -1.0 / (2.0 * sigma_range * sigma_range);
    let mut out = Array3::zeros((h, w, c));
    let mut acc = vec![0.0f32; c];
    for y in 0..h {
        for x in 0..w {
            acc.fill(0.0);
            let mut norm = 0.0;
            for (dy, row) in spatial.iter().enumerate() {
                let yy = reflect(y as isize + dy as isize - r, h);
                for (dx, &sw) in row.iter().enumerate() {
                    let xx = reflect(x as isize + dx as isize - r, w);
                    let mut dist = 0.0;
                    for ch in 0..c {
                        let d = img[[yy, xx, ch]] - img[[y, x, ch]];
                        dist += d * d;
                    }
                    let wgt = sw * (range_k * dist).exp();
                    norm += wgt;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wgt * img[[yy, xx, ch]];
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out[[y, x, ch]] = (a / norm).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Convergence threshold of the diffusion fill, meters.
pub const INPAINT_TOLERANCE: f32 = 1e-4;
pub const INPAINT_MAX_ITERS: usize = 500;

/// Fill holes by iterated 4-neighbour averaging, starting from the mean of
/// the valid depths. Valid pixels are never written.
pub fn inpaint_depth(depth: &Array2<f32>, hole_mask: &Array2<bool>) -> Result<Array2<f32>> {
    if depth.dim() != hole_mask.dim() {
        return Err(Error::Shape("depth and hole mask differ in size".into()));
    }
    let valid: Vec<f32> = depth
        .iter()
        .zip(hole_mask)
        .filter(|(_, &m)| !m)
        .map(|(&d, _)| d)
        .collect();
    if valid.is_empty() {
        return Err(Error::NoValidDepth);
    }
    let holes: Vec<(usize, usize)> = hole_mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(ix, _)| ix)
        .collect();
    let mut out = depth.clone();
    if holes.is_empty() {
        return Ok(out);
    }
    let init = (valid.iter().map(|&d| d as f64).sum::<f64>() / valid.len() as f64) as f32;
    for &ix in &holes {
        out[ix] = init;
    }
    let (h, w) = depth.dim();
    let mut next = vec![0.0f32; holes.len()];
    for _ in 0..INPAINT_MAX_ITERS {
        let mut max_change = 0.0f32;
        for (slot, &(y, x)) in next.iter_mut().zip(&holes) {
            let mut sum = 0.0;
            let mut n = 0.0;
            if y > 0 {
                sum += out[[y - 1, x]];
                n += 1.0;
            }
            if y + 1 < h {
                sum += out[[y + 1, x]];
                n += 1.0;
            }
            if x > 0 {
                sum += out[[y, x - 1]];
                n += 1.0;
            }
            if x + 1 < w {
                sum += out[[y, x + 1]];
                n += 1.0;
            }
            *slot = sum / n;
            max_change = max_change.max((*slot - out[[y, x]]).abs());
        }
        for (&v, &ix) in next.iter().zip(&holes) {
            out[ix] = v;
        }
        if max_change < INPAINT_TOLERANCE {
            break;
        }
    }
    Ok(out)
}

/// Inpaint a sample's depth in place if it has holes.
pub fn fill_sample_holes(sample: &mut Sample) -> Result<()> {
    if sample.has_holes() {
        sample.depth = inpaint_depth(&sample.depth, &sample.hole_mask)?;
        sample.refresh_hole_mask();
    }
    Ok(())
}

fn apply_noises(
    img: &Array3<f32>,
    noise: &NoisePolicy,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<Option<Array3<f32>>> {
    let picks = [
        rng.random_bool(noise.p_gaussian),
        rng.random_bool(noise.p_salt_pepper),
        rng.random_bool(noise.p_blur),
        rng.random_bool(noise.p_bilateral),
    ];
    if !picks.iter().any(|&p| p) {
        return Ok(None);
    }
    let mut img = img.clone();
    if picks[0] {
        img = add_gaussian_noise(&img, noise.gaussian_sigma, seeds::derive(seed, &[1]))?;
    }
    if picks[1] {
        img = add_salt_pepper(&img, noise.salt_pepper_rate, seeds::derive(seed, &[2]))?;
    }
    if picks[2] {
        img = gaussian_blur(&img)?;
    }
    if picks[3] {
        img = bilateral_filter(&img, noise.bilateral_sigma_spatial, noise.bilateral_sigma_range)?;
    }
    Ok(Some(img))
}

/// Random crop, horizontal flip, gamma on rgb, then each enabled noise.
///
/// Geometry applies to every plane together; labels are only cropped and
/// flipped. Depth noise works on depth normalized by `max_depth`, so pepper
/// pixels become zero-depth holes (the hole mask is refreshed).
pub fn random_augment(
    sample: &Sample,
    noise: &NoisePolicy,
    aug: &AugmentPolicy,
    max_depth: f32,
    seed: u64,
) -> Result<Sample> {
    noise.validate()?;
    aug.validate()?;
    let (h, w) = sample.depth.dim();
    let (ch, cw) = aug.crop;
    if ch > h || cw > w {
        return Err(Error::InvalidParam(format!("crop {ch}x{cw} larger than frame {h}x{w}")));
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("augment")]);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let flip = rng.random_bool(aug.flip_probability);
    let gamma = if rng.random_bool(aug.gamma_probability) {
        let (lo, hi) = aug.gamma_range;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    } else {
        1.0
    };

    let ys = y0..y0 + ch;
    let xs = x0..x0 + cw;
    let mut rgb = sample.rgb.slice(ndarray::s![ys.clone(), xs.clone(), ..]).to_owned();
    let mut depth = sample.depth.slice(ndarray::s![ys.clone(), xs.clone()]).to_owned();
    let mut label = sample.label.slice(ndarray::s![ys, xs]).to_owned();
    if flip {
        rgb.invert_axis(Axis(1));
        depth.invert_axis(Axis(1));
        label.invert_axis(Axis(1));
    }
    if gamma != 1.0 {
        rgb.mapv_inplace(|v| v.powf(gamma));
    }
    if let Some(noised) = apply_noises(&rgb, noise, seeds::derive(seed, &[seeds::tag("rgb")]), &mut rng)? {
        rgb = noised;
    }
    if noise.apply_to_depth {
        let plane = depth.mapv(|d| (d / max_depth).clamp(0.0, 1.0)).insert_axis(Axis(2));
        if let Some(noised) = apply_noises(&plane, noise, seeds::derive(seed, &[seeds::tag("depth")]), &mut rng)? {
            depth = noised.index_axis_move(Axis(2), 0).mapv(|v| v * max_depth);
        }
    }
    Ok(Sample::new(sample.id.clone(), sample.domain, rgb, depth, label))
}

/// Per-pixel label map `H x W` flattened to class indices.
pub fn label_indices(label: &Array2<u8>) -> Vec<usize> {
    label.iter().map(|&l| l as usize).collect()
}
