//! Corruption distribution: random affine augmentation for the supervised
//! pipeline and combined affine + zero-mask + Gaussian noise for denoising.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ranges of every corruption type. Geometric ranges are symmetric around
/// the identity transform.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Maximum integer shift per axis, in pixels.
    pub translate_px: u32,
    /// Maximum absolute rotation, in degrees.
    pub rotate_deg: f64,
    /// Maximum absolute horizontal shear coefficient.
    pub skew: f64,
    /// Scale factors are drawn from `[1 − scale, 1 + scale]`.
    pub scale: f64,
    pub zero_mask_fraction: f64,
    pub gaussian_std: f64,
    pub enable_translate: bool,
    pub enable_rotate: bool,
    pub enable_skew: bool,
    pub enable_scale: bool,
    pub enable_zero_mask: bool,
    pub enable_gaussian: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            translate_px: 2,
            rotate_deg: 15.0,
            skew: 0.1,
            scale: 0.15,
            zero_mask_fraction: 0.25,
            gaussian_std: 0.1,
            enable_translate: true,
            enable_rotate: true,
            enable_skew: true,
            enable_scale: true,
            enable_zero_mask: true,
            enable_gaussian: true,
        }
    }
}

impl NoiseConfig {
    /// Every corruption switched off.
    pub fn disabled() -> Self {
        NoiseConfig {
            enable_translate: false,
            enable_rotate: false,
            enable_skew: false,
            enable_scale: false,
            enable_zero_mask: false,
            enable_gaussian: false,
            ..NoiseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.scale) {
            return Err(Error::Argument(format!(
                "scale range must lie in [0, 1) so factors stay positive, got {}",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.zero_mask_fraction) {
            return Err(Error::Argument(format!(
                "zero-mask fraction must lie in [0, 1], got {}",
                self.zero_mask_fraction
            )));
        }
        if self.gaussian_std.is_nan() || self.gaussian_std < 0.0 {
            return Err(Error::Argument(format!(
                "gaussian std must be non-negative, got {}",
                self.gaussian_std
            )));
        }
        if self.rotate_deg.is_nan() || self.rotate_deg < 0.0 || self.skew.is_nan() || self.skew < 0.0 {
            return Err(Error::Argument(
                "rotation and skew ranges must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn any_geometric(&self) -> bool {
        self.enable_translate || self.enable_rotate || self.enable_skew || self.enable_scale
    }
}

/// One concrete affine transform, applied about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    /// Column shift in pixels (positive moves content right).
    pub dx: f64,
    /// Row shift in pixels (positive moves content down).
    pub dy: f64,
    pub rotate_deg: f64,
    pub skew: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        dx: 0.0,
        dy: 0.0,
        rotate_deg: 0.0,
        skew: 0.0,
        scale: 1.0,
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineParams {
            dx,
            dy,
            ..AffineParams::IDENTITY
        }
    }

    pub fn rotation(deg: f64) -> Self {
        AffineParams {
            rotate_deg: deg,
            ..AffineParams::IDENTITY
        }
    }

    /// Draws a transform uniformly within the enabled ranges of `cfg`.
    pub fn sample(cfg: &NoiseConfig, rng: &mut Rng) -> Self {
        let t = i64::from(cfg.translate_px);
        let mut p = AffineParams::IDENTITY;
        if cfg.enable_translate {
            p.dx = rng.int_inclusive(-t, t) as f64;
            p.dy = rng.int_inclusive(-t, t) as f64;
        }
        if cfg.enable_rotate {
            p.rotate_deg = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg);
        }
        if cfg.enable_skew {
            p.skew = rng.uniform(-cfg.skew, cfg.skew);
        }
        if cfg.enable_scale {
            p.scale = rng.uniform(1.0 - cfg.scale, 1.0 + cfg.scale);
        }
        p
    }

    pub fn is_identity(&self) -> bool {
        *self == AffineParams::IDENTITY
    }

    /// Linear part `R(θ)·Shear(s)·Scale(k)` acting on `(x, y)` column vectors.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = self.rotate_deg.to_radians().sin_cos();
        let k = self.scale;
        let s = self.skew;
        // [[cos, -sin], [sin, cos]] · [[1, s], [0, 1]] · k
        [
            [cos * k, (cos * s - sin) * k],
            [sin * k, (sin * s + cos) * k],
        ]
    }
}

/// Warps every channel of a `[C, H, W]` image by `params` using inverse
/// mapping and bilinear sampling; pixels sampled from outside are 0.
pub fn apply_affine(image: &Tensor, params: &AffineParams) -> Result<Tensor> {
    image.expect_rank(3, "affine warp")?;
    if params.is_identity() {
        return Ok(image.clone());
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let m = params.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::Argument("affine transform is singular".into()));
    }
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; image.len()];
    let src = image.data();
    for row in 0..h {
        for col in 0..w {
            let ux = col as f64 - cx - params.dx;
            let uy = row as f64 - cy - params.dy;
            let sx = inv[0][0] * ux + inv[0][1] * uy + cx;
            let sy = inv[1][0] * ux + inv[1][1] * uy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let mut v = 0.0;
                for &(x, y, wt) in &taps {
                    if wt != 0.0 && x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                        v += wt * plane[y as usize * w + x as usize];
                    }
                }
                out[ch * h * w + row * w + col] = v;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Random geometric augmentation of a single `[C, H, W]` image.
pub fn augment_geometric(image: &Tensor, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Tensor> {
    if !cfg.any_geometric() {
        image.expect_rank(3, "augmentation")?;
        return Ok(image.clone());
    }
    apply_affine(image, &AffineParams::sample(cfg, rng))
}

/// Denoising corruption: affine warp, then zero-masking, then additive
/// Gaussian noise. The input is left untouched and serves as the clean
/// reconstruction target.
pub fn corrupt_for_denoising(image: &Tensor, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Tensor> {
    let mut out = augment_geometric(image, cfg, rng)?;
    if cfg.enable_zero_mask && cfg.zero_mask_fraction > 0.0 {
        for x in out.data_mut() {
            if rng.bernoulli(cfg.zero_mask_fraction) {
                *x = 0.0;
            }
        }
    }
    if cfg.enable_gaussian && cfg.gaussian_std > 0.0 {
        for x in out.data_mut() {
            *x += cfg.gaussian_std * rng.standard_normal();
        }
    }
    Ok(out)
}

fn per_sample(
    batch: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    batch.expect_rank(4, "batch corruption")?;
    let items = (0..batch.shape()[0])
        .map(|i| f(&batch.sample(i)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// [`augment_geometric`] applied independently to each image of `[B, C, H, W]`.
pub fn augment_batch(batch: &Tensor, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Tensor> {
    if !cfg.any_geometric() {
        return Ok(batch.clone());
    }
    per_sample(batch, |x| augment_geometric(x, cfg, rng))
}

/// [`corrupt_for_denoising`] applied independently to each image.
pub fn corrupt_batch(batch: &Tensor, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Tensor> {
    per_sample(batch, |x| corrupt_for_denoising(x, cfg, rng))
}
