//! Paired flips and quarter-turn rotations of image and mask.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rotate: true,
        }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        hflip: false,
        vflip: false,
        rotate: false,
    };
}

/// A flip/rotate combination. Flips are applied first, then
/// `quarter_turns` counter-clockwise 90° rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    /// Each enabled flip fires with probability ½; the rotation is uniform
    /// over `{0°, 90°, 180°, 270°}`. Disabled parts consume no randomness.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: AugmentConfig) -> Self {
        Self {
            hflip: cfg.hflip && rng.random_bool(0.5),
            vflip: cfg.vflip && rng.random_bool(0.5),
            quarter_turns: if cfg.rotate { rng.random_range(0..4) } else { 0 },
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Applies the transform to a `C×H×W` tensor.
    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.dims3()?;
        let turns = self.quarter_turns % 4;
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    // pre-rotation coordinates of output pixel (i, j)
                    let (mut si, mut sj) = match turns {
                        0 => (i, j),
                        1 => (j, w - 1 - i),
                        2 => (h - 1 - i, w - 1 - j),
                        _ => (h - 1 - j, i),
                    };
                    if self.vflip {
                        si = h - 1 - si;
                    }
                    if self.hflip {
                        sj = w - 1 - sj;
                    }
                    out[(ch * oh + i) * ow + j] = src[(ch * h + si) * w + sj];
                }
            }
        }
        Tensor::new(&[c, oh, ow], out)
    }
}

/// Draws one transform and applies it to both tensors.
pub fn augment<T: Float, R: Rng + ?Sized>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    rng: &mut R,
    cfg: AugmentConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(shape_err!("image {:?} and mask {:?} are not aligned", image.shape(), mask.shape()));
    }
    let t = Transform::sample(rng, cfg);
    if t.is_identity() {
        return Ok((image.clone(), mask.clone()));
    }
    Ok((t.apply(image)?, t.apply(mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Tensor<f64> {
        Tensor::new(&[1, 2, 3], (0..6).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn identity_and_involutions() {
        let x = grid();
        assert_eq!(Transform::default().apply(&x).unwrap(), x);
        let h = Transform { hflip: true, ..Default::default() };
        assert_eq!(h.apply(&h.apply(&x).unwrap()).unwrap(), x);
        assert_eq!(h.apply(&x).unwrap().data(), &[2., 1., 0., 5., 4., 3.]);
        let v = Transform { vflip: true, ..Default::default() };
        assert_eq!(v.apply(&x).unwrap().data(), &[3., 4., 5., 0., 1., 2.]);
    }

    #[test]
    fn quarter_turn() {
        // [[0 1 2], [3 4 5]] turned 90° counter-clockwise is [[2 5], [1 4], [0 3]]
        let r = Transform { quarter_turns: 1, ..Default::default() };
        let y = r.apply(&grid()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(y.data(), &[2., 5., 1., 4., 0., 3.]);
        let mut z = grid();
        for _ in 0..4 {
            z = r.apply(&z).unwrap();
        }
        assert_eq!(z, grid());
    }

    #[test]
    fn disabled_config_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = grid();
        let (a, b) = augment(&x, &x, &mut rng, AugmentConfig::NONE).unwrap();
        assert_eq!((a, b), (x.clone(), x));
    }

    #[test]
    fn image_and_mask_move_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        for _ in 0..20 {
            let (a, b) = augment(&img, &img, &mut rng, AugmentConfig::default()).unwrap();
            assert_eq!(a, b);
            let mut s: Vec<f64> = a.data().to_vec();
            s.sort_by(f64::total_cmp);
            assert_eq!(s, img.data());
        }
    }
}
