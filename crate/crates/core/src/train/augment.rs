//! Train-time image preprocessing: reflect pad, random crop, horizontal
//! flip, per-channel standardization. The eval path center-crops and
//! standardizes only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::data::ChannelStats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Reflect-padding margin added on every side before cropping.
    pub pad: usize,
    pub flip_prob: f64,
    /// When false, training uses the eval path as well.
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pad: 2,
            flip_prob: 0.5,
            enabled: true,
        }
    }
}

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim("image", s, &[0, 0, 0])),
    }
}

/// Mirror padding without repeating the edge pixel.
pub fn reflect_pad(img: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if pad == 0 {
        return Ok(img.clone());
    }
    if pad >= h || pad >= w {
        return Err(Error::contract(format!(
            "reflect padding {pad} needs images larger than {h}x{w}"
        )));
    }
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        r as usize
    };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = img.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for i in 0..ph {
            let si = reflect(i as isize - pad as isize, h);
            for j in 0..pw {
                let sj = reflect(j as isize - pad as isize, w);
                out.push(src[(ch * h + si) * w + sj]);
            }
        }
    }
    Tensor::new([c, ph, pw], out)
}

pub fn crop(img: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if top + height > h || left + width > w {
        return Err(Error::contract(format!(
            "crop {height}x{width} at ({top},{left}) exceeds {h}x{w} image"
        )));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for i in top..top + height {
            let row = (ch * h + i) * w;
            out.extend_from_slice(&src[row + left..row + left + width]);
        }
    }
    Tensor::new([c, height, width], out)
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(img)?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

pub fn standardize(img: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if stats.mean.len() != c {
        return Err(Error::dim("standardize", img.shape(), &[stats.mean.len()]));
    }
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// Preprocessing bound to a dataset's statistics and output size.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: AugmentConfig,
    pub stats: ChannelStats,
    pub out_h: usize,
    pub out_w: usize,
}

impl Pipeline {
    pub fn new(config: AugmentConfig, stats: ChannelStats, out_h: usize, out_w: usize) -> Self {
        Pipeline {
            config,
            stats,
            out_h,
            out_w,
        }
    }

    /// Random crop of the padded image, optional flip, standardization.
    pub fn augment_image(&self, img: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if !self.config.enabled {
            return self.eval_image(img);
        }
        let padded = reflect_pad(img, self.config.pad)?;
        let (_, ph, pw) = dims(&padded)?;
        if self.out_h > ph || self.out_w > pw {
            return Err(Error::contract(format!(
                "crop {}x{} larger than padded image {ph}x{pw}",
                self.out_h, self.out_w
            )));
        }
        let top = rng.random_range(0..=ph - self.out_h);
        let left = rng.random_range(0..=pw - self.out_w);
        let mut out = crop(&padded, top, left, self.out_h, self.out_w)?;
        if rng.random::<f64>() < self.config.flip_prob {
            out = flip_horizontal(&out)?;
        }
        standardize(&out, &self.stats)
    }

    /// Center crop and standardization. The image is reflect-padded first
    /// only when it is smaller than the output size.
    pub fn eval_image(&self, img: &Tensor) -> Result<Tensor> {
        let (_, h, w) = dims(img)?;
        let src = if self.out_h > h || self.out_w > w {
            reflect_pad(img, self.config.pad)?
        } else {
            img.clone()
        };
        let (_, sh, sw) = dims(&src)?;
        if self.out_h > sh || self.out_w > sw {
            return Err(Error::contract(format!(
                "crop {}x{} larger than padded image {sh}x{sw}",
                self.out_h, self.out_w
            )));
        }
        let out = crop(
            &src,
            (sh - self.out_h) / 2,
            (sw - self.out_w) / 2,
            self.out_h,
            self.out_w,
        )?;
        standardize(&out, &self.stats)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn img() -> Tensor {
        Tensor::new([2, 3, 4], (0..24).map(|v| v as f64 / 24.0).collect()).unwrap()
    }

    fn stats() -> ChannelStats {
        ChannelStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        }
    }

    #[test]
    fn same_seed_same_output() {
        let p = Pipeline::new(AugmentConfig::default(), stats(), 3, 4);
        let a = p
            .augment_image(&img(), &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let b = p
            .augment_image(&img(), &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = img();
        assert_eq!(flip_horizontal(&flip_horizontal(&x).unwrap()).unwrap(), x);
        assert_ne!(flip_horizontal(&x).unwrap(), x);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::new([1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = x.reshape([1, 1, 3]).unwrap();
        // Height 1 cannot be padded by reflection.
        assert!(reflect_pad(&x, 1).is_err());
        let x = Tensor::new([1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 4, 5]);
        assert_eq!(&p.data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn eval_path_is_identity_crop() {
        let p = Pipeline::new(AugmentConfig::default(), stats(), 3, 4);
        assert_eq!(p.eval_image(&img()).unwrap(), img());
    }

    #[test]
    fn oversized_crop_rejected() {
        let p = Pipeline::new(
            AugmentConfig {
                pad: 1,
                ..Default::default()
            },
            stats(),
            6,
            7,
        );
        assert!(p
            .augment_image(&img(), &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
        assert!(p.eval_image(&img()).is_err());
    }
}
