//! Mask acquisition and manipulation.
//!
//! External segmenters (e.g. SAM tooling) plug in through the 0/255 PNG
//! file provider; the synthetic provider recovers ground truth through the
//! factor oracle.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::io;
use crate::synthdata;
use crate::types::{ImageTensor, Mask, MaskSource, ResolutionTag};

/// Where masks come from: the analytic oracle or an external mask file.
#[derive(Debug, Clone)]
pub enum MaskProvider {
    SyntheticOracle,
    File(PathBuf),
}

impl From<&MaskSource> for MaskProvider {
    fn from(src: &MaskSource) -> Self {
        match src {
            MaskSource::SyntheticOracle => MaskProvider::SyntheticOracle,
            MaskSource::File(p) => MaskProvider::File(p.clone()),
        }
    }
}

/// Binary object mask for `image` at image resolution.
pub fn get_mask(provider: &MaskProvider, image: &ImageTensor) -> Result<Mask> {
    match provider {
        MaskProvider::File(path) => {
            let m = io::mask_from_png(path, ResolutionTag::Image)?;
            if m.height() != image.height() || m.width() != image.width() {
                return Err(Error::shape(
                    format!("{}x{} mask", image.height(), image.width()),
                    format!("{}x{} from {}", m.height(), m.width(), path.display()),
                ));
            }
            Ok(m)
        }
        MaskProvider::SyntheticOracle => oracle_foreground(image),
    }
}

/// Foreground component of the factor oracle's segmentation, as a mask.
pub fn oracle_foreground(image: &ImageTensor) -> Result<Mask> {
    let report = synthdata::factor_oracle(image)?;
    let n = image.height() * image.width();
    match report.factors() {
        None => Mask::new(vec![0.0; n], image.height(), image.width(), ResolutionTag::Image),
        Some(_) => {
            // Re-run the per-pixel segmentation the oracle used: a pixel is
            // foreground when some fg palette color beats the background.
            let bg = report.bg.rgb();
            let mut data = vec![0.0; n];
            for y in 0..image.height() {
                for x in 0..image.width() {
                    let px = image.pixel(y, x);
                    let dbg = (px[0] - bg[0]).powi(2) + (px[1] - bg[1]).powi(2) + (px[2] - bg[2]).powi(2);
                    let dfg = synthdata::COLORS
                        .iter()
                        .map(|c| {
                            let r = c.rgb();
                            (px[0] - r[0]).powi(2) + (px[1] - r[1]).powi(2) + (px[2] - r[2]).powi(2)
                        })
                        .fold(f64::INFINITY, f64::min);
                    if dfg < dbg {
                        data[y * image.width() + x] = 1.0;
                    }
                }
            }
            Mask::new(data, image.height(), image.width(), ResolutionTag::Image)
        }
    }
}

/// Transfers an image-resolution mask onto the latent grid: area-average
/// downsample, then threshold with ties (exactly 0.5) going to foreground.
/// Identity when the shapes already match.
pub fn to_latent_res(mask: &Mask, latent_h: usize, latent_w: usize) -> Result<Mask> {
    if mask.height() == latent_h && mask.width() == latent_w {
        let mut m = mask.clone();
        m.resolution_tag = ResolutionTag::Latent;
        return Ok(m);
    }
    if mask.height() % latent_h != 0 || mask.width() % latent_w != 0 {
        return Err(Error::shape(
            format!("integer downsample factor to {latent_h}x{latent_w}"),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let fy = mask.height() / latent_h;
    let fx = mask.width() / latent_w;
    let mut data = vec![0.0; latent_h * latent_w];
    for ly in 0..latent_h {
        for lx in 0..latent_w {
            let mut sum = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    sum += mask.get(ly * fy + dy, lx * fx + dx);
                }
            }
            let avg = sum / (fy * fx) as f64;
            if avg >= 0.5 {
                data[ly * latent_w + lx] = 1.0;
            }
        }
    }
    Mask::new(data, latent_h, latent_w, ResolutionTag::Latent)
}

pub fn complement(mask: &Mask) -> Mask {
    let data = mask.data().iter().map(|v| 1.0 - v).collect();
    Mask::new(data, mask.height(), mask.width(), mask.resolution_tag)
        .expect("flipping bits keeps them binary")
}

/// Grows the foreground by Chebyshev radius `r`.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 1.0 {
                continue;
            }
            let y0 = y.saturating_sub(r);
            let x0 = x.saturating_sub(r);
            for ny in y0..=(y + r).min(h - 1) {
                for nx in x0..=(x + r).min(w - 1) {
                    data[ny * w + nx] = 1.0;
                }
            }
        }
    }
    Mask::new(data, h, w, mask.resolution_tag).expect("binary by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_scene, BgStyle, FgColor, FgPosition, FgShape, FgSize, SceneFactors};
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn scene() -> crate::synthdata::SceneSample {
        render_scene(
            SceneFactors {
                fg_shape: FgShape::Square,
                fg_color: FgColor::Red,
                fg_size: FgSize::Large,
                fg_position: FgPosition::Center,
                bg_style: BgStyle::Blue,
            },
            0,
        )
    }

    #[test]
    fn synthetic_provider_matches_ground_truth() {
        let s = scene();
        let m = get_mask(&MaskProvider::SyntheticOracle, &s.image).unwrap();
        assert_eq!(m.data(), s.mask.data());
    }

    #[test]
    fn file_provider_round_trip_and_shape_check() {
        let dir = tempdir().unwrap();
        let s = scene();
        let p = dir.path().join("m.png");
        io::mask_to_png(&s.mask, &p).unwrap();
        let m = get_mask(&MaskProvider::File(p.clone()), &s.image).unwrap();
        assert_eq!(m.data(), s.mask.data());

        // 16x16 file against a 32x32 image is a shape error.
        let small = Mask::ones(16, 16, ResolutionTag::Image);
        let sp = dir.path().join("small.png");
        io::mask_to_png(&small, &sp).unwrap();
        assert!(matches!(
            get_mask(&MaskProvider::File(sp), &s.image),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn latent_transfer_identity_and_all_ones() {
        let s = scene();
        let m = to_latent_res(&s.mask, 32, 32).unwrap();
        assert_eq!(m.data(), s.mask.data());
        assert_eq!(m.resolution_tag, ResolutionTag::Latent);

        let ones = Mask::ones(32, 32, ResolutionTag::Image);
        let down = to_latent_res(&ones, 8, 8).unwrap();
        assert!(down.data().iter().all(|v| *v == 1.0));

        assert!(to_latent_res(&ones, 12, 12).is_err());
    }

    #[test]
    fn checkerboard_downsample_tie_breaks_to_foreground() {
        let data: Vec<f64> = (0..32 * 32)
            .map(|i| {
                let (y, x) = (i / 32, i % 32);
                ((y + x) % 2) as f64
            })
            .collect();
        let m = Mask::new(data, 32, 32, ResolutionTag::Image).unwrap();
        // Every 2x2 block averages exactly 0.5 -> all foreground.
        let down = to_latent_res(&m, 16, 16).unwrap();
        assert!(down.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn complement_is_involutive_and_partitions_coverage() {
        let s = scene();
        let c = complement(&s.mask);
        assert_eq!(complement(&c).data(), s.mask.data());
        assert_eq!(s.mask.coverage() + c.coverage(), 1.0);
    }

    #[test]
    fn dilate_identity_and_monotone() {
        let s = scene();
        assert_eq!(dilate(&s.mask, 0).data(), s.mask.data());
        let d = dilate(&s.mask, 2);
        for (a, b) in s.mask.data().iter().zip(d.data()) {
            assert!(b >= a);
        }
        assert!(d.coverage() > s.mask.coverage());
    }

    proptest! {
        #[test]
        fn complement_involution_holds_for_random_masks(bits in proptest::collection::vec(0u8..=1, 64)) {
            let data: Vec<f64> = bits.iter().map(|b| *b as f64).collect();
            let m = Mask::new(data, 8, 8, ResolutionTag::Image).unwrap();
            let double = complement(&complement(&m));
            prop_assert_eq!(double.data(), m.data());
            prop_assert!((m.coverage() + complement(&m).coverage() - 1.0).abs() == 0.0);
        }

        #[test]
        fn dilation_is_monotone(bits in proptest::collection::vec(0u8..=1, 64), r in 0usize..3) {
            let data: Vec<f64> = bits.iter().map(|b| *b as f64).collect();
            let m = Mask::new(data, 8, 8, ResolutionTag::Image).unwrap();
            let d = dilate(&m, r);
            for (a, b) in m.data().iter().zip(d.data()) {
                prop_assert!(b >= a);
            }
        }
    }
}
