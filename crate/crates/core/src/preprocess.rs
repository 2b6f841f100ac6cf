//! Per-slice preparation: z-score normalization, reflect padding to a
//! multiple of 32, axial slice extraction and the inverse crop.

use crate::error::{Error, Result};
use crate::volume::{Ablation, CaseRecord, LabelVolume, Volume3D};

/// Network input sides must be divisible by this (five stride-2 pools).
pub const SIZE_MULTIPLE: usize = 32;

/// A row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Copies the window starting at (`top`, `left`).
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Plane<T> {
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + left..row + left + width]);
        }
        Plane {
            height,
            width,
            data,
        }
    }
}

/// Padding added on each side, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct PadRecord {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadRecord {
    pub fn is_zero(&self) -> bool {
        *self == PadRecord::default()
    }

    /// Splits `total` as evenly as possible, the odd pixel going to the far side.
    pub fn split(total_h: usize, total_w: usize) -> Self {
        PadRecord {
            top: total_h / 2,
            bottom: total_h - total_h / 2,
            left: total_w / 2,
            right: total_w - total_w / 2,
        }
    }
}

/// One axial slice with its optional training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    /// 1 when the source case is post-ablation.
    pub ablation_label: Option<u8>,
    pub case_id: String,
    pub z: usize,
    pub pad: PadRecord,
}

impl Slice2D {
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "slice {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Slice2D {
            height,
            width,
            pixels,
            mask: None,
            ablation_label: None,
            case_id: String::new(),
            z: 0,
            pad: PadRecord::default(),
        })
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.pixels.len() {
            return Err(Error::Shape("mask size differs from pixel count".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn image(&self) -> Plane<f32> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.pixels.clone(),
        }
    }

    pub fn mask_plane(&self) -> Option<Plane<u8>> {
        self.mask.as_ref().map(|m| Plane {
            height: self.height,
            width: self.width,
            data: m.clone(),
        })
    }
}

/// Z-score with population standard deviation; constant slices map to zeros.
pub fn normalize_intensity(s: &Slice2D) -> Slice2D {
    let mut out = s.clone();
    normalize_in_place(&mut out.pixels);
    out
}

pub fn normalize_in_place(pixels: &mut [f32]) {
    let Some(&first) = pixels.first() else {
        return;
    };
    if pixels.iter().all(|&p| p == first) {
        pixels.iter_mut().for_each(|p| *p = 0.0);
        return;
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&p| {
            let d = p as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std == 0.0 {
        pixels.iter_mut().for_each(|p| *p = 0.0);
        return;
    }
    for p in pixels.iter_mut() {
        *p = ((*p as f64 - mean) / std) as f32;
    }
}

/// Maps any integer coordinate into `0..n` by mirroring about the edge
/// samples without repeating them (`[a b c]` extends to `c b [a b c] b a`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reflect-pads a plane by the given record.
pub fn reflect_pad_plane<T: Copy>(p: &Plane<T>, pad: PadRecord) -> Result<Plane<T>> {
    if (pad.top + pad.bottom > 0 && p.height < 2) || (pad.left + pad.right > 0 && p.width < 2) {
        return Err(Error::Shape(format!(
            "reflect padding needs at least 2 samples per padded axis, got {}x{}",
            p.height, p.width
        )));
    }
    let h = p.height + pad.top + pad.bottom;
    let w = p.width + pad.left + pad.right;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = reflect_index(y as isize - pad.top as isize, p.height);
        let row = sy * p.width;
        for x in 0..w {
            let sx = reflect_index(x as isize - pad.left as isize, p.width);
            data.push(p.data[row + sx]);
        }
    }
    Ok(Plane {
        height: h,
        width: w,
        data,
    })
}

/// Constant-pads a plane (masks use 0 so reflected anatomy is background).
pub fn constant_pad_plane<T: Copy>(p: &Plane<T>, pad: PadRecord, value: T) -> Plane<T> {
    let h = p.height + pad.top + pad.bottom;
    let w = p.width + pad.left + pad.right;
    let mut out = Plane::filled(h, w, value);
    for y in 0..p.height {
        let dst = (y + pad.top) * w + pad.left;
        out.data[dst..dst + p.width].copy_from_slice(&p.data[y * p.width..(y + 1) * p.width]);
    }
    out
}

/// Pads image (by reflection) and mask (with background) by `pad`.
pub fn pad_slice(s: &Slice2D, pad: PadRecord) -> Result<Slice2D> {
    if pad.is_zero() {
        return Ok(s.clone());
    }
    let img = reflect_pad_plane(&s.image(), pad)?;
    let mask = s
        .mask_plane()
        .map(|m| constant_pad_plane(&m, pad, 0u8).data);
    Ok(Slice2D {
        height: img.height,
        width: img.width,
        pixels: img.data,
        mask,
        ablation_label: s.ablation_label,
        case_id: s.case_id.clone(),
        z: s.z,
        pad: PadRecord {
            top: s.pad.top + pad.top,
            bottom: s.pad.bottom + pad.bottom,
            left: s.pad.left + pad.left,
            right: s.pad.right + pad.right,
        },
    })
}

pub fn round_up_to_multiple(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Smallest reflect padding making both sides multiples of 32.
pub fn pad_to_multiple_of_32(s: &Slice2D) -> Result<Slice2D> {
    let h = round_up_to_multiple(s.height, SIZE_MULTIPLE);
    let w = round_up_to_multiple(s.width, SIZE_MULTIPLE);
    pad_slice(s, PadRecord::split(h - s.height, w - s.width))
}

/// Removes padding described by `pad` from a prediction plane.
pub fn crop_back<T: Copy>(pred: &Plane<T>, pad: PadRecord) -> Result<Plane<T>> {
    let vert = pad.top + pad.bottom;
    let horiz = pad.left + pad.right;
    if vert >= pred.height || horiz >= pred.width {
        return Err(Error::Integrity(format!(
            "pad record {pad:?} is inconsistent with a {}x{} prediction",
            pred.height, pred.width
        )));
    }
    Ok(pred.window(pad.top, pad.left, pred.height - vert, pred.width - horiz))
}

/// Splits a case into its axial slices (z order), attaching mask and label.
pub fn extract_slices(
    case: &CaseRecord,
    vol: &Volume3D,
    mask: Option<&LabelVolume>,
) -> Result<Vec<Slice2D>> {
    if let Some(m) = mask {
        if m.dims() != vol.dims() {
            return Err(Error::Integrity(format!(
                "case `{}`: mask dims {:?} differ from volume dims {:?}",
                case.case_id,
                m.dims(),
                vol.dims()
            )));
        }
    }
    let [nx, ny, nz] = vol.dims();
    let label = case.ablation.map(Ablation::label);
    Ok((0..nz)
        .map(|z| Slice2D {
            height: ny,
            width: nx,
            pixels: vol.slice_z(z).to_vec(),
            mask: mask.map(|m| m.slice_z(z).to_vec()),
            ablation_label: label,
            case_id: case.case_id.clone(),
            z,
            pad: PadRecord::default(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn case(ablation: Option<Ablation>) -> CaseRecord {
        CaseRecord {
            case_id: "c".into(),
            volume: PathBuf::from("c.avl"),
            mask: None,
            ablation,
        }
    }

    fn moments(p: &[f32]) -> (f64, f64) {
        let n = p.len() as f64;
        let m = p.iter().map(|&v| v as f64).sum::<f64>() / n;
        let v = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn constant_slice_normalizes_to_zero() {
        let s = Slice2D::from_pixels(3, 3, vec![5.0; 9]).unwrap();
        assert!(normalize_intensity(&s).pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn two_point_slice() {
        let s = Slice2D::from_pixels(1, 2, vec![0.0, 2.0]).unwrap();
        assert_eq!(normalize_intensity(&s).pixels, vec![-1.0, 1.0]);
    }

    #[test]
    fn random_slice_moments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let px: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(-3.0..40.0)).collect();
        let s = normalize_intensity(&Slice2D::from_pixels(64, 64, px).unwrap());
        let (m, sd) = moments(&s.pixels);
        assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-5, "{m} {sd}");
        let twice = normalize_intensity(&s);
        for (a, b) in twice.pixels.iter().zip(&s.pixels) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reflection_definition() {
        let p = Plane::new(1, 3, vec!['a', 'b', 'c']).unwrap();
        let out = reflect_pad_plane(
            &p,
            PadRecord {
                right: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.data, vec!['a', 'b', 'c', 'b', 'a']);
        let out = reflect_pad_plane(
            &p,
            PadRecord {
                left: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.data, vec!['b', 'a', 'b', 'c', 'b', 'a', 'b', 'c']);
    }

    #[test]
    fn pad_576_is_noop_and_600_goes_to_608() {
        let s = Slice2D::from_pixels(576, 576, vec![0.0; 576 * 576]).unwrap();
        let p = pad_to_multiple_of_32(&s).unwrap();
        assert_eq!((p.height, p.width), (576, 576));
        assert!(p.pad.is_zero());

        let s = Slice2D::from_pixels(600, 600, vec![1.0; 600 * 600]).unwrap();
        let p = pad_to_multiple_of_32(&s).unwrap();
        assert_eq!((p.height, p.width), (608, 608));
        assert_eq!(
            p.pad,
            PadRecord {
                top: 4,
                bottom: 4,
                left: 4,
                right: 4
            }
        );
        let cropped = crop_back(&p.image(), p.pad).unwrap();
        assert_eq!((cropped.height, cropped.width), (600, 600));
    }

    #[test]
    fn odd_padding_goes_bottom_right() {
        let s = Slice2D::from_pixels(31, 33, vec![0.5; 31 * 33]).unwrap();
        let p = pad_to_multiple_of_32(&s).unwrap();
        assert_eq!((p.height, p.width), (32, 64));
        assert_eq!(
            p.pad,
            PadRecord {
                top: 0,
                bottom: 1,
                left: 15,
                right: 16
            }
        );
    }

    #[test]
    fn mask_padding_is_background() {
        let s = Slice2D::from_pixels(2, 2, vec![1.0; 4])
            .unwrap()
            .with_mask(vec![1; 4])
            .unwrap();
        let p = pad_to_multiple_of_32(&s).unwrap();
        let m = p.mask.unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 4);
        assert!(p.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn crop_back_identity_and_errors() {
        let p = Plane::new(2, 2, vec![1u8, 0, 0, 1]).unwrap();
        assert_eq!(crop_back(&p, PadRecord::default()).unwrap(), p);
        let bad = PadRecord {
            top: 1,
            bottom: 1,
            ..Default::default()
        };
        assert!(matches!(crop_back(&p, bad), Err(Error::Integrity(_))));
    }

    #[test]
    fn extract_counts_labels_and_layout() {
        let mut vol = Volume3D::zeros([4, 4, 3], [1.0; 3]).unwrap();
        vol.set(1, 2, 0, 7.0);
        let slices = extract_slices(&case(Some(Ablation::Post)), &vol, None).unwrap();
        assert_eq!(slices.len(), 3);
        assert!(slices.iter().all(|s| s.height == 4 && s.width == 4));
        assert!(slices.iter().all(|s| s.ablation_label == Some(1)));
        assert_eq!(slices[0].pixels[2 * 4 + 1], 7.0);
        assert!(slices[1..].iter().all(|s| s.pixels.iter().all(|&p| p == 0.0)));
        let pre = extract_slices(&case(Some(Ablation::Pre)), &vol, None).unwrap();
        assert!(pre.iter().all(|s| s.ablation_label == Some(0)));
    }

    #[test]
    fn extract_rejects_mismatched_mask() {
        let vol = Volume3D::zeros([4, 4, 3], [1.0; 3]).unwrap();
        let mask = LabelVolume::zeros([4, 4, 2], [1.0; 3]).unwrap();
        assert!(matches!(
            extract_slices(&case(None), &vol, Some(&mask)),
            Err(Error::Integrity(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn pad_crop_round_trip(h in 2usize..70, w in 2usize..70, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<f32> = (0..h * w).map(|_| rng.gen()).collect();
            let mk: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..2)).collect();
            let s = Slice2D::from_pixels(h, w, px).unwrap().with_mask(mk).unwrap();
            let p = pad_to_multiple_of_32(&s).unwrap();
            prop_assert_eq!(p.height % 32, 0);
            prop_assert_eq!(p.width % 32, 0);
            prop_assert!(p.height < h + 32 && p.width < w + 32);
            let img = crop_back(&p.image(), p.pad).unwrap();
            prop_assert_eq!(img.data, s.pixels.clone());
            let m = crop_back(&p.mask_plane().unwrap(), p.pad).unwrap();
            prop_assert_eq!(Some(m.data), s.mask.clone());
        }
    }
}
