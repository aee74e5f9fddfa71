//! Feature and mask pyramids, the training mask sampler, and rasterization of
//! pixel regions onto the per-level feature grids.
//!
//! Masks use gate polarity: `1` passes a feature cell to the generator, `0`
//! blocks it. [`RegionMask`] uses the opposite (regenerate) polarity.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::backbone::ClassifierSpec;
use crate::error::{Error, Result};
use crate::image::{Rect, RegionMask};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelKind {
    Spatial,
    Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    pub id: String,
    pub kind: LevelKind,
    /// `[C, H, W]` for spatial levels, `[D]` for vector levels.
    pub data: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    /// Entry `index` of batched tap activations.
    pub fn from_batch(spec: &ClassifierSpec, taps: &[Tensor<f32>], index: usize) -> Result<Self> {
        if taps.len() != spec.num_levels() {
            return Err(Error::Shape(format!(
                "{} tap tensors for {} levels",
                taps.len(),
                spec.num_levels()
            )));
        }
        let levels = taps
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let one = t.slice_batch(index, 1);
                Ok(FeatureLevel {
                    id: spec.level_name(i).into(),
                    kind: spec.level_kind(i),
                    data: one.reshape(&spec.level_shape(i))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, id: &str) -> Result<&FeatureLevel> {
        self.levels
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLevel(id.into()))
    }

    /// Level ids, kinds and shapes match the spec; all values finite.
    pub fn validate(&self, spec: &ClassifierSpec) -> Result<()> {
        if self.levels.len() != spec.num_levels() {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, spec has {}",
                self.levels.len(),
                spec.num_levels()
            )));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.id != spec.level_name(i) || l.data.shape() != spec.level_shape(i).as_slice() {
                return Err(Error::Shape(format!(
                    "level {} is `{}` {:?}, expected `{}` {:?}",
                    i,
                    l.id,
                    l.data.shape(),
                    spec.level_name(i),
                    spec.level_shape(i)
                )));
            }
            if !l.data.is_finite() {
                return Err(Error::Validation(format!(
                    "level `{}` has non-finite values",
                    l.id
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f32) -> Self {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|l| FeatureLevel {
                    data: l.data.scale(c),
                    ..l.clone()
                })
                .collect(),
        }
    }

    /// Stack pyramids level by level into `[N, ..]` tensors.
    pub fn stack(pyramids: &[&FeaturePyramid]) -> Result<Vec<Tensor<f32>>> {
        let first = pyramids
            .first()
            .ok_or_else(|| Error::Validation("no pyramids to stack".into()))?;
        (0..first.len())
            .map(|li| {
                let parts: Vec<Tensor<f32>> = pyramids
                    .iter()
                    .map(|p| {
                        let t = &p.levels[li].data;
                        let mut shape = alloc::vec![1];
                        shape.extend_from_slice(t.shape());
                        t.clone().reshape(&shape)
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor<f32>> = parts.iter().collect();
                Tensor::stack_batch(&refs)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLevel {
    pub id: String,
    /// `[1, H, W]` for spatial levels, `[1]` for vector levels.
    pub data: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<MaskLevel>,
}

fn mask_shape(spec: &ClassifierSpec, index: usize) -> Vec<usize> {
    if spec.is_spatial(index) {
        let s = spec.spatial_side(index);
        alloc::vec![1, s, s]
    } else {
        alloc::vec![1]
    }
}

impl MaskPyramid {
    pub fn filled(spec: &ClassifierSpec, value: f32) -> Self {
        MaskPyramid {
            levels: (0..spec.num_levels())
                .map(|i| MaskLevel {
                    id: spec.level_name(i).into(),
                    data: Tensor::full(&mask_shape(spec, i), value),
                })
                .collect(),
        }
    }

    pub fn zeros(spec: &ClassifierSpec) -> Self {
        Self::filled(spec, 0.0)
    }

    pub fn ones(spec: &ClassifierSpec) -> Self {
        Self::filled(spec, 1.0)
    }

    /// All-ones at `index`, all-zeros elsewhere.
    pub fn single_level(spec: &ClassifierSpec, index: usize) -> Self {
        let mut m = Self::zeros(spec);
        m.levels[index].data = Tensor::ones(&mask_shape(spec, index));
        m
    }

    pub fn level(&self, id: &str) -> Result<&MaskLevel> {
        self.levels
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLevel(id.into()))
    }

    pub fn validate(&self, spec: &ClassifierSpec) -> Result<()> {
        if self.levels.len() != spec.num_levels() {
            return Err(Error::Shape(format!(
                "mask pyramid has {} levels, spec has {}",
                self.levels.len(),
                spec.num_levels()
            )));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.id != spec.level_name(i) || l.data.shape() != mask_shape(spec, i).as_slice() {
                return Err(Error::Shape(format!(
                    "mask level {} is `{}` {:?}, expected `{}` {:?}",
                    i,
                    l.id,
                    l.data.shape(),
                    spec.level_name(i),
                    mask_shape(spec, i)
                )));
            }
            if l.data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!(
                    "mask `{}` has values outside [0, 1]",
                    l.id
                )));
            }
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.data.data().iter().all(|&v| v == 0.0 || v == 1.0))
    }

    pub fn level_sums(&self) -> Vec<f32> {
        self.levels.iter().map(|l| l.data.sum()).collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.levels {
            h.update(l.id.as_bytes());
            h.update([0u8]);
            for &v in l.data.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Stack masks level by level into `[N, 1, H, W]` / `[N, 1]` tensors.
    pub fn stack(masks: &[&MaskPyramid]) -> Result<Vec<Tensor<f32>>> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Validation("no masks to stack".into()))?;
        (0..first.levels.len())
            .map(|li| {
                let parts: Vec<&Tensor<f32>> = masks.iter().map(|m| &m.levels[li].data).collect();
                let mut shape = alloc::vec![parts.len()];
                shape.extend_from_slice(parts[0].shape());
                let mut data = Vec::with_capacity(shape.iter().product());
                for p in &parts {
                    if p.shape() != parts[0].shape() {
                        return Err(Error::Shape("masks of unequal shape".into()));
                    }
                    data.extend_from_slice(p.data());
                }
                Tensor::from_vec(&shape, data)
            })
            .collect()
    }
}

/// One training draw from the mask distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDraw {
    pub masks: MaskPyramid,
    /// Level whose mask is fully on.
    pub selected: usize,
    /// Blocked crop, present in crop mode only.
    pub crop: Option<Rect>,
}

/// Rectangle with each side uniform in `[size/4, 3*size/4]` pixels and a
/// uniformly random position fully inside the frame.
pub fn sample_crop(size: usize, r: &mut Rng) -> Rect {
    let lo = size.div_ceil(4).max(1);
    let hi = (3 * size / 4).max(lo);
    let w = rng::int_in(r, lo, hi);
    let h = rng::int_in(r, lo, hi);
    let x = rng::int_in(r, 0, size - w);
    let y = rng::int_in(r, 0, size - h);
    Rect::new(x, y, w, h)
}

/// With probability `1 - p_crop` a single uniformly chosen level is fully on
/// and every other level is off. With probability `p_crop` a crop and a level
/// are drawn; the level is fully on, finer levels are on except the crop's
/// footprint, deeper levels are off.
pub fn sample_training_masks(spec: &ClassifierSpec, p_crop: f64, r: &mut Rng) -> Result<MaskDraw> {
    if !(0.0..=1.0).contains(&p_crop) {
        return Err(Error::Parameter(format!(
            "p_crop {} outside [0, 1]",
            p_crop
        )));
    }
    let crop_mode = rng::uniform(r) < p_crop;
    let selected = rng::int_in(r, 0, spec.num_levels() - 1);
    if !crop_mode {
        return Ok(MaskDraw {
            masks: MaskPyramid::single_level(spec, selected),
            selected,
            crop: None,
        });
    }
    let crop = sample_crop(spec.input_size, r);
    let region = RegionMask::from_rect(spec.input_size, spec.input_size, crop)?;
    Ok(MaskDraw {
        masks: layered_masks(spec, &region, selected)?,
        selected,
        crop: Some(crop),
    })
}

/// Selected level fully on, finer levels blocked on the region's footprint,
/// deeper levels off.
pub fn layered_masks(
    spec: &ClassifierSpec,
    region: &RegionMask,
    selected: usize,
) -> Result<MaskPyramid> {
    let mut m = MaskPyramid::single_level(spec, selected);
    for i in 0..selected {
        m.levels[i].data = rasterize_region_at(spec, region, i)?;
    }
    Ok(m)
}

/// Gate mask for `level_id`: a cell is 0 iff its pixel footprint touches a
/// regenerate pixel. Vector levels are 0 iff any pixel is marked.
pub fn rasterize_region(
    spec: &ClassifierSpec,
    region: &RegionMask,
    level_id: &str,
) -> Result<Tensor<f32>> {
    let index = spec.level_index(level_id)?;
    rasterize_region_at(spec, region, index)
}

pub fn rasterize_region_at(
    spec: &ClassifierSpec,
    region: &RegionMask,
    index: usize,
) -> Result<Tensor<f32>> {
    let size = spec.input_size;
    if region.width() != size || region.height() != size {
        return Err(Error::Shape(format!(
            "region is {}x{}, expected {size}x{size}",
            region.width(),
            region.height()
        )));
    }
    if !spec.is_spatial(index) {
        let v = if region.is_empty() { 1.0 } else { 0.0 };
        return Ok(Tensor::full(&[1], v));
    }
    let side = spec.spatial_side(index);
    let cell = size / side;
    let mut out = Tensor::ones(&[1, side, side]);
    let d = out.data_mut();
    for y in 0..size {
        for x in 0..size {
            if region.get(x, y) {
                d[(y / cell) * side + x / cell] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Element-wise gate; spatial masks `[1, H, W]` broadcast over channels,
/// vector masks are a single scalar.
pub fn apply_mask(features: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let fs = features.shape();
    let ms = mask.shape();
    match (fs.len(), ms) {
        (3, [1, h, w]) if *h == fs[1] && *w == fs[2] => {
            let plane = h * w;
            let md = mask.data();
            Ok(Tensor::from_fn(fs, |i| features.data()[i] * md[i % plane]))
        }
        (1, [1]) => Ok(features.scale(mask.data()[0])),
        _ => Err(Error::Shape(format!(
            "mask {:?} is not aligned with features {:?}",
            ms, fs
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ClassifierSpec {
        ClassifierSpec::desk(10)
    }

    #[test]
    fn empty_region_rasterizes_to_all_ones() {
        let s = spec();
        let region = RegionMask::empty(64, 64);
        for id in &s.tap_names {
            let m = rasterize_region(&s, &region, id).unwrap();
            assert!(m.data().iter().all(|&v| v == 1.0), "{id}");
        }
    }

    #[test]
    fn single_pixel_blocks_one_cell() {
        let s = spec();
        let mut region = RegionMask::empty(64, 64);
        region.set(5, 5, true);
        let m = rasterize_region(&s, &region, "conv1").unwrap();
        assert_eq!(m.shape(), &[1, 32, 32]);
        let zeros: Vec<usize> = m
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(zeros, [2 * 32 + 2]);
        assert_eq!(rasterize_region(&s, &region, "fc7").unwrap().data(), &[0.0]);
    }

    #[test]
    fn aligned_block_maps_to_corner() {
        let s = spec();
        let region = RegionMask::from_rect(64, 64, Rect::new(0, 0, 16, 16)).unwrap();
        let m = rasterize_region(&s, &region, "conv2").unwrap();
        assert_eq!(m.shape(), &[1, 16, 16]);
        for y in 0..16 {
            for x in 0..16 {
                let expect = if x < 4 && y < 4 { 0.0 } else { 1.0 };
                assert_eq!(m.data()[y * 16 + x], expect);
            }
        }
    }

    #[test]
    fn unknown_level_lookup_error() {
        let s = spec();
        let region = RegionMask::empty(64, 64);
        assert!(matches!(
            rasterize_region(&s, &region, "conv9"),
            Err(Error::UnknownLevel(_))
        ));
    }

    #[test]
    fn apply_mask_contracts() {
        let f = Tensor::full(&[2, 3, 3], 2.0f32);
        let half = Tensor::full(&[1, 3, 3], 0.5f32);
        assert!(apply_mask(&f, &half)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert_eq!(apply_mask(&f, &Tensor::ones(&[1, 3, 3])).unwrap(), f);
        assert!(apply_mask(&f, &Tensor::zeros(&[1, 3, 3]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(apply_mask(&f, &Tensor::ones(&[1, 2, 2])).is_err());
        let v = Tensor::full(&[4], 3.0f32);
        assert_eq!(
            apply_mask(&v, &Tensor::zeros(&[1])).unwrap(),
            Tensor::zeros(&[4])
        );
    }

    #[test]
    fn forced_single_level_mode() {
        let s = spec();
        let mut r = rng::seeded(3);
        for _ in 0..50 {
            let d = sample_training_masks(&s, 0.0, &mut r).unwrap();
            assert!(d.crop.is_none());
            let full: Vec<f32> = (0..s.num_levels())
                .map(|i| mask_shape(&s, i).iter().product::<usize>() as f32)
                .collect();
            let sums = d.masks.level_sums();
            let on = sums.iter().zip(&full).filter(|(a, b)| a == b).count();
            let off = sums.iter().filter(|&&v| v == 0.0).count();
            assert_eq!((on, off), (1, s.num_levels() - 1));
        }
    }

    #[test]
    fn crop_sides_stay_in_range() {
        let mut r = rng::seeded(1);
        for _ in 0..500 {
            let c = sample_crop(64, &mut r);
            assert!((16..=48).contains(&c.width) && (16..=48).contains(&c.height));
            c.check_within(64, 64).unwrap();
        }
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut r = rng::seeded(1);
        assert!(sample_training_masks(&spec(), 1.5, &mut r).is_err());
    }
}
