use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Where to cut a `crop x crop` window out of the zero-padded image.
/// Offsets are measured in padded coordinates, so `(pad, pad)` is centered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub pad: usize,
    pub crop: usize,
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

impl CropSpec {
    fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.crop > ph || self.crop > pw {
            return Err(Error::invalid(
                "pad_crop_flip",
                format!("crop {} larger than padded {ph}x{pw}", self.crop),
            ));
        }
        if self.offset_y + self.crop > ph || self.offset_x + self.crop > pw {
            return Err(Error::invalid(
                "pad_crop_flip",
                format!(
                    "offset ({}, {}) out of range for crop {} of {ph}x{pw}",
                    self.offset_y, self.offset_x, self.crop
                ),
            ));
        }
        Ok(())
    }
}

/// One sample: `src` is `C x H x W`, `dst` is `C x crop x crop`.
pub(crate) fn pad_crop_flip_sample<T: Scalar>(src: &[T], [c, h, w]: [usize; 3], spec: &CropSpec, dst: &mut [T]) {
    let crop = spec.crop;
    for ch in 0..c {
        for y in 0..crop {
            let sy = (spec.offset_y + y).checked_sub(spec.pad).filter(|&v| v < h);
            for x in 0..crop {
                let cx = if spec.flip { crop - 1 - x } else { x };
                let sx = (spec.offset_x + cx).checked_sub(spec.pad).filter(|&v| v < w);
                dst[(ch * crop + y) * crop + x] = match (sy, sx) {
                    (Some(sy), Some(sx)) => src[(ch * h + sy) * w + sx],
                    _ => T::zero(),
                };
            }
        }
    }
}

/// Zero-pads every image by `pad`, crops at the given offsets and optionally
/// mirrors the crop horizontally. With `crop = H + 2 pad` and zero offsets
/// this is plain padding.
pub fn pad_crop_flip<T: Scalar>(images: &Tensor4<T>, spec: &CropSpec) -> Result<Tensor4<T>> {
    let [n, c, h, w] = images.dims();
    spec.validate(h, w)?;
    let mut out = Tensor4::zeros([n, c, spec.crop, spec.crop])?;
    for i in 0..n {
        pad_crop_flip_sample(images.sample(i), [c, h, w], spec, out.sample_mut(i));
    }
    Ok(out)
}
