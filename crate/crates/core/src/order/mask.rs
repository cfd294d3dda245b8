use crate::error::{Error, Result};

/// Binary `height×width` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Bitmap {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} bits for a {width}×{height} bitmap",
                bits.len()
            )));
        }
        Ok(Bitmap { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn iou(&self, other: &Bitmap) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the set pixels.
    pub fn pixel_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    /// Tight box `[a_w, a_h, b_w, b_h]` in `[0,1]`, measured on pixel edges:
    /// a full-image mask gives `[0, 0, 1, 1]`.
    pub fn normalized_bbox(&self) -> Option<[f64; 4]> {
        let (x0, y0, x1, y1) = self.pixel_bounds()?;
        let (w, h) = (self.width as f64, self.height as f64);
        Some([x0 as f64 / w, y0 as f64 / h, (x1 + 1) as f64 / w, (y1 + 1) as f64 / h])
    }

    /// Mean pixel-centre coordinates `(x, y)`, normalized to `[0,1]`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64 / self.width as f64, sy / n as f64 / self.height as f64))
    }

    /// Row-major run lengths, alternating, starting with a (possibly empty)
    /// run of zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (width * height) as u64 {
            return Err(Error::Data(format!(
                "run lengths cover {total} pixels, image has {}",
                width * height
            )));
        }
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat(value).take(r as usize));
            value = !value;
        }
        Ok(Bitmap { width, height, bits })
    }

    /// Mode-pooled downsampling by an integer factor; see
    /// [`downsample_labels`].
    pub fn downsample(&self, factor: usize) -> Bitmap {
        let labels: Vec<u32> = self.bits.iter().map(|&b| b as u32).collect();
        let (w, h, out) = downsample_labels(&labels, self.width, self.height, factor);
        Bitmap {
            width: w,
            height: h,
            bits: out.into_iter().map(|l| l == 1).collect(),
        }
    }

    /// Nearest-neighbour upsampling: every cell becomes a `factor×factor`
    /// block.
    pub fn upsample(&self, factor: usize) -> Bitmap {
        let (w, h) = (self.width * factor, self.height * factor);
        let bits = (0..w * h).map(|p| self.get((p % w) / factor, (p / w) / factor)).collect();
        Bitmap { width: w, height: h, bits }
    }
}

/// Downsamples a label map (`0` = background) by `factor`: each output cell
/// takes the most frequent label of its block. Ties prefer an instance over
/// background, then the label met first in raster order, so the result does
/// not depend on how instances are numbered.
pub fn downsample_labels(labels: &[u32], width: usize, height: usize, factor: usize) -> (usize, usize, Vec<u32>) {
    let (w, h) = (width / factor, height / factor);
    let mut out = vec![0u32; w * h];
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for cy in 0..h {
        for cx in 0..w {
            counts.clear();
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    let l = labels[y * width + x];
                    match counts.iter_mut().find(|(k, _)| *k == l) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((l, 1)),
                    }
                }
            }
            let mut best = (0u32, 0usize);
            for &(l, c) in &counts {
                if c > best.1 || (c == best.1 && best.0 == 0 && l != 0) {
                    best = (l, c);
                }
            }
            out[cy * w + cx] = best.0;
        }
    }
    (w, h, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub id: usize,
    pub category: String,
    pub bitmap: Bitmap,
    pub bbox: [f64; 4],
}

impl InstanceMask {
    /// Builds an instance, deriving the tight normalized bbox. Empty bitmaps
    /// are rejected.
    pub fn new(id: usize, category: impl Into<String>, bitmap: Bitmap) -> Result<Self> {
        let bbox = bitmap
            .normalized_bbox()
            .ok_or_else(|| Error::Data(format!("instance {id} has an empty mask")))?;
        Ok(InstanceMask {
            id,
            category: category.into(),
            bitmap,
            bbox,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_then_downsample_is_identity() {
        let b = Bitmap::from_bits(3, 2, vec![true, false, true, false, false, true]).unwrap();
        let up = b.upsample(4);
        assert_eq!((up.width(), up.height(), up.area()), (12, 8, 48));
        assert_eq!(up.downsample(4), b);
    }
    use proptest::prelude::*;

    #[test]
    fn bbox_of_full_and_single_pixel_masks() {
        let full = Bitmap::from_bits(4, 2, vec![true; 8]).unwrap();
        assert_eq!(full.normalized_bbox(), Some([0.0, 0.0, 1.0, 1.0]));
        let mut one = Bitmap::new(4, 4);
        one.set(1, 2, true);
        assert_eq!(one.normalized_bbox(), Some([0.25, 0.5, 0.5, 0.75]));
        assert_eq!(Bitmap::new(3, 3).normalized_bbox(), None);
    }

    #[test]
    fn rle_starts_with_background_run() {
        let b = Bitmap::from_bits(3, 1, vec![true, true, false]).unwrap();
        assert_eq!(b.to_rle(), vec![0, 2, 1]);
        assert!(Bitmap::from_rle(3, 1, &[0, 2]).is_err());
    }

    #[test]
    fn downsampling_takes_the_block_mode() {
        // 4×4 labels, factor 2: top-left block has three 1s, top-right a 2/0 tie.
        #[rustfmt::skip]
        let labels = [
            1, 1, 2, 0,
            1, 0, 0, 2,
            0, 0, 3, 3,
            0, 0, 3, 1,
        ];
        let (w, h, out) = downsample_labels(&labels, 4, 4, 2);
        assert_eq!((w, h), (2, 2));
        assert_eq!(out, vec![1, 2, 0, 3]);
    }

    proptest! {
        #[test]
        fn rle_roundtrip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let bits: Vec<bool> = (0..w * h).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let b = Bitmap::from_bits(w, h, bits).unwrap();
            prop_assert_eq!(Bitmap::from_rle(w, h, &b.to_rle()).unwrap(), b);
        }
    }
}
