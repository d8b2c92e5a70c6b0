//! Binary rasters shared by the scene renderer, ESGM, and the edge metrics.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A `{0,1}`-valued raster stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mask {}x{} ({} set)", self.width, self.height, self.count())?;
        if self.width <= 64 && self.height <= 64 {
            for y in 0..self.height {
                let row: String = (0..self.width)
                    .map(|x| if self.get(x, y) { '#' } else { '.' })
                    .collect();
                writeln!(f, "{row}")?;
            }
        }
        Ok(())
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Builds a mask from raw bytes; any nonzero byte counts as set.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{}x{} mask needs {} bytes, got {}", width, height, width * height, bytes.len()),
            ));
        }
        Ok(Mask {
            width,
            height,
            data: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = u8::from(f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    /// Like [`get`](Self::get) but `false` outside the raster.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn or_assign(&mut self, other: &Mask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Sub-raster `[x0, x0+w) x [y0, y0+h)`; out-of-range pixels are unset.
    pub fn crop(&self, x0: isize, y0: isize, w: usize, h: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| self.get_signed(x0 + x as isize, y0 + y as isize))
    }

    /// Number of 8-connected components.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if self.get_signed(nx, ny) {
                            let j = ny as usize * self.width + nx as usize;
                            if !seen[j] {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    /// 1-pixel (8-neighbourhood) dilation.
    pub fn dilate(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            (-1..=1).any(|dy| (-1..=1).any(|dx| self.get_signed(x as isize + dx, y as isize + dy)))
        })
    }

    /// `(1, H, W)` tensor with values in `{0, 1}`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data.iter().map(|&b| f64::from(b)).collect(),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_use_eight_connectivity() {
        let m = Mask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(m.connected_components(), 1);
        let m = Mask::from_fn(5, 1, |x, _| x % 2 == 0);
        assert_eq!(m.connected_components(), 3);
        assert_eq!(Mask::new(3, 3).connected_components(), 0);
    }

    #[test]
    fn crop_pads_with_zeros() {
        let m = Mask::from_fn(3, 3, |_, _| true);
        let c = m.crop(-1, -1, 5, 5);
        assert_eq!(c.count(), 9);
        assert!(!c.get(0, 0));
        assert!(c.get(1, 1));
    }
}
