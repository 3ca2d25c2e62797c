//! Binary masks and the morphology used on them.
//!
//! Foreground connectivity is 8-neighbour, background connectivity is
//! 4-neighbour. Erosion and dilation only look at pixels inside the image,
//! which makes them an adjunction on the finite grid, so opening and closing
//! are idempotent even for shapes touching the border.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mask {}×{} ({} on)", self.h, self.w, self.count())?;
        if self.h * self.w <= 1024 {
            for y in 0..self.h {
                let row: String = (0..self.w)
                    .map(|x| if self.get(y, x) { '#' } else { '.' })
                    .collect();
                writeln!(f, "{row}")?;
            }
        }
        Ok(())
    }
}

const N4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape(
                "mask",
                format!("{h}×{w} mask with {} values", data.len()),
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    /// Reads a binary-valued map; any value other than exactly 0 or 1 is an error.
    pub fn from_binary_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == T::zero() {
                data.push(false);
            } else if v == T::one() {
                data.push(true);
            } else {
                return Err(Error::Data(format!("mask value {v:?} is not 0 or 1")));
            }
        }
        Ok(Self { h, w, data })
    }

    /// Strict `value > tau` per pixel.
    pub fn above<T: Real>(t: &Tensor<T>, tau: f64) -> Result<Self> {
        let (h, w) = t.dims2()?;
        Ok(Self {
            h,
            w,
            data: t.data().iter().map(|v| v.as_f64() > tau).collect(),
        })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.h, self.w],
            self.data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask dims are nonzero")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }

    fn neighbours<'a>(
        &self,
        y: usize,
        x: usize,
        offsets: &'a [(isize, isize)],
    ) -> impl Iterator<Item = (usize, usize)> + 'a {
        let (h, w) = (self.h as isize, self.w as isize);
        offsets.iter().filter_map(move |&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            (ny >= 0 && nx >= 0 && ny < h && nx < w).then_some((ny as usize, nx as usize))
        })
    }

    /// Foreground pixels with a 4-neighbour in the background; pixels outside
    /// the image count as background.
    pub fn boundary(&self) -> Self {
        Self::from_fn(self.h, self.w, |y, x| {
            self.get(y, x)
                && (y == 0
                    || x == 0
                    || y + 1 == self.h
                    || x + 1 == self.w
                    || self.neighbours(y, x, &N4).any(|(ny, nx)| !self.get(ny, nx)))
        })
    }

    /// One step of 3×3 dilation.
    pub fn dilate(&self) -> Self {
        Self::from_fn(self.h, self.w, |y, x| {
            self.get(y, x) || self.neighbours(y, x, &N8).any(|(ny, nx)| self.get(ny, nx))
        })
    }

    /// One step of 3×3 erosion.
    pub fn erode(&self) -> Self {
        Self::from_fn(self.h, self.w, |y, x| {
            self.get(y, x) && self.neighbours(y, x, &N8).all(|(ny, nx)| self.get(ny, nx))
        })
    }

    pub fn open(&self) -> Self {
        self.erode().dilate()
    }

    pub fn close(&self) -> Self {
        self.dilate().erode()
    }

    pub fn dilate_n(&self, iterations: usize) -> Self {
        (0..iterations).fold(self.clone(), |m, _| m.dilate())
    }

    /// Labels 8-connected foreground components in row-major discovery order.
    /// Returns the label image (0 = background) and the size of each component.
    pub fn components(&self) -> (Vec<u32>, Vec<usize>) {
        let mut labels = vec![0u32; self.h * self.w];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.data.len() {
            if !self.data[start] || labels[start] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            labels[start] = label;
            queue.push_back(start);
            let mut size = 0;
            while let Some(i) = queue.pop_front() {
                size += 1;
                for (ny, nx) in self.neighbours(i / self.w, i % self.w, &N8) {
                    let j = ny * self.w + nx;
                    if self.data[j] && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }
}

/// Sets every background pixel not 4-connected to the image border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let on_border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if on_border && !mask.get(y, x) {
                outside[y * w + x] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for (ny, nx) in mask.neighbours(y, x, &N4) {
            let j = ny * w + nx;
            if !mask.data[j] && !outside[j] {
                outside[j] = true;
                queue.push_back((ny, nx));
            }
        }
    }
    Mask {
        h,
        w,
        data: outside.into_iter().map(|o| !o).collect(),
    }
}

/// Keeps only the largest 8-connected component; ties go to the component
/// found first in a row-major scan.
pub fn keep_largest(mask: &Mask) -> Mask {
    let (labels, sizes) = mask.components();
    let Some(best) = sizes
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, usize)>, (i, &s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1)
    else {
        return mask.clone();
    };
    Mask {
        h: mask.h,
        w: mask.w,
        data: labels.iter().map(|&l| l == best).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Mask {
        Mask::from_fn(h, w, |y, x| {
            (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
        })
    }

    #[test]
    fn ring_fills_to_disk() {
        let outer = disk(21, 21, 10.0, 10.0, 8.0);
        let inner = disk(21, 21, 10.0, 10.0, 4.0);
        let ring = Mask::from_fn(21, 21, |y, x| outer.get(y, x) && !inner.get(y, x));
        assert_eq!(fill_holes(&ring), outer);
    }

    #[test]
    fn hole_touching_border_is_not_filled() {
        let m = Mask::from_fn(5, 5, |y, x| !(y == 0 && x == 2) && !(y == 1 && x == 2));
        assert_eq!(fill_holes(&m), m);
    }

    #[test]
    fn keep_largest_keeps_bigger_blob() {
        let mut m = Mask::empty(10, 12);
        for x in 0..5 {
            m.set(1, x, true); // area 5
        }
        for y in 4..6 {
            for x in 3..8 {
                m.set(y, x, true); // area 10
            }
        }
        let k = keep_largest(&m);
        assert_eq!(k.count(), 10);
        assert!(!k.get(1, 0) && k.get(4, 3));
    }

    #[test]
    fn keep_largest_tie_prefers_first_in_scan() {
        let mut m = Mask::empty(6, 6);
        m.set(4, 4, true);
        m.set(4, 5, true);
        m.set(0, 0, true);
        m.set(0, 1, true);
        let k = keep_largest(&m);
        assert!(k.get(0, 0) && !k.get(4, 4));
    }

    #[test]
    fn diagonal_pixels_form_one_component() {
        let m = Mask::from_fn(4, 4, |y, x| y == x);
        assert_eq!(m.components().1, vec![4]);
    }

    #[test]
    fn empty_mask_is_stable() {
        let e = Mask::empty(7, 9);
        assert_eq!(fill_holes(&e), e);
        assert_eq!(keep_largest(&e), e);
    }

    #[test]
    fn opening_removes_speck_closing_fills_pinhole() {
        let mut m = Mask::empty(9, 9);
        m.set(4, 4, true);
        assert!(m.open().is_empty());

        let mut blob = Mask::from_fn(12, 12, |y, x| (2..10).contains(&y) && (2..10).contains(&x));
        blob.set(5, 5, false);
        let closed = blob.close();
        assert!(closed.get(5, 5));
    }

    #[test]
    fn boundary_of_square() {
        let sq = Mask::from_fn(7, 7, |y, x| (1..6).contains(&y) && (1..6).contains(&x));
        let b = sq.boundary();
        assert_eq!(b.count(), 16);
        assert!(!b.get(3, 3));
        let full = Mask::from_fn(3, 3, |_, _| true);
        assert_eq!(full.boundary().count(), 8);
    }

    proptest! {
        #[test]
        fn fill_and_keep_are_idempotent(bits in prop::collection::vec(any::<bool>(), 64)) {
            let m = Mask::new(8, 8, bits).unwrap();
            let f = fill_holes(&m);
            prop_assert_eq!(fill_holes(&f), f.clone());
            let k = keep_largest(&f);
            prop_assert_eq!(keep_largest(&k), k.clone());
            prop_assert_eq!(fill_holes(&k), k);
        }

        #[test]
        fn fill_holes_is_extensive(bits in prop::collection::vec(any::<bool>(), 80)) {
            let m = Mask::new(8, 10, bits).unwrap();
            let f = fill_holes(&m);
            prop_assert!(m.data().iter().zip(f.data()).all(|(&a, &b)| !a || b));
        }
    }
}
