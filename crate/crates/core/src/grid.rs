//! Small 2-D grids for label maps and binary masks.

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel class indices; [`IGNORE_LABEL`] marks void pixels.
pub type LabelMap = Grid<u8>;
pub type BinaryMap = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::shape(
                "grid",
                format!("{height}×{width} grid given {} values", data.len()),
            ));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Sub-grid of rows `top..height-bottom` and columns `left..width-right`.
    pub fn crop(&self, top: usize, bottom: usize, left: usize, right: usize) -> Option<Self> {
        if top + bottom >= self.height || left + right >= self.width {
            return None;
        }
        let (h, w) = (self.height - top - bottom, self.width - left - right);
        Some(Grid::from_fn(h, w, |y, x| self.get(y + top, x + left)))
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

impl<T: Copy> Grid<T> {
    /// Mirrors columns, used by flip augmentation.
    pub fn flip_horizontal(&self) -> Self {
        Grid::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}
