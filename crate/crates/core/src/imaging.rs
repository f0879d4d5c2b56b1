//! Row-major pixel grids, bilinear sampling and horizontal flips.
//!
//! Pixel `(x, y)` has its center at continuous coordinate `(x, y)`, so a
//! grid of width `W` covers `u` in `[0, W - 1]`.

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

/// Three-channel image with values in `[0, 1]`.
pub type Image = Grid<Rgb>;
/// Depth in meters; invalid entries are tracked by a companion [`Mask`].
pub type DepthMap = Grid<f64>;
pub type Mask = Grid<bool>;

/// Slack on the sampling domain so coordinates that round-trip through a
/// projection land inside it.
pub const BOUNDS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidGrid(format!(
                "{}x{} grid needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: self.dims(),
            });
        }
        Ok(())
    }
}

impl<T: Clone> Grid<T> {
    /// Mirror left-right: column `x` moves to column `W - 1 - x`.
    pub fn hflip(&self) -> Self {
        Grid::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y).clone()
        })
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Grid {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }
}

impl Grid<Rgb> {
    /// Checks that every value is finite and in `[0, 1]`.
    pub fn check_image(&self) -> Result<()> {
        match self
            .data
            .iter()
            .flatten()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            Some(v) => Err(Error::InvalidGrid(format!(
                "image value {v} outside [0, 1]"
            ))),
            None => Ok(()),
        }
    }
}

pub fn hflip_image(img: &Image) -> Image {
    img.hflip()
}

pub fn hflip_depth(depth: &DepthMap) -> DepthMap {
    depth.hflip()
}

pub fn hflip_mask(mask: &Mask) -> Mask {
    mask.hflip()
}

/// Values that can be blended with bilinear weights.
pub trait Blend: Copy {
    fn zero() -> Self;
    fn add_scaled(self, other: Self, w: f64) -> Self;
}

impl Blend for f64 {
    fn zero() -> Self {
        0.0
    }

    fn add_scaled(self, other: Self, w: f64) -> Self {
        self + other * w
    }
}

impl Blend for Rgb {
    fn zero() -> Self {
        [0.0; 3]
    }

    fn add_scaled(self, other: Self, w: f64) -> Self {
        [
            self[0] + other[0] * w,
            self[1] + other[1] * w,
            self[2] + other[2] * w,
        ]
    }
}

/// The four pixels and weights behind one bilinear sample, plus the weights
/// of the partial derivatives with respect to `u` and `v`.
///
/// Tap order is `(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)`.
/// On the last row or column the lower-left cell is used, so `u = W - 1`
/// is sampled with weight 1 on the right-hand taps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub du: [f64; 4],
    pub dv: [f64; 4],
}

impl BilinearTaps {
    pub fn new(width: usize, height: usize, u: f64, v: f64) -> Option<Self> {
        let (w, h) = (width as f64, height as f64);
        if width < 2 || height < 2 {
            return None;
        }
        if !(u >= -BOUNDS_EPS
            && u <= w - 1.0 + BOUNDS_EPS
            && v >= -BOUNDS_EPS
            && v <= h - 1.0 + BOUNDS_EPS)
        {
            return None;
        }
        let u = u.clamp(0.0, w - 1.0);
        let v = v.clamp(0.0, h - 1.0);
        let x0 = (u.floor() as usize).min(width - 2);
        let y0 = (v.floor() as usize).min(height - 2);
        let fu = u - x0 as f64;
        let fv = v - y0 as f64;
        let i00 = y0 * width + x0;
        Some(Self {
            index: [i00, i00 + 1, i00 + width, i00 + width + 1],
            weight: [
                (1.0 - fu) * (1.0 - fv),
                fu * (1.0 - fv),
                (1.0 - fu) * fv,
                fu * fv,
            ],
            du: [-(1.0 - fv), 1.0 - fv, -fv, fv],
            dv: [-(1.0 - fu), -fu, 1.0 - fu, fu],
        })
    }

    pub fn sample<T: Blend>(&self, grid: &Grid<T>) -> T {
        self.combine(grid, &self.weight)
    }

    /// Returns `(d/du, d/dv)` of the interpolated value.
    pub fn gradient<T: Blend>(&self, grid: &Grid<T>) -> (T, T) {
        (self.combine(grid, &self.du), self.combine(grid, &self.dv))
    }

    fn combine<T: Blend>(&self, grid: &Grid<T>, w: &[f64; 4]) -> T {
        let d = grid.data();
        (0..4).fold(T::zero(), |acc, k| acc.add_scaled(d[self.index[k]], w[k]))
    }
}

/// Bilinear interpolation at `(u, v)`; `None` outside `[0, W-1] x [0, H-1]`.
pub fn bilinear_sample<T: Blend>(grid: &Grid<T>, u: f64, v: f64) -> Option<T> {
    BilinearTaps::new(grid.width(), grid.height(), u, v).map(|t| t.sample(grid))
}
