use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Single-channel image stored row-major.
///
/// Pipeline planes hold values in `[0,1]`; the type itself does not clamp so
/// that intermediate or synthetic planes can be represented.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(TensorError::ShapeMismatch {
                op: "plane",
                left: vec![height, width],
                right: vec![values.len()],
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
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
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.values[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    /// As a `[1,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("plane dims")
    }

    /// From a tensor with `H*W` elements shaped `[H,W]` or `[1,H,W]`.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "plane",
                    msg: format!("cannot view {:?} as a plane", t.shape()),
                })
            }
        };
        Self::new(w, h, t.data().to_vec())
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Sub-rectangle starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        assert!(
            x0 + width <= self.width && y0 + height <= self.height,
            "crop out of bounds"
        );
        Self::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Reflect-pads right and bottom edges up to `width x height`.
    pub fn pad_reflect_to(&self, width: usize, height: usize) -> Self {
        use crate::tensor::reflect;
        Self::from_fn(width, height, |x, y| {
            self.get(
                reflect(x as isize, self.width),
                reflect(y as isize, self.height),
            )
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Quarter-turn counter-clockwise rotation.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        Self::from_fn(h, w, |x, y| self.get(w - 1 - y, x))
    }
}

/// Three-channel image with interleaved `[r, g, b]` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage<T> {
    width: usize,
    height: usize,
    pixels: Vec<[T; 3]>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<[T; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(TensorError::ShapeMismatch {
                op: "rgb_image",
                left: vec![height, width],
                right: vec![pixels.len()],
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [T; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Builds an image from three equally sized planes.
    pub fn from_planes(r: &Plane<T>, g: &Plane<T>, b: &Plane<T>) -> Result<Self> {
        r.check_same(g, "rgb_from_planes")?;
        r.check_same(b, "rgb_from_planes")?;
        let pixels = (0..r.len())
            .map(|i| [r.values()[i], g.values()[i], b.values()[i]])
            .collect();
        Self::new(r.width(), r.height(), pixels)
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

    pub fn pixels(&self) -> &[[T; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn channel(&self, c: usize) -> Plane<T> {
        Plane::new(
            self.width,
            self.height,
            self.pixels.iter().map(|p| p[c]).collect(),
        )
        .expect("dims")
    }

    pub fn map_pixels(&self, f: impl Fn([T; 3]) -> [T; 3]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map_pixels(|p| p.map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn cast<U: Scalar>(&self) -> RgbImage<U> {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|v| U::lit(v.as_f64())))
                .collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        assert!(
            x0 + width <= self.width && y0 + height <= self.height,
            "crop out of bounds"
        );
        Self::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Quarter-turn counter-clockwise rotation.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        Self::from_fn(h, w, |x, y| self.get(w - 1 - y, x))
    }

    /// Maximum absolute per-channel difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c].as_f64() - b[c].as_f64()).abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_four_times_is_identity() {
        let p = Plane::<f64>::from_fn(3, 2, |x, y| (x + 10 * y) as f64);
        let r = p.rotate90();
        assert_eq!(r.dims(), (2, 3));
        assert_eq!(r.rotate90().rotate90().rotate90(), p);
        assert_eq!(p.flip_horizontal().flip_horizontal(), p);
    }

    #[test]
    fn reflect_pad_extends_by_mirroring() {
        let p = Plane::<f64>::from_fn(3, 1, |x, _| x as f64);
        let q = p.pad_reflect_to(5, 2);
        assert_eq!(&q.values()[..5], &[0.0, 1.0, 2.0, 1.0, 0.0]);
        assert_eq!(&q.values()[5..], &[0.0, 1.0, 2.0, 1.0, 0.0]);
    }
}
