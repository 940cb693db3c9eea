//! Bilinear sampling with border replication, shared by warping and
//! deformable convolution.

use crate::tensor::Real;

/// Four-neighbour bilinear stencil at a real-valued location.
///
/// Corner order is `(x0, y0), (x1, y0), (x0, y1), (x1, y1)`. `dx`/`dy` hold the
/// derivatives of the weights with respect to the sampling coordinate; they
/// are zero along an axis where the coordinate was clamped to the border.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
    pub dx: [T; 4],
    pub dy: [T; 4],
    fx: T,
    fy: T,
}

impl<T: Real> Stencil<T> {
    /// Stencil for sampling a `height x width` plane at `(x, y)`.
    #[inline]
    pub fn new(x: T, y: T, height: usize, width: usize) -> Self {
        let xmax = T::c((width - 1) as f64);
        let ymax = T::c((height - 1) as f64);
        let (xc, gx) = clamp_coord(x, xmax);
        let (yc, gy) = clamp_coord(y, ymax);
        let x0 = xc.floor();
        let y0 = yc.floor();
        let fx = xc - x0;
        let fy = yc - y0;
        let x0 = x0.to_usize().unwrap_or(0).min(width - 1);
        let y0 = y0.to_usize().unwrap_or(0).min(height - 1);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let one = T::one();
        let (ox, oy) = (one - fx, one - fy);
        Self {
            idx: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            w: [ox * oy, fx * oy, ox * fy, fx * fy],
            dx: [-oy * gx, oy * gx, -fy * gx, fy * gx],
            dy: [-ox * gy, -fx * gy, ox * gy, fx * gy],
            fx,
            fy,
        }
    }

    /// Interpolated value, evaluated as nested lerps so that equal corner
    /// values come back unchanged.
    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let v = |k: usize| plane[self.idx[k]];
        let top = v(0) + self.fx * (v(1) - v(0));
        let bottom = v(2) + self.fx * (v(3) - v(2));
        top + self.fy * (bottom - top)
    }

    /// Derivatives of the sampled value with respect to the x and y coordinate.
    #[inline]
    pub fn gradient(&self, plane: &[T]) -> (T, T) {
        let v = [
            plane[self.idx[0]],
            plane[self.idx[1]],
            plane[self.idx[2]],
            plane[self.idx[3]],
        ];
        (
            v[0] * self.dx[0] + v[1] * self.dx[1] + v[2] * self.dx[2] + v[3] * self.dx[3],
            v[0] * self.dy[0] + v[1] * self.dy[1] + v[2] * self.dy[2] + v[3] * self.dy[3],
        )
    }

    /// Adds `g` times the interpolation weights into `plane` (adjoint of `sample`).
    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for k in 0..4 {
            plane[self.idx[k]] += g * self.w[k];
        }
    }
}

#[inline]
fn clamp_coord<T: Real>(v: T, max: T) -> (T, T) {
    if v.is_nan() || v < T::zero() {
        (T::zero(), T::zero())
    } else if v > max {
        (max, T::zero())
    } else {
        (v, T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_locations_are_exact() {
        let plane: Vec<f32> = (0..12).map(|v| v as f32 * 0.37).collect();
        for y in 0..3 {
            for x in 0..4 {
                let s = Stencil::new(x as f32, y as f32, 3, 4);
                assert_eq!(s.sample(&plane), plane[y * 4 + x]);
            }
        }
    }

    #[test]
    fn border_replication() {
        let plane = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(Stencil::new(-5.0, 0.0, 2, 2).sample(&plane), 1.0);
        assert_eq!(Stencil::new(9.0, 9.0, 2, 2).sample(&plane), 4.0);
        assert_eq!(Stencil::new(0.5, 0.5, 2, 2).sample(&plane), 2.5);
        let (gx, gy) = Stencil::new(-5.0, 0.5, 2, 2).gradient(&plane);
        assert_eq!(gx, 0.0);
        assert_eq!(gy, 2.0);
    }
}
