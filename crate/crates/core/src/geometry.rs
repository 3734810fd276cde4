//! Box parameterizations on the normalized image plane, pinhole projection
//! and geometric depth.
//!
//! Two equivalent box forms are used throughout: [`ProjectedBox`] stores a
//! center plus four side distances, [`CornerBox`] stores top-left and
//! bottom-right corners. Perturbation operates on corners and converts back
//! through [`inverse_reparameterize`], which recenters at the corner-box
//! midpoint.

use thiserror::Error;

use crate::{real, Real};

/// Smallest side distance accepted when ingesting labels; boxes narrower than
/// `2 * MIN_OFFSET` are rejected as degenerate.
pub const MIN_OFFSET: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("box corner behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("degenerate box: {0}")]
    DegenerateBox(&'static str),
    #[error("non-finite value")]
    NonFinite,
    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
}

fn ensure_finite<F: Real>(v: F) -> Result<F, GeomError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GeomError::NonFinite)
    }
}

fn ensure_positive<F: Real>(v: F, what: &'static str) -> Result<F, GeomError> {
    if v.is_finite() && v > F::zero() {
        Ok(v)
    } else {
        Err(GeomError::OutOfRange {
            what,
            value: v.to_f64().unwrap_or(f64::NAN),
        })
    }
}

/// Pinhole camera intrinsics plus image size, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraCalib<F> {
    pub fx: F,
    pub fy: F,
    pub cx: F,
    pub cy: F,
    pub img_w: F,
    pub img_h: F,
}

impl<F: Real> CameraCalib<F> {
    pub fn new(fx: F, fy: F, cx: F, cy: F, img_w: F, img_h: F) -> Result<Self, GeomError> {
        ensure_positive(fx, "fx")?;
        ensure_positive(fy, "fy")?;
        ensure_finite(cx)?;
        ensure_finite(cy)?;
        ensure_positive(img_w, "img_w")?;
        ensure_positive(img_h, "img_h")?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            img_w,
            img_h,
        })
    }
}

/// A 3D object box in the camera frame: center position, metric dimensions
/// and rotation about the vertical axis.
///
/// Axis convention matches KITTI camera coordinates: x right, y down,
/// z forward; `l` runs along the object's heading, `w` across it, `h` up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D<F> {
    pub x: F,
    pub y: F,
    pub z: F,
    pub h: F,
    pub w: F,
    pub l: F,
    pub yaw: F,
}

impl<F: Real> Box3D<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(x: F, y: F, z: F, h: F, w: F, l: F, yaw: F) -> Result<Self, GeomError> {
        ensure_finite(x)?;
        ensure_finite(y)?;
        ensure_positive(z, "z")?;
        ensure_positive(h, "h")?;
        ensure_positive(w, "w")?;
        ensure_positive(l, "l")?;
        ensure_finite(yaw)?;
        Ok(Self {
            x,
            y,
            z,
            h,
            w,
            l,
            yaw,
        })
    }

    /// The eight box corners in camera coordinates.
    pub fn corners(&self) -> [[F; 3]; 8] {
        let two = real::<F>(2.0);
        let (hx, hy, hz) = (self.l / two, self.h / two, self.w / two);
        let (sin, cos) = (self.yaw.sin(), self.yaw.cos());
        let mut out = [[F::zero(); 3]; 8];
        let signs = [-F::one(), F::one()];
        let mut i = 0;
        for &sx in &signs {
            for &sy in &signs {
                for &sz in &signs {
                    let (dx, dy, dz) = (sx * hx, sy * hy, sz * hz);
                    out[i] = [
                        self.x + dx * cos + dz * sin,
                        self.y + dy,
                        self.z - dx * sin + dz * cos,
                    ];
                    i += 1;
                }
            }
        }
        out
    }
}

/// Box on the normalized image plane as a center plus distances to the four
/// sides. All coordinates live in `[0, 1]`; distances are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox<F> {
    x_proj: F,
    y_proj: F,
    o_l: F,
    o_t: F,
    o_r: F,
    o_b: F,
}

impl<F: Real> ProjectedBox<F> {
    pub fn new(x_proj: F, y_proj: F, o_l: F, o_t: F, o_r: F, o_b: F) -> Result<Self, GeomError> {
        for v in [x_proj, y_proj, o_l, o_t, o_r, o_b] {
            ensure_finite(v)?;
        }
        for (o, what) in [(o_l, "o_l"), (o_t, "o_t"), (o_r, "o_r"), (o_b, "o_b")] {
            ensure_positive(o, what)?;
        }
        let one = F::one();
        if x_proj - o_l < F::zero() || x_proj + o_r > one {
            return Err(GeomError::DegenerateBox("horizontal extent outside [0,1]"));
        }
        if y_proj - o_t < F::zero() || y_proj + o_b > one {
            return Err(GeomError::DegenerateBox("vertical extent outside [0,1]"));
        }
        Ok(Self {
            x_proj,
            y_proj,
            o_l,
            o_t,
            o_r,
            o_b,
        })
    }

    pub fn x_proj(&self) -> F {
        self.x_proj
    }
    pub fn y_proj(&self) -> F {
        self.y_proj
    }
    pub fn o_l(&self) -> F {
        self.o_l
    }
    pub fn o_t(&self) -> F {
        self.o_t
    }
    pub fn o_r(&self) -> F {
        self.o_r
    }
    pub fn o_b(&self) -> F {
        self.o_b
    }

    /// Side distances in `(left, top, right, bottom)` order.
    pub fn offsets(&self) -> [F; 4] {
        [self.o_l, self.o_t, self.o_r, self.o_b]
    }
}

/// Box on the normalized image plane as top-left / bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox<F> {
    x_l: F,
    y_t: F,
    x_r: F,
    y_b: F,
}

impl<F: Real> CornerBox<F> {
    pub fn new(x_l: F, y_t: F, x_r: F, y_b: F) -> Result<Self, GeomError> {
        for v in [x_l, y_t, x_r, y_b] {
            ensure_finite(v)?;
        }
        let one = F::one();
        if x_l < F::zero() || x_r > one || y_t < F::zero() || y_b > one {
            return Err(GeomError::DegenerateBox("corners outside [0,1]"));
        }
        if x_l >= x_r || y_t >= y_b {
            return Err(GeomError::DegenerateBox("corners not strictly ordered"));
        }
        Ok(Self { x_l, y_t, x_r, y_b })
    }

    pub fn x_l(&self) -> F {
        self.x_l
    }
    pub fn y_t(&self) -> F {
        self.y_t
    }
    pub fn x_r(&self) -> F {
        self.x_r
    }
    pub fn y_b(&self) -> F {
        self.y_b
    }

    /// Corner values in `(x_l, y_t, x_r, y_b)` order.
    pub fn values(&self) -> [F; 4] {
        [self.x_l, self.y_t, self.x_r, self.y_b]
    }

    pub fn width(&self) -> F {
        self.x_r - self.x_l
    }
    pub fn height(&self) -> F {
        self.y_b - self.y_t
    }
}

/// Converts a center-plus-distances box to corner form.
pub fn reparameterize<F: Real>(b: &ProjectedBox<F>) -> CornerBox<F> {
    CornerBox {
        x_l: b.x_proj - b.o_l,
        y_t: b.y_proj - b.o_t,
        x_r: b.x_proj + b.o_r,
        y_b: b.y_proj + b.o_b,
    }
}

/// Converts a corner box back to center form, recentering at the corner-box
/// midpoint. Rejects boxes narrower or shorter than `2 * MIN_OFFSET`.
pub fn inverse_reparameterize<F: Real>(c: &CornerBox<F>) -> Result<ProjectedBox<F>, GeomError> {
    let min_extent = real::<F>(2.0 * MIN_OFFSET);
    if c.width() <= min_extent {
        return Err(GeomError::DegenerateBox("width <= 2 * MIN_OFFSET"));
    }
    if c.height() <= min_extent {
        return Err(GeomError::DegenerateBox("height <= 2 * MIN_OFFSET"));
    }
    let half = real::<F>(0.5);
    let x_proj = (c.x_l + c.x_r) * half;
    let y_proj = (c.y_t + c.y_b) * half;
    Ok(ProjectedBox {
        x_proj,
        y_proj,
        o_l: x_proj - c.x_l,
        o_t: y_proj - c.y_t,
        o_r: c.x_r - x_proj,
        o_b: c.y_b - y_proj,
    })
}

pub(crate) fn projected_box_from_corners_unchecked<F: Real>(c: &CornerBox<F>) -> ProjectedBox<F> {
    let half = real::<F>(0.5);
    let x_proj = (c.x_l + c.x_r) * half;
    let y_proj = (c.y_t + c.y_b) * half;
    ProjectedBox {
        x_proj,
        y_proj,
        o_l: x_proj - c.x_l,
        o_t: y_proj - c.y_t,
        o_r: c.x_r - x_proj,
        o_b: c.y_b - y_proj,
    }
}

pub(crate) fn corner_box_unchecked<F: Real>(x_l: F, y_t: F, x_r: F, y_b: F) -> CornerBox<F> {
    CornerBox { x_l, y_t, x_r, y_b }
}

/// Unclipped pixel-space enclosing box of the projected 3D corners, as
/// `(u_min, v_min, u_max, v_max)`.
pub fn pixel_extent<F: Real>(
    b: &Box3D<F>,
    cal: &CameraCalib<F>,
) -> Result<[F; 4], GeomError> {
    let corners = b.corners();
    let mut u_min = F::infinity();
    let mut u_max = F::neg_infinity();
    let mut v_min = F::infinity();
    let mut v_max = F::neg_infinity();
    for [x, y, z] in corners {
        if z <= F::zero() {
            return Err(GeomError::BehindCamera {
                z: z.to_f64().unwrap_or(f64::NAN),
            });
        }
        let u = cal.fx * x / z + cal.cx;
        let v = cal.fy * y / z + cal.cy;
        u_min = u_min.min(u);
        u_max = u_max.max(u);
        v_min = v_min.min(v);
        v_max = v_max.max(v);
    }
    Ok([u_min, v_min, u_max, v_max])
}

/// Projects the eight corners of a 3D box and returns the tight enclosing
/// 2D box on the normalized image plane, clipped to `[0, 1]`.
pub fn project_box3d<F: Real>(
    b: &Box3D<F>,
    cal: &CameraCalib<F>,
) -> Result<ProjectedBox<F>, GeomError> {
    let [u_min, v_min, u_max, v_max] = pixel_extent(b, cal)?;
    let x_l = clip01(u_min / cal.img_w);
    let x_r = clip01(u_max / cal.img_w);
    let y_t = clip01(v_min / cal.img_h);
    let y_b = clip01(v_max / cal.img_h);
    if x_l >= x_r || y_t >= y_b {
        return Err(GeomError::DegenerateBox("clipped projection collapsed"));
    }
    inverse_reparameterize(&CornerBox { x_l, y_t, x_r, y_b })
}

/// Depth implied by perspective projection: `fy * h3d / pixel_height`.
pub fn geometric_depth<F: Real>(h3d: F, pixel_height: F, fy: F) -> Result<F, GeomError> {
    if !pixel_height.is_finite() || pixel_height <= F::zero() {
        return Err(GeomError::DegenerateBox("pixel_height <= 0"));
    }
    ensure_finite(h3d)?;
    ensure_finite(fy)?;
    Ok(fy * h3d / pixel_height)
}

/// `min(max(x, 0), 1)`, rejecting non-finite input.
pub fn clip_unit<F: Real>(x: F) -> Result<F, GeomError> {
    ensure_finite(x)?;
    Ok(clip01(x))
}

/// Plain clamp to `[0, 1]`; callers guarantee finiteness.
pub(crate) fn clip01<F: Real>(x: F) -> F {
    x.max(F::zero()).min(F::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pbox(x: f64, y: f64, o: [f64; 4]) -> ProjectedBox<f64> {
        ProjectedBox::new(x, y, o[0], o[1], o[2], o[3]).unwrap()
    }

    #[test]
    fn reparameterize_basic() {
        let c = reparameterize(&pbox(0.5, 0.5, [0.1, 0.2, 0.1, 0.2]));
        assert_eq!(c.values(), [0.4, 0.3, 0.6, 0.7]);
    }

    #[test]
    fn reparameterize_minimal_offsets() {
        let e = 1e-6;
        let c = reparameterize(&pbox(0.5, 0.5, [e, e, e, e]));
        assert_relative_eq!(c.x_l(), 0.499999, max_relative = 1e-12);
        assert_relative_eq!(c.y_t(), 0.499999, max_relative = 1e-12);
        assert_relative_eq!(c.x_r(), 0.500001, max_relative = 1e-12);
        assert_relative_eq!(c.y_b(), 0.500001, max_relative = 1e-12);
    }

    #[test]
    fn reparameterize_full_frame() {
        let c = reparameterize(&pbox(0.3, 0.7, [0.3, 0.7, 0.7, 0.3]));
        assert_eq!(c.values(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn inverse_reparameterize_recenters_at_midpoint() {
        let b = inverse_reparameterize(&CornerBox::new(0.4, 0.3, 0.6, 0.7).unwrap()).unwrap();
        assert_relative_eq!(b.x_proj(), 0.5, max_relative = 1e-15);
        assert_relative_eq!(b.y_proj(), 0.5, max_relative = 1e-15);
        for (got, want) in b.offsets().iter().zip([0.1, 0.2, 0.1, 0.2]) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn inverse_reparameterize_full_frame() {
        let b = inverse_reparameterize(&CornerBox::new(0.0, 0.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(b.x_proj(), 0.5);
        assert_eq!(b.y_proj(), 0.5);
        assert_eq!(b.offsets(), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn corner_round_trip_is_identity() {
        let c0 = CornerBox::<f64>::new(0.4, 0.3, 0.6, 0.7).unwrap();
        let c1 = reparameterize(&inverse_reparameterize(&c0).unwrap());
        for (a, b) in c0.values().iter().zip(c1.values()) {
            assert!((*a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn inverse_reparameterize_rejects_slivers() {
        let c = CornerBox::new(0.5, 0.3, 0.5 + 1.5e-6, 0.7).unwrap();
        assert!(matches!(
            inverse_reparameterize(&c),
            Err(GeomError::DegenerateBox(_))
        ));
    }

    fn test_calib() -> CameraCalib<f64> {
        CameraCalib::new(700.0, 700.0, 640.0, 192.0, 1280.0, 384.0).unwrap()
    }

    #[test]
    fn project_on_axis_box_is_centered() {
        let b = Box3D::new(0.0, 0.0, 20.0, 2.0, 2.0, 4.0, 0.0).unwrap();
        let p = project_box3d(&b, &test_calib()).unwrap();
        assert_relative_eq!(p.x_proj(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn project_shrinks_with_depth() {
        let cal = test_calib();
        let near = project_box3d(&Box3D::new(0.0, 0.0, 20.0, 2.0, 2.0, 4.0, 0.0).unwrap(), &cal)
            .unwrap();
        let far = project_box3d(&Box3D::new(0.0, 0.0, 40.0, 2.0, 2.0, 4.0, 0.0).unwrap(), &cal)
            .unwrap();
        let n = reparameterize(&near);
        let f = reparameterize(&far);
        assert!(f.x_l() > n.x_l() && f.x_r() < n.x_r());
        assert!(f.y_t() > n.y_t() && f.y_b() < n.y_b());
    }

    // Independent oracle: project all eight corners by hand for one fixed
    // randomized case and compare the enclosing box.
    #[test]
    fn project_matches_corner_by_corner_oracle() {
        let cal = test_calib();
        let b = Box3D::new(1.3, 0.45, 23.7, 1.48, 1.72, 4.05, 0.37).unwrap();
        let p = project_box3d(&b, &cal).unwrap();
        let got = reparameterize(&p);

        let (sin, cos) = (0.37f64.sin(), 0.37f64.cos());
        let (hx, hy, hz) = (4.05 / 2.0, 1.48 / 2.0, 1.72 / 2.0);
        let mut us: Vec<f64> = Vec::new();
        let mut vs: Vec<f64> = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let (dx, dy, dz) = (sx * hx, sy * hy, sz * hz);
                    let x = 1.3 + dx * cos + dz * sin;
                    let y = 0.45 + dy;
                    let z = 23.7 - dx * sin + dz * cos;
                    us.push((700.0 * x / z + 640.0) / 1280.0);
                    vs.push((700.0 * y / z + 192.0) / 384.0);
                }
            }
        }
        let expect =
            |v: &Vec<f64>, f: fn(f64, f64) -> f64| v.iter().copied().reduce(f).unwrap();
        assert_relative_eq!(got.x_l(), expect(&us, f64::min), epsilon = 1e-9);
        assert_relative_eq!(got.x_r(), expect(&us, f64::max), epsilon = 1e-9);
        assert_relative_eq!(got.y_t(), expect(&vs, f64::min), epsilon = 1e-9);
        assert_relative_eq!(got.y_b(), expect(&vs, f64::max), epsilon = 1e-9);
    }

    #[test]
    fn project_rejects_box_behind_camera() {
        let b = Box3D::new(0.0, 0.0, 0.9, 2.0, 2.0, 4.0, 0.0).unwrap();
        assert!(matches!(
            project_box3d(&b, &test_calib()),
            Err(GeomError::BehindCamera { .. })
        ));
    }

    #[test]
    fn project_rejects_fully_out_of_frame() {
        let b = Box3D::new(200.0, 0.0, 20.0, 2.0, 2.0, 4.0, 0.0).unwrap();
        assert!(matches!(
            project_box3d(&b, &test_calib()),
            Err(GeomError::DegenerateBox(_))
        ));
    }

    #[test]
    fn project_translation_moves_center_right() {
        let cal = test_calib();
        let mut last = 0.0;
        for i in 0..8 {
            let x = -6.0 + 2.0 * i as f64;
            let b = Box3D::new(x, 0.0, 40.0, 2.0, 2.0, 4.0, 0.0).unwrap();
            let p = project_box3d(&b, &cal).unwrap();
            if i > 0 {
                assert!(p.x_proj() > last, "x_proj not monotone at step {i}");
            }
            last = p.x_proj();
        }
    }

    #[test]
    fn geometric_depth_examples() {
        assert_relative_eq!(
            geometric_depth(1.5, 52.5, 700.0).unwrap(),
            20.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            geometric_depth(1.5, 700.0 * 1.5, 700.0).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        let d1 = geometric_depth(1.5, 80.0, 700.0).unwrap();
        let d2 = geometric_depth(1.5, 40.0, 700.0).unwrap();
        assert_relative_eq!(d2, 2.0 * d1, max_relative = 1e-12);
    }

    #[test]
    fn geometric_depth_inverts() {
        let (h, px, fy) = (1.73, 61.0, 721.5377);
        let d = geometric_depth(h, px, fy).unwrap();
        assert_relative_eq!(d * px / fy, h, max_relative = 1e-12);
    }

    #[test]
    fn geometric_depth_rejects_flat_box() {
        assert!(geometric_depth(1.5, 0.0, 700.0).is_err());
        assert!(geometric_depth(1.5, -3.0, 700.0).is_err());
    }

    #[test]
    fn clip_unit_basic() {
        assert_eq!(clip_unit(0.5).unwrap(), 0.5);
        assert_eq!(clip_unit(-0.2).unwrap(), 0.0);
        assert_eq!(clip_unit(1.7).unwrap(), 1.0);
        assert_eq!(clip_unit(f64::NAN), Err(GeomError::NonFinite));
        assert_eq!(clip_unit(f64::INFINITY), Err(GeomError::NonFinite));
    }

    #[test]
    fn projected_box_rejects_bad_inputs() {
        assert!(ProjectedBox::new(0.5, 0.5, 0.0, 0.1, 0.1, 0.1).is_err());
        assert!(ProjectedBox::new(0.05, 0.5, 0.1, 0.1, 0.1, 0.1).is_err());
        assert!(ProjectedBox::new(0.5, 0.98, 0.1, 0.1, 0.1, 0.1).is_err());
        assert!(ProjectedBox::new(f64::NAN, 0.5, 0.1, 0.1, 0.1, 0.1).is_err());
    }
}
