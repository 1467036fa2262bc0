use nalgebra::{Matrix3x4, Matrix4, Vector2, Vector3, Vector4};

use super::GeometryError;

/// Pinhole projection from the rectified camera frame into pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    p: Matrix3x4<f64>,
    image_width: u32,
    image_height: u32,
}

impl CameraModel {
    pub fn new(p: Matrix3x4<f64>, image_width: u32, image_height: u32) -> Result<Self, GeometryError> {
        if image_width == 0 || image_height == 0 {
            return Err(GeometryError::InvalidCamera("image dimensions must be positive".into()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("projection matrix has non-finite entries".into()));
        }
        if p.rank(1e-12) < 3 {
            return Err(GeometryError::InvalidCamera("projection matrix is rank deficient".into()));
        }
        Ok(Self { p, image_width, image_height })
    }

    /// Canonical pinhole camera with focal length `f`, principal point `(cx, cy)`.
    pub fn pinhole(f: f64, cx: f64, cy: f64, image_width: u32, image_height: u32) -> Result<Self, GeometryError> {
        #[rustfmt::skip]
        let p = Matrix3x4::new(
            f, 0.0, cx, 0.0,
            0.0, f, cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self::new(p, image_width, image_height)
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    /// The 4x4 matrix obtained by appending `[0 0 0 1]` to the projection.
    pub fn augmented(&self) -> Matrix4<f64> {
        let mut k = Matrix4::zeros();
        k.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.p);
        k[(3, 3)] = 1.0;
        k
    }

    /// Homogeneous image coordinates `P·[p;1]`.
    pub fn project_homogeneous(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.p * Vector4::new(p.x, p.y, p.z, 1.0)
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let h = self.project_homogeneous(p);
        if !(h.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(h.z));
        }
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Point on the camera ray through pixel `(u, v)` whose rectified depth is `z`.
    pub fn backproject_at_depth(&self, u: f64, v: f64, z: f64) -> Result<Vector3<f64>, GeometryError> {
        // (row_i - pix_i * row_2) . [x y z 1] = 0 for i in {0, 1}; solve for x, y.
        let p = &self.p;
        let r0 = p.row(0) - p.row(2) * u;
        let r1 = p.row(1) - p.row(2) * v;
        let a = nalgebra::Matrix2::new(r0[0], r0[1], r1[0], r1[1]);
        let b = nalgebra::Vector2::new(-(r0[2] * z + r0[3]), -(r1[2] * z + r1[3]));
        let sol = a.lu().solve(&b).ok_or_else(|| GeometryError::InvalidCamera("ray back-projection is singular".into()))?;
        Ok(Vector3::new(sol.x, sol.y, z))
    }

    /// Position of the sensor (camera centre) in the rectified frame, i.e. the null vector of P.
    pub fn center(&self) -> Vector3<f64> {
        let m = self.p.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.p.column(3).into_owned();
        match m.try_inverse() {
            Some(inv) => -(inv * t),
            None => Vector3::zeros(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam() -> CameraModel {
        CameraModel::new(Matrix3x4::identity(), 100, 100).unwrap()
    }

    #[test]
    fn projects_on_axis_to_origin() {
        let uv = identity_cam().project_point(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(uv, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn projects_by_dehomogenization() {
        let uv = identity_cam().project_point(&Vector3::new(2.0, 3.0, 2.0)).unwrap();
        assert_eq!(uv, Vector2::new(1.0, 1.5));
    }

    #[test]
    fn zero_depth_is_rejected() {
        let err = identity_cam().project_point(&Vector3::new(1.0, 1.0, 0.0)).unwrap_err();
        assert!(matches!(err, GeometryError::NonPositiveDepth(_)));
    }

    #[test]
    fn rejects_rank_deficient_projection() {
        assert!(CameraModel::new(Matrix3x4::zeros(), 10, 10).is_err());
        assert!(CameraModel::new(Matrix3x4::identity(), 0, 10).is_err());
    }

    #[test]
    fn backprojection_inverts_projection() {
        let mut p = CameraModel::pinhole(721.5, 609.6, 172.9, 1242, 375).unwrap().p;
        p[(0, 3)] = 44.86;
        p[(1, 3)] = 0.2163;
        p[(2, 3)] = 0.0027;
        let cam = CameraModel::new(p, 1242, 375).unwrap();
        let x = Vector3::new(-3.2, 1.1, 23.0);
        let uv = cam.project_point(&x).unwrap();
        let back = cam.backproject_at_depth(uv.x, uv.y, x.z).unwrap();
        assert!((back - x).norm() < 1e-9);
    }
}
