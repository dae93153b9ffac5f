//! EWA projection of 3D Gaussians to screen-space ellipses.

use super::camera::Camera;
use crate::gaussians::Gaussian;
use crate::graph::rotation_from_quat;

pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic screen-space variance added to every splat, in px^2.
pub const LOW_PASS: f64 = 0.3;
/// Splats extend to this Mahalanobis radius.
pub const SIGMA_CUTOFF: f64 = 3.0;

pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Screen-space splat of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Pixel coordinates; pixel `(x, y)` has its centre at `(x + 0.5, y + 0.5)`.
    pub mean: [f64; 2],
    /// Covariance `(xx, xy, yy)` in px^2, low-pass included.
    pub cov: [f64; 3],
    /// Inverse covariance `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Screen radius enclosing the cutoff ellipse.
    pub radius: f64,
}

/// Intermediate quantities kept for the adjoint.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectionState {
    pub t: [f64; 3],
    pub q_unit: [f64; 4],
    pub q_norm: f64,
    pub rot: Mat3,
    pub scale2: [f64; 3],
    /// Covariance in camera space.
    pub cov_cam: Mat3,
    /// Perspective Jacobian (2x3).
    pub jac: [[f64; 3]; 2],
}

pub(crate) fn project_full(g: &Gaussian, cam: &Camera) -> Option<(Projection, ProjectionState)> {
    let t = cam.to_camera(g.mean);
    if !(t[2] > NEAR_PLANE) {
        return None;
    }
    let qn = g.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(qn > 0.0) {
        return None;
    }
    let q = [g.rotation[0] / qn, g.rotation[1] / qn, g.rotation[2] / qn, g.rotation[3] / qn];
    let rot = rotation_from_quat(&q);
    let s2 = [(2.0 * g.log_scale[0]).exp(), (2.0 * g.log_scale[1]).exp(), (2.0 * g.log_scale[2]).exp()];
    let mut rs = rot;
    for row in rs.iter_mut() {
        for k in 0..3 {
            row[k] *= s2[k];
        }
    }
    let cov3 = mat_mul(&rs, &transpose(&rot));
    let w = &cam.rotation;
    let cov_cam = mat_mul(&mat_mul(w, &cov3), &transpose(w));
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let jac = [[cam.fx / tz, 0.0, -cam.fx * tx / (tz * tz)], [0.0, cam.fy / tz, -cam.fy * ty / (tz * tz)]];
    let mut jc = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            jc[i][j] = (0..3).map(|k| jac[i][k] * cov_cam[k][j]).sum();
        }
    }
    let c2 = |i: usize, j: usize| -> f64 { (0..3).map(|k| jc[i][k] * jac[j][k]).sum() };
    let (a, b, c) = (c2(0, 0) + LOW_PASS, c2(0, 1), c2(1, 1) + LOW_PASS);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let proj = Projection {
        mean: [cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy],
        cov: [a, b, c],
        conic,
        depth: tz,
        radius: SIGMA_CUTOFF * lambda.sqrt(),
    };
    Some((proj, ProjectionState { t, q_unit: q, q_norm: qn, rot, scale2: s2, cov_cam, jac }))
}

/// Projects a Gaussian; `None` when it lies behind the near plane.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Projection> {
    project_full(g, cam).map(|p| p.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, 1.0, 0.0], 40.0, 64, 64)
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let c = cam();
        let p = project_gaussian(&Gaussian::isotropic([0.0; 3], 0.01, 0.5, [1.0; 3]), &c).unwrap();
        assert!((p.mean[0] - c.cx).abs() < 1e-12 && (p.mean[1] - c.cy).abs() < 1e-12);
        assert!((p.depth - 1.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        assert!(project_gaussian(&Gaussian::isotropic([0.0, 0.0, -1.5], 0.01, 0.5, [1.0; 3]), &cam()).is_none());
    }

    #[test]
    fn doubling_focal_doubles_offset() {
        let c = cam();
        let g = Gaussian::isotropic([0.05, -0.03, 0.2], 0.01, 0.5, [1.0; 3]);
        let p1 = project_gaussian(&g, &c).unwrap();
        let p2 = project_gaussian(&g, &c.zoomed(2.0)).unwrap();
        for k in 0..2 {
            let pp = [c.cx, c.cy][k];
            assert!(((p2.mean[k] - pp) - 2.0 * (p1.mean[k] - pp)).abs() < 1e-9);
        }
    }
}
