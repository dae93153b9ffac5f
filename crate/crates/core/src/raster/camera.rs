//! Pinhole camera with a world-to-camera rigid transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera space looks down +z with x to the right and y down the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rows are the camera axes expressed in world coordinates.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` pointing towards the top
    /// of the image and a vertical field of view in degrees.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y_deg: f64, width: usize, height: usize) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let rotation = [x, y, z];
        let mut translation = [0.0; 3];
        for (r, t) in rotation.iter().zip(translation.iter_mut()) {
            *t = -(r[0] * eye[0] + r[1] * eye[1] + r[2] * eye[2]);
        }
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Camera { width, height, fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64, rotation, translation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!("image size {}x{} must be positive", self.width, self.height)));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                if (d - e).abs() > 1e-6 {
                    return Err(Error::Invalid("camera rotation is not orthonormal".into()));
                }
            }
        }
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().chain(&self.translation).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Invalid("non-finite camera parameter".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for i in 0..3 {
            out[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn intrinsics(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn extrinsic(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [[r[0][0], r[0][1], r[0][2], t[0]], [r[1][0], r[1][1], r[1][2], t[1]], [r[2][0], r[2][1], r[2][2], t[2]], [0.0, 0.0, 0.0, 1.0]]
    }

    /// Extrinsic (16) then intrinsic (9) entries, row-major. Intrinsics are
    /// divided by the image size so the vector does not depend on resolution.
    pub fn flatten(&self) -> [f64; 25] {
        let mut out = [0.0; 25];
        for (i, row) in self.extrinsic().iter().enumerate() {
            out[4 * i..4 * i + 4].copy_from_slice(row);
        }
        let k = self.intrinsics();
        let (w, h) = (self.width as f64, self.height as f64);
        let scale = [[w, w, w], [h, h, h], [1.0, 1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                out[16 + 3 * i + j] = k[i][j] / scale[i][j];
            }
        }
        out
    }

    /// Same camera with the focal lengths multiplied by `s`.
    pub fn zoomed(&self, s: f64) -> Self {
        Camera { fx: self.fx * s, fy: self.fy * s, ..self.clone() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Camera = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}
