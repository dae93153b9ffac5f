//! Bilinear lookups into texel-major UV feature maps.

use crate::error::{Error, Result};
use crate::graph::{SampleQuery, Tensor};

/// Size of a UV feature map. Texel `(i, j)` (column `i`, row `j`) is stored at
/// row `j * width + i` and is centred on `((i + 0.5) / width, (j + 0.5) / height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn texels(&self) -> usize {
        self.height * self.width
    }

    /// Texel whose centre is closest to `uv` (ties go to the lower index).
    pub fn nearest_texel(&self, uv: [f64; 2]) -> u32 {
        let i = ((uv[0] * self.width as f64 - 0.5).round().max(0.0) as usize).min(self.width - 1);
        let j = ((uv[1] * self.height as f64 - 0.5).round().max(0.0) as usize).min(self.height - 1);
        (j * self.width + i) as u32
    }
}

fn axis(x: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let p = (x * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64)
}

/// Bilinear weights for `uv` with half-texel border clamping, reading
/// channels from `col` onward.
pub fn sample_query(shape: MapShape, uv: [f64; 2], col: usize) -> Result<SampleQuery> {
    let [u, v] = uv;
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::UvOutOfRange { u, v });
    }
    let (x0, x1, fx) = axis(u, shape.width);
    let (y0, y1, fy) = axis(v, shape.height);
    let w = shape.width;
    Ok(SampleQuery {
        texels: [(y0 * w + x0) as u32, (y0 * w + x1) as u32, (y1 * w + x0) as u32, (y1 * w + x1) as u32],
        weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        col: col as u32,
    })
}

/// Samples `cols` channels of `map` at `uv`.
pub fn sample_map(map: &Tensor, shape: MapShape, uv: [f64; 2], col: usize, cols: usize) -> Result<Vec<f64>> {
    if map.rows != shape.texels() || col + cols > map.cols {
        return Err(Error::Shape(format!("map is {}x{}, expected {} texels", map.rows, map.cols, shape.texels())));
    }
    let q = sample_query(shape, uv, col)?;
    let mut out = vec![0.0; cols];
    for k in 0..4 {
        let src = &map.row(q.texels[k] as usize)[col..col + cols];
        for (o, s) in out.iter_mut().zip(src) {
            *o += q.weights[k] * s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: MapShape, cols: usize) -> Tensor {
        let n = shape.texels();
        Tensor::from_vec(n, cols, (0..n * cols).map(|i| (i as f64 * 0.37).sin()).collect())
    }

    #[test]
    fn texel_centre_returns_texel() {
        let shape = MapShape { height: 5, width: 7 };
        let map = ramp(shape, 3);
        for j in 0..5 {
            for i in 0..7 {
                let uv = [(i as f64 + 0.5) / 7.0, (j as f64 + 0.5) / 5.0];
                let s = sample_map(&map, shape, uv, 0, 3).unwrap();
                assert_eq!(s, map.row(j * 7 + i).to_vec());
            }
        }
    }

    #[test]
    fn midway_is_mean_of_neighbours() {
        let shape = MapShape { height: 4, width: 4 };
        let map = ramp(shape, 2);
        let s = sample_map(&map, shape, [2.0 / 4.0, 1.5 / 4.0], 0, 2).unwrap();
        for c in 0..2 {
            let m = 0.5 * (map.at(4 + 1, c) + map.at(4 + 2, c));
            assert!((s[c] - m).abs() < 1e-15);
        }
    }

    #[test]
    fn borders_clamp() {
        let shape = MapShape { height: 3, width: 3 };
        let map = ramp(shape, 1);
        assert_eq!(sample_map(&map, shape, [0.0, 0.0], 0, 1).unwrap()[0], map.at(0, 0));
        assert_eq!(sample_map(&map, shape, [1.0, 1.0], 0, 1).unwrap()[0], map.at(8, 0));
    }

    #[test]
    fn out_of_range_uv_is_an_error() {
        let shape = MapShape { height: 3, width: 3 };
        assert!(matches!(sample_query(shape, [1.01, 0.5], 0), Err(Error::UvOutOfRange { .. })));
    }

    #[test]
    fn weights_form_partition_of_unity() {
        let shape = MapShape { height: 8, width: 8 };
        for k in 0..50 {
            let uv = [(k as f64 * 0.0731) % 1.0, (k as f64 * 0.191) % 1.0];
            let q = sample_query(shape, uv, 0).unwrap();
            assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.weights.iter().all(|w| *w >= 0.0));
        }
    }
}
