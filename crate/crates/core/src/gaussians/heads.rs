//! Attribute heads mapping fused point features to Gaussian parameters.

use std::sync::Arc;

use super::cloud::{Gaussian, GaussianCloud};
use crate::error::{Error, Result};
use crate::features::network::dense;
use crate::features::{Bound, NetConfig, HEAD_OUT};
use crate::graph::{Graph, Tensor, Var};
use crate::hand::HandSide;

/// Graph variables holding the per-point Gaussian attributes.
#[derive(Debug, Clone, Copy)]
pub struct AttrVars {
    pub mean: Var,
    pub log_scale: Var,
    pub rotation: Var,
    pub opacity: Var,
    pub color: Var,
    pub validity: Var,
}

/// Non-learned per-point data carried alongside the attributes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointMeta {
    pub uv: Vec<[f64; 2]>,
    pub side: Vec<HandSide>,
    pub parent: Vec<u32>,
}

impl PointMeta {
    pub fn len(&self) -> usize {
        self.side.len()
    }

    pub fn is_empty(&self) -> bool {
        self.side.is_empty()
    }

    pub fn gather(&self, rows: &[u32]) -> PointMeta {
        PointMeta {
            uv: rows.iter().map(|&r| self.uv[r as usize]).collect(),
            side: rows.iter().map(|&r| self.side[r as usize]).collect(),
            parent: rows.iter().map(|&r| self.parent[r as usize]).collect(),
        }
    }
}

impl AttrVars {
    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.mean).rows
    }

    pub fn vars(&self) -> [Var; 6] {
        [self.mean, self.log_scale, self.rotation, self.opacity, self.color, self.validity]
    }

    /// Copies the current attribute values into a cloud.
    pub fn cloud(&self, g: &Graph, meta: &PointMeta) -> GaussianCloud {
        let (m, s, q, o, c, v) = (
            g.value(self.mean),
            g.value(self.log_scale),
            g.value(self.rotation),
            g.value(self.opacity),
            g.value(self.color),
            g.value(self.validity),
        );
        let points = (0..m.rows)
            .map(|i| Gaussian {
                mean: [m.at(i, 0), m.at(i, 1), m.at(i, 2)],
                log_scale: [s.at(i, 0), s.at(i, 1), s.at(i, 2)],
                rotation: [q.at(i, 0), q.at(i, 1), q.at(i, 2), q.at(i, 3)],
                opacity: o.at(i, 0),
                color: [c.at(i, 0), c.at(i, 1), c.at(i, 2)],
                validity: v.at(i, 0),
                uv: meta.uv[i],
                side: meta.side[i],
                parent: meta.parent[i],
            })
            .collect();
        GaussianCloud { points }
    }

    /// Rows of the attributes, in the given order.
    pub fn gather(&self, g: &mut Graph, rows: &Arc<Vec<u32>>) -> AttrVars {
        AttrVars {
            mean: g.gather_rows(self.mean, rows.clone()),
            log_scale: g.gather_rows(self.log_scale, rows.clone()),
            rotation: g.gather_rows(self.rotation, rows.clone()),
            opacity: g.gather_rows(self.opacity, rows.clone()),
            color: g.gather_rows(self.color, rows.clone()),
            validity: g.gather_rows(self.validity, rows.clone()),
        }
    }
}

/// Columns of the head output holding the colour logits.
pub const COLOR_COLS: std::ops::Range<usize> = 11..14;

/// Maps features to Gaussians around `base` positions. Offsets are squashed
/// into a ball of radius `offset_clamp`; `base_log_scale` is added to the raw
/// log-scale so a zero network yields Gaussians of that size.
pub fn predict_attributes(g: &mut Graph, b: &Bound, cfg: &NetConfig, f: Var, base: Var, base_log_scale: f64) -> Result<AttrVars> {
    let (n, c) = g.value(f).shape();
    if c != cfg.feature_dim || g.value(base).shape() != (n, 3) {
        return Err(Error::Shape(format!("{n}x{c} features against {:?} base positions", g.value(base).shape())));
    }
    let h = dense(g, b, "head.l1", f);
    let h = g.tanh(h);
    let raw = dense(g, b, "head.l2", h);
    debug_assert_eq!(g.value(raw).cols, HEAD_OUT);
    let off = g.slice_cols(raw, 0, 3);
    let off = g.radial_squash(off, cfg.offset_clamp);
    let mean = g.add(base, off);
    let ls = g.slice_cols(raw, 3, 3);
    let ls_base = g.constant(Tensor::row_vector(vec![base_log_scale; 3]));
    let log_scale = g.add_bias(ls, ls_base);
    let q = g.slice_cols(raw, 6, 4);
    let q_base = g.constant(Tensor::row_vector(vec![1.0, 0.0, 0.0, 0.0]));
    let q = g.add_bias(q, q_base);
    let rotation = g.normalize_rows(q);
    let o = g.slice_cols(raw, 10, 1);
    let opacity = g.sigmoid(o);
    let col = g.slice_cols(raw, COLOR_COLS.start, 3);
    let color = g.sigmoid(col);
    let v = g.slice_cols(raw, 14, 1);
    let validity = g.sigmoid(v);
    Ok(AttrVars { mean, log_scale, rotation, opacity, color, validity })
}
