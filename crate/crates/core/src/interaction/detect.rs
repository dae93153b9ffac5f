//! Interaction labels from the neighbour-set difference between the canonical
//! and posed point sets.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::index::{brute_force_knn, NeighborIndex};
use crate::error::{Error, Result};
use crate::hand::HandSide;

pub const LABELS_MAGIC: &[u8; 4] = b"IHLB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Neighbours gathered on the canonical mesh.
    pub canonical_neighbours: usize,
    /// Neighbours gathered on the posed mesh.
    pub posed_neighbours: usize,
    /// A point is interacting when the symmetric difference exceeds this.
    pub threshold: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { canonical_neighbours: 100, posed_neighbours: 100, threshold: 90 }
    }
}

impl DetectionConfig {
    pub fn validate(&self, points: usize) -> Result<()> {
        let (nc, np) = (self.canonical_neighbours, self.posed_neighbours);
        if nc == 0 || np == 0 || nc > points || np > points {
            return Err(Error::Invalid(format!("neighbour counts ({nc}, {np}) must lie in 1..={points}")));
        }
        if self.threshold > nc + np {
            return Err(Error::Invalid(format!("threshold {} exceeds {}", self.threshold, nc + np)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLabels {
    pub flags: Vec<u8>,
    /// Flagged points per hand (left, right).
    pub per_hand: [usize; 2],
    /// Flagged points whose posed neighbourhood reaches the other hand.
    pub cross_hand: usize,
}

impl InteractionLabels {
    pub fn from_flags(flags: Vec<u8>, sides: &[HandSide], cross_hand: usize) -> Self {
        let mut per_hand = [0; 2];
        for (f, s) in flags.iter().zip(sides) {
            if *f == 1 {
                per_hand[s.index()] += 1;
            }
        }
        InteractionLabels { flags, per_hand, cross_hand }
    }

    pub fn none(n: usize) -> Self {
        InteractionLabels { flags: vec![0; n], per_hand: [0; 2], cross_hand: 0 }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.flags[i] == 1
    }

    pub fn flagged(&self) -> Vec<usize> {
        self.flags.iter().enumerate().filter(|(_, &f)| f == 1).map(|(i, _)| i).collect()
    }

    /// Fraction of flagged points per hand.
    pub fn summary(&self, sides: &[HandSide]) -> [f64; 2] {
        let mut totals = [0usize; 2];
        for s in sides {
            totals[s.index()] += 1;
        }
        [0, 1].map(|h| if totals[h] == 0 { 0.0 } else { self.per_hand[h] as f64 / totals[h] as f64 })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(LABELS_MAGIC)?;
        w.write_u32::<LittleEndian>(self.flags.len() as u32)?;
        w.write_all(&self.flags)?;
        Ok(())
    }

    /// Reads the raw flags of a label file.
    pub fn read<R: Read>(mut r: R) -> Result<Vec<u8>> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LABELS_MAGIC {
            return Err(Error::Format("not an interaction label file".into()));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut flags = vec![0u8; n];
        r.read_exact(&mut flags)?;
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::Format("label byte other than 0 or 1".into()));
        }
        Ok(flags)
    }
}

/// Size of the symmetric difference of two index sets (each sorted ascending).
fn symmetric_difference(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut common) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    a.len() + b.len() - 2 * common
}

fn check_inputs(canonical: &[[f64; 3]], posed: &[[f64; 3]], sides: &[HandSide], cfg: &DetectionConfig) -> Result<()> {
    if canonical.len() != posed.len() || sides.len() != canonical.len() {
        return Err(Error::Shape(format!(
            "canonical ({}), posed ({}) and side ({}) lists are misaligned",
            canonical.len(),
            posed.len(),
            sides.len()
        )));
    }
    if canonical.is_empty() {
        return Err(Error::EmptyPoints);
    }
    cfg.validate(canonical.len())
}

fn label_point<F>(q: usize, sides: &[HandSide], cfg: &DetectionConfig, knn: F) -> Result<(u8, bool)>
where
    F: Fn(bool, usize, usize) -> Result<Vec<u32>>,
{
    let mut omega_c = knn(true, q, cfg.canonical_neighbours)?;
    let mut omega_p = knn(false, q, cfg.posed_neighbours)?;
    let reaches_other = omega_p.iter().any(|&j| sides[j as usize] != sides[q]);
    omega_c.sort_unstable();
    omega_p.sort_unstable();
    let flag = (symmetric_difference(&omega_c, &omega_p) > cfg.threshold) as u8;
    Ok((flag, reaches_other))
}

fn collect(results: Vec<Result<(u8, bool)>>, sides: &[HandSide]) -> Result<InteractionLabels> {
    let mut flags = Vec::with_capacity(results.len());
    let mut cross = 0;
    for r in results {
        let (f, reaches) = r?;
        if f == 1 && reaches {
            cross += 1;
        }
        flags.push(f);
    }
    Ok(InteractionLabels::from_flags(flags, sides, cross))
}

/// Grid-accelerated detection. Neighbour sets are index sets over the whole
/// two-hand list; the canonical set is queried at the point's canonical
/// position, the posed set at its posed position.
pub fn detect_interactions(
    canonical: &[[f64; 3]],
    posed: &[[f64; 3]],
    sides: &[HandSide],
    cfg: &DetectionConfig,
) -> Result<InteractionLabels> {
    check_inputs(canonical, posed, sides, cfg)?;
    let ci = NeighborIndex::build(canonical)?;
    let pi = NeighborIndex::build(posed)?;
    let results: Vec<_> = (0..canonical.len())
        .into_par_iter()
        .map(|q| {
            label_point(q, sides, cfg, |canon, q, k| {
                if canon {
                    ci.knn(&canonical[q], k)
                } else {
                    pi.knn(&posed[q], k)
                }
            })
        })
        .collect();
    collect(results, sides)
}

/// O(N^2) reference detector with the same contract as [`detect_interactions`].
pub fn brute_force_detect(
    canonical: &[[f64; 3]],
    posed: &[[f64; 3]],
    sides: &[HandSide],
    cfg: &DetectionConfig,
) -> Result<InteractionLabels> {
    check_inputs(canonical, posed, sides, cfg)?;
    let results: Vec<_> = (0..canonical.len())
        .into_par_iter()
        .map(|q| {
            label_point(q, sides, cfg, |canon, q, k| {
                if canon {
                    brute_force_knn(canonical, &canonical[q], k)
                } else {
                    brute_force_knn(posed, &posed[q], k)
                }
            })
        })
        .collect();
    collect(results, sides)
}

/// Labels for a finer point set, copied from each point's coarse parent vertex.
pub fn inherit_from_parents(coarse: &InteractionLabels, parents: &[u32], sides: &[HandSide]) -> Result<InteractionLabels> {
    let mut flags = Vec::with_capacity(parents.len());
    for &p in parents {
        let f = *coarse.flags.get(p as usize).ok_or_else(|| Error::Invalid(format!("dangling parent id {p}")))?;
        flags.push(f);
    }
    Ok(InteractionLabels::from_flags(flags, sides, coarse.cross_hand))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_difference_counts() {
        assert_eq!(symmetric_difference(&[1, 2, 3], &[2, 3, 4]), 2);
        assert_eq!(symmetric_difference(&[1, 2], &[3, 4]), 4);
        assert_eq!(symmetric_difference(&[], &[]), 0);
    }

    #[test]
    fn identical_sets_flag_nothing() {
        let pts: Vec<[f64; 3]> = (0..300).map(|i| [(i % 10) as f64, (i / 10 % 10) as f64 * 1.1, (i / 100) as f64 * 0.9]).collect();
        let sides = vec![HandSide::Left; 300];
        let cfg = DetectionConfig::default();
        let l = detect_interactions(&pts, &pts, &sides, &cfg).unwrap();
        assert!(l.flags.iter().all(|&f| f == 0));
    }

    #[test]
    fn fully_disjoint_neighbourhoods_flag() {
        // Two clusters of 100 points; in the posed set point 0 moves into the other cluster.
        let mut canonical = Vec::new();
        for i in 0..100 {
            canonical.push([i as f64 * 1e-3, 0.0, 0.0]);
        }
        for i in 0..100 {
            canonical.push([10.0 + i as f64 * 1e-3, 0.0, 0.0]);
        }
        let mut posed = canonical.clone();
        posed[0] = [10.05, 1e-4, 0.0];
        let sides: Vec<HandSide> = (0..200).map(|i| HandSide::from_index(i / 100)).collect();
        let cfg = DetectionConfig::default();
        let l = detect_interactions(&canonical, &posed, &sides, &cfg).unwrap();
        // omega_c(0) = first cluster (incl. 0); omega_p(0) = 0 plus 99 of the second cluster
        // -> |sym diff| = 99 + 99 = 198 > 90
        assert_eq!(l.flags[0], 1);
        assert_eq!(l.cross_hand, 1);
        assert_eq!(l, brute_force_detect(&canonical, &posed, &sides, &cfg).unwrap());
    }

    #[test]
    fn misaligned_lengths_are_rejected() {
        let a = vec![[0.0; 3]; 5];
        let b = vec![[0.0; 3]; 4];
        let s = vec![HandSide::Left; 5];
        let cfg = DetectionConfig { canonical_neighbours: 2, posed_neighbours: 2, threshold: 1 };
        assert!(matches!(detect_interactions(&a, &b, &s, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn label_file_round_trip() {
        let l = InteractionLabels::from_flags(vec![0, 1, 1, 0], &[HandSide::Left; 4], 0);
        let mut buf = Vec::new();
        l.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"IHLB");
        assert_eq!(buf.len(), 4 + 4 + 4);
        assert_eq!(InteractionLabels::read(&buf[..]).unwrap(), l.flags);
    }
}
