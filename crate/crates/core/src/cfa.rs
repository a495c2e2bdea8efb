//! Color filter arrays: Bayer (RGGB) and quad-Bayer.
//!
//! Quad-Bayer tiles the plane with 4×4 cells; inside a cell red occupies the
//! top-left 2×2 block, green the two off-diagonal blocks and blue the
//! bottom-right block.

use std::fmt;
use std::str::FromStr;

use crate::cube::VideoCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfaPattern {
    Bayer,
    QuadBayer,
}

/// Site classes in sub-measurement order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    R,
    G1,
    G2,
    B,
}

impl Site {
    pub fn channel(self) -> usize {
        match self {
            Site::R => 0,
            Site::G1 | Site::G2 => 1,
            Site::B => 2,
        }
    }
}

impl CfaPattern {
    pub fn period(self) -> usize {
        match self {
            CfaPattern::Bayer => 2,
            CfaPattern::QuadBayer => 4,
        }
    }

    /// Edge length of one same-color block.
    fn block(self) -> usize {
        self.period() / 2
    }

    #[inline]
    pub fn site(self, h: usize, w: usize) -> Site {
        let b = self.block();
        let row = (h % self.period()) / b;
        let col = (w % self.period()) / b;
        match (row, col) {
            (0, 0) => Site::R,
            (0, 1) => Site::G1,
            (1, 0) => Site::G2,
            _ => Site::B,
        }
    }

    /// RGB channel index sampled at `(h, w)`.
    #[inline]
    pub fn channel_at(self, h: usize, w: usize) -> usize {
        self.site(h, w).channel()
    }

    pub fn check_dims(self, h: usize, w: usize) -> Result<()> {
        let p = self.period();
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "{self} needs dims divisible by {p}, got {h}×{w}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CfaPattern::Bayer => "bayer",
            CfaPattern::QuadBayer => "quad",
        })
    }
}

impl FromStr for CfaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bayer" => Ok(CfaPattern::Bayer),
            "quad" | "quadbayer" | "quad-bayer" => Ok(CfaPattern::QuadBayer),
            other => Err(Error::Config(format!("unknown CFA pattern `{other}`"))),
        }
    }
}

/// Binary R, G, B maps as `H × W` cubes.
pub fn cfa_masks(pattern: CfaPattern, h: usize, w: usize) -> Result<[VideoCube; 3]> {
    pattern.check_dims(h, w)?;
    let mut maps = [
        VideoCube::zeros(&[h, w]),
        VideoCube::zeros(&[h, w]),
        VideoCube::zeros(&[h, w]),
    ];
    for hi in 0..h {
        for wi in 0..w {
            maps[pattern.channel_at(hi, wi)].data_mut()[hi * w + wi] = 1.0;
        }
    }
    Ok(maps)
}

/// Samples an `H × W × 3 × T` video through the CFA into `H × W × 1 × T` raw.
pub fn mosaic(rgb: &VideoCube, pattern: CfaPattern) -> Result<VideoCube> {
    let [h, w, c, t] = rgb.hwct();
    if c != 3 {
        return Err(Error::Shape(format!("mosaic needs 3 channels, got {c}")));
    }
    pattern.check_dims(h, w)?;
    Ok(VideoCube::from_fn(h, w, 1, t, |hi, wi, _, ti| {
        rgb.at(hi, wi, pattern.channel_at(hi, wi), ti)
    }))
}

fn plane_dims(plane: &VideoCube) -> Result<(usize, usize)> {
    let [h, w, c, t] = plane.hwct();
    if c != 1 || t != 1 {
        return Err(Error::Shape(format!(
            "expected a single plane, got dims {:?}",
            plane.dims()
        )));
    }
    Ok((h, w))
}

/// Position of `(h, w)` inside its site class's `(H/2) × (W/2)` sub-measurement.
#[inline]
fn sub_index(pattern: CfaPattern, h: usize, w: usize) -> (usize, usize) {
    let b = pattern.block();
    let p = pattern.period();
    ((h / p) * b + h % b, (w / p) * b + w % b)
}

/// Splits an `H × W` plane into the four site-class maps `(r, g1, g2, b)`,
/// each `(H/2) × (W/2)`. Quad-Bayer blocks stay intact as 2×2 sub-tiles.
pub fn split_sub_measurements(plane: &VideoCube, pattern: CfaPattern) -> Result<[VideoCube; 4]> {
    let (h, w) = plane_dims(plane)?;
    pattern.check_dims(h, w)?;
    let (sh, sw) = (h / 2, w / 2);
    let mut parts = [
        VideoCube::zeros(&[sh, sw]),
        VideoCube::zeros(&[sh, sw]),
        VideoCube::zeros(&[sh, sw]),
        VideoCube::zeros(&[sh, sw]),
    ];
    for hi in 0..h {
        for wi in 0..w {
            let k = pattern.site(hi, wi) as usize;
            let (i, j) = sub_index(pattern, hi, wi);
            parts[k].data_mut()[i * sw + j] = plane.data()[hi * w + wi];
        }
    }
    Ok(parts)
}

/// Inverse of [`split_sub_measurements`].
pub fn assemble_sub_measurements(parts: &[VideoCube; 4], pattern: CfaPattern) -> Result<VideoCube> {
    let (sh, sw) = plane_dims(&parts[0])?;
    for p in &parts[1..] {
        if plane_dims(p)? != (sh, sw) {
            return Err(Error::Shape("sub-measurements differ in size".into()));
        }
    }
    let (h, w) = (sh * 2, sw * 2);
    pattern.check_dims(h, w)?;
    let mut out = VideoCube::zeros(&[h, w]);
    for hi in 0..h {
        for wi in 0..w {
            let k = pattern.site(hi, wi) as usize;
            let (i, j) = sub_index(pattern, hi, wi);
            out.data_mut()[hi * w + wi] = parts[k].data()[i * sw + j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn ones_at(map: &VideoCube, w: usize) -> Vec<(usize, usize)> {
        map.data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    #[test]
    fn quad_sites_4x4() {
        let [r, g, b] = cfa_masks(CfaPattern::QuadBayer, 4, 4).unwrap();
        assert_eq!(ones_at(&r, 4), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(ones_at(&b, 4), vec![(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(
            ones_at(&g, 4),
            vec![(0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (2, 1), (3, 0), (3, 1)]
        );
    }

    #[test]
    fn bayer_sites_2x2() {
        let [r, g, b] = cfa_masks(CfaPattern::Bayer, 2, 2).unwrap();
        assert_eq!(ones_at(&r, 2), vec![(0, 0)]);
        assert_eq!(ones_at(&g, 2), vec![(0, 1), (1, 0)]);
        assert_eq!(ones_at(&b, 2), vec![(1, 1)]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(matches!(cfa_masks(CfaPattern::QuadBayer, 6, 8), Err(Error::Shape(_))));
        let plane = VideoCube::zeros(&[3, 4]);
        assert!(split_sub_measurements(&plane, CfaPattern::Bayer).is_err());
    }

    #[test]
    fn mosaic_white_and_red() {
        let white = VideoCube::filled(&[8, 8, 3, 2], 1.0);
        let raw = mosaic(&white, CfaPattern::QuadBayer).unwrap();
        assert!(raw.data().iter().all(|&v| v == 1.0));

        let red = VideoCube::from_fn(8, 8, 3, 1, |_, _, c, _| if c == 0 { 1.0 } else { 0.0 });
        let raw = mosaic(&red, CfaPattern::QuadBayer).unwrap();
        let [rm, _, _] = cfa_masks(CfaPattern::QuadBayer, 8, 8).unwrap();
        assert_eq!(raw.data(), rm.data());
    }

    #[test]
    fn mosaic_equals_mask_weighted_sum() {
        let mut rng = SplitMix64::new(17);
        for pattern in [CfaPattern::Bayer, CfaPattern::QuadBayer] {
            let rgb = VideoCube::from_fn(8, 12, 3, 3, |_, _, _, _| rng.uniform());
            let raw = mosaic(&rgb, pattern).unwrap();
            let masks = cfa_masks(pattern, 8, 12).unwrap();
            for h in 0..8 {
                for w in 0..12 {
                    for t in 0..3 {
                        let oracle: f64 = (0..3)
                            .map(|c| masks[c].data()[h * 12 + w] * rgb.at(h, w, c, t))
                            .sum();
                        assert_eq!(raw.at(h, w, 0, t), oracle);
                    }
                }
            }
        }
    }

    #[test]
    fn mosaic_rejects_gray() {
        let gray = VideoCube::zeros(&[4, 4, 1, 1]);
        assert!(matches!(mosaic(&gray, CfaPattern::Bayer), Err(Error::Shape(_))));
    }

    #[test]
    fn quad_split_index_bookkeeping() {
        let plane = VideoCube::new(&[4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let [r, g1, g2, b] = split_sub_measurements(&plane, CfaPattern::QuadBayer).unwrap();
        assert_eq!(r.data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(g1.data(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g2.data(), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(b.data(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn bayer_split_is_strided() {
        let plane = VideoCube::new(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let [r, g1, g2, b] = split_sub_measurements(&plane, CfaPattern::Bayer).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0]);
        assert_eq!(g1.data(), &[1.0, 3.0]);
        assert_eq!(g2.data(), &[4.0, 6.0]);
        assert_eq!(b.data(), &[5.0, 7.0]);
    }

    #[test]
    fn constant_plane_splits_to_constants() {
        let plane = VideoCube::filled(&[8, 8], 0.3);
        for part in split_sub_measurements(&plane, CfaPattern::QuadBayer).unwrap() {
            assert_eq!(part.dims(), &[4, 4]);
            assert!(part.data().iter().all(|&v| v == 0.3));
        }
    }

    proptest! {
        #[test]
        fn masks_partition_plane(hb in 1usize..5, wb in 1usize..5, quad in any::<bool>()) {
            let pattern = if quad { CfaPattern::QuadBayer } else { CfaPattern::Bayer };
            let (h, w) = (hb * pattern.period(), wb * pattern.period());
            let [r, g, b] = cfa_masks(pattern, h, w).unwrap();
            for i in 0..h * w {
                prop_assert_eq!(r.data()[i] + g.data()[i] + b.data()[i], 1.0);
            }
        }

        #[test]
        fn split_assemble_identity(hb in 1usize..4, wb in 1usize..4, quad in any::<bool>(), seed in any::<u64>()) {
            let pattern = if quad { CfaPattern::QuadBayer } else { CfaPattern::Bayer };
            let (h, w) = (hb * pattern.period(), wb * pattern.period());
            let mut rng = SplitMix64::new(seed);
            let plane = VideoCube::new(&[h, w], (0..h * w).map(|_| rng.uniform()).collect()).unwrap();
            let parts = split_sub_measurements(&plane, pattern).unwrap();
            prop_assert_eq!(assemble_sub_measurements(&parts, pattern).unwrap(), plane);
        }
    }
}
