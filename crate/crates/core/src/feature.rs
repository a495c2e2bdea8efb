use crate::autodiff::Geom;
use crate::cube::VideoCube;
use crate::error::{Error, Result};

/// A feature map stored channels-last, `[T, H, W, C]`.
///
/// Token order is frame-major with a row-major raster inside each frame,
/// the order the spatial scans walk.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub geom: Geom,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn new(geom: Geom, data: Vec<f64>) -> Result<Self> {
        if geom.len() != data.len() {
            return Err(Error::Shape(format!(
                "feature {}×{}×{}×{} needs {} values, got {}",
                geom.h,
                geom.w,
                geom.c,
                geom.t,
                geom.len(),
                data.len()
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn zeros(geom: Geom) -> Self {
        Self {
            geom,
            data: vec![0.0; geom.len()],
        }
    }

    pub fn at(&self, h: usize, w: usize, c: usize, t: usize) -> f64 {
        let g = self.geom;
        self.data[((t * g.h + h) * g.w + w) * g.c + c]
    }

    /// Converts from the `H × W × C × T` cube layout.
    pub fn from_cube(cube: &VideoCube) -> Self {
        let [h, w, c, t] = cube.hwct();
        let geom = Geom::new(t, h, w, c);
        let mut data = vec![0.0; geom.len()];
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    for ci in 0..c {
                        data[((ti * h + hi) * w + wi) * c + ci] = cube.at(hi, wi, ci, ti);
                    }
                }
            }
        }
        Self { geom, data }
    }

    pub fn to_cube(&self) -> VideoCube {
        let g = self.geom;
        VideoCube::from_fn(g.h, g.w, g.c, g.t, |h, w, c, t| self.at(h, w, c, t))
    }
}
