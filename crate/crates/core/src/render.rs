//! Colormap visualisation of an alignment.
//!
//! The canonical colormap is `R = (x+1)/2, G = (y+1)/2, B = 0.5` over
//! `[-1, 1]²`. Each pixel of image `i` takes the colour of the canonical
//! point its warp sends it to, so corresponding points share colours.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::ImageMeta;
use crate::optim::AlignmentResult;
use crate::sl3::{project, Homography, Point2};

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let k = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    /// Binary PPM (`P6`) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

fn channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn canonical_color(p: Point2) -> Option<[u8; 3]> {
    if p.x.abs() > 1.0 || p.y.abs() > 1.0 {
        return None;
    }
    Some([channel((p.x + 1.0) / 2.0), channel((p.y + 1.0) / 2.0), channel(0.5)])
}

/// Colours every pixel of `meta` through `h`; `flip` mirrors the image
/// coordinates first. Pixels leaving the canonical square are black.
pub fn render_colormap(meta: &ImageMeta, h: &Homography, flip: bool) -> RgbImage {
    let mut data = Vec::with_capacity(3 * meta.width as usize * meta.height as usize);
    for y in 0..meta.height {
        for x in 0..meta.width {
            let mut p = meta.normalize(Point2::new(x as f64, y as f64));
            if flip {
                p = p.mirrored();
            }
            let rgb = project(h.matrix(), p)
                .ok()
                .and_then(canonical_color)
                .unwrap_or([0, 0, 0]);
            data.extend_from_slice(&rgb);
        }
    }
    RgbImage {
        width: meta.width,
        height: meta.height,
        data,
    }
}

/// Writes `image_<id>.ppm` for every image of the result and returns the
/// paths in image order.
pub fn render_colormaps(result: &AlignmentResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(result.images.len());
    for (k, meta) in result.images.iter().enumerate() {
        let img = render_colormap(meta, &result.homographies[k], result.flips.get(k));
        let path = out_dir.join(format!("image_{}.ppm", meta.id));
        std::fs::write(&path, img.to_ppm()).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
