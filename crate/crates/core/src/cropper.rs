//! Shape-adaptive cropping.
//!
//! A page is matched against every grid (r, c) with r*c <= max_crops. Each
//! grid is scored by shape fit plus resolution fit:
//!
//!   shape = min(ar_img, ar_grid) / max(ar_img, ar_grid)   with ar = w/h
//!   area  = min(1, pixel_area / (r * c * base^2))
//!
//! and the best total wins; ties prefer fewer cells, then fewer rows. The
//! image is then resized to (r*base) x (c*base) and cut into r*c sub-images,
//! while a separate resize to base x base keeps a global low-resolution view.
//! Tall pages therefore get row-dominant grids, wide pages column-dominant
//! ones, and small pages stay at (1, 1) because the area term caps at the
//! image's own pixel budget.

use crate::error::{Error, Result};
use crate::image::RawImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubRect {
    /// Grid position.
    pub row: usize,
    pub col: usize,
    /// Top-left corner and size in resized-canvas pixels.
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropPlan {
    pub rows: usize,
    pub cols: usize,
    pub base: usize,
    /// Source image size the plan was computed for.
    pub src_h: usize,
    pub src_w: usize,
    /// Row-major sub-image rectangles on the (rows*base) x (cols*base) canvas.
    pub sub_rects: Vec<SubRect>,
}

impl CropPlan {
    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Canvas the source is resized to before cutting.
    pub fn canvas(&self) -> (usize, usize) {
        (self.rows * self.base, self.cols * self.base)
    }
}

/// Score of grid (r, c) for an h x w image. Higher is better; the maximum
/// possible is 2 (perfect shape match and enough source pixels to fill every
/// cell at full resolution).
pub fn grid_score(img_h: usize, img_w: usize, r: usize, c: usize, base: usize) -> f64 {
    let ar_img = img_w as f64 / img_h as f64;
    let ar_grid = c as f64 / r as f64;
    let shape = ar_img.min(ar_grid) / ar_img.max(ar_grid);
    let area = ((img_w * img_h) as f64 / (r * c * base * base) as f64).min(1.0);
    shape + area
}

pub fn plan_crops(img: &RawImage, max_crops: usize, base: usize) -> Result<CropPlan> {
    if max_crops == 0 {
        return Err(Error::Config("max_crops must be at least 1".into()));
    }
    if base == 0 {
        return Err(Error::Config("crop base must be positive".into()));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for r in 1..=max_crops {
        for c in 1..=max_crops / r {
            let s = grid_score(img.height, img.width, r, c, base);
            let better = match best {
                None => true,
                Some((bs, br, bc)) => {
                    s > bs
                        || (s == bs && r * c < br * bc)
                        || (s == bs && r * c == br * bc && r < br)
                }
            };
            if better {
                best = Some((s, r, c));
            }
        }
    }
    let (_, rows, cols) = best.expect("candidate set is nonempty");
    let mut sub_rects = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            sub_rects.push(SubRect {
                row,
                col,
                x: col * base,
                y: row * base,
                w: base,
                h: base,
            });
        }
    }
    Ok(CropPlan { rows, cols, base, src_h: img.height, src_w: img.width, sub_rects })
}

/// Execute a plan: resize to the plan canvas, cut the sub-images, and resize
/// the original to base x base for the global view. Sub-images come back in
/// row-major grid order.
pub fn slice_image(img: &RawImage, plan: &CropPlan) -> Result<(RawImage, Vec<RawImage>)> {
    if img.height != plan.src_h || img.width != plan.src_w {
        return Err(Error::Consistency(format!(
            "plan was made for a {}x{} image, got {}x{}",
            plan.src_h, plan.src_w, img.height, img.width
        )));
    }
    let (canvas_h, canvas_w) = plan.canvas();
    let canvas = img.resize_bilinear(canvas_h, canvas_w)?;
    let mut subs = Vec::with_capacity(plan.sub_rects.len());
    for rect in &plan.sub_rects {
        subs.push(canvas.crop(rect.y, rect.x, rect.h, rect.w)?);
    }
    let global = img.resize_bilinear(plan.base, plan.base)?;
    Ok((global, subs))
}
