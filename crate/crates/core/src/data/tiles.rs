//! Grid tiling of large rasters for fixed-size model inputs, and the
//! averaging reassembly of per-tile predictions.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// How overlapping tile predictions are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    /// Arithmetic mean of every tile value covering a pixel.
    Average,
}

/// A rows×cols grid of equally sized crops covering an image completely,
/// with minimal overlap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub rows: usize,
    pub cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    /// (y, x) offsets, row-major over the grid.
    pub origins: Vec<(usize, usize)>,
    pub image_h: usize,
    pub image_w: usize,
}

impl TileLayout {
    pub fn num_tiles(&self) -> usize {
        self.origins.len()
    }
}

fn axis_origins(extent: usize, tiles: usize, tile_extent: usize) -> Vec<usize> {
    if tiles == 1 {
        return vec![0];
    }
    let span = (extent - tile_extent) as f64 / (tiles - 1) as f64;
    (0..tiles).map(|i| (i as f64 * span).round() as usize).collect()
}

/// Builds the grid: `tile = ceil(extent / tiles)` per axis, origins evenly
/// spread so the first tile starts at 0 and the last ends at the image
/// border.
pub fn make_tile_layout(h: usize, w: usize, rows: usize, cols: usize) -> Result<TileLayout> {
    if rows == 0 || cols == 0 {
        return Err(config_err!("tile grid must have at least one row and column"));
    }
    if rows > h || cols > w {
        return Err(config_err!(
            "tile grid {rows}×{cols} does not fit a {h}×{w} image"
        ));
    }
    let tile_h = h.div_ceil(rows);
    let tile_w = w.div_ceil(cols);
    let ys = axis_origins(h, rows, tile_h);
    let xs = axis_origins(w, cols, tile_w);
    let mut origins = Vec::with_capacity(rows * cols);
    for &y in &ys {
        for &x in &xs {
            debug_assert!(y + tile_h <= h && x + tile_w <= w);
            origins.push((y, x));
        }
    }
    Ok(TileLayout {
        rows,
        cols,
        tile_h,
        tile_w,
        origins,
        image_h: h,
        image_w: w,
    })
}

fn raster_dims(raster: &Tensor) -> Result<(usize, usize, usize)> {
    match raster.dims() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(shape_err!("tiling expects a C×H×W raster, got {:?}", other)),
    }
}

/// Crops the raster at every layout origin.
pub fn extract_tiles(raster: &Tensor, layout: &TileLayout) -> Result<Vec<Tensor>> {
    let (c, h, w) = raster_dims(raster)?;
    if h != layout.image_h || w != layout.image_w {
        return Err(shape_err!(
            "layout is for {}×{} images, raster is {h}×{w}",
            layout.image_h,
            layout.image_w
        ));
    }
    let data = raster.data();
    let mut tiles = Vec::with_capacity(layout.num_tiles());
    for &(oy, ox) in &layout.origins {
        let mut crop = Vec::with_capacity(c * layout.tile_h * layout.tile_w);
        for ch in 0..c {
            for ty in 0..layout.tile_h {
                let row = (ch * h + oy + ty) * w + ox;
                crop.extend_from_slice(&data[row..row + layout.tile_w]);
            }
        }
        tiles.push(Tensor::from_op(vec![c, layout.tile_h, layout.tile_w], crop));
    }
    Ok(tiles)
}

/// Reassembles per-tile maps to full image size; every output pixel is the
/// mean of all tile values covering it.
pub fn assemble_tiles(crops: &[Tensor], layout: &TileLayout, _blend: Blend) -> Result<Tensor> {
    if crops.len() != layout.num_tiles() {
        return Err(shape_err!(
            "layout has {} tiles but {} crops were supplied",
            layout.num_tiles(),
            crops.len()
        ));
    }
    let (c, th, tw) = raster_dims(&crops[0])?;
    if th != layout.tile_h || tw != layout.tile_w {
        return Err(shape_err!(
            "crops are {th}×{tw} but the layout expects {}×{}",
            layout.tile_h,
            layout.tile_w
        ));
    }
    let (h, w) = (layout.image_h, layout.image_w);
    let mut sum = vec![0.0; c * h * w];
    let mut count = vec![0u32; h * w];

    for (crop, &(oy, ox)) in crops.iter().zip(&layout.origins) {
        let (cc, ch, cw) = raster_dims(crop)?;
        if (cc, ch, cw) != (c, th, tw) {
            return Err(shape_err!("crop dims {:?} disagree with the first crop", crop.dims()));
        }
        let data = crop.data();
        for chan in 0..c {
            for ty in 0..th {
                let src = (chan * th + ty) * tw;
                let dst = (chan * h + oy + ty) * w + ox;
                for tx in 0..tw {
                    sum[dst + tx] += data[src + tx];
                }
            }
        }
        for ty in 0..th {
            let dst = (oy + ty) * w + ox;
            for tx in 0..tw {
                count[dst + tx] += 1;
            }
        }
    }

    if count.iter().any(|&k| k == 0) {
        return Err(shape_err!("layout does not cover every pixel"));
    }
    let out = sum
        .iter()
        .enumerate()
        .map(|(i, &v)| v / count[i % (h * w)] as f64)
        .collect();
    Ok(Tensor::from_op(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cityscapes_grid_matches_stated_origins() {
        let layout = make_tile_layout(1024, 2048, 3, 6).unwrap();
        assert_eq!(layout.num_tiles(), 18);
        assert_eq!((layout.tile_h, layout.tile_w), (342, 342));
        let ys: Vec<usize> = layout.origins.iter().step_by(6).map(|&(y, _)| y).collect();
        assert_eq!(ys, vec![0, 341, 682]);
        let xs: Vec<usize> = layout.origins[..6].iter().map(|&(_, x)| x).collect();
        assert_eq!(xs, vec![0, 341, 682, 1024, 1365, 1706]);
    }

    #[test]
    fn divisible_case_has_no_overlap() {
        let layout = make_tile_layout(6, 12, 3, 6).unwrap();
        assert_eq!((layout.tile_h, layout.tile_w), (2, 2));
        let ys: Vec<usize> = layout.origins.iter().step_by(6).map(|&(y, _)| y).collect();
        assert_eq!(ys, vec![0, 2, 4]);
    }

    #[test]
    fn single_tile_is_the_full_image() {
        let layout = make_tile_layout(64, 128, 1, 1).unwrap();
        assert_eq!(layout.num_tiles(), 1);
        assert_eq!((layout.tile_h, layout.tile_w), (64, 128));
        assert_eq!(layout.origins, vec![(0, 0)]);
    }

    #[test]
    fn degenerate_grid_is_config_error() {
        assert!(make_tile_layout(4, 4, 5, 1).is_err());
        assert!(make_tile_layout(4, 4, 0, 1).is_err());
    }

    #[test]
    fn crop_of_constant_raster_is_constant_and_corner_aligned() {
        let raster = Tensor::full(vec![2, 10, 14], 3.25).unwrap();
        let layout = make_tile_layout(10, 14, 3, 4).unwrap();
        let tiles = extract_tiles(&raster, &layout).unwrap();
        assert_eq!(tiles.len(), 12);
        assert!(tiles[0].data().iter().all(|&v| v == 3.25));

        let counting = Tensor::new(vec![1, 10, 14], (0..140).map(|v| v as f64).collect()).unwrap();
        let tiles = extract_tiles(&counting, &layout).unwrap();
        assert_eq!(tiles[0].data()[0], counting.data()[0]);
    }

    #[test]
    fn round_trip_is_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let raster = Tensor::new(
            vec![3, 19, 23],
            (0..3 * 19 * 23).map(|_| rng.gen_range(-4.0..4.0)).collect(),
        )
        .unwrap();
        let layout = make_tile_layout(19, 23, 4, 5).unwrap();
        let tiles = extract_tiles(&raster, &layout).unwrap();
        let back = assemble_tiles(&tiles, &layout, Blend::Average).unwrap();
        assert!(back.bitwise_eq(&raster), "round trip must be exact");
    }

    #[test]
    fn overlap_averages_two_values() {
        // Two 1×2 tiles on a 1×3 image overlap at the middle pixel.
        let layout = make_tile_layout(1, 3, 1, 2).unwrap();
        assert_eq!(layout.origins, vec![(0, 0), (0, 1)]);
        let a = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![3.0, 3.0]).unwrap();
        let out = assemble_tiles(&[a, b], &layout, Blend::Average).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn full_coverage_on_the_cityscapes_grid() {
        // Count-map oracle: every pixel of 1024×2048 covered at least once.
        let layout = make_tile_layout(1024, 2048, 3, 6).unwrap();
        let mut count = vec![0u32; 1024 * 2048];
        for &(oy, ox) in &layout.origins {
            for y in oy..oy + layout.tile_h {
                for x in ox..ox + layout.tile_w {
                    count[y * 2048 + x] += 1;
                }
            }
        }
        assert!(count.iter().all(|&k| k >= 1));
    }
}
