//! Continuous coordinates over `[-1, 1]^2` with half-pixel centers.
//!
//! Index `i` along an axis of length `n` sits at `-1 + (2i + 1) / n`. Latent
//! codes, output pixels and bilinear resampling all share this convention.

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;

#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

#[inline]
fn virtual_center(i: isize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// `round(s * n)` with ties rounded up. Scales below 1 are rejected.
pub fn output_extent(n: usize, s: f64) -> Result<usize> {
    if !s.is_finite() || s < 1.0 {
        return Err(Error::domain(format!("scale {s} must be finite and >= 1")));
    }
    if n == 0 {
        return Err(Error::domain("input extent must be positive"));
    }
    Ok((s * n as f64 + 0.5).floor() as usize)
}

/// Index of the latent code nearest to `coord` on an axis of `n` codes.
#[inline]
pub fn nearest_index(coord: f64, n: usize) -> usize {
    let t = ((coord + 1.0) * n as f64 / 2.0).floor();
    t.clamp(0.0, (n - 1) as f64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    ys: Vec<f64>,
    xs: Vec<f64>,
}

impl CoordGrid {
    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    #[inline]
    pub fn coord(&self, y: usize, x: usize) -> (f64, f64) {
        (self.ys[y], self.xs[x])
    }

    /// Row-major `(y, x)` pairs.
    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.ys
            .iter()
            .flat_map(|&y| self.xs.iter().map(move |&x| (y, x)))
            .collect()
    }
}

pub fn make_coord_grid(h: usize, w: usize) -> Result<CoordGrid> {
    if h == 0 || w == 0 {
        return Err(Error::domain(format!("coordinate grid {h}x{w} has a zero dimension")));
    }
    Ok(CoordGrid {
        height: h,
        width: w,
        ys: (0..h).map(|i| pixel_center(i, h)).collect(),
        xs: (0..w).map(|i| pixel_center(i, w)).collect(),
    })
}

/// Extent of one output pixel in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub h: f64,
    pub w: f64,
}

pub fn cell_of(out_h: usize, out_w: usize) -> Result<Cell> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::domain("cell of a zero-sized output"));
    }
    Ok(Cell {
        h: 2.0 / out_h as f64,
        w: 2.0 / out_w as f64,
    })
}

/// Concatenate each code's 3x3 neighbourhood, replicate-padded at borders.
/// Channel block `(dy, dx)` for `dy, dx in {-1, 0, 1}` sits at offset
/// `((dy + 1) * 3 + (dx + 1)) * depth`.
pub fn feature_unfold(fm: &FeatureMap) -> FeatureMap {
    let (h, w, d) = (fm.height(), fm.width(), fm.depth());
    let mut out = FeatureMap::zeros(h, w, 9 * d);
    for y in 0..h {
        for x in 0..w {
            let dst = out.code_mut(y, x);
            for (b, (dy, dx)) in neighbours().enumerate() {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                dst[b * d..(b + 1) * d].copy_from_slice(fm.code(sy, sx));
            }
        }
    }
    out
}

/// Adjoint of [`feature_unfold`]: scatter-add unfolded gradients back onto the
/// source map.
pub fn feature_unfold_adjoint(d_unfolded: &FeatureMap, depth: usize) -> FeatureMap {
    let (h, w) = (d_unfolded.height(), d_unfolded.width());
    let mut out = FeatureMap::zeros(h, w, depth);
    for y in 0..h {
        for x in 0..w {
            for (b, (dy, dx)) in neighbours().enumerate() {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let src = &d_unfolded.code(y, x)[b * depth..(b + 1) * depth];
                for (o, g) in out.code_mut(sy, sx).iter_mut().zip(src) {
                    *o += g;
                }
            }
        }
    }
    out
}

fn neighbours() -> impl Iterator<Item = (isize, isize)> {
    (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub iy: usize,
    pub ix: usize,
    /// center of the (clamped) latent code
    pub center: (f64, f64),
    pub weight: f64,
}

/// The four latent codes around a query, ordered `tl, tr, bl, br`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleCorners {
    pub corners: [Corner; 4],
}

impl EnsembleCorners {
    pub fn weight_sum(&self) -> f64 {
        self.corners.iter().map(|c| c.weight).sum()
    }
}

/// Area-weighted local ensemble corners for `query = (y, x)` on a `grid_h x grid_w`
/// latent grid. A corner's weight is the area of the rectangle spanned by the
/// query and the diagonally opposite corner. Rectangles are measured on the
/// unclamped lattice, so weights keep varying continuously near the border;
/// indices are then clamped into the grid and the weights renormalized.
pub fn ensemble_corners(query: (f64, f64), grid_h: usize, grid_w: usize) -> EnsembleCorners {
    let (qy, qx) = (query.0.clamp(-1.0, 1.0), query.1.clamp(-1.0, 1.0));
    let lattice = |q: f64, n: usize| {
        let t = (q + 1.0) * n as f64 / 2.0 - 0.5;
        let i0 = t.floor() as isize;
        (i0, virtual_center(i0, n), virtual_center(i0 + 1, n))
    };
    let (y0, cy0, cy1) = lattice(qy, grid_h);
    let (x0, cx0, cx1) = lattice(qx, grid_w);
    let rows = [(y0, cy0, cy1 - qy), (y0 + 1, cy1, qy - cy0)];
    let cols = [(x0, cx0, cx1 - qx), (x0 + 1, cx1, qx - cx0)];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut corners = [Corner {
        iy: 0,
        ix: 0,
        center: (0.0, 0.0),
        weight: 0.0,
    }; 4];
    let mut total = 0.0;
    for (r, &(iy, _, ay)) in rows.iter().enumerate() {
        for (c, &(ix, _, ax)) in cols.iter().enumerate() {
            let (iy, ix) = (clamp(iy, grid_h), clamp(ix, grid_w));
            let area = (ay * ax).abs();
            total += area;
            corners[r * 2 + c] = Corner {
                iy,
                ix,
                center: (pixel_center(iy, grid_h), pixel_center(ix, grid_w)),
                weight: area,
            };
        }
    }
    for c in corners.iter_mut() {
        c.weight /= total;
    }
    EnsembleCorners { corners }
}

/// Per-axis source taps `(i0, i1, frac)` for resampling `n_in` samples onto
/// `n_out` half-pixel-aligned positions.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            // source position of output center i, exact for integer ratios
            let num = (2 * i + 1) as f64 * n_in as f64 - n_out as f64;
            let t = (num / (2 * n_out) as f64).clamp(0.0, (n_in - 1) as f64);
            let i0 = t.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, t - i0 as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resampling with half-pixel alignment and edge clamping.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::domain(format!("bilinear target {out_h}x{out_w} is empty")));
    }
    let (h, w, c) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Image::new(out_h, out_w, c);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let top = lerp(img.get(y0, x0, ch), img.get(y0, x1, ch), fx);
                let bottom = lerp(img.get(y1, x0, ch), img.get(y1, x1, ch), fx);
                out.set(oy, ox, ch, lerp(top, bottom, fy));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_examples() {
        let g = make_coord_grid(2, 2).unwrap();
        assert_eq!(g.ys(), &[-0.5, 0.5]);
        assert_eq!(make_coord_grid(1, 1).unwrap().coords(), vec![(0.0, 0.0)]);
        assert_eq!(make_coord_grid(4, 4).unwrap().xs(), &[-0.75, -0.25, 0.25, 0.75]);
        assert!(make_coord_grid(0, 3).is_err());
    }

    #[test]
    fn grid_is_strictly_increasing_inside_open_interval() {
        for n in 1..40 {
            let g = make_coord_grid(n, n).unwrap();
            assert!(g.ys().windows(2).all(|p| p[0] < p[1]));
            assert!(g.ys().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn cell_examples() {
        assert_eq!(cell_of(4, 4).unwrap(), Cell { h: 0.5, w: 0.5 });
        assert_eq!(cell_of(2, 8).unwrap(), Cell { h: 1.0, w: 0.25 });
        let cells: Vec<f64> = (0..12).map(|k| cell_of(1 << k, 1 << k).unwrap().h).collect();
        assert!(cells.windows(2).all(|p| p[1] < p[0]));
        assert!(cell_of(0, 1).is_err());
    }

    #[test]
    fn output_extent_rounds_half_up() {
        assert_eq!(output_extent(7, 2.5).unwrap(), 18);
        assert_eq!(output_extent(5, 2.5).unwrap(), 13);
        assert_eq!(output_extent(5, 1.0).unwrap(), 5);
        assert!(output_extent(5, 0.9).is_err());
        assert!(output_extent(5, f64::NAN).is_err());
    }

    fn map_from(h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> FeatureMap {
        let mut fm = FeatureMap::zeros(h, w, d);
        for y in 0..h {
            for x in 0..w {
                for c in 0..d {
                    fm.code_mut(y, x)[c] = f(y, x, c);
                }
            }
        }
        fm
    }

    #[test]
    fn unfold_single_code_repeats() {
        let fm = map_from(1, 1, 2, |_, _, c| c as f64 + 0.5);
        let u = feature_unfold(&fm);
        assert_eq!(u.depth(), 18);
        assert_eq!(u.code(0, 0), [0.5, 1.5].repeat(9).as_slice());
    }

    #[test]
    fn unfold_center_is_row_major_neighbourhood() {
        let fm = map_from(3, 3, 1, |y, x, _| (y * 3 + x) as f64);
        let u = feature_unfold(&fm);
        assert_eq!(u.code(1, 1), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        // top-left code sees replicated borders
        assert_eq!(u.code(0, 0), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_adjoint_matches_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fm = map_from(4, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = map_from(4, 5, 18, |_, _, _| rng.gen_range(-1.0..1.0));
        let lhs: f64 = feature_unfold(&fm).values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        let adj = feature_unfold_adjoint(&g, 2);
        let rhs: f64 = fm.values().iter().zip(adj.values()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn unfold_commutes_with_horizontal_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, d) = (4, 5, 3);
        let fm = map_from(h, w, d, |_, _, _| rng.gen_range(-1.0..1.0));
        let flipped = map_from(h, w, d, |y, x, c| fm.code(y, w - 1 - x)[c]);
        let a = feature_unfold(&fm);
        let b = feature_unfold(&flipped);
        for y in 0..h {
            for x in 0..w {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let src = &a.code(y, w - 1 - x)[(dy * 3 + (2 - dx)) * d..][..d];
                        let dst = &b.code(y, x)[(dy * 3 + dx) * d..][..d];
                        assert_eq!(src, dst);
                    }
                }
            }
        }
    }

    fn weight_at(e: &EnsembleCorners, iy: usize, ix: usize) -> f64 {
        e.corners
            .iter()
            .filter(|c| (c.iy, c.ix) == (iy, ix))
            .map(|c| c.weight)
            .sum()
    }

    #[test]
    fn query_on_code_center_selects_that_code() {
        let e = ensemble_corners((pixel_center(2, 5), pixel_center(1, 4)), 5, 4);
        assert!((weight_at(&e, 2, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_weights_are_equal() {
        // midpoint between codes (1,1),(1,2),(2,1),(2,2) of a 4x4 grid is (0, 0)
        let e = ensemble_corners((0.0, 0.0), 4, 4);
        for c in &e.corners {
            assert!((c.weight - 0.25).abs() < 1e-15);
        }
        let idx: Vec<_> = e.corners.iter().map(|c| (c.iy, c.ix)).collect();
        assert_eq!(idx, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn quarter_offset_weights_match_area_arithmetic() {
        // 4x4 grid, spacing 0.5. tl code (1,1) centered at (-0.25, -0.25);
        // query moved a quarter of the spacing toward br.
        let spacing = 0.5;
        let q = (-0.25 + 0.25 * spacing, -0.25 + 0.25 * spacing);
        let e = ensemble_corners(q, 4, 4);
        // brute force: rectangle between query and the diagonally opposite code
        let centers = [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)];
        let opposite = [3, 2, 1, 0];
        let total = spacing * spacing;
        for (t, c) in e.corners.iter().enumerate() {
            let o = centers[opposite[t]];
            let area = (o.0 - q.0).abs() * (o.1 - q.1).abs();
            assert!((c.weight - area / total).abs() < 1e-15, "corner {t}");
            assert_eq!(c.center, centers[t]);
        }
        assert!((e.corners[0].weight - 0.5625).abs() < 1e-15);
        assert!((e.corners[3].weight - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn border_queries_clamp_indices() {
        let e = ensemble_corners((-0.99, 0.99), 3, 3);
        for c in &e.corners {
            assert!(c.iy < 3 && c.ix < 3 && c.weight >= 0.0);
        }
        assert!((e.weight_sum() - 1.0).abs() < 1e-12);
        let corner = ensemble_corners((-1.0, -1.0), 3, 3);
        assert!((weight_at(&corner, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_index_matches_cell_membership() {
        assert_eq!(nearest_index(-1.0, 4), 0);
        assert_eq!(nearest_index(-0.51, 4), 0);
        assert_eq!(nearest_index(-0.49, 4), 1);
        assert_eq!(nearest_index(1.0, 4), 3);
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::from_fn(7, 5, 3, |_, _, _| rng.gen());
        assert_eq!(bilinear_resize(&img, 7, 5).unwrap(), img);
        assert!(bilinear_resize(&img, 0, 5).is_err());
    }

    #[test]
    fn bilinear_constant_extension() {
        let img = Image::filled(1, 1, 3, 0.37);
        let up = bilinear_resize(&img, 6, 6).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.37));
        let img = Image::filled(3, 4, 1, 0.81);
        let up = bilinear_resize(&img, 11, 9).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.81));
    }

    /// Scalar reference: sample the ramp f(i) = i at the output center mapped
    /// into source index space, clamped to the sample range.
    fn ramp_reference(n_in: usize, n_out: usize, j: usize) -> f64 {
        let y = -1.0 + (2 * j + 1) as f64 / n_out as f64;
        let t = (y + 1.0) * n_in as f64 / 2.0 - 0.5;
        t.clamp(0.0, (n_in - 1) as f64)
    }

    #[test]
    fn bilinear_ramp_upscale() {
        let n = 6;
        let img = Image::from_fn(1, n, 1, |_, x, _| x as f64);
        let up = bilinear_resize(&img, 1, 2 * n).unwrap();
        for j in 0..2 * n {
            // closed form for 2x: t = (2j - 1) / 4 clamped
            let closed = ((2.0 * j as f64 - 1.0) / 4.0).clamp(0.0, (n - 1) as f64);
            assert!((up.get(0, j, 0) - closed).abs() < 1e-12);
            assert!((up.get(0, j, 0) - ramp_reference(n, 2 * n, j)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ensemble_partition_of_unity(y in -0.99f64..0.99, x in -0.99f64..0.99, h in 1usize..12, w in 1usize..12) {
            let e = ensemble_corners((y, x), h, w);
            prop_assert!((e.weight_sum() - 1.0).abs() <= 1e-12);
            prop_assert!(e.corners.iter().all(|c| c.weight >= 0.0));
        }

        #[test]
        fn bilinear_reproduces_affine_functions(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, h in 2usize..6, w in 2usize..6, k in 2usize..4) {
            let img = Image::from_fn(h, w, 1, |y, x, _| a * y as f64 + b * x as f64 + c);
            let up = bilinear_resize(&img, h * k, w * k).unwrap();
            // away from the clamped border band the interpolant is exact
            for oy in k..h * k - k {
                for ox in k..w * k - k {
                    let sy = ((2 * oy + 1) as f64 / (2 * k) as f64) - 0.5;
                    let sx = ((2 * ox + 1) as f64 / (2 * k) as f64) - 0.5;
                    let expect = a * sy + b * sx + c;
                    prop_assert!((up.get(oy, ox, 0) - expect).abs() < 1e-12);
                }
            }
        }
    }
}
