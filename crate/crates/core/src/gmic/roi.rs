use super::{GmicConfig, SaliencyMaps};
use crate::error::{Error, Result};
use crate::imaging::ProcessedImage;
use crate::tensor::{top_count, top_indices};

/// Mean of the `ceil(r * h * w)` largest entries of a saliency map.
pub fn aggregate_topr(map: &[f64], r: f64) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::invalid("cannot pool an empty map"));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("pooling fraction {r} outside (0, 1]")));
    }
    let count = top_count(r, map.len());
    Ok(top_indices(map, count).iter().map(|&i| map[i]).sum::<f64>() / count as f64)
}

/// Min-max normalizes each map and sums them cell-wise. Constant maps contribute nothing.
pub fn combined_saliency(saliency: &SaliencyMaps) -> Vec<f64> {
    let cells = saliency.side() * saliency.side();
    let mut total = vec![0.0; cells];
    for t in 0..saliency.num_maps() {
        let map = saliency.map(t);
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (acc, &v) in total.iter_mut().zip(map) {
                *acc += (v - lo) / (hi - lo);
            }
        }
    }
    total
}

/// Greedy window search on a `side x side` criterion map. Each round picks the
/// `window x window` block with the largest sum among blocks that avoid every
/// previously chosen cell (ties go to the smallest `(row, col)`), then zeroes
/// its cells. If no disjoint block remains, the search falls back to all
/// blocks of the zeroed map. Returns top-left cell coordinates.
pub fn select_windows(map: &[f64], side: usize, window: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || window > side {
        return Err(Error::invalid(format!(
            "window of {window} cells does not fit a {side}x{side} map"
        )));
    }
    if map.len() != side * side {
        return Err(Error::invalid(format!(
            "map has {} cells, expected {}",
            map.len(),
            side * side
        )));
    }
    let mut work = map.to_vec();
    let mut taken = vec![false; map.len()];
    let span = side - window + 1;
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<(f64, usize, usize)> = None;
        let mut fallback: Option<(f64, usize, usize)> = None;
        for r in 0..span {
            for c in 0..span {
                let mut s = 0.0;
                let mut free = true;
                for dr in 0..window {
                    let row = (r + dr) * side + c;
                    s += work[row..row + window].iter().sum::<f64>();
                    free &= !taken[row..row + window].iter().any(|&t| t);
                }
                if free && best.is_none_or(|b| s > b.0) {
                    best = Some((s, r, c));
                }
                if fallback.is_none_or(|b| s > b.0) {
                    fallback = Some((s, r, c));
                }
            }
        }
        let (_, r, c) = best.or(fallback).expect("at least one window position");
        for dr in 0..window {
            let row = (r + dr) * side + c;
            work[row..row + window].iter_mut().for_each(|v| *v = 0.0);
            taken[row..row + window].iter_mut().for_each(|t| *t = true);
        }
        chosen.push((r, c));
    }
    Ok(chosen)
}

/// Image-space patch positions and resized patches for the `K` most salient windows.
pub fn retrieve_rois(
    saliency: &SaliencyMaps,
    img: &ProcessedImage,
    cfg: &GmicConfig,
) -> Result<(Vec<(usize, usize)>, Vec<ProcessedImage>)> {
    if saliency.side() != cfg.saliency_side || img.side() != cfg.input_side {
        return Err(Error::invalid(format!(
            "saliency side {} / image side {} do not match config {} / {}",
            saliency.side(),
            img.side(),
            cfg.saliency_side,
            cfg.input_side
        )));
    }
    let cells = select_windows(
        &combined_saliency(saliency),
        cfg.saliency_side,
        cfg.window_cells(),
        cfg.num_patches,
    )?;
    let scale = cfg.cell_size();
    let mut positions = Vec::with_capacity(cells.len());
    let mut patches = Vec::with_capacity(cells.len());
    for (r, c) in cells {
        let (row, col) = (r * scale, c * scale);
        patches.push(img.crop(row, col, cfg.crop_side)?.resized(cfg.patch_side));
        positions.push((row, col));
    }
    Ok((positions, patches))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topr_examples() {
        assert!((aggregate_topr(&[0.7; 9], 0.3).unwrap() - 0.7).abs() < 1e-15);
        let map: Vec<f64> = (1..=16).map(|k| k as f64 / 16.0).collect();
        assert_eq!(aggregate_topr(&map, 0.25).unwrap(), 0.90625);
        let mean = map.iter().sum::<f64>() / 16.0;
        assert!((aggregate_topr(&map, 1.0).unwrap() - mean).abs() < 1e-15);
        assert!(aggregate_topr(&[], 0.5).is_err());
        assert!(aggregate_topr(&map, 0.0).is_err());
    }

    #[test]
    fn uniform_map_starts_at_origin() {
        let w = select_windows(&[1.0; 16], 4, 2, 4).unwrap();
        assert_eq!(w, vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
    }

    #[test]
    fn hot_cell_is_covered() {
        let mut map = vec![0.0; 36];
        map[3 * 6 + 4] = 1.0;
        let w = select_windows(&map, 6, 2, 1).unwrap();
        assert_eq!(w, vec![(2, 3)]);
        assert!(select_windows(&map, 6, 7, 1).is_err());
    }
}
