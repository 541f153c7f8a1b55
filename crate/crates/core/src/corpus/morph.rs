//! Binary-mask morphology: disk dilation, 8-connected component labeling,
//! and proximity merging of nearby components.

use ndarray::Array2;

/// Integer offsets of a filled disk of radius `r` (Euclidean, pixel centers).
pub fn disk_offsets(r: u32) -> Vec<(i32, i32)> {
    let ri = r as i32;
    let r2 = (r * r) as i64;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if (dy as i64 * dy as i64 + dx as i64 * dx as i64) <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Morphological dilation by a disk of radius `r`.
pub fn dilate(grid: &Array2<bool>, r: u32) -> Array2<bool> {
    if r == 0 {
        return grid.clone();
    }
    let (h, w) = grid.dim();
    let offs = disk_offsets(r);
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if !grid[[y, x]] {
                continue;
            }
            for &(dy, dx) in &offs {
                let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                    out[[ny as usize, nx as usize]] = true;
                }
            }
        }
    }
    out
}

/// 8-connected component labeling. Returns labels (0 = background,
/// components numbered 1..=count in first-pixel scan order) and the count.
pub fn components8(grid: &Array2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = grid.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !grid[[sy, sx]] || labels[[sy, sx]] != 0 {
                continue;
            }
            count += 1;
            labels[[sy, sx]] = count;
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        if ny < 0 || ny >= h as i32 || nx < 0 || nx >= w as i32 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if grid[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Boundary pixels of each component (pixels with a non-component
/// 4-neighbour or on the image edge), indexed by label-1.
fn boundaries(labels: &Array2<u32>, count: usize) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = labels.dim();
    let mut out = vec![Vec::new(); count];
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == 0 {
                continue;
            }
            let mut edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if !edge {
                edge = labels[[y - 1, x]] != l
                    || labels[[y + 1, x]] != l
                    || labels[[y, x - 1]] != l
                    || labels[[y, x + 1]] != l;
            }
            if edge {
                out[(l - 1) as usize].push((y, x));
            }
        }
    }
    out
}

/// Squared distance between the closest boundary-pixel pair of two
/// components, along with that pair ((smaller label's pixel first)).
fn closest_pair(
    a: &[(usize, usize)],
    b: &[(usize, usize)],
) -> (f64, (usize, usize), (usize, usize)) {
    let mut best = f64::INFINITY;
    let mut pa = a[0];
    let mut pb = b[0];
    for &(ya, xa) in a {
        for &(yb, xb) in b {
            let d = (ya as f64 - yb as f64).powi(2) + (xa as f64 - xb as f64).powi(2);
            if d < best {
                best = d;
                pa = (ya, xa);
                pb = (yb, xb);
            }
        }
    }
    (best.sqrt(), pa, pb)
}

/// Stamp a capsule (thick segment) of radius `rb` between two pixels.
fn stamp_capsule(grid: &mut Array2<bool>, p: (usize, usize), q: (usize, usize), rb: f64) {
    let (h, w) = grid.dim();
    let (py, px) = (p.0 as f64, p.1 as f64);
    let (qy, qx) = (q.0 as f64, q.1 as f64);
    let (vy, vx) = (qy - py, qx - px);
    let len2 = vy * vy + vx * vx;
    let y0 = (py.min(qy) - rb).floor().max(0.0) as usize;
    let y1 = (py.max(qy) + rb).ceil().min(h as f64 - 1.0) as usize;
    let x0 = (px.min(qx) - rb).floor().max(0.0) as usize;
    let x1 = (px.max(qx) + rb).ceil().min(w as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (fy, fx) = (y as f64, x as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((fy - py) * vy + (fx - px) * vx) / len2).clamp(0.0, 1.0)
            };
            let (cy, cx) = (py + t * vy, px + t * vx);
            if (fy - cy).powi(2) + (fx - cx).powi(2) <= rb * rb {
                grid[[y, x]] = true;
            }
        }
    }
}

/// Merge components whose closest boundary pixels are strictly closer than
/// `merge_distance`, by adding a capsule bridge between them. Pixels are
/// only ever added, so component count cannot increase and area cannot
/// decrease. Iterates to a fixpoint.
pub fn merge_close_components(grid: &Array2<bool>, merge_distance: f64, bridge_radius: f64) -> Array2<bool> {
    let mut g = grid.clone();
    if merge_distance <= 0.0 {
        return g;
    }
    loop {
        let (labels, count) = components8(&g);
        if count < 2 {
            return g;
        }
        let bnd = boundaries(&labels, count);
        // bounding boxes for a cheap prefilter
        let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); count];
        for (i, pix) in bnd.iter().enumerate() {
            for &(y, x) in pix {
                let b = &mut bbox[i];
                b.0 = b.0.min(y);
                b.1 = b.1.min(x);
                b.2 = b.2.max(y);
                b.3 = b.3.max(x);
            }
        }
        let gap = |a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)| -> f64 {
            let dy = if a.2 < b.0 {
                (b.0 - a.2) as f64
            } else if b.2 < a.0 {
                (a.0 - b.2) as f64
            } else {
                0.0
            };
            let dx = if a.3 < b.1 {
                (b.1 - a.3) as f64
            } else if b.3 < a.1 {
                (a.1 - b.3) as f64
            } else {
                0.0
            };
            (dy * dy + dx * dx).sqrt()
        };
        let mut best: Option<(f64, (usize, usize), (usize, usize))> = None;
        for i in 0..count {
            for j in (i + 1)..count {
                if gap(bbox[i], bbox[j]) >= merge_distance {
                    continue;
                }
                let (d, p, q) = closest_pair(&bnd[i], &bnd[j]);
                if d < merge_distance {
                    let better = match &best {
                        None => true,
                        // deterministic: smallest distance, then lexicographic pair
                        Some((bd, bp, bq)) => {
                            (d, p, q) < (*bd, *bp, *bq)
                        }
                    };
                    if better {
                        best = Some((d, p, q));
                    }
                }
            }
        }
        match best {
            Some((_, p, q)) => stamp_capsule(&mut g, p, q, bridge_radius),
            None => return g,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y].as_bytes()[x] == b'#')
    }

    /// Hand-computed disk dilation: 1 px dilated by radius 1 -> 5-px plus.
    #[test]
    fn dilate_single_pixel_radius_one_is_plus() {
        let g = grid_from(&["...", ".#.", "..."]);
        let d = dilate(&g, 1);
        let want = grid_from(&[".#.", "###", ".#."]);
        assert_eq!(d, want);
    }

    #[test]
    fn dilate_zero_radius_is_identity() {
        let g = grid_from(&["#..", ".#.", "..#"]);
        assert_eq!(dilate(&g, 0), g);
    }

    #[test]
    fn dilation_is_superset_and_monotone() {
        let g = grid_from(&["....", ".##.", "....", "...."]);
        let d1 = dilate(&g, 1);
        let d2 = dilate(&g, 2);
        for ((a, b), c) in g.iter().zip(d1.iter()).zip(d2.iter()) {
            assert!(!*a || *b, "r=1 not a superset");
            assert!(!*b || *c, "r=2 not a superset of r=1");
        }
    }

    /// Recursive flood-fill oracle, independent of the production labeling.
    fn count_components_oracle(grid: &Array2<bool>) -> usize {
        fn fill(seen: &mut Array2<bool>, g: &Array2<bool>, y: i64, x: i64) {
            let (h, w) = g.dim();
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                return;
            }
            let (yu, xu) = (y as usize, x as usize);
            if seen[[yu, xu]] || !g[[yu, xu]] {
                return;
            }
            seen[[yu, xu]] = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    fill(seen, g, y + dy, x + dx);
                }
            }
        }
        let mut seen = Array2::from_elem(grid.dim(), false);
        let mut n = 0;
        for y in 0..grid.dim().0 {
            for x in 0..grid.dim().1 {
                if grid[[y, x]] && !seen[[y, x]] {
                    n += 1;
                    fill(&mut seen, grid, y as i64, x as i64);
                }
            }
        }
        n
    }

    #[test]
    fn components_diagonal_touch_is_one_component() {
        let g = grid_from(&["#..", ".#.", "..#"]);
        let (_, n) = components8(&g);
        assert_eq!(n, 1);
    }

    #[test]
    fn components_match_flood_fill_oracle_on_random_grids() {
        use rand::Rng;
        let mut rng = crate::rng::stream(41, "cc");
        for _ in 0..60 {
            let g = Array2::from_shape_fn((12, 12), |_| rng.gen_bool(0.35));
            let (_, n) = components8(&g);
            assert_eq!(n, count_components_oracle(&g));
        }
    }

    #[test]
    fn merge_bridges_close_components() {
        // two 1-px blobs with nearest-pixel distance 6
        let mut g = Array2::from_elem((9, 12), false);
        g[[4, 2]] = true;
        g[[4, 8]] = true;
        let merged = merge_close_components(&g, 10.0, 1.0);
        let (_, n) = components8(&merged);
        assert_eq!(n, 1, "distance 6 < merge 10 must merge");
        // superset check
        assert!(merged[[4, 2]] && merged[[4, 8]]);
    }

    #[test]
    fn merge_leaves_distant_components_alone() {
        let mut g = Array2::from_elem((9, 12), false);
        g[[4, 1]] = true;
        g[[4, 10]] = true;
        let merged = merge_close_components(&g, 5.0, 1.0);
        let (_, n) = components8(&merged);
        assert_eq!(n, 2, "distance 9 >= merge 5 must not merge");
        assert_eq!(merged, g);
    }

    #[test]
    fn merge_strictness_at_exact_distance() {
        // nearest pixels exactly merge_distance apart: NOT merged (strict <)
        let mut g = Array2::from_elem((5, 12), false);
        g[[2, 2]] = true;
        g[[2, 8]] = true; // distance 6
        let merged = merge_close_components(&g, 6.0, 1.0);
        let (_, n) = components8(&merged);
        assert_eq!(n, 2);
    }

    #[test]
    fn merge_chains_to_fixpoint() {
        // three collinear pixels, each gap 4: all must end up as one blob
        let mut g = Array2::from_elem((7, 15), false);
        g[[3, 2]] = true;
        g[[3, 6]] = true;
        g[[3, 10]] = true;
        let merged = merge_close_components(&g, 5.0, 1.0);
        let (_, n) = components8(&merged);
        assert_eq!(n, 1);
    }

    #[test]
    fn merge_never_removes_pixels() {
        use rand::Rng;
        let mut rng = crate::rng::stream(42, "merge-super");
        for _ in 0..20 {
            let g = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(0.08));
            let merged = merge_close_components(&g, 4.0, 1.5);
            for (a, b) in g.iter().zip(merged.iter()) {
                assert!(!*a || *b);
            }
            let (_, n0) = components8(&g);
            let (_, n1) = components8(&merged);
            assert!(n1 <= n0.max(1));
        }
    }
}
