//! Deterministic synthetic fundus-like scene generation and per-style
//! rendering.
//!
//! A *scene* is style-independent lesion geometry plus a base image. Lesions
//! are placed as clusters: blobs within a cluster may sit close together
//! (that is what proximity merging is for), while clusters — including
//! clusters of different classes — keep enough distance that no dilation or
//! bridge from one class can ever touch another. That separation is what
//! makes the per-class area/count orderings hold on the composed masks.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::morph::{dilate, merge_close_components};
use super::{Corpus, CorpusError, CorpusSpec, Rendering, Sample, StyleSpec, LESION_CLASSES};
use crate::rng::stream_n;

/// One lesion blob: a union of discs `(cy, cx, r)` in pixel coordinates.
#[derive(Debug, Clone)]
pub struct LesionBlob {
    pub class_id: u8,
    pub discs: Vec<(f64, f64, f64)>,
}

impl LesionBlob {
    /// Exact pixel area of the rasterized blob (none of the image clipped).
    fn raster(&self, size: usize, grid: &mut Array2<bool>) {
        for &(cy, cx, r) in &self.discs {
            let y0 = ((cy - r).floor().max(0.0)) as usize;
            let y1 = ((cy + r).ceil().min(size as f64 - 1.0)) as usize;
            let x0 = ((cx - r).floor().max(0.0)) as usize;
            let x1 = ((cx + r).ceil().min(size as f64 - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if d2 <= r * r {
                        grid[[y, x]] = true;
                    }
                }
            }
        }
    }
}

/// Style-independent lesion layout of one scene.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub size: usize,
    pub fov_center: (f64, f64),
    pub fov_radius: f64,
    pub blobs: Vec<LesionBlob>,
}

impl SceneGeometry {
    /// Binary grid of one class's exact (fine) geometry.
    pub fn class_grid(&self, class_id: u8) -> Array2<bool> {
        let mut g = Array2::from_elem((self.size, self.size), false);
        for b in &self.blobs {
            if b.class_id == class_id {
                b.raster(self.size, &mut g);
            }
        }
        g
    }
}

/// A generated scene: geometry plus the shared (pre-marker, pre-quantization)
/// base image and its severity label ingredients.
pub struct Scene {
    pub geometry: SceneGeometry,
    pub base: Array3<f32>,
    pub severity: f32,
    pub ma_blobs: usize,
}

struct ClassParams {
    class_id: u8,
    color: [f32; 3],
    r0: (f64, f64),
    max_clusters: usize,
    max_blobs_per_cluster: usize,
    max_subdiscs: usize,
}

const CLASS_PARAMS: [ClassParams; 4] = [
    ClassParams {
        class_id: 1, // CWS: pale fluffy patches
        color: [0.80, 0.78, 0.62],
        r0: (4.0, 6.5),
        max_clusters: 1,
        max_blobs_per_cluster: 2,
        max_subdiscs: 4,
    },
    ClassParams {
        class_id: 2, // EX: bright yellowish deposits
        color: [0.87, 0.79, 0.35],
        r0: (2.5, 5.0),
        max_clusters: 2,
        max_blobs_per_cluster: 3,
        max_subdiscs: 3,
    },
    ClassParams {
        class_id: 3, // HEM: dark red patches
        color: [0.32, 0.07, 0.07],
        r0: (3.0, 6.0),
        max_clusters: 2,
        max_blobs_per_cluster: 2,
        max_subdiscs: 3,
    },
    ClassParams {
        class_id: 4, // MA: small dark dots
        color: [0.27, 0.06, 0.06],
        r0: (1.2, 2.2),
        max_clusters: 3,
        max_blobs_per_cluster: 2,
        max_subdiscs: 1,
    },
];

fn blob_extent(b: &LesionBlob, center: (f64, f64)) -> f64 {
    b.discs
        .iter()
        .map(|&(cy, cx, r)| ((cy - center.0).powi(2) + (cx - center.1).powi(2)).sqrt() + r)
        .fold(0.0, f64::max)
}

/// Generate one scene. `max_dilation` is the largest dilation radius any
/// style of the corpus will apply; cluster separation accounts for it.
pub fn generate_scene(size: usize, seed: u64, scene_idx: u64, max_dilation: u32) -> Scene {
    let mut rng = stream_n(seed, "scene", scene_idx);
    let s = size as f64;
    let fov_center = ((s - 1.0) / 2.0, (s - 1.0) / 2.0);
    let fov_radius = 0.46 * s;

    // --- base image: dark background, vignetted fundus disc, fine noise ---
    let mut base = Array3::<f32>::zeros((3, size, size));
    let tint = [
        0.56 + rng.gen_range(-0.03..0.03f32),
        0.30 + rng.gen_range(-0.02..0.02f32),
        0.13 + rng.gen_range(-0.015..0.015f32),
    ];
    for y in 0..size {
        for x in 0..size {
            let rho2 = ((y as f64 - fov_center.0).powi(2) + (x as f64 - fov_center.1).powi(2))
                / (fov_radius * fov_radius);
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-0.012..0.012);
                let v = if rho2 <= 1.0 {
                    tint[c] * (1.0 - 0.30 * rho2 as f32) + noise
                } else {
                    0.018 + noise.abs() * 0.5
                };
                base[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }

    // --- lesion clusters with hard pairwise separation ---
    let mut placed: Vec<((f64, f64), f64)> = Vec::new(); // (center, extent)
    let mut blobs: Vec<LesionBlob> = Vec::new();
    let mut ma_blobs = 0usize;
    let margin = 2.0 * max_dilation as f64 + 4.0;

    for cp in &CLASS_PARAMS {
        let n_clusters = rng.gen_range(0..=cp.max_clusters);
        for _ in 0..n_clusters {
            let n_blobs = rng.gen_range(1..=cp.max_blobs_per_cluster);
            // build the cluster's blobs around a local origin
            let mut local: Vec<LesionBlob> = Vec::new();
            let spread = cp.r0.1 * 1.1 + 4.0;
            for bi in 0..n_blobs {
                let r0 = rng.gen_range(cp.r0.0..cp.r0.1);
                let (oy, ox) = if bi == 0 {
                    (0.0, 0.0)
                } else {
                    // keep sibling blobs nearby but usually disjoint
                    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                    let d = rng.gen_range((2.0 * cp.r0.0).max(4.0)..spread * 1.9);
                    (ang.sin() * d, ang.cos() * d)
                };
                let n_sub = rng.gen_range(1..=cp.max_subdiscs);
                let mut discs = vec![(oy, ox, r0)];
                for _ in 1..n_sub {
                    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                    let d = rng.gen_range(0.0..0.9 * r0);
                    let rr = rng.gen_range(0.5 * r0..0.9 * r0);
                    discs.push((oy + ang.sin() * d, ox + ang.cos() * d, rr));
                }
                local.push(LesionBlob {
                    class_id: cp.class_id,
                    discs,
                });
            }
            let ext = local
                .iter()
                .map(|b| blob_extent(b, (0.0, 0.0)))
                .fold(0.0, f64::max);

            // find a center that fits inside the FOV and clear of others
            let mut chosen = None;
            for _ in 0..60 {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let max_rho = (0.92 * fov_radius - ext).max(0.0);
                let rho = max_rho * rng.gen_range(0.0..1.0f64).sqrt();
                let c = (fov_center.0 + ang.sin() * rho, fov_center.1 + ang.cos() * rho);
                let ok = placed.iter().all(|&(pc, pe)| {
                    let d = ((c.0 - pc.0).powi(2) + (c.1 - pc.1).powi(2)).sqrt();
                    d >= ext + pe + margin
                });
                if ok {
                    chosen = Some(c);
                    break;
                }
            }
            let Some(c) = chosen else { continue };
            placed.push((c, ext));
            for mut b in local {
                for d in &mut b.discs {
                    d.0 += c.0;
                    d.1 += c.1;
                }
                if b.class_id == 4 {
                    ma_blobs += 1;
                }
                blobs.push(b);
            }
        }
    }

    let geometry = SceneGeometry {
        size,
        fov_center,
        fov_radius,
        blobs,
    };

    // --- paint lesions into the base image with soft edges ---
    for b in &geometry.blobs {
        let cp = &CLASS_PARAMS[(b.class_id - 1) as usize];
        let jit: [f32; 3] = [
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
        ];
        for &(cy, cx, r) in &b.discs {
            let pad = 1.5;
            let y0 = ((cy - r - pad).floor().max(0.0)) as usize;
            let y1 = ((cy + r + pad).ceil().min(s - 1.0)) as usize;
            let x0 = ((cx - r - pad).floor().max(0.0)) as usize;
            let x1 = ((cx + r + pad).ceil().min(s - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let a = (1.15 - d / r).clamp(0.0, 1.0) as f32 * 0.85;
                    if a <= 0.0 {
                        continue;
                    }
                    for c in 0..3 {
                        let col = (cp.color[c] + jit[c]).clamp(0.0, 1.0);
                        base[[c, y, x]] = base[[c, y, x]] * (1.0 - a) + col * a;
                    }
                }
            }
        }
    }

    // severity: monotone in lesion area fraction and MA count, capped to [0,4]
    let fine_area: usize = LESION_CLASSES
        .iter()
        .map(|&(cid, _)| geometry.class_grid(cid).iter().filter(|&&v| v).count())
        .sum();
    let area_frac = fine_area as f64 / (size * size) as f64;
    let severity = (60.0 * area_frac + 0.45 * ma_blobs as f64).min(4.0) as f32;

    Scene {
        geometry,
        base,
        severity,
        ma_blobs,
    }
}

/// Render the mask of one scene under a style. Fine styles get the exact
/// geometry; coarse/dilated-merge apply disk dilation and then bridge
/// same-class components closer than `merge_distance`. Classes are composed
/// in id order, so later (smaller, more critical) classes sit on top — the
/// generator's separation rule keeps them from overlapping anyway.
pub fn render_style(geometry: &SceneGeometry, style: &StyleSpec) -> Array2<u8> {
    let mut mask = Array2::<u8>::zeros((geometry.size, geometry.size));
    for (idx, &(cid, _)) in LESION_CLASSES.iter().enumerate() {
        if !style.class_enabled[idx] {
            continue;
        }
        let fine = geometry.class_grid(cid);
        let rendered = match style.rendering {
            Rendering::Fine => fine,
            Rendering::Coarse | Rendering::DilatedMerge => {
                let dilated = dilate(&fine, style.dilation_radius);
                let bridge_r = (style.dilation_radius as f64 * 0.6).max(1.0);
                merge_close_components(&dilated, style.merge_distance, bridge_r)
            }
        };
        for ((y, x), &on) in rendered.indexed_iter() {
            if on {
                mask[[y, x]] = cid;
            }
        }
    }
    mask
}

/// Apply a style's marker grating (if any) and quantize to the 8-bit grid.
pub fn style_image(base: &Array3<f32>, geometry: &SceneGeometry, style: &StyleSpec) -> Array3<f32> {
    let (_, h, w) = base.dim();
    let mut img = base.clone();
    if style.marker_amplitude > 0.0 {
        let theta = (style.marker_angle_deg as f64).to_radians();
        let (ct, st) = (theta.cos(), theta.sin());
        let period = 12.0;
        for y in 0..h {
            for x in 0..w {
                let rho2 = ((y as f64 - geometry.fov_center.0).powi(2)
                    + (x as f64 - geometry.fov_center.1).powi(2))
                    / (geometry.fov_radius * geometry.fov_radius);
                if rho2 > 1.0 {
                    continue;
                }
                let phase = (x as f64 * ct + y as f64 * st) * std::f64::consts::TAU / period;
                let g = style.marker_amplitude * phase.sin() as f32;
                for c in 0..3 {
                    img[[c, y, x]] += g;
                }
            }
        }
    }
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    img
}

/// Generate every style's corpus from one shared set of scenes.
///
/// Identical `(spec, seed)` produce identical bytes. Scene splits are by
/// scene index and shared across styles, so no geometry appears in one
/// style's train set and another style's test set.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Corpus>, CorpusError> {
    spec.validate()?;
    let max_dil = spec.styles.iter().map(|s| s.dilation_radius).max().unwrap_or(0);
    let (tr, va, te) = spec.split_ranges();

    let mut corpora: Vec<Corpus> = spec
        .styles
        .iter()
        .enumerate()
        .map(|(i, s)| Corpus {
            style_id: i as u16,
            spec: s.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        })
        .collect();

    for idx in 0..spec.n_images {
        let scene = generate_scene(spec.image_size, spec.seed, idx as u64, max_dil);
        for (si, style) in spec.styles.iter().enumerate() {
            let sample = Sample {
                image: style_image(&scene.base, &scene.geometry, style),
                mask: render_style(&scene.geometry, style),
                origin: si as u16,
                severity: Some(scene.severity),
                sample_id: format!("scene{idx:04}"),
            };
            let c = &mut corpora[si];
            if tr.contains(&idx) {
                c.train.push(sample);
            } else if va.contains(&idx) {
                c.val.push(sample);
            } else if te.contains(&idx) {
                c.test.push(sample);
            }
        }
    }
    Ok(corpora)
}
