//! Per-style annotation statistics: the (S, Q) pairs that characterize how
//! a style draws a lesion class.
//!
//! For each image, Q is the number of 8-connected components of the class in
//! the mask and S is their mean pixel area. Images where the class is absent
//! (Q = 0) contribute no (S, Q) pair — mean area is undefined there — so a
//! style in which a class never appears has an undefined centroid.

use ndarray::Array2;
use serde::Serialize;

use super::morph::components8;
use super::Corpus;

/// (S, Q) summary of one class under one style.
#[derive(Debug, Clone, Serialize)]
pub struct StyleStats {
    pub style: String,
    pub class_id: u8,
    /// One (mean component area, component count) pair per image in which
    /// the class occurs.
    pub pairs: Vec<(f64, f64)>,
    /// Mean of `pairs`; `None` when the class never occurs.
    pub centroid: Option<(f64, f64)>,
    /// Number of images inspected (all splits).
    pub n_images: usize,
}

/// Compute one image's (S, Q) for a class, or `None` when absent.
pub fn image_sq(mask: &Array2<u8>, class_id: u8) -> Option<(f64, f64)> {
    let grid = mask.mapv(|v| v == class_id);
    let (labels, q) = components8(&grid);
    if q == 0 {
        return None;
    }
    let total = labels.iter().filter(|&&l| l != 0).count();
    Some((total as f64 / q as f64, q as f64))
}

/// (S, Q) statistics of `class_id` over every sample of `corpus` (all splits).
pub fn style_stats(corpus: &Corpus, class_id: u8) -> StyleStats {
    let mut pairs = Vec::new();
    let mut n_images = 0usize;
    for s in corpus.all_samples() {
        n_images += 1;
        if let Some(p) = image_sq(&s.mask, class_id) {
            pairs.push(p);
        }
    }
    let centroid = if pairs.is_empty() {
        None
    } else {
        let n = pairs.len() as f64;
        Some((
            pairs.iter().map(|p| p.0).sum::<f64>() / n,
            pairs.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    };
    StyleStats {
        style: corpus.spec.name.clone(),
        class_id,
        pairs,
        centroid,
        n_images,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sample, StyleSpec};
    use ndarray::Array3;

    fn corpus_of(masks: Vec<Array2<u8>>) -> Corpus {
        let train = masks
            .into_iter()
            .enumerate()
            .map(|(i, mask)| {
                let (h, w) = mask.dim();
                Sample {
                    image: Array3::zeros((3, h, w)),
                    mask,
                    origin: 0,
                    severity: None,
                    sample_id: format!("s{i}"),
                }
            })
            .collect();
        Corpus {
            style_id: 0,
            spec: StyleSpec::fine("f"),
            train,
            val: vec![],
            test: vec![],
        }
    }

    #[test]
    fn hand_oracle_two_components() {
        // one 3-px component and one 5-px component => S = 4, Q = 2
        let mut m = Array2::<u8>::zeros((8, 8));
        for x in 0..3 {
            m[[1, x]] = 1;
        }
        for x in 0..5 {
            m[[5, x]] = 1;
        }
        let c = corpus_of(vec![m]);
        let st = style_stats(&c, 1);
        assert_eq!(st.pairs, vec![(4.0, 2.0)]);
        assert_eq!(st.centroid, Some((4.0, 2.0)));
    }

    #[test]
    fn full_coverage_is_one_component() {
        let m = Array2::<u8>::from_elem((6, 7), 2u8);
        let c = corpus_of(vec![m]);
        let st = style_stats(&c, 2);
        assert_eq!(st.centroid, Some((42.0, 1.0)));
    }

    #[test]
    fn absent_class_yields_no_pairs() {
        let m = Array2::<u8>::zeros((6, 6));
        let c = corpus_of(vec![m]);
        let st = style_stats(&c, 3);
        assert!(st.pairs.is_empty());
        assert_eq!(st.centroid, None);
        assert_eq!(st.n_images, 1);
    }

    #[test]
    fn absent_images_excluded_from_centroid() {
        // image A: class present with S=2,Q=1; image B: absent
        let mut a = Array2::<u8>::zeros((6, 6));
        a[[0, 0]] = 1;
        a[[0, 1]] = 1;
        let b = Array2::<u8>::zeros((6, 6));
        let c = corpus_of(vec![a, b]);
        let st = style_stats(&c, 1);
        assert_eq!(st.pairs.len(), 1);
        assert_eq!(st.centroid, Some((2.0, 1.0)));
        assert_eq!(st.n_images, 2);
    }

    #[test]
    fn diagonal_components_count_as_one() {
        // 8-connectivity: diagonal touch is one component
        let mut m = Array2::<u8>::zeros((6, 6));
        m[[1, 1]] = 4;
        m[[2, 2]] = 4;
        let c = corpus_of(vec![m]);
        let st = style_stats(&c, 4);
        assert_eq!(st.centroid, Some((2.0, 1.0)));
    }
}
