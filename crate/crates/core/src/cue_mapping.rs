//! Training-free conversion of aligned text/image features into a target
//! distribution heatmap.
//!
//! The naive map at scale `k` scores every image token by its mean dot
//! product with the valid text tokens. The refined map first correlates the
//! scale's tokens with each other (`f·fᵀ·f`) before scoring, which boosts
//! regions whose features agree with many other text-aligned tokens.

use crate::bundle::{slice_scale, FeatureBundle};
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::numerics::{matmul, matmul_transposed, mean_last_dim, reshape_to_2d, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapOptions {
    /// 1-based scale index, shallow first.
    pub scale: usize,
    pub refine: bool,
    pub normalize: bool,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            scale: 1,
            refine: true,
            normalize: true,
        }
    }
}

fn text_scores(image: &Matrix, b: &FeatureBundle) -> Result<Matrix> {
    if b.valid_text() == 0 {
        return Err(Error::EmptyText);
    }
    matmul_transposed(image, b.text_tokens())
}

/// Unnormalized naive attention map of scale `k`.
pub fn attention_map(b: &FeatureBundle, k: usize) -> Result<Heatmap> {
    let (w, h) = b.layout().dims(k)?;
    let image = slice_scale(b, k)?;
    let scores = text_scores(&image, b)?;
    reshape_to_2d(&mean_last_dim(&scores, b.valid_text())?, w, h)
}

/// Unnormalized refined map of scale `k`.
///
/// Evaluated as `f·(fᵀ·(f·lᵀ))`, which equals `(f·fᵀ·f)·lᵀ` but never forms
/// an `L×L` or `L×D'` intermediate beyond the inputs.
pub fn refine_at(b: &FeatureBundle, k: usize) -> Result<Heatmap> {
    let (w, h) = b.layout().dims(k)?;
    let image = slice_scale(b, k)?;
    let scores = text_scores(&image, b)?;
    let projected = matmul(&image.transpose(), &scores)?;
    let refined = matmul(&image, &projected)?;
    reshape_to_2d(&mean_last_dim(&refined, b.valid_text())?, w, h)
}

/// Unnormalized refined map of the shallow scale.
pub fn refine(b: &FeatureBundle) -> Result<Heatmap> {
    refine_at(b, 1)
}

/// Full mapping: naive or refined map at `opts.scale`, optionally min-max
/// normalized.
pub fn map_textual_cue(b: &FeatureBundle, opts: MapOptions) -> Result<Heatmap> {
    let raw = if opts.refine {
        refine_at(b, opts.scale)?
    } else {
        attention_map(b, opts.scale)?
    };
    Ok(if opts.normalize { raw.normalize() } else { raw })
}

/// Normalized naive map of every scale, shallow first.
pub fn scale_survey(b: &FeatureBundle) -> Result<Vec<(usize, Heatmap)>> {
    (1..=b.layout().num_scales())
        .map(|k| Ok((k, attention_map(b, k)?.normalize())))
        .collect()
}

/// Contrast between a region and its complement:
/// `(mean_in − mean_out) / std_out`, with the spread floored at `1e-12`.
/// Returns 0 when either side is empty.
pub fn separation_score(map: &Heatmap, inside: &[bool]) -> Result<f64> {
    if inside.len() != map.values().len() {
        return Err(Error::shape("region mask does not match heatmap"));
    }
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.values().iter().zip(inside) {
        if m {
            sum_in += v;
            n_in += 1;
        } else {
            sum_out += v;
            n_out += 1;
        }
    }
    if n_in == 0 || n_out == 0 {
        return Ok(0.0);
    }
    let mean_in = sum_in / n_in as f64;
    let mean_out = sum_out / n_out as f64;
    let var_out = map
        .values()
        .iter()
        .zip(inside)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| (v - mean_out).powi(2))
        .sum::<f64>()
        / n_out as f64;
    Ok((mean_in - mean_out) / var_out.sqrt().max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::ScaleLayout;

    fn bundle(image: &[Vec<f64>], text: &[Vec<f64>], w: usize, h: usize) -> FeatureBundle {
        FeatureBundle::new(
            Matrix::from_rows(text).unwrap(),
            text.len(),
            ScaleLayout::new(vec![(w, h)]).unwrap(),
            Matrix::from_rows(image).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn orthonormal_image_picks_coordinate() {
        let b = bundle(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]], 2, 1);
        assert_eq!(attention_map(&b, 1).unwrap().values(), &[1.0, 0.0]);
        // Gram = I, so refinement collapses to the naive map.
        assert_eq!(refine(&b).unwrap(), attention_map(&b, 1).unwrap());
    }

    #[test]
    fn zero_text_gives_zero_map() {
        let b = bundle(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[vec![0.0, 0.0]], 2, 1);
        assert!(attention_map(&b, 1).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_dot_product_example() {
        let b = bundle(
            &[vec![1.0, 1.0], vec![2.0, 0.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            2,
            1,
        );
        assert_eq!(attention_map(&b, 1).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn hand_matrix_chain_example() {
        let b = bundle(&[vec![2.0, 0.0], vec![0.0, 0.0]], &[vec![1.0, 0.0]], 2, 1);
        assert_eq!(refine(&b).unwrap().values(), &[8.0, 0.0]);
    }

    #[test]
    fn padding_is_masked() {
        let layout = ScaleLayout::new(vec![(2, 1)]).unwrap();
        let image = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let text = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = FeatureBundle::new(text, 1, layout, image).unwrap();
        assert_eq!(attention_map(&b, 1).unwrap().values(), &[2.0, 0.0]);
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let b = bundle(&[vec![1.0, 0.0], vec![1.0, 0.0]], &[vec![1.0, 1.0]], 2, 1);
        let h = map_textual_cue(&b, MapOptions::default()).unwrap();
        assert!(h.is_normalized());
        assert_eq!(h.values(), &[0.0, 0.0]);
    }

    #[test]
    fn naive_option_matches_attention_map() {
        let b = bundle(
            &[vec![0.3, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]],
            &[vec![1.0, 0.2]],
            3,
            1,
        );
        let opts = MapOptions {
            refine: false,
            ..MapOptions::default()
        };
        assert_eq!(
            map_textual_cue(&b, opts).unwrap(),
            attention_map(&b, 1).unwrap().normalize()
        );
    }

    #[test]
    fn scale_out_of_range() {
        let b = bundle(&[vec![1.0]], &[vec![1.0]], 1, 1);
        let opts = MapOptions {
            scale: 2,
            ..MapOptions::default()
        };
        assert!(matches!(map_textual_cue(&b, opts), Err(Error::Range { .. })));
        assert_eq!(scale_survey(&b).unwrap().len(), 1);
    }

    #[test]
    fn separation_of_block() {
        let map = Heatmap::new(4, 1, vec![1.0, 0.0, 0.5, -0.5], false).unwrap();
        let s = separation_score(&map, &[true, false, false, false]).unwrap();
        assert!((s - 1.0 / (1.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert_eq!(separation_score(&map, &[false; 4]).unwrap(), 0.0);
    }
}
