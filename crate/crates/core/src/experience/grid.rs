//! Patch-by-prompt similarity grids and their image/CSV exports.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use super::{cosine_similarity, embed_patches, patch_boxes, ExperienceError, PatchSpec};
use crate::imaging::ImageHandle;
use crate::providers::Embedder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub cells: Vec<f64>,
    pub window: u32,
    pub stride: u32,
}

impl SimilarityGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.cols + col]
    }

    pub fn min(&self) -> f64 {
        self.cells.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.cells.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// One gray pixel per cell, min mapped to 0 and max to 255. A constant
    /// grid maps to all zeros.
    pub fn to_gray(&self) -> GrayImage {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        GrayImage::from_fn(self.cols as u32, self.rows as u32, |x, y| {
            let v = self.get(y as usize, x as usize);
            let level = if span > 0.0 {
                ((v - lo) / span * 255.0).round()
            } else {
                0.0
            };
            Luma([level.clamp(0.0, 255.0) as u8])
        })
    }

    /// PNG of [`to_gray`](Self::to_gray), each cell drawn as a
    /// `scale`×`scale` block.
    pub fn to_png(&self, scale: u32) -> Vec<u8> {
        let gray = self.to_gray();
        let scale = scale.max(1);
        let big = image::imageops::resize(
            &gray,
            gray.width() * scale,
            gray.height() * scale,
            image::imageops::FilterType::Nearest,
        );
        let mut out = Cursor::new(Vec::new());
        big.write_to(&mut out, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        out.into_inner()
    }

    /// One CSV line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let line = (0..self.cols)
                .map(|c| format!("{:.6}", self.get(r, c)))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Cell (i, j) is the similarity of patch (i, j) to `prompt`.
pub fn similarity_grid(
    image: &ImageHandle,
    prompt: &str,
    spec: PatchSpec,
    embedder: &dyn Embedder,
) -> Result<SimilarityGrid, ExperienceError> {
    let (ys, xs) = patch_boxes(image.width(), image.height(), spec)?;
    let text = embedder.embed_text(prompt)?;
    let cells = embed_patches(image, spec, embedder)?
        .iter()
        .map(|(_, v)| cosine_similarity(v, &text))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimilarityGrid {
        rows: ys.len(),
        cols: xs.len(),
        cells,
        window: spec.window,
        stride: spec.stride,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{MockEmbedder, MockFixtures};

    #[test]
    fn uniform_embeddings_give_constant_grid() {
        let emb = MockEmbedder::new(
            MockFixtures::default()
                .with_dimension(2)
                .with_vector("image:*", vec![1.0, 0.0])
                .with_vector("text:*", vec![0.6, 0.8])
                .embeddings,
        );
        let img = ImageHandle::solid("u", 6, 6, [0, 0, 0, 255]);
        let grid = similarity_grid(&img, "anything", PatchSpec { window: 2, stride: 2 }, &emb).unwrap();
        assert_eq!((grid.rows, grid.cols), (3, 3));
        assert!(grid.cells.iter().all(|&c| (c - 0.6).abs() < 1e-12));
        let png = grid.to_png(1);
        let decoded = image::load_from_memory(&png).unwrap().to_luma8();
        assert!(decoded.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn scripted_two_by_two() {
        let with = |s: f64| vec![s, (1.0 - s * s).sqrt()];
        let emb = MockEmbedder::new(
            MockFixtures::default()
                .with_dimension(2)
                .with_vector("text:prompt", vec![1.0, 0.0])
                .with_vector("image:g@0,0,2,2", with(0.1))
                .with_vector("image:g@2,0,2,2", with(0.2))
                .with_vector("image:g@0,2,2,2", with(0.3))
                .with_vector("image:g@2,2,2,2", with(0.4))
                .embeddings,
        );
        let img = ImageHandle::solid("g", 4, 4, [0, 0, 0, 255]);
        let grid = similarity_grid(&img, "prompt", PatchSpec { window: 2, stride: 2 }, &emb).unwrap();
        for (got, want) in grid.cells.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-9);
        }
        let gray = grid.to_gray();
        assert_eq!(gray.get_pixel(0, 0).0[0], 0);
        assert_eq!(gray.get_pixel(1, 1).0[0], 255);
        assert_eq!(gray.get_pixel(1, 0).0[0], 85);
        assert_eq!(grid.to_csv().lines().count(), 2);
    }
}
