//! Pixel-level fake-probability maps from overlapping 16x16 windows.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::Array2;

use crate::detector::{window_scores, ChannelId, DetectorModel};
use crate::error::{Error, Result};
use crate::image_io::{block_view, Tile, BLOCK};
use crate::par;
use crate::pixelhop::BlockBuf;

pub const DEFAULT_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    /// `(height, width)` grid of scores in `[0, 1]`.
    pub scores: Array2<f64>,
    pub stride: usize,
    pub channel: Option<ChannelId>,
}

/// Top-left offsets of the windows along one axis.
fn offsets(len: usize, stride: usize) -> Vec<usize> {
    (0..=len - BLOCK).step_by(stride).collect()
}

fn compute(tile: &Tile, model: &DetectorModel, stride: usize, channels: &[ChannelId]) -> Result<Array2<f64>> {
    if !(1..=BLOCK).contains(&stride) {
        return Err(Error::Shape(format!("stride {stride} outside 1..=16")));
    }
    let (h, w) = (tile.height(), tile.width());
    let ys = offsets(h, stride);
    let xs = offsets(w, stride);
    let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let window_means = par::try_map(&windows, |&(y, x)| -> Result<f64> {
        let buf = BlockBuf::new(block_view(&tile.pixels, y, x))?;
        let s = window_scores(&buf, model, channels)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    })?;

    // Sequential accumulation in window order keeps sums bit-stable.
    let mut sum = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<u32>::zeros((h, w));
    for (&(y, x), &s) in windows.iter().zip(&window_means) {
        for yy in y..y + BLOCK {
            for xx in x..x + BLOCK {
                sum[[yy, xx]] += s;
                count[[yy, xx]] += 1;
            }
        }
    }
    // Windows cover a top-left rectangle; clamp uncovered pixels onto it.
    let covered_h = ys.last().copied().unwrap_or(0) + BLOCK;
    let covered_w = xs.last().copied().unwrap_or(0) + BLOCK;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y.min(covered_h - 1), x.min(covered_w - 1));
        sum[[y, x]] / count[[y, x]] as f64
    }))
}

/// Mean of the selected channels' soft scores, averaged over every window
/// covering each pixel.
pub fn compute_heatmap(tile: &Tile, model: &DetectorModel, stride: usize) -> Result<HeatMap> {
    Ok(HeatMap { scores: compute(tile, model, stride, &model.selected)?, stride, channel: None })
}

/// Same as [`compute_heatmap`] for a single channel's classifier.
pub fn channel_heatmap(tile: &Tile, model: &DetectorModel, channel: ChannelId, stride: usize) -> Result<HeatMap> {
    if model.classifier(channel).is_none() {
        return Err(Error::MissingChannel(channel.to_string()));
    }
    Ok(HeatMap { scores: compute(tile, model, stride, &[channel])?, stride, channel: Some(channel) })
}

/// Diverging colormap: blue at 0, white at 0.5, red at 1.
pub fn score_color(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    let fade = |t: f64| (255.0 * t).round() as u8;
    if s <= 0.5 {
        let t = s / 0.5;
        [fade(t), fade(t), 255]
    } else {
        let t = 1.0 - (s - 0.5) / 0.5;
        [255, fade(t), fade(t)]
    }
}

pub fn to_image(map: &HeatMap) -> RgbImage {
    let (h, w) = map.scores.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(score_color(map.scores[[y as usize, x as usize]])))
}

pub fn render_png(map: &HeatMap, out: &Path) -> Result<()> {
    to_image(map).save_with_format(out, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(out, source),
        other => Error::Codec(other.to_string()),
    })
}
