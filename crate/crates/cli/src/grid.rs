//! PNG grids of images with values in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dvp_core::{Real, Tensor};

const PAD: usize = 2;
const PAD_VALUE: u8 = 128;

/// One `[c, h, w]` tile per cell, row-major; `None` leaves a cell blank.
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub side: usize,
    cells: Vec<Option<Vec<f64>>>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, channels: usize, side: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            bail!("cannot render {channels}-channel images");
        }
        Ok(Self {
            rows,
            cols,
            channels,
            side,
            cells: vec![None; rows * cols],
        })
    }

    pub fn set(&mut self, row: usize, col: usize, tile: Vec<f64>) {
        assert_eq!(tile.len(), self.channels * self.side * self.side);
        self.cells[row * self.cols + col] = Some(tile);
    }

    /// Fill `row` with the images of a `[n, c, D, D]` batch.
    pub fn set_row<T: Real>(&mut self, row: usize, batch: &Tensor<T>) {
        let m = self.channels * self.side * self.side;
        let v = batch.to_f64();
        for (col, tile) in v.chunks(m).take(self.cols).enumerate() {
            self.set(row, col, tile.to_vec());
        }
    }

    pub fn width(&self) -> usize {
        self.cols * (self.side + PAD) + PAD
    }

    pub fn height(&self) -> usize {
        self.rows * (self.side + PAD) + PAD
    }

    /// Interleaved 8-bit pixels.
    pub fn pixels(&self) -> Vec<u8> {
        let (w, h, c, s) = (self.width(), self.height(), self.channels, self.side);
        let mut px = vec![PAD_VALUE; w * h * c];
        for (i, cell) in self.cells.iter().enumerate() {
            let Some(tile) = cell else { continue };
            let (oy, ox) = (PAD + (i / self.cols) * (s + PAD), PAD + (i % self.cols) * (s + PAD));
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let v = tile[(ch * s + y) * s + x];
                        px[((oy + y) * w + ox + x) * c + ch] = to_byte(v);
                    }
                }
            }
        }
        px
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width() as u32, self.height() as u32);
        enc.set_color(if self.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&self.pixels())?;
        Ok(())
    }
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Nearest-neighbour enlargement of a `[c, d, d]` tile to side `side`.
pub fn enlarge(tile: &[f64], c: usize, d: usize, side: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * side * side];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                out[(ch * side + y) * side + x] = tile[(ch * d + y * d / side) * d + x * d / side];
            }
        }
    }
    out
}
