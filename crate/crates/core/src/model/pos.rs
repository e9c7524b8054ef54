//! Fixed sinusoidal positional encodings shared by the image grid and prompt points.

use candle_core::{Device, Tensor};

use crate::error::Result;

const MAX_CYCLES: f32 = 64.0;

/// Encodes normalized `(x, y)` coordinates in `[0, 1]` into `dim` channels:
/// `dim/4` geometric frequency bands, each contributing sin/cos of x and y.
pub fn encode_coords(coords: &[(f32, f32)], dim: usize) -> Result<Tensor> {
    debug_assert!(dim.is_multiple_of(4));
    let bands = dim / 4;
    let mut data = Vec::with_capacity(coords.len() * dim);
    for &(x, y) in coords {
        for b in 0..bands {
            let cycles = if bands > 1 {
                MAX_CYCLES.powf(b as f32 / (bands - 1) as f32)
            } else {
                1.0
            };
            let w = 2.0 * std::f32::consts::PI * cycles;
            data.extend_from_slice(&[(w * x).sin(), (w * x).cos(), (w * y).sin(), (w * y).cos()]);
        }
    }
    Ok(Tensor::from_vec(data, (coords.len(), dim), &Device::Cpu)?)
}

/// Encoding of every cell centre of a `grid × grid` lattice, row-major, `[grid², dim]`.
pub fn grid_encoding(grid: usize, dim: usize) -> Result<Tensor> {
    let coords: Vec<(f32, f32)> = (0..grid)
        .flat_map(|r| {
            (0..grid).map(move |c| {
                (
                    (c as f32 + 0.5) / grid as f32,
                    (r as f32 + 0.5) / grid as f32,
                )
            })
        })
        .collect();
    encode_coords(&coords, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_matches_point_encoding_at_cell_centres() {
        let g = grid_encoding(4, 8).unwrap().to_vec2::<f32>().unwrap();
        // cell (row 1, col 2) centre in normalized coordinates
        let p = encode_coords(&[(2.5 / 4.0, 1.5 / 4.0)], 8)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(g[4 + 2], p[0]);
    }

    #[test]
    fn distinct_positions_get_distinct_codes() {
        let g = grid_encoding(8, 16).unwrap().to_vec2::<f32>().unwrap();
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                assert_ne!(g[i], g[j]);
            }
        }
    }
}
