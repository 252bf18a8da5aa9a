//! Reshaping of posterior moments into spatial feature maps.
//!
//! The GP operates over flattened query grids, one row per pixel in row-major
//! order. This module restores the spatial layout: the posterior mean becomes
//! a height x width x channels map, and the posterior covariance becomes a
//! height x width x window^2 map holding, per pixel, its covariance with each
//! pixel of the surrounding window. Neighbors outside the grid are filled
//! with a caller-chosen padding value.

use nalgebra::DMatrix;
use thiserror::Error;

/// Error raised when reshaping posterior moments.
#[derive(Debug, Error)]
pub enum CovFeatureError {
    #[error("flattened length {flat} does not match grid {height}x{width}")]
    GridMismatch {
        flat: usize,
        height: usize,
        width: usize,
    },
    #[error("covariance matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("window size {0} must be odd")]
    EvenWindow(usize),
    #[error("window size must be at least 1")]
    ZeroWindow,
}

/// Posterior mean restored to its spatial grid, stored row-major as
/// height x width x channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl MeanMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Copies out a single channel as a one-channel map.
    pub fn channel(&self, channel: usize) -> MeanMap {
        assert!(channel < self.channels);
        let data = (0..self.height * self.width)
            .map(|p| self.data[p * self.channels + channel])
            .collect();
        MeanMap {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Flattens back to one row per pixel in row-major order.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.height * self.width, self.channels, |p, e| {
            self.data[p * self.channels + e]
        })
    }
}

/// Per-pixel covariance windows, stored row-major as
/// height x width x window^2.
#[derive(Debug, Clone, PartialEq)]
pub struct CovWindowMap {
    height: usize,
    width: usize,
    window: usize,
    data: Vec<f64>,
}

impl CovWindowMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel index holding the covariance with the neighbor at relative
    /// offset (`di`, `dj`); offsets must lie within the window radius.
    pub fn channel_of(&self, di: isize, dj: isize) -> usize {
        let r = (self.window as isize - 1) / 2;
        assert!(di.abs() <= r && dj.abs() <= r);
        ((di + r) * self.window as isize + (dj + r)) as usize
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.window * self.window + channel]
    }
}

/// Restores a flattened Q x E posterior mean to a height x width x E map;
/// pixel (row, col) reads row `row * width + col`.
pub fn unflatten_mean(
    mean: &DMatrix<f64>,
    height: usize,
    width: usize,
) -> Result<MeanMap, CovFeatureError> {
    if mean.nrows() != height * width {
        return Err(CovFeatureError::GridMismatch {
            flat: mean.nrows(),
            height,
            width,
        });
    }
    let channels = mean.ncols();
    let mut data = Vec::with_capacity(height * width * channels);
    for p in 0..height * width {
        for e in 0..channels {
            data.push(mean[(p, e)]);
        }
    }
    Ok(MeanMap {
        height,
        width,
        channels,
        data,
    })
}

fn roughly_symmetric(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-6 {
                return false;
            }
        }
    }
    true
}

/// Gathers, for each grid pixel, its covariance with every pixel of the
/// window x window neighborhood centered on it. Channel (di + r) * window +
/// (dj + r) with r = (window - 1) / 2 holds the covariance with the neighbor
/// at relative offset (di, dj); out-of-bounds neighbors yield `pad`.
pub fn extract_cov_window(
    sigma: &DMatrix<f64>,
    height: usize,
    width: usize,
    window: usize,
    pad: f64,
) -> Result<CovWindowMap, CovFeatureError> {
    if window == 0 {
        return Err(CovFeatureError::ZeroWindow);
    }
    if window.is_multiple_of(2) {
        return Err(CovFeatureError::EvenWindow(window));
    }
    if sigma.nrows() != sigma.ncols() {
        return Err(CovFeatureError::NotSquare {
            rows: sigma.nrows(),
            cols: sigma.ncols(),
        });
    }
    if sigma.nrows() != height * width {
        return Err(CovFeatureError::GridMismatch {
            flat: sigma.nrows(),
            height,
            width,
        });
    }
    debug_assert!(roughly_symmetric(sigma), "covariance input is not symmetric");

    let r = (window as isize - 1) / 2;
    let mut data = Vec::with_capacity(height * width * window * window);
    for row in 0..height as isize {
        for col in 0..width as isize {
            let center = (row as usize) * width + col as usize;
            for di in -r..=r {
                for dj in -r..=r {
                    let (ni, nj) = (row + di, col + dj);
                    let inside =
                        ni >= 0 && ni < height as isize && nj >= 0 && nj < width as isize;
                    data.push(if inside {
                        sigma[(center, (ni as usize) * width + nj as usize)]
                    } else {
                        pad
                    });
                }
            }
        }
    }
    Ok(CovWindowMap {
        height,
        width,
        window,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn unflatten_is_row_major() {
        let mean = DMatrix::from_fn(6, 2, |p, e| (p * 10 + e) as f64);
        let map = unflatten_mean(&mean, 2, 3).unwrap();
        assert_eq!(map.get(0, 0, 0), 0.0);
        assert_eq!(map.get(0, 2, 1), 21.0);
        assert_eq!(map.get(1, 0, 0), 30.0);
        assert_eq!(map.get(1, 2, 1), 51.0);
    }

    #[test]
    fn unflatten_round_trips_through_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
        let map = unflatten_mean(&mean, 3, 4).unwrap();
        assert_eq!(map.to_matrix(), mean);
        let ch = map.channel(1);
        for p in 0..12 {
            assert_eq!(ch.data()[p], mean[(p, 1)]);
        }
    }

    #[test]
    fn unflatten_rejects_wrong_grid() {
        let mean = DMatrix::zeros(5, 1);
        assert!(matches!(
            unflatten_mean(&mean, 2, 3),
            Err(CovFeatureError::GridMismatch { .. })
        ));
    }

    #[test]
    fn center_channel_is_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = random_symmetric(&mut rng, 4);
        let map = extract_cov_window(&sigma, 2, 2, 3, 0.0).unwrap();
        let center = map.channel_of(0, 0);
        for row in 0..2 {
            for col in 0..2 {
                let q = row * 2 + col;
                assert_eq!(map.get(row, col, center), sigma[(q, q)]);
            }
        }
    }

    #[test]
    fn corner_pixel_is_zero_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = random_symmetric(&mut rng, 4);
        let map = extract_cov_window(&sigma, 2, 2, 3, 0.0).unwrap();
        for (di, dj) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (1, -1)] {
            assert_eq!(map.get(0, 0, map.channel_of(di, dj)), 0.0);
        }
        assert_eq!(map.get(0, 0, map.channel_of(0, 1)), sigma[(0, 1)]);
        assert_eq!(map.get(0, 0, map.channel_of(1, 0)), sigma[(0, 2)]);
        assert_eq!(map.get(0, 0, map.channel_of(1, 1)), sigma[(0, 3)]);
    }

    #[test]
    fn window_one_is_exactly_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sigma = random_symmetric(&mut rng, 6);
        let map = extract_cov_window(&sigma, 2, 3, 1, 0.0).unwrap();
        for row in 0..2 {
            for col in 0..3 {
                let q = row * 3 + col;
                assert_eq!(map.get(row, col, 0), sigma[(q, q)]);
            }
        }
    }

    #[test]
    fn nonzero_padding_value_is_used() {
        let sigma = DMatrix::from_element(1, 1, 2.0);
        let map = extract_cov_window(&sigma, 1, 1, 3, -7.5).unwrap();
        for di in -1..=1 {
            for dj in -1..=1 {
                let expected = if di == 0 && dj == 0 { 2.0 } else { -7.5 };
                assert_eq!(map.get(0, 0, map.channel_of(di, dj)), expected);
            }
        }
    }

    #[test]
    fn invalid_windows_rejected() {
        let sigma = DMatrix::zeros(4, 4);
        assert!(matches!(
            extract_cov_window(&sigma, 2, 2, 4, 0.0),
            Err(CovFeatureError::EvenWindow(4))
        ));
        assert!(matches!(
            extract_cov_window(&sigma, 2, 2, 0, 0.0),
            Err(CovFeatureError::ZeroWindow)
        ));
        assert!(matches!(
            extract_cov_window(&sigma, 3, 2, 3, 0.0),
            Err(CovFeatureError::GridMismatch { .. })
        ));
        let rect = DMatrix::zeros(4, 3);
        assert!(matches!(
            extract_cov_window(&rect, 2, 2, 3, 0.0),
            Err(CovFeatureError::NotSquare { .. })
        ));
    }
}
