//! The delay-and-sum imaging operator, its exact adjoint, and the
//! lossless-rate bound implied by its output size.
//!
//! Data are indexed `(t, s, m)` and images `(x, z)`, both row-major. Every
//! pixel sums, over all source/receiver pairs, the data trace sampled at the
//! pixel's travel time. Fractional delays are resolved by linear
//! interpolation between samples `k = floor(d)` and `k + 1` with weights
//! `1 - w` and `w`; delays outside `[0, n_t - 1]` contribute nothing. The
//! adjoint scatters with the same weights, so the pair is an exact transpose.

use crate::error::{ensure_shape, Error, Result};
use crate::geometry::{travel_time, AcquisitionGeometry, ImagingGrid};
use crate::tensor::Tensor;

/// Sampled travel times per `(pixel, source, receiver)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayTable {
    fractional_index: Vec<f64>,
    valid_mask: Vec<bool>,
    n_x: usize,
    n_z: usize,
    n_t: usize,
    n_s: usize,
    n_r: usize,
}

impl DelayTable {
    /// Builds a table from raw fractional sample indices laid out as
    /// `(pixel, s, m)`, deriving the validity mask.
    pub fn from_indices(
        image_shape: [usize; 2],
        data_shape: [usize; 3],
        fractional_index: Vec<f64>,
    ) -> Result<Self> {
        let [n_x, n_z] = image_shape;
        let [n_t, n_s, n_r] = data_shape;
        if n_x * n_z * n_t * n_s * n_r == 0 {
            return Err(Error::InvalidArgument("delay table dimensions must be positive".into()));
        }
        let expected = n_x * n_z * n_s * n_r;
        if fractional_index.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} delay entries, got {}",
                fractional_index.len()
            )));
        }
        let last = (n_t - 1) as f64;
        let valid_mask = fractional_index
            .iter()
            .map(|&d| d >= 0.0 && d <= last)
            .collect();
        Ok(Self {
            fractional_index,
            valid_mask,
            n_x,
            n_z,
            n_t,
            n_s,
            n_r,
        })
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.n_x, self.n_z]
    }

    pub fn data_shape(&self) -> [usize; 3] {
        [self.n_t, self.n_s, self.n_r]
    }

    pub fn fractional_index(&self) -> &[f64] {
        &self.fractional_index
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Iterates the valid taps of one pixel as `(data offset of sample k, w, has_next)`.
    /// `has_next` is false only when `k = n_t - 1`, where `w` is necessarily 0.
    fn taps(&self, pixel: usize) -> impl Iterator<Item = (usize, f64, bool)> + '_ {
        let pairs = self.n_s * self.n_r;
        let base = pixel * pairs;
        let n_t = self.n_t;
        (0..pairs).filter_map(move |sm| {
            if !self.valid_mask[base + sm] {
                return None;
            }
            let d = self.fractional_index[base + sm];
            let k = d.floor();
            let w = d - k;
            let k = k as usize;
            Some((k * pairs + sm, w, k + 1 < n_t))
        })
    }
}

/// Precomputes `(tau(p_i, r_s, r_m) - time_offset) * f_samp` for every pixel and pair.
pub fn build_delay_table(geom: &AcquisitionGeometry, grid: &ImagingGrid) -> Result<DelayTable> {
    let elements = geom.element_positions();
    let c = geom.sound_speed();
    let fs = geom.sampling_frequency();
    let offset = geom.time_offset();
    let mut idx = Vec::with_capacity(grid.n_pixels() * elements.len() * elements.len());
    for ix in 0..grid.n_x() {
        for iz in 0..grid.n_z() {
            let p = grid.pixel_center(ix, iz);
            for &s in elements {
                for &m in elements {
                    idx.push((travel_time(p, s, m, c)? - offset) * fs);
                }
            }
        }
    }
    DelayTable::from_indices(grid.image_shape(), geom.data_shape(), idx)
}

/// Forward DAS: raw data `(n_t, n_s, n_r)` to image `(n_x, n_z)`.
pub fn das_forward(f: &Tensor, table: &DelayTable) -> Result<Tensor> {
    ensure_shape(&table.data_shape(), f.shape())?;
    let data = f.data();
    let pairs = table.n_s * table.n_r;
    let mut image = Tensor::zeros(&table.image_shape());
    for (pixel, out) in image.data_mut().iter_mut().enumerate() {
        let mut acc = 0.0;
        for (off, w, has_next) in table.taps(pixel) {
            acc += (1.0 - w) * data[off];
            if has_next {
                acc += w * data[off + pairs];
            }
        }
        *out = acc;
    }
    Ok(image)
}

/// Adjoint DAS: image `(n_x, n_z)` to raw data `(n_t, n_s, n_r)`.
pub fn das_adjoint(u: &Tensor, table: &DelayTable) -> Result<Tensor> {
    ensure_shape(&table.image_shape(), u.shape())?;
    let pairs = table.n_s * table.n_r;
    let mut f = Tensor::zeros(&table.data_shape());
    let out = f.data_mut();
    for (pixel, &value) in u.data().iter().enumerate() {
        if value == 0.0 {
            continue;
        }
        for (off, w, has_next) in table.taps(pixel) {
            out[off] += (1.0 - w) * value;
            if has_next {
                out[off + pairs] += w * value;
            }
        }
    }
    Ok(f)
}

/// Best lossless linear compression rate, `(n_t n_s n_r) / (n_x n_z)`,
/// assuming the imaging operator has full row rank.
pub fn theoretical_lossless_rate(data_shape: [usize; 3], image_shape: [usize; 2]) -> Result<f64> {
    if data_shape.iter().chain(&image_shape).any(|&d| d == 0) {
        return Err(Error::InvalidArgument("all dimensions must be positive".into()));
    }
    let data: usize = data_shape.iter().product();
    let image: usize = image_shape.iter().product();
    Ok(data as f64 / image as f64)
}
