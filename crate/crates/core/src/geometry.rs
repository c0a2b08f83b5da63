//! Acquisition geometry, imaging grid, and straight-ray travel times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the imaging plane, `[x, z]` in meters.
pub type Point = [f64; 2];

/// Full-matrix-capture acquisition: every element fires in turn and all
/// elements record, so `n_s = n_r = n_elements`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    element_positions: Vec<Point>,
    sampling_frequency: f64,
    sound_speed: f64,
    n_time_samples: usize,
    time_offset: f64,
}

impl AcquisitionGeometry {
    pub fn new(
        element_positions: Vec<Point>,
        sampling_frequency: f64,
        sound_speed: f64,
        n_time_samples: usize,
        time_offset: f64,
    ) -> Result<Self> {
        if element_positions.is_empty() {
            return Err(Error::InvalidArgument("at least one element required".into()));
        }
        if !(sampling_frequency > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling frequency must be positive, got {sampling_frequency}"
            )));
        }
        if !(sound_speed > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sound speed must be positive, got {sound_speed}"
            )));
        }
        if n_time_samples == 0 {
            return Err(Error::InvalidArgument("n_time_samples must be >= 1".into()));
        }
        if !time_offset.is_finite() {
            return Err(Error::InvalidArgument("time offset must be finite".into()));
        }
        Ok(Self {
            element_positions,
            sampling_frequency,
            sound_speed,
            n_time_samples,
            time_offset,
        })
    }

    /// A linear array of `n_elements` at depth `z = 0`, centred on `x = 0`.
    pub fn linear_array(
        n_elements: usize,
        pitch: f64,
        sampling_frequency: f64,
        sound_speed: f64,
        n_time_samples: usize,
        time_offset: f64,
    ) -> Result<Self> {
        if !(pitch > 0.0) {
            return Err(Error::InvalidArgument(format!("pitch must be positive, got {pitch}")));
        }
        let centre = (n_elements as f64 - 1.0) / 2.0;
        let positions = (0..n_elements)
            .map(|e| [(e as f64 - centre) * pitch, 0.0])
            .collect();
        Self::new(
            positions,
            sampling_frequency,
            sound_speed,
            n_time_samples,
            time_offset,
        )
    }

    pub fn element_positions(&self) -> &[Point] {
        &self.element_positions
    }

    pub fn n_elements(&self) -> usize {
        self.element_positions.len()
    }

    pub fn sampling_frequency(&self) -> f64 {
        self.sampling_frequency
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    pub fn n_time_samples(&self) -> usize {
        self.n_time_samples
    }

    pub fn time_offset(&self) -> f64 {
        self.time_offset
    }

    /// Raw data shape `(n_t, n_s, n_r)`.
    pub fn data_shape(&self) -> [usize; 3] {
        let n = self.n_elements();
        [self.n_time_samples, n, n]
    }
}

/// Regular pixel grid; pixel `(i_x, i_z)` is centred at
/// `origin + (i_x * pitch_x, i_z * pitch_z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagingGrid {
    origin: Point,
    pixel_pitch_x: f64,
    pixel_pitch_z: f64,
    n_x: usize,
    n_z: usize,
}

impl ImagingGrid {
    pub fn new(
        origin: Point,
        pixel_pitch_x: f64,
        pixel_pitch_z: f64,
        n_x: usize,
        n_z: usize,
    ) -> Result<Self> {
        if n_x == 0 || n_z == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least one pixel, got {n_x}x{n_z}"
            )));
        }
        if !(pixel_pitch_x > 0.0 && pixel_pitch_z > 0.0) {
            return Err(Error::InvalidArgument("pixel pitches must be positive".into()));
        }
        Ok(Self {
            origin,
            pixel_pitch_x,
            pixel_pitch_z,
            n_x,
            n_z,
        })
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn pixel_pitch_x(&self) -> f64 {
        self.pixel_pitch_x
    }

    pub fn pixel_pitch_z(&self) -> f64 {
        self.pixel_pitch_z
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn n_pixels(&self) -> usize {
        self.n_x * self.n_z
    }

    /// Image shape `(n_x, n_z)`.
    pub fn image_shape(&self) -> [usize; 2] {
        [self.n_x, self.n_z]
    }

    pub fn pixel_center(&self, i_x: usize, i_z: usize) -> Point {
        [
            self.origin[0] + i_x as f64 * self.pixel_pitch_x,
            self.origin[1] + i_z as f64 * self.pixel_pitch_z,
        ]
    }

    /// Axis-aligned extent `[x_min, x_max, z_min, z_max]` spanned by pixel centres.
    pub fn extent(&self) -> [f64; 4] {
        let far = self.pixel_center(self.n_x - 1, self.n_z - 1);
        [self.origin[0], far[0], self.origin[1], far[1]]
    }

    /// Pixel index nearest to a point, clamped to the grid.
    pub fn nearest_pixel(&self, p: Point) -> (usize, usize) {
        let fx = ((p[0] - self.origin[0]) / self.pixel_pitch_x).round();
        let fz = ((p[1] - self.origin[1]) / self.pixel_pitch_z).round();
        let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
        (clamp(fx, self.n_x), clamp(fz, self.n_z))
    }
}

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Two-leg straight-ray travel time source -> `p` -> receiver at constant speed `c`.
pub fn travel_time(p: Point, source: Point, receiver: Point, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("sound speed must be positive, got {c}")));
    }
    Ok((distance(p, source) + distance(p, receiver)) / c)
}
