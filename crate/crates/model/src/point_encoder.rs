//! Point annotations to object queries: a fixed sine position code plus a
//! learnable per-category vector.

use candle_core::{Device, Result as CResult, Tensor};
use pointq_core::geometry::PointAnnotation;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointEncoderConfig {
    pub temperature: f64,
    /// Include the position code in the query.
    pub use_pos: bool,
    /// Include the category embedding in the query.
    pub use_cat: bool,
    /// Standard deviation of the category table at init.
    pub category_init_std: f64,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        Self {
            temperature: 10_000.0,
            use_pos: true,
            use_cat: true,
            category_init_std: 0.1,
        }
    }
}

/// Sine code of `(x, y)`: the first half encodes x, the second y, each as
/// `sin, cos` pairs over geometric frequencies.
///
/// `d_model` must be divisible by 4.
pub fn positional_encoding(x: f64, y: f64, d_model: usize, temperature: f64) -> Vec<f64> {
    let half = d_model / 2;
    let mut out = Vec::with_capacity(d_model);
    for coord in [x, y] {
        let angle = coord * std::f64::consts::TAU;
        for i in 0..half {
            let freq = temperature.powf((2 * (i / 2)) as f64 / half as f64);
            let a = angle / freq;
            out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out
}

/// Normalized center of cell `i` along an axis of `n` cells.
pub fn cell_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Position map for an `h x w` feature grid, row-major `(h * w, d_model)`.
pub fn grid_positional_map(h: usize, w: usize, d_model: usize, temperature: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            out.push(positional_encoding(
                cell_center(col, w),
                cell_center(row, h),
                d_model,
                temperature,
            ));
        }
    }
    out
}

pub(crate) fn rows_to_tensor(rows: &[Vec<f64>], d: usize, device: &Device) -> CResult<Tensor> {
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    Tensor::from_vec(flat, (rows.len(), d), device)
}

#[derive(Clone)]
pub struct PointEncoder {
    config: PointEncoderConfig,
    d_model: usize,
    num_categories: usize,
    table: Tensor,
}

impl PointEncoder {
    pub fn new(
        ps: &mut ParamStore,
        config: PointEncoderConfig,
        d_model: usize,
        num_categories: usize,
    ) -> Result<Self, ModelError> {
        if d_model == 0 || d_model % 4 != 0 {
            return Err(ModelError::Config(format!(
                "d_model must be a positive multiple of 4, got {d_model}"
            )));
        }
        let table = ps.normal(
            "point_encoder.category",
            &[num_categories, d_model],
            config.category_init_std,
        )?;
        Ok(Self {
            config,
            d_model,
            num_categories,
            table,
        })
    }

    pub fn config(&self) -> &PointEncoderConfig {
        &self.config
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn positional_encoding(&self, x: f64, y: f64) -> Vec<f64> {
        positional_encoding(x, y, self.d_model, self.config.temperature)
    }

    /// Row `c` of the category table.
    pub fn category_embedding(&self, c: usize) -> Result<Tensor, ModelError> {
        if c >= self.num_categories {
            return Err(ModelError::CategoryOutOfRange {
                category: c,
                num_categories: self.num_categories,
            });
        }
        Ok(self.table.get(c)?)
    }

    /// One query per point, in input order; `(n, d_model)`, and `(0, d_model)`
    /// for an empty list.
    pub fn encode_points(&self, points: &[PointAnnotation]) -> Result<Tensor, ModelError> {
        let device = self.table.device();
        if let Some(p) = points.iter().find(|p| p.category >= self.num_categories) {
            return Err(ModelError::CategoryOutOfRange {
                category: p.category,
                num_categories: self.num_categories,
            });
        }
        let n = points.len();
        let mut query = Tensor::zeros((n, self.d_model), candle_core::DType::F32, device)?;
        if n == 0 {
            return Ok(query);
        }
        if self.config.use_pos {
            let rows: Vec<Vec<f64>> = points
                .iter()
                .map(|p| self.positional_encoding(p.x, p.y))
                .collect();
            query = (query + rows_to_tensor(&rows, self.d_model, device)?)?;
        }
        if self.config.use_cat {
            let ids: Vec<u32> = points.iter().map(|p| p.category as u32).collect();
            let ids = Tensor::from_vec(ids, n, device)?;
            query = (query + self.table.index_select(&ids, 0)?)?;
        }
        Ok(query)
    }
}
