//! Rotary position embedding.
//!
//! Coordinates are rotated in interleaved pairs `(v[2m], v[2m+1])` by the
//! angle `position * theta[m]`, with `theta[m] = base^(-2m/d)`. Because each
//! pair rotation is orthogonal, `<R(p)u, R(q)v> == <u, R(q-p)v>`: the rotated
//! dot product only sees the relative position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::dot;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Head dimension, base, and the derived frequency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
    thetas: Vec<f64>,
}

/// A vector after rotation, tagged with the position it was rotated to.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedVector {
    pub position: usize,
    pub values: Vec<f64>,
}

/// Both evaluations of a rotated dot product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedDotForms {
    /// `<R(p)u, R(q)v>`
    pub direct: f64,
    /// `<u, R(q-p)v>`
    pub relative: f64,
}

/// Builds the frequency table for an even head dimension.
pub fn make_thetas(head_dim: usize, base: f64) -> Result<RopeParams> {
    if head_dim < 2 || head_dim % 2 != 0 {
        return Err(Error::shape(format!(
            "rotary head dimension must be even and >= 2, got {head_dim}"
        )));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::config(format!("rotary base must be positive, got {base}")));
    }
    let d = head_dim as f64;
    let thetas = (0..head_dim / 2)
        .map(|m| base.powf(-2.0 * m as f64 / d))
        .collect();
    Ok(RopeParams {
        head_dim,
        base,
        thetas,
    })
}

impl RopeParams {
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.head_dim {
            return Err(Error::shape(format!(
                "rotary input has length {}, head dimension is {}",
                v.len(),
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Rotates `v` to an integer position.
    pub fn apply_rotation(&self, position: usize, v: &[f64]) -> Result<RotatedVector> {
        Ok(RotatedVector {
            position,
            values: self.rotate_by_angle_scale(position as f64, v)?,
        })
    }

    /// Rotates `v` by `position * theta` for a real-valued (possibly negative
    /// or fractional) position. Used for relative offsets and closed-form
    /// checks; the model path goes through [`RopeParams::apply_rotation`].
    pub fn rotate_by_angle_scale(&self, position: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let mut out = v.to_vec();
        self.rotate_in_place(position, &mut out);
        Ok(out)
    }

    /// In-place rotation without length validation.
    pub(crate) fn rotate_in_place(&self, position: f64, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.head_dim);
        for (pair, &theta) in v.chunks_exact_mut(2).zip(&self.thetas) {
            let (sin, cos) = (position * theta).sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }

    /// Rotated dot product `<R(p)u, R(q)v>`.
    pub fn rotated_dot(&self, p: usize, u: &[f64], q: usize, v: &[f64]) -> Result<f64> {
        let forms = self.rotated_dot_forms(p, u, q, v)?;
        debug_assert!(
            (forms.direct - forms.relative).abs() <= 1e-6 * (1.0 + forms.direct.abs()),
            "rotary relative identity violated: {forms:?}"
        );
        Ok(forms.direct)
    }

    /// Evaluates the rotated dot product both directly and through the
    /// relative rotation `R(q-p)`.
    pub fn rotated_dot_forms(
        &self,
        p: usize,
        u: &[f64],
        q: usize,
        v: &[f64],
    ) -> Result<RotatedDotForms> {
        self.check_len(u)?;
        self.check_len(v)?;
        let ru = self.apply_rotation(p, u)?;
        let rv = self.apply_rotation(q, v)?;
        let direct = dot(&ru.values, &rv.values);
        let rel = self.rotate_by_angle_scale(q as f64 - p as f64, v)?;
        Ok(RotatedDotForms {
            direct,
            relative: dot(u, &rel),
        })
    }
}
