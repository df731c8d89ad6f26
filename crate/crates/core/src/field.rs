//! Velocity-field abstraction shared by the network and the closed-form
//! oracles.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::Result;
use crate::net::VelocityNet;

/// Anything that predicts a flow-matching velocity `v(x, t, y, cfg)`.
pub trait VelocityField: Sync {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>>;

    /// Label reserved for the unconditional branch.
    fn null_class(&self) -> usize;
}

/// A velocity field that can also propagate forward-mode tangents.
pub trait TangentField: VelocityField {
    #[allow(clippy::too_many_arguments)]
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl VelocityField for VelocityNet {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.forward(x, t, y, cfg)
    }

    fn null_class(&self) -> usize {
        VelocityNet::null_class(self)
    }
}

impl TangentField for VelocityNet {
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.jvp(x, t, y, cfg, x_tan, t_tan)
    }
}

impl<V: VelocityField + ?Sized> VelocityField for &V {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        (**self).velocity(x, t, y, cfg)
    }

    fn null_class(&self) -> usize {
        (**self).null_class()
    }
}

impl<V: TangentField + ?Sized> TangentField for &V {
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        (**self).velocity_jvp(x, t, y, cfg, x_tan, t_tan)
    }
}

/// Exact flow-matching velocity for standardised data `N(0, I)` with unit
/// Gaussian noise: `v*(x, t) = (2t - 1) / ((1 - t)^2 + t^2) * x`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianOracle;

impl GaussianOracle {
    pub fn coefficient(t: f64) -> f64 {
        (2.0 * t - 1.0) / ((1.0 - t).powi(2) + t * t)
    }

    pub fn coefficient_dt(t: f64) -> f64 {
        let d = (1.0 - t).powi(2) + t * t;
        let dd = 4.0 * t - 2.0;
        (2.0 * d - (2.0 * t - 1.0) * dd) / (d * d)
    }
}

fn scale_rows(x: ArrayView2<'_, f64>, coef: &Array1<f64>) -> Array2<f64> {
    &x * &coef.view().insert_axis(Axis(1))
}

impl VelocityField for GaussianOracle {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        _y: &[usize],
        _cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        Ok(scale_rows(x, &t.mapv(Self::coefficient)))
    }

    fn null_class(&self) -> usize {
        0
    }
}

impl TangentField for GaussianOracle {
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let v = self.velocity(x, t, y, cfg)?;
        let coef = t.mapv(Self::coefficient);
        let dcoef = &t.mapv(Self::coefficient_dt) * &t_tan;
        Ok((v, scale_rows(x_tan, &coef) + scale_rows(x, &dcoef)))
    }
}

/// The zero field.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        _t: ArrayView1<'_, f64>,
        _y: &[usize],
        _cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.raw_dim()))
    }

    fn null_class(&self) -> usize {
        0
    }
}

impl TangentField for ZeroField {
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        _t: ArrayView1<'_, f64>,
        _y: &[usize],
        _cfg: ArrayView1<'_, f64>,
        _x_tan: ArrayView2<'_, f64>,
        _t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((Array2::zeros(x.raw_dim()), Array2::zeros(x.raw_dim())))
    }
}

/// `F(x, t) = t * x`, a hand-built field for product-rule checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TimeScaledIdentity;

impl VelocityField for TimeScaledIdentity {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        _y: &[usize],
        _cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        Ok(scale_rows(x, &t.to_owned()))
    }

    fn null_class(&self) -> usize {
        0
    }
}

impl TangentField for TimeScaledIdentity {
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let v = self.velocity(x, t, y, cfg)?;
        Ok((v, scale_rows(x_tan, &t.to_owned()) + scale_rows(x, &t_tan.to_owned())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn product_rule_on_time_scaled_identity() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let t = array![0.3, 0.7];
        let v = array![[0.2, 0.1], [-1.0, 0.4]];
        let ones = array![1.0, 1.0];
        let (_, tan) = TimeScaledIdentity
            .velocity_jvp(x.view(), t.view(), &[0, 0], ones.view(), v.view(), ones.view())
            .unwrap();
        let expected = &v * &t.view().insert_axis(Axis(1)) + &x;
        assert_eq!(tan, expected);
    }

    #[test]
    fn oracle_time_derivative() {
        let h = 1e-6;
        for t in [0.1, 0.4, 0.5, 0.85] {
            let fd = (GaussianOracle::coefficient(t + h) - GaussianOracle::coefficient(t - h)) / (2.0 * h);
            assert!((fd - GaussianOracle::coefficient_dt(t)).abs() < 1e-7);
        }
    }
}
