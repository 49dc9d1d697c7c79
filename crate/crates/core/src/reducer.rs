//! Horizontal token reduction.
//!
//! Document text runs in rows, so tokens are merged only along the horizontal
//! axis: a 1x4 stride-(1,4) convolution at the encoder width d followed by a
//! dense projection to the decoder width. The window never crosses a feature
//! row, so each output token summarises four horizontally adjacent patches.
//! There is no activation; this is a learned linear regrouping.

use crate::encoder::{FeatureVar, Provenance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, Bound, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Horizontal merge factor.
pub const MERGE: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct HReducer {
    /// Input feature width (encoder d_model).
    pub d: usize,
    /// Output feature width (decoder model width).
    pub d_hat: usize,
}

/// Reduced feature map in a graph: tokens are [h * w4, d_hat], row-major over
/// the (h, w4) grid.
#[derive(Debug, Clone, Copy)]
pub struct ReducedVar {
    pub tokens: Var,
    pub h: usize,
    pub w4: usize,
    pub d_hat: usize,
    pub provenance: Provenance,
}

/// Concrete reduced map: values are [h, w4, d_hat].
#[derive(Debug, Clone)]
pub struct ReducedMap<S: Scalar> {
    pub values: Tensor<S>,
    pub provenance: Provenance,
}

impl HReducer {
    pub fn new(d: usize, d_hat: usize) -> Result<Self> {
        if d == 0 || d_hat == 0 {
            return Err(Error::Config(format!("reducer widths must be positive: d={d}, d_hat={d_hat}")));
        }
        Ok(HReducer { d, d_hat })
    }

    pub fn register_params<S: Scalar>(&self, ps: &mut ParamSet<S>, rng: &mut Rng) -> Result<()> {
        ps.register("red.conv.w", &[self.d, self.d, 1, MERGE], uniform_fan_in(self.d * MERGE), rng)?;
        ps.register("red.conv.b", &[self.d], uniform_fan_in(self.d * MERGE), rng)?;
        ps.register("red.fc.w", &[self.d, self.d_hat], uniform_fan_in(self.d), rng)?;
        ps.register("red.fc.b", &[self.d_hat], uniform_fan_in(self.d), rng)?;
        Ok(())
    }

    /// Merge a feature map horizontally: (h, w, d) -> (h, w/4, d_hat).
    pub fn reduce_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        fm: &FeatureVar,
    ) -> Result<ReducedVar> {
        if fm.d != self.d {
            return Err(Error::dim(
                "reduce",
                format!("feature width {} vs reducer width {}", fm.d, self.d),
            ));
        }
        if fm.w % MERGE != 0 {
            return Err(Error::Config(format!(
                "feature map width {} is not divisible by the merge factor {}",
                fm.w, MERGE
            )));
        }
        let (h, w, d) = (fm.h, fm.w, fm.d);
        let w4 = w / MERGE;
        let hwd = g.reshape(fm.tokens, &[h, w, d])?;
        let dhw = g.permute3(hwd, [2, 0, 1])?;
        let conv = g.conv2d(dhw, bound.var("red.conv.w")?, (1, MERGE))?;
        let conv = g.add_channel_bias(conv, bound.var("red.conv.b")?)?;
        let merged = g.permute3(conv, [1, 2, 0])?;
        let flat = g.reshape(merged, &[h * w4, d])?;
        let out = g.linear(flat, bound.var("red.fc.w")?, bound.var("red.fc.b")?)?;
        Ok(ReducedVar { tokens: out, h, w4, d_hat: self.d_hat, provenance: fm.provenance })
    }

    /// Concrete wrapper for use outside training graphs.
    pub fn reduce<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        fm_values: &Tensor<S>,
        provenance: Provenance,
    ) -> Result<ReducedMap<S>> {
        if fm_values.rank() != 3 {
            return Err(Error::dim("reduce", format!("feature map rank {:?}", fm_values.shape())));
        }
        let (h, w, d) = (fm_values.dim(0), fm_values.dim(1), fm_values.dim(2));
        let mut g = Graph::<S>::new();
        let bound = params.bind_const(&mut g);
        let tokens = g.constant(fm_values.reshaped(&[h * w, d])?);
        let fv = FeatureVar { tokens, h, w, d, provenance };
        let rv = self.reduce_var(&mut g, &bound, &fv)?;
        let values = g.value(rv.tokens).reshaped(&[rv.h, rv.w4, rv.d_hat])?;
        Ok(ReducedMap { values, provenance })
    }
}
