//! Scale-aware head: a scalar gate per pyramid level applied as a residual
//! multiplier, out_h = (1 + gamma_h) * F_h with gamma_h in [0, 1].

use crate::error::{Error, Result};
use crate::tensor::{conv1x1, global_avg_pool, hard_sigmoid, relu, Conv1x1Params, Scalar, Tensor};

/// Ordered pyramid levels sharing batch and channel counts; spatial dims may
/// differ per level.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures<S: Scalar = f32> {
    levels: Vec<Tensor<S>>,
}

impl<S: Scalar> PyramidFeatures<S> {
    pub fn new(levels: Vec<Tensor<S>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::ShapeMismatch("pyramid needs at least one level".into()));
        }
        let (n, c) = (levels[0].shape().n, levels[0].shape().c);
        for (h, lvl) in levels.iter().enumerate() {
            let s = lvl.shape();
            if s.n != n || s.c != c {
                return Err(Error::ShapeMismatch(format!(
                    "level {h} has batch/channels {}x{}, expected {n}x{c}",
                    s.n, s.c
                )));
            }
        }
        Ok(PyramidFeatures { levels })
    }

    pub fn levels(&self) -> &[Tensor<S>] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn batch(&self) -> usize {
        self.levels[0].shape().n
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape().c
    }
}

#[derive(Debug, Clone)]
pub struct ScAParams<S: Scalar = f32> {
    /// Shared single-output gate convolution.
    pub gate_conv: Conv1x1Params<S>,
}

impl<S: Scalar> ScAParams<S> {
    pub fn new(gate_conv: Conv1x1Params<S>) -> Result<Self> {
        if gate_conv.c_out != 1 {
            return Err(Error::InvalidParam(format!(
                "gate conv must have one output channel, got {}",
                gate_conv.c_out
            )));
        }
        Ok(ScAParams { gate_conv })
    }

    pub fn cast<T: Scalar>(&self) -> ScAParams<T> {
        ScAParams {
            gate_conv: self.gate_conv.cast(),
        }
    }
}

/// Per-level, per-batch-element gate values, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleWeights<S: Scalar = f32> {
    pub batch: usize,
    pub num_levels: usize,
    /// gamma[n * num_levels + h]
    pub gamma: Vec<S>,
}

impl<S: Scalar> ScaleWeights<S> {
    #[inline]
    pub fn at(&self, n: usize, h: usize) -> S {
        self.gamma[n * self.num_levels + h]
    }
}

/// gamma_h = phi(relu(gate_conv(global_avg_pool(F_h)))) per level and batch
/// element.
pub fn scale_weights<S: Scalar>(
    f: &PyramidFeatures<S>,
    p: &ScAParams<S>,
) -> Result<ScaleWeights<S>> {
    let batch = f.batch();
    let num_levels = f.num_levels();
    let mut gamma = vec![S::zero(); batch * num_levels];
    for (h, lvl) in f.levels().iter().enumerate() {
        let pooled = global_avg_pool(lvl);
        let gated = hard_sigmoid(&relu(&conv1x1(&pooled, &p.gate_conv)?));
        for n in 0..batch {
            gamma[n * num_levels + h] = gated.get(n, 0, 0, 0);
        }
    }
    Ok(ScaleWeights {
        batch,
        num_levels,
        gamma,
    })
}

/// out_h = (1 + gamma_h) * F_h, level shapes preserved.
pub fn apply_scale_weighting<S: Scalar>(
    f: &PyramidFeatures<S>,
    g: &ScaleWeights<S>,
) -> Result<PyramidFeatures<S>> {
    if g.num_levels != f.num_levels() || g.batch != f.batch() {
        return Err(Error::ShapeMismatch(format!(
            "scale weights {}x{} do not match pyramid {}x{}",
            g.batch,
            g.num_levels,
            f.batch(),
            f.num_levels()
        )));
    }
    let levels = f
        .levels()
        .iter()
        .enumerate()
        .map(|(h, lvl)| {
            let s = lvl.shape();
            Tensor::from_fn(s, |n, c, i, j| {
                (S::one() + g.at(n, h)) * lvl.get(n, c, i, j)
            })
        })
        .collect();
    PyramidFeatures::new(levels)
}

pub fn sca_forward<S: Scalar>(
    f: &PyramidFeatures<S>,
    p: &ScAParams<S>,
) -> Result<(PyramidFeatures<S>, ScaleWeights<S>)> {
    let g = scale_weights(f, p)?;
    let out = apply_scale_weighting(f, &g)?;
    Ok((out, g))
}
