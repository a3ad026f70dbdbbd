//! InfoNCE losses with a learnable temperature.
//!
//! For a batch of `k` paired rows `o` and `c` (both L2-normalized first):
//!
//! ```text
//! directional(o, c) = (1/k) Σᵢ −log( exp(ôᵢ·ĉᵢ/τ) / Σⱼ exp(ôᵢ·ĉⱼ/τ) )
//! symmetric(o, a)   = ( directional(o, a) + directional(a, o) ) / 2
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};

pub const INITIAL_TAU: f64 = 0.07;
pub const MIN_INV_TAU: f64 = 1.0;
pub const MAX_INV_TAU: f64 = 100.0;

/// Learnable temperature stored as `s = ln(1/τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    log_inv_tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self::from_tau(INITIAL_TAU)
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Self {
        Temperature {
            log_inv_tau: -tau.ln(),
        }
    }

    pub fn from_log_inv_tau(s: f64) -> Self {
        Temperature { log_inv_tau: s }
    }

    pub fn log_inv_tau(&self) -> f64 {
        self.log_inv_tau
    }

    pub fn set_log_inv_tau(&mut self, s: f64) {
        self.log_inv_tau = s;
    }

    pub fn tau(&self) -> f64 {
        (-self.log_inv_tau).exp()
    }

    pub fn inv_tau(&self) -> f64 {
        self.log_inv_tau.exp()
    }

    /// Projects `s` so that `1/τ ∈ [1, 100]`.
    pub fn clamp(&mut self) {
        self.log_inv_tau = self.log_inv_tau.clamp(MIN_INV_TAU.ln(), MAX_INV_TAU.ln());
    }

    /// Adds `s` to the tape as a 1×1 parameter leaf.
    pub fn param(&self, tape: &mut Tape) -> NodeId {
        tape.param(Matrix::scalar(self.log_inv_tau).expect("finite temperature"))
    }

    /// Adds `s` as a constant, for evaluation without a temperature gradient.
    pub fn constant(&self, tape: &mut Tape) -> NodeId {
        tape.constant(Matrix::scalar(self.log_inv_tau).expect("finite temperature"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Directional,
    Symmetric,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Directional => "directional",
            LossVariant::Symmetric => "symmetric",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Scalar loss node.
    pub loss: NodeId,
    /// Temperature-scaled similarity logits `ôᵢ·ĉⱼ/τ`, detached.
    pub logits: Matrix,
}

/// Directional InfoNCE: rows of `o` are queries, rows of `c` the candidates.
///
/// `log_inv_tau` must be a 1×1 node holding `s = ln(1/τ)`.
pub fn infonce_directional(tape: &mut Tape, o: NodeId, c: NodeId, log_inv_tau: NodeId) -> Result<LossOutput> {
    let logits = scaled_logits(tape, o, c, log_inv_tau)?;
    let loss = tape.diagonal_cross_entropy(logits)?;
    Ok(LossOutput {
        loss,
        logits: tape.value(logits).clone(),
    })
}

/// Symmetric InfoNCE: mean of both directional losses over the same logits.
pub fn infonce_symmetric(tape: &mut Tape, o: NodeId, a: NodeId, log_inv_tau: NodeId) -> Result<LossOutput> {
    let logits = scaled_logits(tape, o, a, log_inv_tau)?;
    let forward = tape.diagonal_cross_entropy(logits)?;
    let transposed = tape.transpose(logits);
    let backward = tape.diagonal_cross_entropy(transposed)?;
    let both = tape.add(forward, backward)?;
    let loss = tape.scale(both, 0.5)?;
    Ok(LossOutput {
        loss,
        logits: tape.value(logits).clone(),
    })
}

pub fn infonce(
    tape: &mut Tape,
    variant: LossVariant,
    o: NodeId,
    c: NodeId,
    log_inv_tau: NodeId,
) -> Result<LossOutput> {
    match variant {
        LossVariant::Directional => infonce_directional(tape, o, c, log_inv_tau),
        LossVariant::Symmetric => infonce_symmetric(tape, o, c, log_inv_tau),
    }
}

/// Loss value for plain matrices, with every input detached.
pub fn infonce_value(variant: LossVariant, o: &Matrix, c: &Matrix, temp: &Temperature) -> Result<f64> {
    let mut tape = Tape::new();
    let on = tape.constant(o.clone());
    let cn = tape.constant(c.clone());
    let s = temp.constant(&mut tape);
    let out = infonce(&mut tape, variant, on, cn, s)?;
    tape.scalar_value(out.loss)
}

fn scaled_logits(tape: &mut Tape, o: NodeId, c: NodeId, log_inv_tau: NodeId) -> Result<NodeId> {
    let (os, cs) = (tape.value(o).shape(), tape.value(c).shape());
    if os != cs {
        return Err(Error::Dimension {
            op: "infonce",
            left: os,
            right: cs,
        });
    }
    if os.0 == 0 {
        return Err(Error::contract("infonce needs a batch of at least one row"));
    }
    let on = tape.l2_normalize_rows(o)?;
    let cn = tape.l2_normalize_rows(c)?;
    let ct = tape.transpose(cn);
    let sims = tape.matmul(on, ct)?;
    let inv_tau = tape.exp(log_inv_tau)?;
    tape.scale_by(sims, inv_tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(variant: LossVariant, o: &Matrix, c: &Matrix, tau: f64) -> f64 {
        infonce_value(variant, o, c, &Temperature::from_tau(tau)).unwrap()
    }

    #[test]
    fn temperature_initial_value() {
        let t = Temperature::default();
        assert!((t.tau() - 0.07).abs() < 1e-15);
        assert!((Temperature::from_log_inv_tau(-(0.07f64).ln()).tau() - 0.07).abs() < 1e-15);
        assert_eq!(Temperature::from_log_inv_tau(0.0).tau(), 1.0);
    }

    #[test]
    fn temperature_clamps_to_hundred() {
        let mut t = Temperature::from_log_inv_tau(250f64.ln());
        t.clamp();
        assert!((t.inv_tau() - 100.0).abs() < 1e-9);
        let mut t = Temperature::from_log_inv_tau(-3.0);
        t.clamp();
        assert_eq!(t.inv_tau(), 1.0);
    }

    #[test]
    fn single_row_loss_is_zero() {
        let o = Matrix::from_rows(&[[0.3, -2.0, 1.0]]).unwrap();
        let c = Matrix::from_rows(&[[5.0, 1.0, 0.1]]).unwrap();
        assert_eq!(loss(LossVariant::Directional, &o, &c, 0.07), 0.0);
        assert_eq!(loss(LossVariant::Symmetric, &o, &c, 0.07), 0.0);
    }

    #[test]
    fn identical_rows_give_log_two() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        for v in [LossVariant::Directional, LossVariant::Symmetric] {
            assert!((loss(v, &m, &m, 0.07) - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_alignment_at_unit_temperature() {
        let m = Matrix::identity(2);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss(LossVariant::Symmetric, &m, &m, 1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let o = tape.constant(Matrix::identity(2));
        let c = tape.constant(Matrix::identity(3));
        let s = Temperature::default().constant(&mut tape);
        assert!(matches!(
            infonce_directional(&mut tape, o, c, s),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_row_is_degenerate() {
        let o = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let err = infonce_value(LossVariant::Directional, &o, &Matrix::identity(2), &Temperature::default());
        assert!(matches!(err, Err(Error::Degenerate { row: 1, .. })));
    }

    #[test]
    fn logits_are_scaled_similarities() {
        let mut tape = Tape::new();
        let o = tape.constant(Matrix::identity(2));
        let s = Temperature::from_tau(0.5).constant(&mut tape);
        let out = infonce_directional(&mut tape, o, o, s).unwrap();
        assert!((out.logits.get(0, 0) - 2.0).abs() < 1e-12);
        assert_eq!(out.logits.get(0, 1), 0.0);
    }
}
