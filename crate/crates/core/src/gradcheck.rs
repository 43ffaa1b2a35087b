//! Central finite-difference check of the full model in 64-bit.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{BidirBatch, BidirModel, ForwardOptions, ModelConfig};
use crate::nn::Pooling;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Denominator floor so that gradients that are zero up to rounding do not
/// produce huge relative errors.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub coordinates: usize,
    pub worst_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.worst_rel_error <= self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            let verdict = if g.worst_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:<16} {:>6} coords  worst rel err {:.3e}  {verdict}", g.name, g.coordinates, g.worst_rel_error)?;
        }
        write!(f, "worst {:.3e} (tolerance {:.0e})", self.worst(), self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Summed joint loss of `batch`, dropout off.
pub fn loss_value(model: &BidirModel<f64>, batch: &BidirBatch) -> Result<f64> {
    Ok(model.joint_loss(batch)?.0)
}

/// Gradients of the summed joint loss from the tape, one tensor per
/// parameter in store order.
pub fn tape_gradients(model: &BidirModel<f64>, batch: &BidirBatch) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let l = model.joint_loss_on_tape::<ChaCha8Rng>(&mut tape, batch, ForwardOptions::default())?;
    tape.backward(l.total)?;
    let mut store = model.store.clone();
    store.zero_grad();
    tape.accumulate_param_grads(&mut store)?;
    Ok(store.ids().map(|id| store.grad(id).clone()).collect())
}

/// Compares `analytic` gradients against central differences of the loss
/// for every parameter coordinate, reporting per parameter group.
pub fn check_model(
    model: &BidirModel<f64>,
    batch: &BidirBatch,
    eps: f64,
    tolerance: f64,
    analytic: impl Fn(&BidirModel<f64>, &BidirBatch) -> Result<Vec<Tensor<f64>>>,
) -> Result<GradcheckReport> {
    let grads = analytic(model, batch)?;
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for group in model.param_groups() {
        let mut worst: f64 = 0.0;
        let mut coordinates = 0;
        for &id in &group.ids {
            for k in 0..model.store.value(id).len() {
                let orig = model.store.value(id).data()[k];
                probe.store.value_mut(id).data_mut()[k] = orig + eps;
                let up = loss_value(&probe, batch)?;
                probe.store.value_mut(id).data_mut()[k] = orig - eps;
                let down = loss_value(&probe, batch)?;
                probe.store.value_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                worst = worst.max(relative_error(grads[id.index()].data()[k], numeric));
                coordinates += 1;
            }
        }
        groups.push(GroupReport {
            name: group.name,
            coordinates,
            worst_rel_error: worst,
        });
    }
    Ok(GradcheckReport { groups, tolerance })
}

/// The tiny model and the 3x3-token example used by the default check.
pub fn default_case(seed: u64) -> Result<(BidirModel<f64>, BidirBatch)> {
    let config = ModelConfig {
        src_vocab: 8,
        tgt_vocab: 9,
        d_model: 4,
        d_ff: 6,
        heads: 2,
        layers: 1,
        d_cell: 4,
        tie_encoders: false,
        pooling: Pooling::Max,
    };
    let model = BidirModel::new(config, seed)?;
    let batch = BidirBatch::from_pairs(&[(vec![5, 7, 4], vec![8, 4, 6])], None)?;
    Ok((model, batch))
}

pub fn run_default(seed: u64) -> Result<GradcheckReport> {
    let (model, batch) = default_case(seed)?;
    check_model(&model, &batch, DEFAULT_EPS, DEFAULT_TOLERANCE, tape_gradients)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_case_passes_and_covers_all_groups() {
        let r = run_default(1).unwrap();
        assert!(r.passed(), "{r}");
        let names: Vec<&str> = r.groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(
            names,
            ["src_encoder", "tgt_encoder", "grid.input", "grid.forget", "grid.lambda", "grid.output", "grid.candidate", "out_tgt", "out_src"]
        );
        assert!(r.groups.iter().all(|g| g.coordinates > 0));
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let (model, batch) = default_case(2).unwrap();
        let lambda_w = model.grid.gates[2].w.index();
        let r = check_model(&model, &batch, DEFAULT_EPS, DEFAULT_TOLERANCE, |m, b| {
            let mut g = tape_gradients(m, b)?;
            g[lambda_w].data_mut().iter_mut().for_each(|x| *x *= 1.1);
            Ok(g)
        })
        .unwrap();
        assert!(!r.passed());
        let failed: Vec<&str> = r
            .groups
            .iter()
            .filter(|g| g.worst_rel_error > r.tolerance)
            .map(|g| g.name.as_str())
            .collect();
        assert_eq!(failed, ["grid.lambda"]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-12, 0.0), 1e-12 / DENOM_FLOOR);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
