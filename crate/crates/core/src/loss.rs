//! Distribution-aware loss: per-pixel cross-entropy restricted to hard
//! pixels chosen by online hard example mining.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LABEL_FILL;
use crate::model::Dianet;
use crate::scalar::Scalar;
use crate::tensor::{numel, Graph, Objective, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid loss config: {0}")]
pub struct DalConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DalConfig {
    /// Pixels whose true-class probability is below this are always kept.
    pub prob_thresh: f64,
    /// Minimum number of kept pixels per batch; `None` means a sixteenth of
    /// the batch pixels.
    pub min_kept: Option<usize>,
    pub ignore_index: u8,
}

impl Default for DalConfig {
    fn default() -> Self {
        Self {
            prob_thresh: 0.7,
            min_kept: None,
            ignore_index: LABEL_FILL,
        }
    }
}

impl DalConfig {
    pub fn validate(&self) -> Result<(), DalConfigError> {
        // 1.0 is allowed: it is the degenerate keep-everything setting.
        if !(self.prob_thresh > 0.0 && self.prob_thresh <= 1.0) {
            return Err(DalConfigError(format!(
                "prob_thresh {} outside (0, 1]",
                self.prob_thresh
            )));
        }
        if self.min_kept == Some(0) {
            return Err(DalConfigError("min_kept must be >= 1".into()));
        }
        Ok(())
    }

    pub fn min_kept_for(&self, pixels: usize) -> usize {
        self.min_kept.unwrap_or((pixels / 16).max(1))
    }
}

/// Selection mask: every valid pixel below `thresh`, topped up with the
/// lowest-probability remaining valid pixels until `min(min_kept, valid)`
/// are chosen. Ties go to the earlier pixel.
pub fn ohem_select(
    prob_correct: &[f64],
    valid: &[bool],
    thresh: f64,
    min_kept: usize,
) -> Vec<bool> {
    assert_eq!(
        prob_correct.len(),
        valid.len(),
        "ohem_select: length mismatch"
    );
    let mut selected: Vec<bool> = prob_correct
        .iter()
        .zip(valid)
        .map(|(&p, &v)| v && p < thresh)
        .collect();
    let valid_count = valid.iter().filter(|v| **v).count();
    let have = selected.iter().filter(|s| **s).count();
    let target = min_kept.min(valid_count);
    if have < target {
        let mut rest: Vec<usize> = (0..valid.len())
            .filter(|&i| valid[i] && !selected[i])
            .collect();
        rest.sort_by(|&a, &b| prob_correct[a].total_cmp(&prob_correct[b]).then(a.cmp(&b)));
        for &i in &rest[..target - have] {
            selected[i] = true;
        }
    }
    selected
}

pub struct DalOutput {
    pub loss: Var,
    pub selected: usize,
    pub valid: usize,
}

/// Mean cross-entropy over the selected pixels of a batch; zero when no
/// pixel is valid.
pub fn dal_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    cfg: &DalConfig,
) -> Result<DalOutput, TensorError> {
    let ce = g.softmax_ce_map(logits, labels, cfg.ignore_index)?;
    let pixels = numel(&g.shape(ce.loss_map));
    let mask = ohem_select(
        &ce.prob_correct,
        &ce.valid,
        cfg.prob_thresh,
        cfg.min_kept_for(pixels),
    );
    let loss = g.masked_mean(ce.loss_map, &mask)?;
    Ok(DalOutput {
        loss,
        selected: mask.iter().filter(|m| **m).count(),
        valid: ce.valid.iter().filter(|v| **v).count(),
    })
}

/// Plain mean cross-entropy over valid pixels.
pub fn mean_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    ignore: u8,
) -> Result<Var, TensorError> {
    let ce = g.softmax_ce_map(logits, labels, ignore)?;
    g.masked_mean(ce.loss_map, &ce.valid)
}

/// The training objective of a network on one fixed batch, as a function of
/// the network parameters.
pub struct NetworkLoss<'a> {
    pub net: &'a Dianet,
    pub input: Tensor<f64>,
    pub labels: Vec<u8>,
    pub dal: DalConfig,
}

impl Objective for NetworkLoss<'_> {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var, TensorError> {
        let x = g.input(self.input.cast());
        let logits = self.net.forward(g, params, x)?;
        Ok(dal_loss(g, logits, &self.labels, &self.dal)?.loss)
    }
}
