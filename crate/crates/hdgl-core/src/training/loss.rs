//! Masked cross-entropy over per-node logits.

use hdgl_autodiff::{Matrix, Session, Var};

use crate::error::{Error, Result};

pub struct MaskedLoss {
    pub loss: Var,
    /// `−log softmax(logits)[label]` per node; exactly 0 off the mask.
    pub per_node: Vec<f64>,
}

/// Mean negative log-softmax of the true class over masked nodes only.
/// Off-mask logits contribute nothing to the loss or its gradient.
pub fn masked_cross_entropy(
    sess: &mut Session,
    logits: Var,
    labels: &[u8],
    mask: &[bool],
) -> Result<MaskedLoss> {
    let (m, classes) = sess.tape.value(logits).dim();
    if classes != 2 {
        return Err(Error::Shape(format!("expected 2 logit columns, got {classes}")));
    }
    if labels.len() != m || mask.len() != m {
        return Err(Error::Shape(format!(
            "{m} logit rows vs {} labels, {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::InvalidMask("mask selects no nodes".into()));
    }
    let lsm = sess.tape.log_softmax_rows(logits);
    let mut picks = Matrix::zeros((m, 2));
    for i in 0..m {
        if mask[i] {
            picks[[i, labels[i] as usize]] = -1.0 / count as f64;
        }
    }
    let picks = sess.constant(picks);
    let weighted = sess.tape.mul(lsm, picks);
    let loss = sess.tape.sum_all(weighted);

    let lsm_vals = sess.tape.value(lsm);
    let per_node = (0..m)
        .map(|i| {
            if mask[i] {
                -lsm_vals[[i, labels[i] as usize]]
            } else {
                0.0
            }
        })
        .collect();
    Ok(MaskedLoss { loss, per_node })
}
