//! Finite-difference verification of backward gradients.
//!
//! Runs in 64-bit verification mode: backward gradients of the batch loss are
//! compared against central finite differences on a seeded random coordinate
//! subset of every parameter group.

use crate::error::{Error, Result};
use crate::models::{Mode, Network};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GroupGradReport {
    pub group_id: u8,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupGradReport>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Compares backward gradients of the softmax cross-entropy batch loss to
/// central finite differences with step `1e-5 * max(1, |theta_i|)`, sampling
/// at least `coords_per_group` coordinates per parameter group. Relative
/// error is `|g_ad - g_fd| / max(|g_fd|, 1e-8)`. The network is left
/// bit-identical to how it was found.
pub fn grad_check(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[u32],
    coords_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let stats_snapshot = net.norm_stats();
    let result = grad_check_inner(net, x, labels, coords_per_group.max(32), seed);
    net.set_norm_stats(&stats_snapshot);
    net.clear_grads();
    result
}

fn grad_check_inner(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[u32],
    coords_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let loss_at = |net: &mut Network<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, x, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok(tape.value(loss).data[0])
    };

    // Analytic gradient once.
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    net.collect_grads(&tape)?;
    let analytic = net.flat_grads()?;
    drop(tape);

    for (gid, range) in net.group_ranges() {
        if analytic[range].iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter group {gid}"
            )));
        }
    }

    let mut theta = net.flat_params();
    let mut rng = rng::rng_from(rng::derive(seed, "gradcheck"));
    let mut groups = Vec::new();
    let mut overall = 0.0f64;

    for (gid, range) in net.group_ranges() {
        let len = range.len();
        let coords: Vec<usize> = if len <= coords_per_group {
            range.clone().collect()
        } else {
            use rand::Rng as _;
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < coords_per_group {
                picked.insert(range.start + rng.random_range(0..len));
            }
            picked.into_iter().collect()
        };

        let mut max_rel = 0.0f64;
        for &i in &coords {
            let orig = theta[i];
            let h = 1e-5 * orig.abs().max(1.0);
            theta[i] = orig + h;
            net.set_flat_params(&theta)?;
            let plus = loss_at(net)?;
            theta[i] = orig - h;
            net.set_flat_params(&theta)?;
            let minus = loss_at(net)?;
            theta[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            if !fd.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite-difference gradient in parameter group {gid}"
                )));
            }
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
            max_rel = max_rel.max(rel);
        }
        net.set_flat_params(&theta)?;
        overall = overall.max(max_rel);
        groups.push(GroupGradReport {
            group_id: gid,
            coords_checked: coords.len(),
            max_rel_error: max_rel,
        });
    }

    Ok(GradCheckReport {
        groups,
        max_rel_error: overall,
    })
}
