//! Torque readout and diagonal-Gaussian action densities.

use super::{NetError, PolicyOutput, Result};
use crate::morphology::{MorphologyGraph, NodeKind};
use crate::tensor::{Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `dir_x * mu_y - dir_y * mu_x` per row of two `n x 2` arrays.
pub fn torque_readout(mu_vec: &[f64], link_dirs: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim != 2 {
        return Err(NetError::NotPlanar(dim));
    }
    if mu_vec.len() != link_dirs.len() || !mu_vec.len().is_multiple_of(2) {
        return Err(NetError::Layout(format!(
            "{} mean entries against {} direction entries",
            mu_vec.len(),
            link_dirs.len()
        )));
    }
    Ok(mu_vec
        .chunks_exact(2)
        .zip(link_dirs.chunks_exact(2))
        .map(|(m, d)| d[0] * m[1] - d[1] * m[0])
        .collect())
}

/// Tape version of [`torque_readout`]; `mu_vec` is `N x 2`, result is `N`.
pub fn torque_means<'t>(mu_vec: Var<'t>, link_dirs: &[f64]) -> Result<Var<'t>> {
    let rows = link_dirs.len() / 2;
    let perp: Vec<f64> = link_dirs.chunks_exact(2).flat_map(|d| [-d[1], d[0]]).collect();
    let perp = Tensor::new(vec![rows, 2], perp)?;
    Ok(mu_vec.mul_const(&perp)?.sum(Some(1))?)
}

/// `1` for joints, `0` for the root, repeated `batch` times.
pub fn action_mask(graph: &MorphologyGraph, batch: usize) -> Vec<f64> {
    let one: Vec<f64> = graph
        .nodes()
        .iter()
        .map(|s| if s.kind == NodeKind::Root { 0.0 } else { 1.0 })
        .collect();
    (0..batch).flat_map(|_| one.iter().copied()).collect()
}

/// Summed log density of independent Gaussians.
pub fn gaussian_log_prob(actions: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    actions
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), s)| {
            let z = (a - m) * (-s).exp();
            -0.5 * z * z - s - HALF_LN_2PI
        })
        .sum()
}

/// Log density of a single-graph policy output; the root's action is ignored.
pub fn log_prob(out: &PolicyOutput, graph: &MorphologyGraph, actions: &[f64]) -> Result<f64> {
    let mean = out.action_mean.as_ref().ok_or(NetError::NotPlanar(out.mu_vec.shape()[1]))?;
    if actions.len() != mean.len() || mean.len() != graph.node_count() {
        return Err(NetError::Layout(format!(
            "{} actions for {} nodes",
            actions.len(),
            graph.node_count()
        )));
    }
    let mask = action_mask(graph, 1);
    Ok((0..mean.len())
        .filter(|&i| mask[i] != 0.0)
        .map(|i| gaussian_log_prob(&actions[i..=i], &mean[i..=i], &out.log_std[i..=i]))
        .sum())
}

/// Per-entry masked log density on the tape.
pub fn log_prob_var<'t>(actions: &[f64], mean: Var<'t>, log_std: Var<'t>, mask: &[f64]) -> Result<Var<'t>> {
    let neg_a = Tensor::vector(actions.iter().map(|a| -a).collect());
    let mask = Tensor::vector(mask.to_vec());
    let z = mean.add_const(&neg_a)?.mul(log_std.neg().exp())?;
    Ok(z.square()
        .scale(-0.5)
        .sub(log_std)?
        .add_scalar(-HALF_LN_2PI)
        .mul_const(&mask)?)
}

/// Exact `KL(old || new)` of scalar Gaussians.
pub fn gaussian_kl(mu_old: f64, log_std_old: f64, mu_new: f64, log_std_new: f64) -> f64 {
    let var_ratio = (2.0 * (log_std_old - log_std_new)).exp();
    let diff = (mu_old - mu_new) * (-log_std_new).exp();
    log_std_new - log_std_old + 0.5 * (var_ratio + diff * diff) - 0.5
}

/// Per-entry masked `KL(old || new)` with the new distribution on the tape.
pub fn gaussian_kl_var<'t>(
    mu_old: &[f64],
    log_std_old: &[f64],
    mu_new: Var<'t>,
    log_std_new: Var<'t>,
    mask: &[f64],
) -> Result<Var<'t>> {
    let neg_mu = Tensor::vector(mu_old.iter().map(|m| -m).collect());
    let neg_ls = Tensor::vector(log_std_old.iter().map(|s| -s).collect());
    let var_old = Tensor::vector(log_std_old.iter().map(|s| (2.0 * s).exp()).collect());
    let mask = Tensor::vector(mask.to_vec());
    let spread = mu_new.add_const(&neg_mu)?.square().add_const(&var_old)?;
    let inv_var = log_std_new.scale(-2.0).exp();
    Ok(log_std_new
        .add_const(&neg_ls)?
        .add(spread.mul(inv_var)?.scale(0.5))?
        .add_scalar(-0.5)
        .mul_const(&mask)?)
}

/// Entropy of independent Gaussians with the given log standard deviations.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    #[test]
    fn readout_examples() {
        assert_eq!(torque_readout(&[0.0, 1.0], &[1.0, 0.0], 2).unwrap(), vec![1.0]);
        assert_eq!(torque_readout(&[2.0, 0.0], &[1.0, 0.0], 2).unwrap(), vec![0.0]);
        assert!(matches!(
            torque_readout(&[0.0; 3], &[0.0; 3], 3),
            Err(NetError::NotPlanar(3))
        ));
    }

    #[test]
    fn readout_flips_under_mirror() {
        let mu = [0.3, -1.2, 0.8, 0.1];
        let dirs = [0.6, 0.8, -0.28, 0.96];
        let mirror = |v: &[f64]| -> Vec<f64> { v.chunks(2).flat_map(|p| [-p[0], p[1]]).collect() };
        let t = torque_readout(&mu, &dirs, 2).unwrap();
        let tm = torque_readout(&mirror(&mu), &mirror(&dirs), 2).unwrap();
        for (a, b) in t.iter().zip(&tm) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn tape_readout_matches_plain() {
        let tape = Tape::new();
        let mu = [0.3, -1.2, 0.8, 0.1];
        let dirs = [0.6, 0.8, -0.28, 0.96];
        let v = tape.param(Tensor::new(vec![2, 2], mu.to_vec()).unwrap());
        let t = torque_means(v, &dirs).unwrap();
        assert_eq!(t.value().data(), torque_readout(&mu, &dirs, 2).unwrap().as_slice());
    }

    #[test]
    fn log_prob_examples() {
        assert!((gaussian_log_prob(&[0.4], &[0.4], &[0.0]) + 0.918_938_53).abs() < 1e-8);
        let two = gaussian_log_prob(&[0.1, -0.3], &[0.0, 0.5], &[-0.2, 0.4]);
        let split = gaussian_log_prob(&[0.1], &[0.0], &[-0.2]) + gaussian_log_prob(&[-0.3], &[0.5], &[0.4]);
        assert!((two - split).abs() < 1e-15);

        let tape = Tape::new();
        let m = tape.param(Tensor::vector(vec![0.7]));
        let s = tape.param(Tensor::vector(vec![0.1]));
        let lp = log_prob_var(&[0.7], m, s, &[1.0]).unwrap().sum(None).unwrap();
        assert_eq!(lp.backward().unwrap().wrt(m).data(), &[0.0]);
    }

    #[test]
    fn masked_entries_contribute_nothing() {
        let tape = Tape::new();
        let m = tape.param(Tensor::vector(vec![0.0, 0.3]));
        let s = tape.param(Tensor::vector(vec![0.0, -0.1]));
        let lp = log_prob_var(&[5.0, 0.1], m, s, &[0.0, 1.0]).unwrap();
        assert_eq!(lp.value().data()[0], 0.0);
        assert!((lp.value().data()[1] - gaussian_log_prob(&[0.1], &[0.3], &[-0.1])).abs() < 1e-15);
    }

    #[test]
    fn kl_tape_matches_closed_form() {
        let tape = Tape::new();
        let m = tape.param(Tensor::vector(vec![0.2, -0.4]));
        let s = tape.param(Tensor::vector(vec![-0.3, 0.5]));
        let kl = gaussian_kl_var(&[0.0, 0.1], &[0.1, 0.2], m, s, &[1.0, 1.0]).unwrap();
        let expect = [gaussian_kl(0.0, 0.1, 0.2, -0.3), gaussian_kl(0.1, 0.2, -0.4, 0.5)];
        for (a, b) in kl.value().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn entropy_of_unit_gaussian() {
        assert!((gaussian_entropy(&[0.0]) - 1.418_938_533_204_672_7).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn kl_is_nonnegative_and_zero_only_at_equality(
            m0 in -3.0f64..3.0, s0 in -2.0f64..2.0, m1 in -3.0f64..3.0, s1 in -2.0f64..2.0,
        ) {
            let kl = gaussian_kl(m0, s0, m1, s1);
            prop_assert!(kl >= -1e-15);
            prop_assert!(gaussian_kl(m0, s0, m0, s0).abs() < 1e-15);
            if (m0 - m1).abs() > 1e-3 || (s0 - s1).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
