//! Fast invariant suite behind `alkt selftest`: gradient check, KL oracle,
//! selection oracle, posterior bound check.
//!
//! The `ALKT_SELFTEST_MUTATE` env var deliberately corrupts one check
//! (currently `kl-eps`) so the suite's failure path can itself be tested.

use crate::distill::transfer_loss_graph;
use crate::error::Result;
use crate::experiment::bound_diagnostic;
use crate::nets::{build_pair, ArchConfig};
use crate::selection::select_top;
use crate::tensor::{Tape, Tensor};
use crate::uncertainty::{kl_divergence, UncertaintyScore, KL_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, body: impl FnOnce() -> Result<()>) -> CheckResult {
    match body() {
        Ok(()) => CheckResult {
            name,
            passed: true,
            detail: "ok".into(),
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> crate::AlktError {
    crate::AlktError::Invalid(msg)
}

fn kl_oracle() -> Result<()> {
    // mutation hook: a corrupted floor must push the hand values off target
    let eps = match std::env::var("ALKT_SELFTEST_MUTATE").as_deref() {
        Ok("kl-eps") => 0.5,
        _ => KL_EPS,
    };
    let cases = [
        (vec![0.5, 0.5], vec![0.9, 0.1], 0.510826),
        (vec![0.9, 0.1], vec![0.5, 0.5], 0.368064),
    ];
    for (p, q, want) in cases {
        let got = kl_divergence(&p, &q, eps)?;
        if (got - want).abs() > 1e-6 {
            return Err(fail(format!("kl({p:?}||{q:?}) = {got}, want {want}")));
        }
    }
    Ok(())
}

fn gradient_check() -> Result<()> {
    let arch = ArchConfig::mlp(2, 6, 3, 4);
    let (teacher, mut student) = build_pair(&arch, 17)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let t_acts: Vec<Tensor> = teacher.forward(&x)?.block_activations;
    let loss_at = |student: &crate::nets::BlockModel| -> Result<f64> {
        let mut tape = Tape::new();
        let gf = student.forward_graph(&mut tape, &x, None)?;
        let loss = transfer_loss_graph(&mut tape, &gf.block_activations, &t_acts)?;
        Ok(tape.value(loss)[0])
    };
    // analytic grads
    let mut tape = Tape::new();
    let gf = student.forward_graph(&mut tape, &x, None)?;
    let loss = transfer_loss_graph(&mut tape, &gf.block_activations, &t_acts)?;
    tape.backward(loss)?;
    let grads: Vec<(usize, Vec<f64>)> = gf
        .param_vars
        .iter()
        .map(|&(pi, var)| (pi, tape.grad(var).to_vec()))
        .collect();
    let h = 1e-5;
    for (pi, grad) in &grads {
        for j in (0..grad.len()).step_by(grad.len().max(1) / 3 + 1) {
            let orig = student.params[*pi].data[j];
            student.params[*pi].data[j] = orig + h;
            let up = loss_at(&student)?;
            student.params[*pi].data[j] = orig - h;
            let down = loss_at(&student)?;
            student.params[*pi].data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[j].abs()).max(1e-6);
            if ((grad[j] - fd) / denom).abs() > 1e-5 {
                return Err(fail(format!(
                    "param {pi}[{j}]: autodiff {} vs finite-diff {fd}",
                    grad[j]
                )));
            }
        }
    }
    Ok(())
}

fn selection_oracle() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let n = rng.gen_range(5..40);
        let m = rng.gen_range(1..=n);
        let scores: Vec<UncertaintyScore> = (0..n)
            .map(|index| UncertaintyScore {
                index,
                value: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let got = select_top(&scores, m)?;
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|&a, &b| {
            scores[b]
                .value
                .total_cmp(&scores[a].value)
                .then(a.cmp(&b))
        });
        let mut want = oracle[..m].to_vec();
        want.sort_unstable();
        if got != want {
            return Err(fail(format!("select-top {got:?} != oracle {want:?}")));
        }
    }
    Ok(())
}

fn bound_check() -> Result<()> {
    let arch = ArchConfig::mlp(2, 6, 3, 2);
    let (teacher, student) = build_pair(&arch, 41)?;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let n = 32;
    let feats = Tensor::new(
        vec![n, 2],
        (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )?;
    let indices: Vec<usize> = (0..n).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    // bound_diagnostic errors on any triangle-inequality violation
    bound_diagnostic(&teacher, &student, &feats, &indices, &labels, 3)?;
    Ok(())
}

/// Run every check; order and names are stable.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("gradient-check", gradient_check),
        check("kl-oracle", kl_oracle),
        check("selection-oracle", selection_oracle),
        check("bound-check", bound_check),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_all();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn check_names_are_stable() {
        let names: Vec<&str> = run_all().iter().map(|r| r.name).collect();
        assert_eq!(
            names,
            vec!["gradient-check", "kl-oracle", "selection-oracle", "bound-check"]
        );
    }
}
