//! Central finite-difference verification of tape gradients.
//!
//! The checker rebuilds the objective from scratch for every probe, so it is
//! independent of the reverse pass it validates. Large tensors are probed at
//! a seeded random subset of coordinates to keep runtime bounded.

use super::{Tape, Var};
use crate::rng;
use ndarray::ArrayD;
use rand::Rng;

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance: fail when `|a − f| > tol·max(|a|,|f|) + abs_floor`.
    pub tol: f64,
    /// Absolute slack absorbing finite-difference roundoff near zero.
    pub abs_floor: f64,
    /// Probe at most this many coordinates per input tensor (0 = all).
    pub max_per_tensor: usize,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-8,
            max_per_tensor: 0,
            seed: 0,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest `|a − f| / max(|a|, |f|, abs_floor)` observed.
    pub worst_rel: f64,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.violations == 0
    }
}

/// Compare tape gradients of `build(tape, inputs) -> scalar loss` against
/// central finite differences with respect to every entry of `inputs`.
pub fn check_gradients<F>(build: F, inputs: &[ArrayD<f64>], opts: CheckOpts) -> CheckReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&tape, &vars);
        tape.scalar(loss)
    };

    // Analytic gradients once.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(v, t)| grads.wrt_or_zeros(*v, t.shape()))
        .collect();

    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut worst_rel = 0.0f64;
    let mut pick = rng::stream(opts.seed, &[0xc4ec]);

    for ti in 0..inputs.len() {
        let len = inputs[ti].len();
        let coords: Vec<usize> = if opts.max_per_tensor == 0 || len <= opts.max_per_tensor {
            (0..len).collect()
        } else {
            (0..opts.max_per_tensor)
                .map(|_| pick.random_range(0..len))
                .collect()
        };
        for ci in coords {
            let original = work[ti].as_slice().expect("contiguous")[ci];
            work[ti].as_slice_mut().unwrap()[ci] = original + opts.step;
            let f_plus = eval(&work);
            work[ti].as_slice_mut().unwrap()[ci] = original - opts.step;
            let f_minus = eval(&work);
            work[ti].as_slice_mut().unwrap()[ci] = original;

            let fd = (f_plus - f_minus) / (2.0 * opts.step);
            let an = analytic[ti].as_slice().unwrap()[ci];
            let diff = (an - fd).abs();
            let scale = an.abs().max(fd.abs());
            let rel = diff / scale.max(opts.abs_floor);
            worst_rel = worst_rel.max(rel);
            checked += 1;
            if diff > opts.tol * scale + opts.abs_floor {
                violations += 1;
                log::warn!(
                    "gradient mismatch: tensor {ti} coord {ci}: analytic {an:.3e} vs fd {fd:.3e}"
                );
            }
        }
    }
    CheckReport {
        checked,
        violations,
        worst_rel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn catches_correct_composite_gradient() {
        // loss = mean(sigmoid(x·w)²)
        let x = array![[0.3, -0.7], [0.1, 0.9]].into_dyn();
        let w = array![[0.5, -0.2], [0.8, 0.4]].into_dyn();
        let report = check_gradients(
            |t, vs| {
                let y = t.matmul(vs[0], vs[1]);
                let s = t.sigmoid(y);
                let q = t.square(s);
                t.mean_all(q)
            },
            &[x, w],
            CheckOpts::default(),
        );
        assert!(report.ok(), "violations: {}", report.violations);
        assert!(report.worst_rel < 1e-6, "worst {}", report.worst_rel);
    }

    #[test]
    fn subsampling_limits_probe_count() {
        let x = ArrayD::from_elem(ndarray::IxDyn(&[100]), 0.25);
        let report = check_gradients(
            |t, vs| {
                let s = t.square(vs[0]);
                t.sum_all(s)
            },
            &[x],
            CheckOpts {
                max_per_tensor: 17,
                ..CheckOpts::default()
            },
        );
        assert_eq!(report.checked, 17);
        assert!(report.ok());
    }
}
