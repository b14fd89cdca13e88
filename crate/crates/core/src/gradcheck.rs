//! Finite-difference verification of every hand-written backward pass.
//!
//! Each check draws small seeded problems, computes analytic gradients, and
//! compares them coordinate-wise with central differences. Soft labels are
//! frozen (they are detached targets), and alignment problems whose logit
//! differences come close to zero are redrawn so the `|·|` kink is never
//! straddled by a finite-difference step.

use std::fmt::Write as _;

use crate::encoder::{Activation, Encoder};
use crate::error::Result;
use crate::numerics::{dot, fd_gradient_check, l2_normalize, Matrix, Rng};
use crate::objective::{cca_loss, iss_loss_with_targets, joint_loss_with_targets, soft_labels, ClassifierPair, CrossReduction, LossVariant, ObjectiveConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;
/// Smallest allowed `|g_A(v)_c − g_B(v)_c|` in alignment problems.
const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub configs: usize,
    pub tolerance: f64,
    /// Added to the first analytic gradient coordinate of every problem, to
    /// demonstrate that the checker notices a wrong gradient.
    pub corrupt: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            configs: 20,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub name: &'static str,
    pub configs: usize,
    pub parameters: usize,
    pub worst_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>7} {:>10} {:>12}  status\n", "loss", "configs", "params", "max_rel_err");
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:>7} {:>10} {:>12.3e}  {}",
                r.name,
                r.configs,
                r.parameters,
                r.worst_error,
                if r.passed { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        writeln!(out, "tolerance {:.1e}", self.tolerance).unwrap();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("loss,configs,params,max_rel_err,passed\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{:e},{}", r.name, r.configs, r.parameters, r.worst_error, r.passed).unwrap();
        }
        out
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols)).expect("finite")
}

fn unit_vectors(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| l2_normalize(&rng.normal_vec(dim)).expect("nonzero")).collect()
}

fn unflatten(flat: &[f64], n: usize, dim: usize) -> Vec<Vec<f64>> {
    flat[..n * dim].chunks(dim).map(<[f64]>::to_vec).collect()
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn size(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

/// Checks one problem; returns the worst relative error.
fn check(params: &[f64], mut analytic: Vec<f64>, loss: impl FnMut(&[f64]) -> f64, opts: &GradcheckOptions) -> f64 {
    if let (Some(delta), Some(first)) = (opts.corrupt, analytic.first_mut()) {
        *first += delta;
    }
    fd_gradient_check(loss, params, &analytic, STEP)
}

/// Encoder parameters and input against a random linear read-out of `v`.
fn encoder_problem(rng: &mut Rng, opts: &GradcheckOptions) -> Result<(f64, usize)> {
    let d = size(rng, 2, 6);
    let h = size(rng, 2, 6);
    let l = size(rng, 2, 8);
    let activation = if rng.uniform() < 0.5 { Activation::Tanh } else { Activation::Identity };
    let mut enc = Encoder::init(d, &[h], l, activation, rng.index(1 << 30) as u64)?;
    // nonzero biases so every parameter is exercised
    let mut flat = enc.to_flat();
    for p in flat.iter_mut() {
        *p += 0.1 * rng.normal();
    }
    enc.set_flat(&flat);
    let x = rng.normal_vec(d);
    let c = rng.normal_vec(l);

    let tape = enc.forward(&x)?;
    let (grads, grad_x) = enc.backward(&tape, &c)?;
    let mut probe = enc.clone();
    let worst_theta = check(
        &flat,
        grads.to_flat(),
        |theta| {
            probe.set_flat(theta);
            dot(&probe.encode(&x).expect("finite"), &c)
        },
        opts,
    );
    let worst_x = check(&x, grad_x, |xs| dot(&enc.encode(xs).expect("finite"), &c), opts);
    Ok((worst_theta.max(worst_x), flat.len() + x.len()))
}

fn iss_problem(rng: &mut Rng, opts: &GradcheckOptions) -> Result<(f64, usize)> {
    let l = size(rng, 2, 8);
    let k = size(rng, 2, 4);
    let n = size(rng, 1, 4);
    let w = random_matrix(k, l, rng);
    let memory = Matrix::from_rows(&unit_vectors(n, l, rng))?;
    let features = unit_vectors(n, l, rng);
    let tau = [0.01, 0.1, 1.0][rng.index(3)];
    let targets = soft_labels(&w, &memory, tau)?;

    let out = iss_loss_with_targets(&w, &features, &targets)?;
    let mut params = w.as_slice().to_vec();
    params.extend(flatten(&features));
    let mut analytic = out.grad_w.as_slice().to_vec();
    analytic.extend(flatten(&out.grad_v));
    let worst = check(
        &params,
        analytic,
        |p| {
            let w = Matrix::from_vec(k, l, p[..k * l].to_vec()).expect("finite");
            let v = unflatten(&p[k * l..], n, l);
            iss_loss_with_targets(&w, &v, &targets).expect("valid").loss
        },
        opts,
    );
    Ok((worst, params.len()))
}

/// Draws features and classifier pairs until every logit difference is at
/// least [`KINK_MARGIN`] away from zero.
fn kink_free(rng: &mut Rng, runs: usize, ks: &[usize], l: usize, na: usize, nb: usize) -> (Vec<ClassifierPair>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    loop {
        let pairs: Vec<ClassifierPair> = (0..runs)
            .map(|r| ClassifierPair::new(random_matrix(ks[r], l, rng), random_matrix(ks[r], l, rng)).expect("same shape"))
            .collect();
        let fa = unit_vectors(na, l, rng);
        let fb = unit_vectors(nb, l, rng);
        if pairs.iter().all(|p| p.min_logit_gap(&fa) > KINK_MARGIN && p.min_logit_gap(&fb) > KINK_MARGIN) {
            return (pairs, fa, fb);
        }
    }
}

fn cca_problem(rng: &mut Rng, opts: &GradcheckOptions) -> Result<(f64, usize)> {
    let l = size(rng, 2, 8);
    let k = size(rng, 2, 4);
    let na = size(rng, 1, 4);
    let nb = size(rng, 1, 4);
    let reduction = if rng.uniform() < 0.5 { CrossReduction::Mean } else { CrossReduction::Sum };
    let (pairs, fa, fb) = kink_free(rng, 1, &[k], l, na, nb);
    let pair = &pairs[0];

    let out = cca_loss(pair, &fa, &fb, reduction)?;
    let mut params = pair.w_a.as_slice().to_vec();
    params.extend(pair.w_b.as_slice());
    params.extend(flatten(&fa));
    params.extend(flatten(&fb));
    let mut analytic = out.grad_w_a.as_slice().to_vec();
    analytic.extend(out.grad_w_b.as_slice());
    analytic.extend(flatten(&out.grad_v_a));
    analytic.extend(flatten(&out.grad_v_b));
    let kl = k * l;
    let worst = check(
        &params,
        analytic,
        |p| {
            let pair = ClassifierPair::new(
                Matrix::from_vec(k, l, p[..kl].to_vec()).expect("finite"),
                Matrix::from_vec(k, l, p[kl..2 * kl].to_vec()).expect("finite"),
            )
            .expect("same shape");
            let fa = unflatten(&p[2 * kl..], na, l);
            let fb = unflatten(&p[2 * kl + na * l..], nb, l);
            cca_loss(&pair, &fa, &fb, reduction).expect("valid").loss()
        },
        opts,
    );
    Ok((worst, params.len()))
}

fn joint_problem(rng: &mut Rng, opts: &GradcheckOptions) -> Result<(f64, usize)> {
    let l = size(rng, 2, 8);
    let runs = size(rng, 1, 3);
    let ks: Vec<usize> = (0..runs).map(|_| size(rng, 2, 4)).collect();
    let na = size(rng, 1, 4);
    let nb = size(rng, 1, 4);
    let (pairs, fa, fb) = kink_free(rng, runs, &ks, l, na, nb);
    let mem_a = Matrix::from_rows(&unit_vectors(na, l, rng))?;
    let mem_b = Matrix::from_rows(&unit_vectors(nb, l, rng))?;
    let cfg = ObjectiveConfig {
        lambda: rng.uniform_range(0.01, 2.0),
        tau: [0.01, 0.1, 1.0][rng.index(3)],
        reduction: if rng.uniform() < 0.5 { CrossReduction::Mean } else { CrossReduction::Sum },
        variant: LossVariant::Full,
    };
    let targets: Vec<_> = pairs
        .iter()
        .map(|p| Ok((soft_labels(&p.w_a, &mem_a, cfg.tau)?, soft_labels(&p.w_b, &mem_b, cfg.tau)?)))
        .collect::<Result<_>>()?;

    let report = joint_loss_with_targets(&pairs, &fa, &fb, &targets, &cfg)?;
    let mut params = Vec::new();
    let mut analytic = Vec::new();
    for (p, (ga, gb)) in pairs.iter().zip(&report.grad_w) {
        params.extend(p.w_a.as_slice());
        params.extend(p.w_b.as_slice());
        analytic.extend(ga.as_slice());
        analytic.extend(gb.as_slice());
    }
    let w_len = params.len();
    params.extend(flatten(&fa));
    params.extend(flatten(&fb));
    analytic.extend(flatten(&report.grad_v_a));
    analytic.extend(flatten(&report.grad_v_b));

    let worst = check(
        &params,
        analytic,
        |p| {
            let mut off = 0;
            let pairs: Vec<ClassifierPair> = ks
                .iter()
                .map(|&k| {
                    let kl = k * l;
                    let pair = ClassifierPair::new(
                        Matrix::from_vec(k, l, p[off..off + kl].to_vec()).expect("finite"),
                        Matrix::from_vec(k, l, p[off + kl..off + 2 * kl].to_vec()).expect("finite"),
                    )
                    .expect("same shape");
                    off += 2 * kl;
                    pair
                })
                .collect();
            let fa = unflatten(&p[w_len..], na, l);
            let fb = unflatten(&p[w_len + na * l..], nb, l);
            joint_loss_with_targets(&pairs, &fa, &fb, &targets, &cfg).expect("valid").total
        },
        opts,
    );
    Ok((worst, params.len()))
}

type Problem = fn(&mut Rng, &GradcheckOptions) -> Result<(f64, usize)>;

#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let problems: [(&'static str, Problem); 4] = [("encoder", encoder_problem), ("iss", iss_problem), ("cca", cca_problem), ("joint", joint_problem)];
    let root = Rng::new(opts.seed);
    let mut rows = Vec::with_capacity(problems.len());
    for (i, (name, problem)) in problems.iter().enumerate() {
        let mut rng = root.derive(0x6763_0000 + i as u64);
        let mut worst = 0.0_f64;
        let mut parameters = 0;
        for _ in 0..opts.configs {
            let (err, n) = problem(&mut rng, opts)?;
            if !(err <= worst) {
                worst = err;
            }
            parameters += n;
        }
        rows.push(GradcheckRow {
            name,
            configs: opts.configs,
            parameters,
            worst_error: worst,
            passed: worst <= opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        rows,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_match_finite_differences() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            assert!(r.passed, "{}: {:e}", r.name, r.worst_error);
            assert_eq!(r.configs, 20);
        }
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let opts = GradcheckOptions {
            configs: 3,
            corrupt: Some(1e-2),
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.rows.iter().all(|r| !r.passed));
    }

    #[test]
    fn report_is_seed_deterministic() {
        let opts = GradcheckOptions {
            configs: 4,
            seed: 9,
            ..GradcheckOptions::default()
        };
        assert_eq!(run_gradcheck(&opts).unwrap(), run_gradcheck(&opts).unwrap());
        assert!(run_gradcheck(&opts).unwrap().to_table().contains("PASS"));
    }
}
