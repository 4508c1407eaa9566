//! Self-check battery: drives the fast preconditioner paths against their
//! reference implementations and analytic gradients against finite
//! differences, over a spread of seeds.
//!
//! Each suite reports the worst relative error it observed alongside the
//! tolerance it enforces, so a caller can print one line per suite and fold
//! the results into an exit code. The battery can also route the
//! per-minibatch suite through a deliberately broken variant, which is how
//! we prove a defective implementation would actually be caught.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NgError, Result};
use crate::linalg::Mat;
use crate::ng::online::{self, OnlineNgConfig};
use crate::ng::simple::{self, SimpleNgConfig};
use crate::nnet::{self, Network, Nonlinearity};
use crate::scalar::Scalar;

/// One family of checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Fast per-minibatch path vs the one-solve-per-row reference.
    SimpleOracle,
    /// Column-space vs row-space formula for Q, in both precisions.
    BranchEquivalence,
    /// Fast online update vs the materialized-matrix reference.
    OnlineOracle,
    /// Analytic layer gradients vs central finite differences.
    GradCheck,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::SimpleOracle,
        Suite::BranchEquivalence,
        Suite::OnlineOracle,
        Suite::GradCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::SimpleOracle => "simple-vs-oracle",
            Suite::BranchEquivalence => "branch-equivalence",
            Suite::OnlineOracle => "online-vs-naive",
            Suite::GradCheck => "gradcheck",
        }
    }

    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Outcome of one suite (the branch suite emits one report per precision).
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seeds: Vec<u64>,
    /// Swap the per-minibatch fast path for a variant with the sign of every
    /// hold-out factor flipped; the simple suite must then fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seeds: (0..10).collect(), inject_fault: false }
    }
}

/// Runs the given suites in order and collects their reports.
pub fn run_battery(suites: &[Suite], opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    if opts.seeds.is_empty() {
        return Err(NgError::InvalidArg("verification needs at least one seed".into()));
    }
    let mut reports = Vec::new();
    for &suite in suites {
        reports.extend(run_suite(suite, opts)?);
    }
    Ok(reports)
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    match suite {
        Suite::SimpleOracle => simple_suite(opts).map(|r| vec![r]),
        Suite::BranchEquivalence => branch_suite(opts),
        Suite::OnlineOracle => online_suite(opts).map(|r| vec![r]),
        Suite::GradCheck => gradcheck_suite(opts).map(|r| vec![r]),
    }
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Mat<T> {
    Array2::from_shape_fn((n, d), |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v * scale)
    })
}

/// Frobenius-relative difference, computed in f64 regardless of T.
fn rel_mat<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x.as_f64() - y.as_f64();
        num += d * d;
        den += y.as_f64() * y.as_f64();
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

fn rel_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn simple_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let cfg = SimpleNgConfig::default();
    let mut max_error = 0.0f64;
    let mut cases = 0;
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let n = rng.gen_range(2..=64);
            let d = rng.gen_range(1..=32);
            let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
            let x: Mat<f64> = gaussian(&mut rng, n, d, scale);
            let fast = if opts.inject_fault {
                simple::precondition_simple_injected_fault(&x, &cfg)?
            } else {
                simple::precondition_simple(&x, &cfg)?
            };
            let oracle = simple::precondition_simple_oracle(&x, &cfg)?;
            max_error = max_error
                .max(rel_mat(&fast.x_bar, &oracle.x_bar))
                .max(rel_scalar(fast.gamma, oracle.gamma));
            for (f, o) in fast.row_sq_norms.iter().zip(&oracle.row_sq_norms) {
                max_error = max_error.max((f - o).abs() / o.abs().max(1e-30));
            }
            cases += 1;
        }
    }
    Ok(SuiteReport { suite: "simple-vs-oracle".into(), cases, max_error, tolerance: 1e-10 })
}

fn branch_suite(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let cfg = SimpleNgConfig::default();
    let mut err64 = 0.0f64;
    let mut err32 = 0.0f64;
    let mut cases = 0;
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let n = rng.gen_range(2..=32);
            let d = rng.gen_range(1..=32);
            let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
            let x64: Mat<f64> = gaussian(&mut rng, n, d, scale);
            let x32 = x64.mapv(|v| v as f32);
            let (col64, row64) = simple::q_both_branches(&x64, &cfg)?;
            let (col32, row32) = simple::q_both_branches(&x32, &cfg)?;
            err64 = err64.max(rel_mat(&col64, &row64));
            err32 = err32.max(rel_mat(&col32, &row32));
            cases += 1;
        }
    }
    Ok(vec![
        SuiteReport {
            suite: "branch-equivalence-f64".into(),
            cases,
            max_error: err64,
            tolerance: 1e-10,
        },
        SuiteReport {
            suite: "branch-equivalence-f32".into(),
            cases,
            max_error: err32,
            tolerance: 1e-5,
        },
    ])
}

fn online_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let cfg = OnlineNgConfig { rank: 3, ..OnlineNgConfig::default() };
    let (n, d) = (16, 8);
    let steps = 50;
    let mut max_error = 0.0f64;
    let mut cases = 0;
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Mat<f64> = gaussian(&mut rng, n, d, 1.0);
        let mut fast = online::init_state(&x0, &cfg)?;
        let mut naive = fast.clone();
        for step in 0..steps {
            let scale = 1.0 + 0.5 * (step as f64 * 0.37).sin();
            let x: Mat<f64> = gaussian(&mut rng, n, d, scale);
            let out_f = online::precondition_online(&mut fast, &x, true)?;
            let out_n = online::precondition_online_oracle(&mut naive, &x)?;
            max_error = max_error
                .max(rel_mat(&out_f.x_bar, &out_n.x_bar))
                .max(rel_scalar(out_f.gamma, out_n.gamma))
                .max(rel_scalar(fast.rho, naive.rho));
            let mut dn = 0.0;
            let mut dd = 0.0;
            for (a, b) in fast.d.iter().zip(naive.d.iter()) {
                dn += (a - b) * (a - b);
                dd += b * b;
            }
            max_error = max_error.max((dn / dd.max(f64::MIN_POSITIVE)).sqrt());
            let gram_f = fast.w.dot(&fast.w.t());
            let gram_n = naive.w.dot(&naive.w.t());
            max_error = max_error.max(rel_mat(&gram_f, &gram_n));
            cases += 1;
        }
    }
    Ok(SuiteReport { suite: "online-vs-naive".into(), cases, max_error, tolerance: 1e-8 })
}

fn objective_sum(net: &Network<f64>, x: &Mat<f64>, labels: &[u32]) -> Result<f64> {
    let acts = nnet::forward(net, x)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| acts.log_probs[[i, l as usize]])
        .sum())
}

fn gradcheck_net(
    net: &mut Network<f64>,
    x: &Mat<f64>,
    labels: &[u32],
    max_error: &mut f64,
) -> Result<()> {
    let h = 1e-5;
    let bundle = nnet::backprop(net, nnet::forward(net, x)?, labels)?;
    let grads: Vec<Mat<f64>> = bundle.layers.iter().map(|l| l.weight_grad()).collect();
    for (l, grad) in grads.iter().enumerate() {
        for r in 0..grad.nrows() {
            for c in 0..grad.ncols() {
                let orig = net.layers[l].weights[[r, c]];
                net.layers[l].weights[[r, c]] = orig + h;
                let plus = objective_sum(net, x, labels)?;
                net.layers[l].weights[[r, c]] = orig - h;
                let minus = objective_sum(net, x, labels)?;
                net.layers[l].weights[[r, c]] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = grad[[r, c]];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                *max_error = max_error.max(rel);
            }
        }
    }
    Ok(())
}

fn gradcheck_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let archs: [(&[usize], Nonlinearity); 2] = [
        (&[5, 7, 6, 4, 3], Nonlinearity::Relu),
        (&[4, 8, 6, 3], Nonlinearity::PNorm { p: 2.0, group: 2 }),
    ];
    let mut max_error = 0.0f64;
    let mut cases = 0;
    for &seed in &opts.seeds {
        for (dims, nonlin) in &archs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net: Network<f64> = nnet::init_network(dims, nonlin, seed)?;
            let n = 6;
            let x: Mat<f64> = gaussian(&mut rng, n, dims[0], 1.0);
            let classes = *dims.last().unwrap() as u32;
            let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            gradcheck_net(&mut net, &x, &labels, &mut max_error)?;
            cases += net.num_params();
        }
    }
    Ok(SuiteReport { suite: "gradcheck".into(), cases, max_error, tolerance: 1e-4 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_opts() -> VerifyOptions {
        VerifyOptions { seeds: (0..4).collect(), inject_fault: false }
    }

    #[test]
    fn battery_is_clean_on_fresh_seeds() {
        let reports = run_battery(&Suite::ALL, &quick_opts()).unwrap();
        assert_eq!(reports.len(), 5);
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: max error {:.3e} over {} cases (tolerance {:.1e})",
                r.suite,
                r.max_error,
                r.cases,
                r.tolerance
            );
            assert!(r.cases > 0);
        }
        let simple = &reports[0];
        assert_eq!(simple.cases, 40);
        let online = reports.iter().find(|r| r.suite == "online-vs-naive").unwrap();
        assert_eq!(online.cases, 200);
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = VerifyOptions { inject_fault: true, ..quick_opts() };
        let reports = run_suite(Suite::SimpleOracle, &opts).unwrap();
        assert!(!reports[0].passed());
        assert!(reports[0].max_error > 1.0);
    }

    #[test]
    fn suite_names_round_trip() {
        for suite in Suite::ALL {
            assert_eq!(Suite::from_name(suite.name()), Some(suite));
        }
        assert_eq!(Suite::from_name("nonsense"), None);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let opts = VerifyOptions { seeds: vec![], inject_fault: false };
        assert!(run_battery(&Suite::ALL, &opts).is_err());
    }
}
