//! Discrete summation-by-parts inequality and discrete Carleman estimates
//! for the forward difference `u'_j = (u_{j+1} - u_j)/h` on a uniform grid
//! `a = y_0 < … < y_M = b`.
//!
//! Exponential weights `e^{2λ y_j}` are evaluated as `e^{2λ(y_j - b)}`: every
//! compared quantity is rescaled by the common positive factor `e^{-2λb}`,
//! which never changes the outcome of a comparison and cannot overflow.
//! The true values are the reported ones times `e^{log_scale}`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative tolerance of every inequality check.
pub const REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFunction1D {
    pub values: Vec<f64>,
    pub a: f64,
    pub h: f64,
}

impl DiscreteFunction1D {
    /// Samples `w_0..w_M` on the uniform grid of `[a, b]`, `M >= 2`.
    pub fn new(values: Vec<f64>, a: f64, b: f64) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need M >= 2 (at least 3 samples), got {}",
                values.len()
            )));
        }
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("need a < b, got [{a}, {b}]")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("samples must be finite".into()));
        }
        let m = values.len() - 1;
        Ok(Self {
            values,
            a,
            h: (b - a) / m as f64,
        })
    }

    pub fn m(&self) -> usize {
        self.values.len() - 1
    }

    pub fn y(&self, j: usize) -> f64 {
        self.a + j as f64 * self.h
    }

    pub fn b(&self) -> f64 {
        self.y(self.m())
    }

    /// Forward difference `u'_j`, `0 <= j < M`.
    pub fn forward(&self, j: usize) -> f64 {
        (self.values[j + 1] - self.values[j]) / self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Check {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Magnitude used for the relative tolerance.
    pub scale: f64,
    /// Reported sides are the true ones times `e^{-log_scale}`.
    pub log_scale: f64,
}

impl Check {
    fn new(lhs: f64, rhs: f64, scale: f64, log_scale: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs >= rhs - REL_TOL * scale,
            scale,
            log_scale,
        }
    }

    /// `(lhs - rhs)/scale`, zero for a vanishing scale.
    pub fn relative_slack(&self) -> f64 {
        if self.scale > 0.0 {
            (self.lhs - self.rhs) / self.scale
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummationCheck {
    pub check: Check,
    /// `h² Σ_{j=1}^{M-1} (w'_j)²`, equal to `lhs - rhs` exactly.
    pub slack: f64,
}

/// `-2h Σ_{j=1}^{M-1} w_j w'_j >= -(w_M² - w_1²)`.
pub fn check_summation_by_parts(w: &DiscreteFunction1D) -> SummationCheck {
    let m = w.m();
    let v = &w.values;
    let mut lhs = 0.0;
    let mut slack = 0.0;
    let mut scale = v[m] * v[m] + v[1] * v[1];
    for j in 1..m {
        let d = w.forward(j);
        lhs += -2.0 * w.h * v[j] * d;
        slack += w.h * w.h * d * d;
        scale += (2.0 * w.h * v[j] * d).abs() + w.h * w.h * d * d;
    }
    let rhs = -(v[m] * v[m] - v[1] * v[1]);
    SummationCheck {
        check: Check::new(lhs, rhs, scale, 0.0),
        slack,
    }
}

/// Multiplier of the boundary term in the Carleman estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryFactor {
    /// `2 e^{-λh} q (…)` as the estimate is stated.
    #[default]
    Stated,
    /// `e^{-λh} q (…)`, what the summation-by-parts argument yields.
    Proven,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Weighted sums `(h Σ e (u')², h Σ e u²)` over `j = 1..M-1` with
/// `e = e^{2λ(y_j - b)}`.
fn weighted_sums(u: &DiscreteFunction1D, lambda: f64) -> (f64, f64) {
    let b = u.b();
    let mut du = 0.0;
    let mut uu = 0.0;
    for j in 1..u.m() {
        let e = (2.0 * lambda * (u.y(j) - b)).exp();
        let d = u.forward(j);
        du += e * d * d;
        uu += e * u.values[j] * u.values[j];
    }
    (u.h * du, u.h * uu)
}

/// Discrete Carleman estimate
/// `h Σ e^{2λy_j}(u'_j)² >= h Σ q² e^{2λy_j} u_j² + c e^{-λh} q (e^{2λy_1}u_1² - e^{2λy_M}u_M²)`
/// with `q = (1 - e^{-λh})/h` and `c` given by `factor`.
pub fn check_carleman_with(u: &DiscreteFunction1D, lambda: f64, factor: BoundaryFactor) -> Result<Check> {
    check_lambda(lambda)?;
    let (h, m, b) = (u.h, u.m(), u.b());
    let q = -(-lambda * h).exp_m1() / h;
    let (lhs, uu) = weighted_sums(u, lambda);
    let e1 = (2.0 * lambda * (u.y(1) - b)).exp();
    let (u1, um) = (u.values[1], u.values[m]);
    let c = match factor {
        BoundaryFactor::Stated => 2.0,
        BoundaryFactor::Proven => 1.0,
    };
    let bt = c * (-lambda * h).exp() * q;
    let interior = q * q * uu;
    let rhs = interior + bt * (e1 * u1 * u1 - um * um);
    let scale = lhs.abs() + interior.abs() + bt * (e1 * u1 * u1 + um * um);
    Ok(Check::new(lhs, rhs, scale, 2.0 * lambda * b))
}

pub fn check_carleman(u: &DiscreteFunction1D, lambda: f64) -> Result<Check> {
    check_carleman_with(u, lambda, BoundaryFactor::Stated)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplifiedCheck {
    pub check: Check,
    /// `lhs/rhs`, infinite when `rhs = 0 < lhs`, one when both vanish.
    pub ratio: f64,
}

/// `h Σ e^{2λy_j}(u'_j)² >= (λ²/4) h Σ e^{2λy_j} u_j²` for `u_M = 0`, `λh < 1`.
pub fn check_simplified(u: &DiscreteFunction1D, lambda: f64) -> Result<SimplifiedCheck> {
    check_lambda(lambda)?;
    if u.values[u.m()] != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "requires u_M = 0, got {}",
            u.values[u.m()]
        )));
    }
    if !(lambda * u.h < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "requires lambda*h < 1, got {}",
            lambda * u.h
        )));
    }
    let (lhs, uu) = weighted_sums(u, lambda);
    let rhs = 0.25 * lambda * lambda * uu;
    let ratio = if rhs > 0.0 {
        lhs / rhs
    } else if lhs > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok(SimplifiedCheck {
        check: Check::new(lhs, rhs, lhs.abs() + rhs.abs(), 2.0 * lambda * u.b()),
        ratio,
    })
}

/// Minimum of `h((1 - e^{-λh})/h - λ/2)` over an `n × n` sweep of
/// `λh ∈ (0, 1)` and `h ∈ [1e-3, 1]`.
pub fn scalar_bound_sweep(n: usize) -> f64 {
    let mut worst = f64::INFINITY;
    for p in 1..=n {
        let t = p as f64 / (n + 1) as f64;
        for k in 0..n {
            let h = 10f64.powf(-3.0 + 3.0 * k as f64 / (n.max(2) - 1) as f64);
            let lambda = t / h;
            let q = -(-t).exp_m1() / h;
            worst = worst.min((q - lambda / 2.0) * h);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inequality {
    SummationByParts,
    Carleman,
    Simplified,
}

impl fmt::Display for Inequality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inequality::SummationByParts => "summation-by-parts",
            Inequality::Carleman => "carleman",
            Inequality::Simplified => "carleman-simplified",
        })
    }
}

/// A violating input, kept for reproduction.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub inequality: Inequality,
    pub trial: u64,
    pub lambda: f64,
    pub function: DiscreteFunction1D,
    pub check: Check,
}

impl Counterexample {
    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "inequality={}", self.inequality)?;
        writeln!(w, "trial={}", self.trial)?;
        writeln!(w, "lambda={:.17e}", self.lambda)?;
        writeln!(w, "a={:.17e}", self.function.a)?;
        writeln!(w, "h={:.17e}", self.function.h)?;
        writeln!(w, "lhs={:.17e}", self.check.lhs)?;
        writeln!(w, "rhs={:.17e}", self.check.rhs)?;
        let vals: Vec<String> = self.function.values.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "values={}", vals.join(","))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write(&mut f)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub inequality: Inequality,
    pub trials: u64,
    pub violations: u64,
    /// Smallest relative slack over all trials.
    pub min_slack: f64,
    /// Summation by parts only: largest `|lhs - rhs - slack| / scale`.
    pub identity_error: f64,
    /// Simplified estimate only: smallest `lhs/rhs`.
    pub min_ratio: f64,
    pub counterexample: Option<Counterexample>,
}

struct Trial {
    slack: f64,
    identity: f64,
    ratio: f64,
    failure: Option<Counterexample>,
}

fn random_function(rng: &mut ChaCha8Rng, m_lo: usize, m_hi: usize) -> DiscreteFunction1D {
    let m = rng.gen_range(m_lo..=m_hi);
    let a = 1.0;
    let b = 3.0;
    let values = (0..=m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    DiscreteFunction1D::new(values, a, b).expect("valid random function")
}

fn run_one(which: Inequality, seed: u64, t: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    let fail = |lambda, function: DiscreteFunction1D, check: Check| {
        (!check.holds).then(|| Counterexample {
            inequality: which,
            trial: t,
            lambda,
            function,
            check,
        })
    };
    match which {
        Inequality::SummationByParts => {
            let w = random_function(&mut rng, 2, 200);
            let c = check_summation_by_parts(&w);
            let ch = c.check;
            Trial {
                slack: ch.relative_slack(),
                identity: ((ch.lhs - ch.rhs) - c.slack).abs() / ch.scale.max(f64::MIN_POSITIVE),
                ratio: f64::INFINITY,
                failure: fail(0.0, w, ch),
            }
        }
        Inequality::Carleman => {
            let u = random_function(&mut rng, 3, 200);
            // Uniform on (0, 10].
            let lambda = 10.0 * (1.0 - rng.gen::<f64>());
            let ch = check_carleman(&u, lambda).expect("positive lambda");
            Trial {
                slack: ch.relative_slack(),
                identity: 0.0,
                ratio: f64::INFINITY,
                failure: fail(lambda, u, ch),
            }
        }
        Inequality::Simplified => {
            let mut u = random_function(&mut rng, 3, 200);
            let m = u.m();
            u.values[m] = 0.0;
            // Uniform on (0, 1/h).
            let lambda = (1.0 - rng.gen::<f64>()) / u.h * (1.0 - 1e-12);
            let c = check_simplified(&u, lambda).expect("admissible input");
            Trial {
                slack: c.check.relative_slack(),
                identity: 0.0,
                ratio: c.ratio,
                failure: fail(lambda, u, c.check),
            }
        }
    }
}

/// Run `trials` randomized checks of `which`; trial `t` draws from stream
/// `t` of the generator seeded with `seed`.
pub fn run_trials(which: Inequality, trials: u64, seed: u64) -> TrialReport {
    let results: Vec<Trial> = (0..trials).into_par_iter().map(|t| run_one(which, seed, t)).collect();
    let mut report = TrialReport {
        inequality: which,
        trials,
        violations: 0,
        min_slack: f64::INFINITY,
        identity_error: 0.0,
        min_ratio: f64::INFINITY,
        counterexample: None,
    };
    for r in results {
        report.min_slack = report.min_slack.min(r.slack);
        report.identity_error = report.identity_error.max(r.identity);
        report.min_ratio = report.min_ratio.min(r.ratio);
        if let Some(c) = r.failure {
            report.violations += 1;
            if report.counterexample.is_none() {
                report.counterexample = Some(c);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn func(values: Vec<f64>) -> DiscreteFunction1D {
        DiscreteFunction1D::new(values, 1.0, 3.0).unwrap()
    }

    #[test]
    fn constant_has_zero_slack() {
        let c = check_summation_by_parts(&func(vec![0.7; 11]));
        assert_eq!((c.check.lhs, c.check.rhs, c.slack), (0.0, 0.0, 0.0));
        assert!(c.check.holds);
    }

    #[test]
    fn ramp_slack_is_m_minus_one() {
        for m in [2usize, 5, 40] {
            let w = func((0..=m).map(|j| j as f64).collect());
            let c = check_summation_by_parts(&w);
            assert!((c.slack - (m - 1) as f64).abs() < 1e-12 * m as f64);
            assert!((c.check.lhs - c.check.rhs - c.slack).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_short_or_bad_grids() {
        assert!(DiscreteFunction1D::new(vec![1.0, 2.0], 1.0, 3.0).is_err());
        assert!(DiscreteFunction1D::new(vec![1.0; 4], 3.0, 1.0).is_err());
        assert!(DiscreteFunction1D::new(vec![f64::NAN; 4], 1.0, 3.0).is_err());
    }

    #[test]
    fn zero_function_carleman_and_simplified() {
        let u = func(vec![0.0; 8]);
        let c = check_carleman(&u, 2.0).unwrap();
        assert_eq!((c.lhs, c.rhs), (0.0, 0.0));
        assert!(c.holds);
        let c = check_simplified(&u, 2.0).unwrap();
        assert!(c.check.holds);
        assert!(check_carleman(&u, 0.0).is_err());
    }

    #[test]
    fn large_last_value_gives_negative_boundary_term() {
        let mut v = vec![0.0; 10];
        v[9] = 100.0;
        let u = func(v);
        let c = check_carleman(&u, 3.0).unwrap();
        assert!(c.rhs < 0.0);
        assert!(c.holds && c.lhs - c.rhs > 0.0);
    }

    #[test]
    fn simplified_preconditions() {
        let u = func(vec![0.3, 0.2, 0.1, 0.0]);
        let h = u.h;
        let err = check_simplified(&u, 1.0 / h).unwrap_err();
        assert!(err.to_string().contains("lambda*h < 1"));
        assert!(check_simplified(&func(vec![0.3, 0.2, 0.1, 0.5]), 0.1).is_err());
        assert!(check_simplified(&u, 0.99 / h).unwrap().check.holds);
    }

    #[test]
    fn stated_boundary_factor_fails_on_slowly_decaying_weighted_profile() {
        // u_j = e^{-λ y_j} (1 - 0.01 j): the weighted function barely changes,
        // so the dropped square is tiny and the doubled boundary term wins.
        let (m, lambda) = (20usize, 2.0);
        let a = 1.0;
        let h = 2.0 / m as f64;
        let values = (0..=m)
            .map(|j| (-lambda * (a + j as f64 * h)).exp() * (1.0 - 0.01 * j as f64))
            .collect();
        let u = func(values);
        let stated = check_carleman(&u, lambda).unwrap();
        let proven = check_carleman_with(&u, lambda, BoundaryFactor::Proven).unwrap();
        assert!(!stated.holds);
        assert!(proven.holds);
        let true_lhs = stated.lhs * stated.log_scale.exp();
        assert!((true_lhs - 5.595959354172976).abs() < 1e-9);
    }

    #[test]
    fn overflow_free_at_large_lambda() {
        let u = func((0..=50).map(|j| ((j * 7) % 5) as f64 - 2.0).collect());
        let c = check_carleman(&u, 1e3).unwrap();
        assert!(c.lhs.is_finite() && c.rhs.is_finite());
        assert!(c.holds);
    }

    #[test]
    fn scalar_bound_holds_over_sweep() {
        assert!(scalar_bound_sweep(200) >= 0.0);
    }

    #[test]
    fn carleman_rhs_dominates_simplified_rhs_when_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let mut u = random_function(&mut rng, 3, 60);
            let m = u.m();
            u.values[m] = 0.0;
            let lambda = rng.gen_range(0.01..0.99) / u.h;
            let t = check_carleman(&u, lambda).unwrap();
            let l = check_simplified(&u, lambda).unwrap();
            assert!(t.rhs >= l.check.rhs * (1.0 - 1e-12));
        }
    }

    #[test]
    fn randomized_trials_small() {
        for which in [
            Inequality::SummationByParts,
            Inequality::Carleman,
            Inequality::Simplified,
        ] {
            let r = run_trials(which, 500, 11);
            assert_eq!(r.violations, 0, "{which}");
            assert!(r.counterexample.is_none());
        }
        let r = run_trials(Inequality::SummationByParts, 500, 11);
        assert!(r.identity_error < 1e-12);
        assert_eq!(r, run_trials(Inequality::SummationByParts, 500, 11));
    }

    #[test]
    fn counterexample_serialization() {
        let u = func(vec![1.0, 2.0, 3.0]);
        let c = Counterexample {
            inequality: Inequality::Carleman,
            trial: 4,
            lambda: 0.5,
            check: check_carleman(&u, 0.5).unwrap(),
            function: u,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cx.txt");
        c.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("inequality=carleman\ntrial=4\n"));
        assert!(text.contains("values=1.00000000000000000e0,2.00000000000000000e0,3.00000000000000000e0"));
    }

    proptest! {
        #[test]
        fn summation_slack_identity(vals in prop::collection::vec(-1.0f64..1.0, 3..120)) {
            let c = check_summation_by_parts(&func(vals));
            prop_assert!(c.check.holds);
            prop_assert!(((c.check.lhs - c.check.rhs) - c.slack).abs() <= 1e-12 * c.check.scale.max(1e-300));
        }

        #[test]
        fn summation_order_invariance(vals in prop::collection::vec(-1.0f64..1.0, 4..80), lambda in 0.01f64..10.0) {
            let u = func(vals);
            let (du, uu) = weighted_sums(&u, lambda);
            let b = u.b();
            let (mut rdu, mut ruu) = (0.0, 0.0);
            for j in (1..u.m()).rev() {
                let e = (2.0 * lambda * (u.y(j) - b)).exp();
                rdu += e * u.forward(j).powi(2);
                ruu += e * u.values[j].powi(2);
            }
            prop_assert!((du - u.h * rdu).abs() <= 1e-12 * du.abs().max(1e-300));
            prop_assert!((uu - u.h * ruu).abs() <= 1e-12 * uu.abs().max(1e-300));
        }
    }
}
