//! Kinetic-optimal probability velocities.
//!
//! For the metric path the conditional rate from `z` to `x != z` is
//!
//! ```text
//! u_t(x, z | x1) = p_t(x | x1) * beta_dot_t * [d(z, x1) - d(x, x1)]_+
//! ```
//!
//! and for any path with known `p_t` and `dp_t/dt` the kinetic-optimal flux
//! `j(x, z) = [p(z) dp(x) - dp(z) p(x)]_+` gives `u(x, z) = j(x, z) / p(z)`
//! (zero where `p(z) = 0`). The two agree on the metric path; the verify
//! module checks that identity numerically. Diagonals are completed so that
//! every row sums to zero.

use crate::error::{check_index, Error, Result};
use crate::paths::{ConditionalPath, PathKind};
use crate::scalar::{is_probability_vector, Scalar};
use crate::schedule::BetaSchedule;
use crate::token_space::DistanceTable;

/// Rates `u_t(., z)` out of the current token `z`, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityRow<T> {
    pub z: usize,
    pub rates: Vec<T>,
}

impl<T: Scalar> VelocityRow<T> {
    /// Completes the diagonal of a row whose off-diagonal entries are set.
    pub fn from_off_diagonal(z: usize, mut rates: Vec<T>) -> Self {
        rates[z] = T::zero();
        let out: T = rates.iter().copied().sum();
        rates[z] = -out;
        Self { z, rates }
    }

    /// Total outflow `lambda = sum_{x != z} u(x, z) = -u(z, z)`.
    pub fn exit_rate(&self) -> T {
        -self.rates[self.z]
    }

    pub fn row_sum(&self) -> T {
        self.rates.iter().copied().sum()
    }

    pub fn min_off_diagonal(&self) -> T {
        self.rates
            .iter()
            .enumerate()
            .filter(|(x, _)| *x != self.z)
            .map(|(_, &v)| v)
            .fold(T::infinity(), T::min)
    }
}

pub fn exit_rate<T: Scalar>(row: &VelocityRow<T>) -> T {
    row.exit_rate()
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Closed-form rate for the metric path.
pub fn ko_velocity_closed<T: Scalar>(
    distances: &DistanceTable<T>,
    schedule: &BetaSchedule<T>,
    t: T,
    x_dest: usize,
    z_cur: usize,
    x1: usize,
) -> Result<T> {
    let k = distances.k();
    check_index(x_dest, k)?;
    check_index(z_cur, k)?;
    check_index(x1, k)?;
    if x_dest == z_cur {
        return Err(Error::Domain(
            "closed-form velocity is defined off the diagonal only".into(),
        ));
    }
    if schedule.is_capped(t)? {
        return Err(Error::Domain(format!(
            "velocity undefined in the capped region (t = {t})"
        )));
    }
    let beta = schedule.beta(t)?;
    let beta_dot = schedule.beta_dot(t)?;
    let logits: Vec<T> = (0..k).map(|x| -beta * distances.get(x, x1)).collect();
    let lse = crate::scalar::log_sum_exp(&logits);
    let p_dest = (logits[x_dest] - lse).exp();
    Ok(p_dest * beta_dot * relu(distances.get(z_cur, x1) - distances.get(x_dest, x1)))
}

/// Velocity from the kinetic-optimal flux of an arbitrary path.
pub fn ko_velocity_generic<T: Scalar>(p: &[T], dp: &[T], x_dest: usize, z_cur: usize) -> Result<T> {
    if p.len() != dp.len() {
        return Err(Error::Shape(format!(
            "p has {} entries, dp has {}",
            p.len(),
            dp.len()
        )));
    }
    check_index(x_dest, p.len())?;
    check_index(z_cur, p.len())?;
    if x_dest == z_cur {
        return Err(Error::Domain(
            "flux velocity is defined off the diagonal only".into(),
        ));
    }
    if !is_probability_vector(p, 1e-9) {
        return Err(Error::Validation("p is not a probability vector".into()));
    }
    if dp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("dp contains non-finite entries".into()));
    }
    Ok(flux_velocity(p, dp, x_dest, z_cur))
}

#[inline]
fn flux_velocity<T: Scalar>(p: &[T], dp: &[T], x: usize, z: usize) -> T {
    if p[z] > T::zero() {
        relu(dp[x] - dp[z] * p[x] / p[z])
    } else {
        T::zero()
    }
}

/// Rates of the conditional velocity toward every target at a fixed time.
///
/// Holds `p_t(. | x1)` for each target so that a row costs `O(K)`. For the
/// metric path rows use the closed form; for the mixture path they come from
/// the flux formula.
#[derive(Debug, Clone)]
pub struct RateKernel<'a, T> {
    path: &'a ConditionalPath<T>,
    probs: Vec<Vec<T>>,
    kind: KernelKind<T>,
}

#[derive(Debug, Clone)]
enum KernelKind<T> {
    Metric { beta_dot: T },
    Mixture { dprobs: Vec<Vec<T>> },
}

impl<'a, T: Scalar> RateKernel<'a, T> {
    pub fn new(path: &'a ConditionalPath<T>, t: T) -> Result<Self> {
        if path.is_degenerate(t)? {
            return Err(Error::Domain(format!(
                "velocity undefined in the capped region (t = {t})"
            )));
        }
        let probs = path.transition_matrix(t)?;
        let kind = match path.kind() {
            PathKind::Metric => {
                let sched = path
                    .beta_schedule()
                    .expect("metric path has a beta schedule");
                KernelKind::Metric {
                    beta_dot: sched.beta_dot(t)?,
                }
            }
            PathKind::Mixture => KernelKind::Mixture {
                dprobs: (0..path.k())
                    .map(|x1| path.path_dprob(t, x1))
                    .collect::<Result<_>>()?,
            },
        };
        Ok(Self { path, probs, kind })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Writes `u_t(., z | x1)` into `out`, diagonal included.
    pub fn row_into(&self, z: usize, x1: usize, out: &mut [T]) {
        let p = &self.probs[x1];
        match &self.kind {
            KernelKind::Metric { beta_dot } => {
                let d = self.path.distances().expect("metric path has distances");
                let dz = d.get(z, x1);
                for (x, o) in out.iter_mut().enumerate() {
                    *o = p[x] * *beta_dot * relu(dz - d.get(x, x1));
                }
            }
            KernelKind::Mixture { dprobs } => {
                let dp = &dprobs[x1];
                for (x, o) in out.iter_mut().enumerate() {
                    *o = if x == z {
                        T::zero()
                    } else {
                        flux_velocity(p, dp, x, z)
                    };
                }
            }
        }
        out[z] = T::zero();
        let total: T = out.iter().copied().sum();
        out[z] = -total;
    }

    pub fn row(&self, z: usize, x1: usize) -> VelocityRow<T> {
        let mut rates = vec![T::zero(); self.k()];
        self.row_into(z, x1, &mut rates);
        VelocityRow { z, rates }
    }
}

/// Conditional velocity row `u_t(., z | x1)` of `path`.
pub fn velocity_row<T: Scalar>(
    path: &ConditionalPath<T>,
    t: T,
    z_cur: usize,
    x1: usize,
) -> Result<VelocityRow<T>> {
    check_index(z_cur, path.k())?;
    check_index(x1, path.k())?;
    match path.kind() {
        PathKind::Metric => {
            let d = path.distances().expect("metric");
            let sched = path.beta_schedule().expect("metric");
            let mut rates = vec![T::zero(); path.k()];
            for (x, r) in rates.iter_mut().enumerate() {
                if x != z_cur {
                    *r = ko_velocity_closed(d, sched, t, x, z_cur, x1)?;
                }
            }
            Ok(VelocityRow::from_off_diagonal(z_cur, rates))
        }
        PathKind::Mixture => Ok(RateKernel::new(path, t)?.row(z_cur, x1)),
    }
}

/// Posterior-averaged rate `sum_{x1} posterior[x1] u_t(x_dest, z | x1)`.
pub fn marginal_velocity<T: Scalar>(
    posterior: &[T],
    path: &ConditionalPath<T>,
    t: T,
    x_dest: usize,
    z_cur: usize,
) -> Result<T> {
    let row = marginal_velocity_row(posterior, path, t, z_cur)?;
    check_index(x_dest, path.k())?;
    if x_dest == z_cur {
        return Err(Error::Domain(
            "marginal velocity is requested off the diagonal".into(),
        ));
    }
    Ok(row.rates[x_dest])
}

/// Full posterior-averaged row out of `z_cur`.
pub fn marginal_velocity_row<T: Scalar>(
    posterior: &[T],
    path: &ConditionalPath<T>,
    t: T,
    z_cur: usize,
) -> Result<VelocityRow<T>> {
    if posterior.len() != path.k() || !is_probability_vector(posterior, 1e-9) {
        return Err(Error::Validation(
            "posterior must be a probability vector over K".into(),
        ));
    }
    check_index(z_cur, path.k())?;
    let kernel = RateKernel::new(path, t)?;
    let mut acc = vec![T::zero(); path.k()];
    let mut buf = vec![T::zero(); path.k()];
    for (x1, &w) in posterior.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        kernel.row_into(z_cur, x1, &mut buf);
        for (a, &b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    }
    Ok(VelocityRow::from_off_diagonal(z_cur, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::schedule::KappaSchedule;
    use crate::token_space::{SpecialTokens, TokenSpace};
    use rand::Rng as _;
    use std::sync::Arc;

    /// K=3 path with d(., 0) = [0, 1, 2] under beta_t = t/(1-t) (c = a = 1),
    /// so at t = ln2/(1+ln2) beta = ln 2 and beta_dot = 1/(1-t)^2.
    fn worked_example() -> (ConditionalPath<f64>, f64, f64) {
        let m = vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0];
        let table = DistanceTable::from_matrix(3, m).unwrap();
        let sched = BetaSchedule::new(1.0, 1.0, 1e6).unwrap();
        let b = std::f64::consts::LN_2;
        let t = b / (1.0 + b);
        let beta_dot = sched.beta_dot(t).unwrap();
        (
            ConditionalPath::metric_from_table(Arc::new(table), sched),
            t,
            beta_dot,
        )
    }

    #[test]
    fn worked_example_rates() {
        let (path, t, bd) = worked_example();
        let d = path.distances().unwrap();
        let s = path.beta_schedule().unwrap();
        let u = ko_velocity_closed(d, s, t, 0, 2, 0).unwrap();
        assert!((u - 8.0 / 7.0 * bd).abs() < 1e-13);
        let u1 = ko_velocity_closed(d, s, t, 1, 2, 0).unwrap();
        assert!((u1 - 2.0 / 7.0 * bd).abs() < 1e-13);
        let row = velocity_row(&path, t, 2, 0).unwrap();
        assert!((row.exit_rate() - 10.0 / 7.0 * bd).abs() < 1e-13);
        assert_eq!(row.exit_rate(), -row.rates[2]);
    }

    #[test]
    fn target_has_zero_outflow() {
        let (path, t, _) = worked_example();
        let row = velocity_row(&path, t, 0, 0).unwrap();
        assert!(row.rates.iter().all(|&v| v == 0.0));
        assert_eq!(row.exit_rate(), 0.0);
    }

    #[test]
    fn ties_give_zero_rate() {
        let s = TokenSpace::<f64>::circle(4, SpecialTokens::default()).unwrap();
        let sched = BetaSchedule::default();
        // tokens 1 and 3 are equidistant from 0 on the circle
        let u = ko_velocity_closed(s.distances(), &sched, 0.5, 3, 1, 0).unwrap();
        assert_eq!(u, 0.0);
        assert!(ko_velocity_closed(s.distances(), &sched, 0.5, 1, 1, 0).is_err());
    }

    #[test]
    fn generic_matches_closed_form() {
        let mut rng = substream(3, "vel");
        for _ in 0..200 {
            let k = rng.gen_range(2..20);
            let raw: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let s = TokenSpace::new(&raw, SpecialTokens::default()).unwrap();
            let path = ConditionalPath::metric(&s, BetaSchedule::default());
            let t = rng.gen_range(0.05..0.95);
            let x1 = rng.gen_range(0..k);
            let p = path.path_prob(t, x1).unwrap();
            let dp = path.path_dprob(t, x1).unwrap();
            for z in 0..k {
                for x in 0..k {
                    if x == z {
                        continue;
                    }
                    let c = ko_velocity_closed(
                        s.distances(),
                        path.beta_schedule().unwrap(),
                        t,
                        x,
                        z,
                        x1,
                    )
                    .unwrap();
                    let g = ko_velocity_generic(&p, &dp, x, z).unwrap();
                    assert!((c - g).abs() <= 1e-10 * (1.0 + c.abs()), "{c} vs {g}");
                }
            }
        }
    }

    #[test]
    fn mask_path_rate_to_target() {
        let path = ConditionalPath::<f64>::mixture_masked(4, 3, KappaSchedule::Linear).unwrap();
        for &t in &[0.1, 0.5, 0.8] {
            let p = path.path_prob(t, 1).unwrap();
            let dp = path.path_dprob(t, 1).unwrap();
            let u = ko_velocity_generic(&p, &dp, 1, 3).unwrap();
            assert!((u - 1.0 / (1.0 - t)).abs() < 1e-12);
            // no other destinations and no flow back to the mask
            assert_eq!(ko_velocity_generic(&p, &dp, 0, 3).unwrap(), 0.0);
            assert_eq!(ko_velocity_generic(&p, &dp, 3, 1).unwrap(), 0.0);
            let row = velocity_row(&path, t, 3, 1).unwrap();
            assert!((row.exit_rate() - 1.0 / (1.0 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_point_mass_has_no_flux() {
        let p = [0.0, 1.0, 0.0];
        let dp = [0.0; 3];
        for x in [0, 2] {
            assert_eq!(ko_velocity_generic(&p, &dp, x, 1).unwrap(), 0.0);
        }
        assert_eq!(ko_velocity_generic(&p, &dp, 1, 0).unwrap(), 0.0);
    }

    #[test]
    fn generic_validates_inputs() {
        assert!(matches!(
            ko_velocity_generic(&[0.5, 0.6], &[0.0, 0.0], 0, 1),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            ko_velocity_generic(&[-0.5, 1.5], &[0.0, 0.0], 0, 1),
            Err(Error::Validation(_))
        ));
        assert!(ko_velocity_generic(&[0.5, 0.5], &[0.0], 0, 1).is_err());
    }

    #[test]
    fn flow_moves_toward_target() {
        let s = TokenSpace::<f64>::circle(9, SpecialTokens::default()).unwrap();
        let path = ConditionalPath::metric(&s, BetaSchedule::default());
        for z in 0..9 {
            let row = velocity_row(&path, 0.4, z, 2).unwrap();
            assert!(row.row_sum().abs() <= 1e-12);
            for x in 0..9 {
                if x != z {
                    assert!(row.rates[x] >= 0.0);
                    if row.rates[x] > 0.0 {
                        assert!(s.distance(x, 2).unwrap() < s.distance(z, 2).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn marginal_velocity_averages() {
        let s = TokenSpace::<f64>::circle(6, SpecialTokens::default()).unwrap();
        let path = ConditionalPath::metric(&s, BetaSchedule::default());
        let t = 0.3;
        let mut delta = vec![0.0; 6];
        delta[4] = 1.0;
        let c = velocity_row(&path, t, 1, 4).unwrap();
        for x in [0, 2, 3, 4, 5] {
            let m = marginal_velocity(&delta, &path, t, x, 1).unwrap();
            assert!((m - c.rates[x]).abs() < 1e-14);
        }
        let mut two = vec![0.0; 6];
        two[0] = 0.5;
        two[2] = 0.5;
        let r0 = velocity_row(&path, t, 1, 0).unwrap();
        let r2 = velocity_row(&path, t, 1, 2).unwrap();
        let m = marginal_velocity_row(&two, &path, t, 1).unwrap();
        for x in 0..6 {
            assert!((m.rates[x] - 0.5 * (r0.rates[x] + r2.rates[x])).abs() < 1e-13);
        }
        assert!(m.row_sum().abs() < 1e-12);
        assert!(m.min_off_diagonal() >= 0.0);
    }

    #[test]
    fn kernel_rows_match_velocity_row() {
        let s = TokenSpace::<f64>::circle(5, SpecialTokens::default()).unwrap();
        let path = ConditionalPath::metric(&s, BetaSchedule::default());
        let kernel = RateKernel::new(&path, 0.6).unwrap();
        for z in 0..5 {
            for x1 in 0..5 {
                let a = kernel.row(z, x1);
                let b = velocity_row(&path, 0.6, z, x1).unwrap();
                for x in 0..5 {
                    assert!((a.rates[x] - b.rates[x]).abs() <= 1e-12 * (1.0 + b.rates[x].abs()));
                }
            }
        }
    }

    #[test]
    fn single_precision_rows() {
        let s = TokenSpace::<f32>::circle(5, SpecialTokens::default()).unwrap();
        let path = ConditionalPath::metric(&s, BetaSchedule::default());
        let row = velocity_row(&path, 0.5f32, 0, 2).unwrap();
        assert!(row.row_sum().abs() < 1e-5);
        assert!(row.min_off_diagonal() >= 0.0);
    }
}
