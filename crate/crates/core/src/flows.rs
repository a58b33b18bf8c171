//! Continuous supervision from discrete trajectories: straight-line and
//! Catmull–Rom interpolation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trajectories::{NormStats, Trajectory, TrajectoryStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Linear,
    Cubic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub theta: Vec<f64>,
    pub t: f64,
    pub v: Vec<f64>,
    pub episode_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineSegment {
    pub k: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl SplineSegment {
    /// Position and derivative at local coordinate `u ∈ [0, 1]`.
    pub fn eval(&self, u: f64) -> (Vec<f64>, Vec<f64>) {
        let (u2, u3) = (u * u, u * u * u);
        let n = self.d.len();
        let mut pos = Vec::with_capacity(n);
        let mut vel = Vec::with_capacity(n);
        for i in 0..n {
            pos.push(self.a[i] * u3 + self.b[i] * u2 + self.c[i] * u + self.d[i]);
            vel.push(3.0 * self.a[i] * u2 + 2.0 * self.b[i] * u + self.c[i]);
        }
        (pos, vel)
    }
}

fn check_t(traj: &Trajectory, t: f64) -> Result<()> {
    let big_t = traj.steps() as f64;
    if !(0.0..=big_t).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, {big_t}]")));
    }
    Ok(())
}

/// Straight line from θ_0 to θ_T with constant drift θ_T − θ_0 per unit
/// normalized time.
pub fn linear_sample(traj: &Trajectory, t: f64) -> Result<FlowSample> {
    check_t(traj, t)?;
    let s = t / traj.steps() as f64;
    let (a, b) = (traj.first(), traj.last());
    Ok(FlowSample {
        theta: a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y).collect(),
        t,
        v: a.iter().zip(b).map(|(x, y)| y - x).collect(),
        episode_id: traj.episode_id,
    })
}

/// Catmull–Rom coefficients of segment `k ∈ 1..=T`, which spans knots
/// θ_{k−1}..θ_k, with sentinels θ_{−1} = θ_0 and θ_{T+1} = θ_T.
pub fn catmull_rom_coeffs(traj: &Trajectory, k: usize) -> Result<SplineSegment> {
    let big_t = traj.steps();
    if k < 1 || k > big_t {
        return Err(Error::InvalidArgument(format!("segment {k} outside 1..={big_t}")));
    }
    let knot = |j: isize| traj.point(j.clamp(0, big_t as isize) as usize);
    let k = k as isize;
    let (p0, p1, p2, p3) = (knot(k - 2), knot(k - 1), knot(k), knot(k + 1));
    let n = p1.len();
    let mut seg = SplineSegment {
        k: k as usize,
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        d: p1.to_vec(),
    };
    for i in 0..n {
        seg.a.push(-0.5 * p0[i] + 1.5 * p1[i] - 1.5 * p2[i] + 0.5 * p3[i]);
        seg.b.push(p0[i] - 2.5 * p1[i] + 2.0 * p2[i] - 0.5 * p3[i]);
        seg.c.push(-0.5 * p0[i] + 0.5 * p2[i]);
    }
    Ok(seg)
}

/// Segment `min(⌈t⌉, T)` evaluated at `u = t − (k − 1)`; drift is per unit
/// knot index.
pub fn cubic_sample(traj: &Trajectory, t: f64) -> Result<FlowSample> {
    check_t(traj, t)?;
    let k = (t.ceil() as usize).clamp(1, traj.steps());
    let seg = catmull_rom_coeffs(traj, k)?;
    let (theta, v) = seg.eval(t - (k - 1) as f64);
    Ok(FlowSample {
        theta,
        t,
        v,
        episode_id: traj.episode_id,
    })
}

pub fn sample(traj: &Trajectory, kind: FlowKind, t: f64) -> Result<FlowSample> {
    match kind {
        FlowKind::Linear => linear_sample(traj, t),
        FlowKind::Cubic => cubic_sample(traj, t),
    }
}

/// Per-coordinate divisor turning a raw drift into a standardized target.
/// Linear drifts are measured over the whole horizon, cubic ones per knot,
/// so the cubic divisor is the drift scale spread over T knots.
pub fn drift_unit(kind: FlowKind, stats: &NormStats, steps: usize) -> Vec<f64> {
    match kind {
        FlowKind::Linear => stats.drift_scale.clone(),
        FlowKind::Cubic => stats.drift_scale.iter().map(|s| s / steps as f64).collect(),
    }
}

/// Standardizes θ by the store stats and v by the drift unit.
pub fn standardize(sample: &FlowSample, stats: &NormStats, unit: &[f64]) -> FlowSample {
    FlowSample {
        theta: stats.standardize(&sample.theta),
        t: sample.t,
        v: sample.v.iter().zip(unit).map(|(v, u)| v / u).collect(),
        episode_id: sample.episode_id,
    }
}

/// `batch` standardized samples: trajectories uniform over the store, t
/// uniform over [0, T].
pub fn sample_batch(store: &TrajectoryStore, kind: FlowKind, batch: usize, rng: &mut Rng) -> Result<Vec<FlowSample>> {
    if store.is_empty() {
        return Err(Error::Empty("trajectory store"));
    }
    let stats = store.stats()?;
    let unit = drift_unit(kind, stats, store.steps);
    let big_t = store.steps as f64;
    (0..batch)
        .map(|_| {
            let traj = &store.trajectories[rng.random_range(0..store.len())];
            let t = rng.random::<f64>() * big_t;
            Ok(standardize(&sample(traj, kind, t)?, stats, &unit))
        })
        .collect()
}

/// Like [`sample_batch`] but draws `per_traj` times from each of `n_traj`
/// trajectories, so a task encoding can be shared within each group.
pub fn sample_grouped(
    store: &TrajectoryStore,
    kind: FlowKind,
    n_traj: usize,
    per_traj: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, Vec<FlowSample>)>> {
    if store.is_empty() {
        return Err(Error::Empty("trajectory store"));
    }
    let stats = store.stats()?;
    let unit = drift_unit(kind, stats, store.steps);
    let big_t = store.steps as f64;
    (0..n_traj)
        .map(|_| {
            let idx = rng.random_range(0..store.len());
            let traj = &store.trajectories[idx];
            let group = (0..per_traj)
                .map(|_| {
                    let t = rng.random::<f64>() * big_t;
                    Ok(standardize(&sample(traj, kind, t)?, stats, &unit))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((idx, group))
        })
        .collect()
}

/// Checks the interpolation invariants on every trajectory of a store;
/// returns the worst deviation observed for each.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FlowCheck {
    pub trajectories: usize,
    pub max_knot_error: f64,
    pub max_c1_gap: f64,
    pub max_integration_rel_error: f64,
}

pub fn check_store(store: &TrajectoryStore, limit: usize) -> Result<FlowCheck> {
    let mut out = FlowCheck::default();
    for traj in store.trajectories.iter().take(limit) {
        out.trajectories += 1;
        let big_t = traj.steps();
        for j in 0..=big_t {
            let s = cubic_sample(traj, j as f64)?;
            out.max_knot_error = out.max_knot_error.max(max_abs_diff(&s.theta, traj.point(j)));
        }
        for k in 1..big_t {
            let left = catmull_rom_coeffs(traj, k)?.eval(1.0).1;
            let right = catmull_rom_coeffs(traj, k + 1)?.eval(0.0).1;
            out.max_c1_gap = out.max_c1_gap.max(max_abs_diff(&left, &right));
        }
        let end = integrate_cubic(traj, 1e-3)?;
        let scale = traj.last().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let err = end.iter().zip(traj.last()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        out.max_integration_rel_error = out.max_integration_rel_error.max(err / scale);
    }
    Ok(out)
}

/// Forward Euler on the cubic drift from θ_0 over [0, T].
pub fn integrate_cubic(traj: &Trajectory, dt: f64) -> Result<Vec<f64>> {
    let big_t = traj.steps() as f64;
    let n = (big_t / dt).round() as usize;
    let h = big_t / n as f64;
    let mut theta = traj.first().to_vec();
    for i in 0..n {
        let v = cubic_sample(traj, i as f64 * h)?.v;
        theta.iter_mut().zip(&v).for_each(|(x, v)| *x += h * v);
    }
    Ok(theta)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[&[f64]]) -> Trajectory {
        Trajectory {
            episode_id: 9,
            episode_offset: 0,
            init_seed: 0,
            perturb_std: 0.0,
            points: points.concat(),
            losses: vec![0.0; points.len()],
        }
    }

    #[test]
    fn linear_midpoint_and_endpoints() {
        let t = traj(&[&[0.0, 0.0], &[5.0, -5.0], &[2.0, 4.0]]);
        let s = linear_sample(&t, 1.0).unwrap();
        assert_eq!(s.theta, vec![1.0, 2.0]);
        assert_eq!(s.v, vec![2.0, 4.0]);
        assert_eq!(linear_sample(&t, 0.0).unwrap().theta, vec![0.0, 0.0]);
        assert_eq!(linear_sample(&t, 2.0).unwrap().theta, vec![2.0, 4.0]);
        assert!(linear_sample(&t, 2.5).is_err());
        assert!(linear_sample(&t, -0.1).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let c = traj(&[&[4.0], &[4.0], &[4.0]]);
        let seg = catmull_rom_coeffs(&c, 1).unwrap();
        assert_eq!((seg.a[0], seg.b[0], seg.c[0], seg.d[0]), (0.0, 0.0, 0.0, 4.0));

        let line = traj(&[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0]]);
        // Segment 2 uses knots 0, 1, 2, 3.
        let seg = catmull_rom_coeffs(&line, 2).unwrap();
        assert_eq!((seg.a[0], seg.b[0], seg.c[0], seg.d[0]), (0.0, 0.0, 1.0, 1.0));

        let seg = catmull_rom_coeffs(&line, 1).unwrap();
        assert_eq!(seg.c[0], 0.5 * 1.0);
        assert!(catmull_rom_coeffs(&line, 0).is_err());
        assert!(catmull_rom_coeffs(&line, 5).is_err());
    }

    #[test]
    fn interior_knot_drift_is_central_difference() {
        let t = traj(&[&[0.0], &[1.0], &[4.0], &[2.0]]);
        for k in 1..3 {
            let left = catmull_rom_coeffs(&t, k).unwrap().eval(1.0).1[0];
            let right = catmull_rom_coeffs(&t, k + 1).unwrap().eval(0.0).1[0];
            let central = 0.5 * (t.point(k + 1)[0] - t.point(k - 1)[0]);
            assert!((left - central).abs() < 1e-12);
            assert!((right - central).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_interior_has_constant_drift() {
        let t = traj(&[&[0.0, 1.0], &[1.0, 3.0], &[2.0, 5.0], &[3.0, 7.0], &[4.0, 9.0]]);
        // End segments see a sentinel and are not exact lines.
        for i in 0..=100 {
            let s = cubic_sample(&t, 1.0 + 2.0 * i as f64 / 100.0).unwrap();
            assert!((s.v[0] - 1.0).abs() < 1e-12 && (s.v[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn integrating_cubic_drift_recovers_endpoint() {
        let t = traj(&[&[0.0, 1.0], &[0.5, 0.2], &[0.9, -0.3], &[1.0, -0.2]]);
        let end = integrate_cubic(&t, 1e-3).unwrap();
        let err: f64 = end.iter().zip(t.last()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = t.last().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / norm < 1e-3);
    }
}
