//! Noise schedule, forward noising, DDIM inversion and denoising, and
//! classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Cumulative signal coefficients for a linear per-step variance schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (s - 1) as f64 / (t_max - 1) as f64
            };
            let beta = beta_min + (beta_max - beta_min) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            t_max,
            beta_min,
            beta_max,
            alpha_bar,
        })
    }

    /// The usual 1000-step schedule with `beta` in `[1e-4, 0.02]`.
    pub fn standard() -> Self {
        Self::new(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            max: self.t_max,
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Rounds a fraction of `T` to a timestep index.
    pub fn frac_to_t(&self, frac: f64) -> usize {
        ((frac * self.t_max as f64).round().max(0.0) as usize).min(self.t_max)
    }
}

/// A latent code at a given timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

/// Guidance scale, the window of timesteps where it applies, and the condition.
#[derive(Clone, Debug)]
pub struct GuidanceSpec {
    pub lambda: f64,
    /// `(t_start, t_stop)` as fractions of `T`, with `t_stop <= t_start`.
    pub window: (f64, f64),
    /// Token matrix `[n_tokens, condition_dim]`; `None` is the null condition.
    pub condition: Option<Tensor>,
}

impl GuidanceSpec {
    pub fn unconditional() -> Self {
        GuidanceSpec {
            lambda: 0.0,
            window: (1.0, 0.0),
            condition: None,
        }
    }

    pub fn new(lambda: f64, window: (f64, f64), condition: Option<Tensor>) -> Result<Self> {
        let (start, stop) = window;
        if !(0.0..=1.0).contains(&stop) || !(0.0..=1.0).contains(&start) || stop > start {
            return Err(Error::InvalidArgument(format!(
                "guidance window must satisfy 0 <= t_stop <= t_start <= 1, got {window:?}"
            )));
        }
        Ok(GuidanceSpec {
            lambda,
            window,
            condition,
        })
    }

    pub fn in_window(&self, t: usize, schedule: &NoiseSchedule) -> bool {
        let hi = schedule.frac_to_t(self.window.0);
        let lo = schedule.frac_to_t(self.window.1);
        lo <= t && t <= hi
    }
}

/// Anything that predicts the noise in a batch of latents `[B, D]` at timestep `t`.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;

    /// `cond = None` selects the null condition.
    fn predict_noise(&self, z: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<Tensor>;
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn lincomb(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let v = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| ca * x + cb * y)
        .collect();
    Tensor::new(a.shape().to_vec(), v).expect("same shape")
}

/// `sqrt(ab_L) z0 + sqrt(1 - ab_L) eps`.
pub fn forward_noise(z0: &Tensor, l: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    check_same("forward_noise", z0, eps)?;
    let ab = s.alpha_bar(l)?;
    Ok(lincomb(z0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// `u + lambda (c - u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, lambda: f64) -> Result<Tensor> {
    check_same("cfg_combine", eps_uncond, eps_cond)?;
    let v = eps_uncond
        .values()
        .iter()
        .zip(eps_cond.values())
        .map(|(u, c)| u + lambda * (c - u))
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), v)
}

/// Differentiable form of [`cfg_combine`].
pub fn cfg_combine_var(tape: &mut Tape, eps_uncond: Var, eps_cond: Var, lambda: f64) -> Result<Var> {
    let diff = tape.sub(eps_cond, eps_uncond)?;
    let scaled = tape.affine(diff, lambda, 0.0)?;
    tape.add(eps_uncond, scaled)
}

/// One deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_denoise_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    check_same("ddim_denoise_step", z_t, eps)?;
    let ab_t = s.alpha_bar(t)?;
    let ab_prev = s.alpha_bar(t_prev)?;
    if t_prev > t {
        return Err(Error::InvalidArgument(format!(
            "denoise step must go down in time: {t} -> {t_prev}"
        )));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let v = z_t
        .values()
        .iter()
        .zip(eps.values())
        .map(|(z, e)| pa * ((z - sb * e) / sa) + pb * e)
        .collect();
    Tensor::new(z_t.shape().to_vec(), v)
}

/// One deterministic DDIM inversion step from `t` up to `t_next`, holding the
/// predicted noise fixed. Exact inverse of [`ddim_denoise_step`] for shared `eps`.
pub fn ddim_invert_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_next: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    check_same("ddim_invert_step", z_t, eps)?;
    let ab_t = s.alpha_bar(t)?;
    let ab_next = s.alpha_bar(t_next)?;
    if t_next < t {
        return Err(Error::InvalidArgument(format!(
            "inversion step must go up in time: {t} -> {t_next}"
        )));
    }
    if ab_next == ab_t {
        return Ok(z_t.clone());
    }
    let ratio = (ab_next / ab_t).sqrt();
    let coef = ((1.0 / ab_next - 1.0).sqrt() - (1.0 / ab_t - 1.0).sqrt()) * ab_next.sqrt();
    Ok(lincomb(z_t, ratio, eps, coef))
}

/// Single-step clean-sample estimate `(z_L - sqrt(1 - ab_L) eps) / sqrt(ab_L)`.
pub fn predict_x0(z_l: &Tensor, eps_tilde: &Tensor, l: usize, s: &NoiseSchedule) -> Result<Tensor> {
    check_same("predict_x0", z_l, eps_tilde)?;
    let ab = s.alpha_bar(l)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let v = z_l
        .values()
        .iter()
        .zip(eps_tilde.values())
        .map(|(z, e)| (z - sb * e) / sa)
        .collect();
    Tensor::new(z_l.shape().to_vec(), v)
}

/// Differentiable form of [`predict_x0`] (gradients flow into `eps_tilde`).
pub fn predict_x0_var(tape: &mut Tape, z_l: Var, eps_tilde: Var, l: usize, s: &NoiseSchedule) -> Result<Var> {
    let ab = s.alpha_bar(l)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let scaled = tape.affine(eps_tilde, sb, 0.0)?;
    let diff = tape.sub(z_l, scaled)?;
    tape.affine(diff, 1.0 / sa, 0.0)
}

/// Evenly spaced timesteps `0 = t_0 < ... < t_n = l` (duplicates removed).
pub fn timesteps(l: usize, steps: usize) -> Vec<usize> {
    let steps = steps.max(1);
    let mut ts: Vec<usize> = (0..=steps)
        .map(|k| ((k * l) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

fn check_latent<M: NoisePredictor + ?Sized>(model: &M, z: &Tensor) -> Result<()> {
    let d = z.numel() / z.rows();
    if d != model.latent_dim() {
        return Err(Error::ShapeMismatch {
            op: "latent",
            lhs: z.shape().to_vec(),
            rhs: vec![model.latent_dim()],
        });
    }
    Ok(())
}

/// Noise prediction with guidance applied when `t` lies in the window.
pub fn guided_noise<M: NoisePredictor + ?Sized>(
    model: &M,
    z: &Tensor,
    t: usize,
    g: &GuidanceSpec,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let uncond = model.predict_noise(z, t, None)?;
    match &g.condition {
        Some(c) if g.lambda != 0.0 && g.in_window(t, s) => {
            let cond = model.predict_noise(z, t, Some(c))?;
            cfg_combine(&uncond, &cond, g.lambda)
        }
        _ => Ok(uncond),
    }
}

/// Deterministic DDIM sampling from `z_l.t` down to 0 in `steps` strides.
pub fn sample_loop<M: NoisePredictor + ?Sized>(
    z_l: &LatentState,
    model: &M,
    g: &GuidanceSpec,
    steps: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sample_loop needs steps >= 1".into()));
    }
    s.alpha_bar(z_l.t)?;
    check_latent(model, &z_l.z)?;
    let ts = timesteps(z_l.t, steps);
    let mut z = z_l.z.clone();
    for pair in ts.windows(2).rev() {
        let (t_prev, t) = (pair[0], pair[1]);
        let eps = guided_noise(model, &z, t, g, s)?;
        z = ddim_denoise_step(&z, &eps, t, t_prev, s)?;
    }
    Ok(z)
}

/// Deterministic DDIM inversion from 0 up to `l` using unconditional predictions.
pub fn invert_loop<M: NoisePredictor + ?Sized>(
    z0: &LatentState,
    model: &M,
    l: usize,
    steps: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    invert_loop_guided(z0, model, &GuidanceSpec::unconditional(), l, steps, s)
}

/// DDIM inversion with the same guided noise predictions `sample_loop` uses,
/// so that a guided round trip retraces one trajectory.
pub fn invert_loop_guided<M: NoisePredictor + ?Sized>(
    z0: &LatentState,
    model: &M,
    g: &GuidanceSpec,
    l: usize,
    steps: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("invert_loop needs steps >= 1".into()));
    }
    s.alpha_bar(l)?;
    check_latent(model, &z0.z)?;
    let ts = timesteps(l, steps);
    let mut z = z0.z.clone();
    for pair in ts.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps = guided_noise(model, &z, t, g, s)?;
        z = ddim_invert_step(&z, &eps, t, t_next, s)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(&[2, n], 1.0, rng)
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::new(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::standard();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0] && w[1] > 0.0);
        }
        assert!(NoiseSchedule::new(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn standard_schedule_golden_endpoint() {
        // Independent straight product of (1 - beta_s) over the linear ramp.
        let mut acc = 1.0f64;
        for s in 1..=1000u32 {
            acc *= 1.0 - (1e-4 + (0.02 - 1e-4) * f64::from(s - 1) / 999.0);
        }
        let s = NoiseSchedule::standard();
        assert_eq!(s.alpha_bar(1000).unwrap(), acc);
        assert!((acc - 4.035_829_765_375_675_4e-5).abs() < 1e-18, "{acc:e}");
    }

    #[test]
    fn forward_noise_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = NoiseSchedule::standard();
        let (z0, eps) = (rand_t(5, &mut rng), rand_t(5, &mut rng));
        assert_eq!(forward_noise(&z0, 0, &eps, &s).unwrap(), z0);
        // alpha_bar -> 0: single step with beta close to 1
        let s1 = NoiseSchedule::new(1, 1.0 - 1e-15, 1.0 - 1e-15).unwrap();
        let z = forward_noise(&z0, 1, &eps, &s1).unwrap();
        for (a, b) in z.values().iter().zip(eps.values()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(forward_noise(&z0, 1, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::scalar(0.1);
        let c = Tensor::scalar(0.3);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let v = cfg_combine(&u, &c, 10.0).unwrap().values()[0];
        assert!((v - 2.1).abs() < 1e-15);
    }

    #[test]
    fn denoise_degenerate_and_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = NoiseSchedule::standard();
        let (z0, eps) = (rand_t(7, &mut rng), rand_t(7, &mut rng));
        let zt = forward_noise(&z0, 300, &eps, &s).unwrap();
        assert_eq!(ddim_denoise_step(&zt, &eps, 300, 300, &s).unwrap(), zt);
        let back = ddim_denoise_step(&zt, &eps, 300, 0, &s).unwrap();
        for (a, b) in back.values().iter().zip(z0.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ddim_denoise_step(&zt, &eps, 1001, 0, &s).is_err());
    }

    #[test]
    fn steps_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = NoiseSchedule::standard();
        let ab = s.alpha_bars();
        for (t, tp) in [(20usize, 0usize), (500, 480), (1000, 3), (7, 6)] {
            let (z, e) = (rand_t(4, &mut rng), rand_t(4, &mut rng));
            let down = ddim_denoise_step(&z, &e, t, tp, &s).unwrap();
            let up = ddim_invert_step(&z, &e, tp, t, &s).unwrap();
            let x0 = predict_x0(&z, &e, t, &s).unwrap();
            for i in 0..z.numel() {
                let (zi, ei) = (z.values()[i], e.values()[i]);
                // down: rescale the predicted clean sample and re-add noise
                let pred = (zi - (1.0 - ab[t]).sqrt() * ei) / ab[t].sqrt();
                let d = ab[tp].sqrt() * pred + (1.0 - ab[tp]).sqrt() * ei;
                assert!((down.values()[i] - d).abs() <= 1e-12);
                assert!((x0.values()[i] - pred).abs() <= 1e-12);
                // up: z/sqrt(ab) moves along the noise direction by the change in sqrt(1/ab - 1)
                let scaled = zi / ab[tp].sqrt()
                    + ((1.0 / ab[t] - 1.0).sqrt() - (1.0 / ab[tp] - 1.0).sqrt()) * ei;
                let u = scaled * ab[t].sqrt();
                assert!((up.values()[i] - u).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invert_then_denoise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = NoiseSchedule::standard();
        for t in [0usize, 10, 400, 999] {
            let (z, e) = (rand_t(6, &mut rng), rand_t(6, &mut rng));
            let up = ddim_invert_step(&z, &e, t, t + 1, &s).unwrap();
            let down = ddim_denoise_step(&up, &e, t + 1, t, &s).unwrap();
            for (a, b) in down.values().iter().zip(z.values()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn predict_x0_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = NoiseSchedule::standard();
        let (z0, eps) = (rand_t(3, &mut rng), rand_t(3, &mut rng));
        let zl = forward_noise(&z0, 400, &eps, &s).unwrap();
        let rec = predict_x0(&zl, &eps, 400, &s).unwrap();
        for (a, b) in rec.values().iter().zip(z0.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = predict_x0(&zl, &Tensor::zeros(zl.shape()), 400, &s).unwrap();
        let sa = s.alpha_bar(400).unwrap().sqrt();
        for (a, b) in zero.values().iter().zip(zl.values()) {
            assert_eq!(*a, b / sa);
        }
        assert_eq!(predict_x0(&zl, &eps, 0, &s).unwrap(), zl);
    }

    #[test]
    fn timestep_grid() {
        assert_eq!(timesteps(0, 5), vec![0]);
        assert_eq!(timesteps(400, 20), (0..=20).map(|k| 20 * k).collect::<Vec<_>>());
        assert_eq!(timesteps(3, 10), vec![0, 1, 2, 3]);
    }

    #[test]
    fn window_validation() {
        assert!(GuidanceSpec::new(1.0, (0.2, 0.5), None).is_err());
        assert!(GuidanceSpec::new(1.0, (1.5, 0.5), None).is_err());
        let g = GuidanceSpec::new(1.0, (0.4, 0.4), None).unwrap();
        let s = NoiseSchedule::standard();
        assert!(g.in_window(400, &s) && !g.in_window(380, &s));
    }
}
