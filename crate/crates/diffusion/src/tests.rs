use super::*;
use lddgan_core::{backward, RngStream, Tape};

fn toy_schedule() -> NoiseSchedule {
    NoiseSchedule::from_betas(&[0.1, 0.3, 0.5, 0.9]).unwrap()
}

#[test]
fn alpha_bar_is_the_running_product() {
    let s = toy_schedule();
    let expect = [1.0, 0.9, 0.63, 0.315, 0.0315];
    for (t, &e) in expect.iter().enumerate() {
        assert!((s.alpha_bar(t) - e).abs() < 1e-12, "t={t}");
    }
}

#[test]
fn alpha_bar_strictly_decreasing() {
    let s = default_schedule(8).unwrap();
    for t in 1..=s.steps() {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
}

#[test]
fn default_schedule_reaches_isotropic_terminal() {
    for t_steps in [1, 2, 4, 8] {
        let s = default_schedule(t_steps).unwrap();
        assert!(
            s.alpha_bar(t_steps) < WARN_ABAR_T,
            "T={t_steps}: terminal {}",
            s.alpha_bar(t_steps)
        );
        assert!(s.terminal_warning().is_none());
    }
}

#[test]
fn single_step_boundary_schedule_is_valid() {
    let s = build_schedule(1, 0.9999, 0.9999, ScheduleKind::Linear).unwrap();
    assert!((s.alpha_bar(1) - 1e-4).abs() < 1e-12);
}

#[test]
fn sluggish_terminal_state_warns_but_builds() {
    let s = build_schedule(1, 0.999, 0.999, ScheduleKind::Linear).unwrap();
    assert!((s.alpha_bar(1) - 1e-3).abs() < 1e-12);
    assert!(s.terminal_warning().is_some());
}

#[test]
fn bad_beta_ranges_are_config_errors() {
    assert!(build_schedule(4, 0.5, 0.4, ScheduleKind::Linear).is_err());
    assert!(build_schedule(4, 0.0, 0.9, ScheduleKind::Linear).is_err());
    assert!(build_schedule(4, 0.1, 1.0, ScheduleKind::Linear).is_err());
    assert!(build_schedule(0, 0.1, 0.9, ScheduleKind::Linear).is_err());
    assert!(build_schedule(65, 0.1, 0.9, ScheduleKind::Linear).is_err());
}

#[test]
fn lazy_terminal_state_is_rejected() {
    // Small betas over few steps leave most of the signal intact.
    assert!(build_schedule(2, 0.1, 0.2, ScheduleKind::Linear).is_err());
}

#[test]
fn geometric_interpolation_is_monotone() {
    let s = build_schedule(6, 0.05, 0.999, ScheduleKind::Geometric).unwrap();
    for t in 2..=6 {
        assert!(s.beta(t) > s.beta(t - 1));
    }
}

#[test]
fn q_sample_closed_form_value() {
    // One step with beta = 0.75 puts alpha_bar exactly at 0.25.
    let s = NoiseSchedule::from_betas(&[0.75]).unwrap();
    let x0 = Tensor::<f64>::from_vec(&[1], vec![2.0]).unwrap();
    let noise = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
    let xt = q_sample(&x0, 1, &noise, &s).unwrap();
    let expect = 0.5 * 2.0 + 0.75f64.sqrt();
    assert!((xt.data()[0] - expect).abs() < 1e-12);
    assert!((expect - 1.866025).abs() < 1e-6);
}

#[test]
fn q_sample_t0_is_the_identity() {
    let s = toy_schedule();
    let x0 = Tensor::<f64>::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap();
    let noise = Tensor::<f64>::zeros(&[3]);
    assert_eq!(q_sample(&x0, 0, &noise, &s).unwrap(), x0);
}

#[test]
fn q_sample_is_linear_in_noise_when_x0_is_zero() {
    let s = toy_schedule();
    let x0 = Tensor::<f64>::zeros(&[2]);
    let noise = Tensor::<f64>::from_vec(&[2], vec![1.5, -2.0]).unwrap();
    let t = 3;
    let xt = q_sample(&x0, t, &noise, &s).unwrap();
    let scale = (1.0 - s.alpha_bar(t)).sqrt();
    for (o, n) in xt.data().iter().zip(noise.data()) {
        assert!((o - scale * n).abs() < 1e-12);
    }
}

#[test]
fn q_sample_t_out_of_range_is_an_error() {
    let s = toy_schedule();
    let x0 = Tensor::<f64>::zeros(&[2]);
    assert!(q_sample(&x0, 5, &x0.clone(), &s).is_err());
}

#[test]
fn posterior_variance_closed_form() {
    let s = toy_schedule();
    let expect = (1.0 - 0.9) / (1.0 - 0.63) * 0.3;
    assert!((s.posterior_var(2) - expect).abs() < 1e-12);
    assert!((expect - 0.08108).abs() < 1e-5);
}

#[test]
fn posterior_mean_is_zero_at_zero_endpoints() {
    let s = toy_schedule();
    let zero = Tensor::<f64>::zeros(&[4]);
    let (mean, _) = posterior_params(&zero, &zero, 3, &s).unwrap();
    assert!(mean.data().iter().all(|&v| v == 0.0));
}

#[test]
fn t1_posterior_degenerates_to_x0_with_floor() {
    let s = toy_schedule();
    let x0 = Tensor::<f64>::from_vec(&[2], vec![0.4, -0.6]).unwrap();
    let xt = Tensor::<f64>::from_vec(&[2], vec![5.0, -5.0]).unwrap();
    let (mean, var) = posterior_params(&x0, &xt, 1, &s).unwrap();
    for (m, x) in mean.data().iter().zip(x0.data()) {
        assert!((m - x).abs() < 1e-12);
    }
    assert_eq!(var, T1_VARIANCE_FLOOR);
}

#[test]
fn posterior_sample_with_zero_noise_is_the_mean() {
    let s = toy_schedule();
    let x0 = Tensor::<f64>::from_vec(&[2], vec![0.7, -0.2]).unwrap();
    let xt = Tensor::<f64>::from_vec(&[2], vec![0.1, 0.9]).unwrap();
    let zero = Tensor::<f64>::zeros(&[2]);
    let draw = posterior_sample(&x0, &xt, 3, &zero, &s).unwrap();
    let (mean, _) = posterior_params(&x0, &xt, 3, &s).unwrap();
    assert_eq!(draw, mean);
}

#[test]
fn posterior_sample_moments_match_params() {
    let s = toy_schedule();
    let t = 2;
    let x0 = Tensor::<f64>::from_vec(&[1], vec![0.8]).unwrap();
    let xt = Tensor::<f64>::from_vec(&[1], vec![-0.3]).unwrap();
    let (mean, var) = posterior_params(&x0, &xt, t, &s).unwrap();
    let mut rng = RngStream::new(99);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n {
        let noise = rng.gaussian::<f64>(&[1]).unwrap();
        let v = posterior_sample(&x0, &xt, t, &noise, &s).unwrap().data()[0];
        sum += v;
        sumsq += v * v;
    }
    let emp_mean = sum / n as f64;
    let emp_var = sumsq / n as f64 - emp_mean * emp_mean;
    assert!(
        (emp_mean - mean.data()[0]).abs() < 0.01 * mean.data()[0].abs().max(0.1),
        "mean {emp_mean} vs {}",
        mean.data()[0]
    );
    assert!((emp_var - var).abs() < 0.01 * var, "var {emp_var} vs {var}");
}

#[test]
fn remarginalizing_the_posterior_recovers_the_marginal() {
    // Draw x_t from the marginal, then x_{t-1} from the posterior; the
    // result must be distributed as the t-1 marginal again.
    let s = toy_schedule();
    let t = 3;
    let x0v = 0.6;
    let x0 = Tensor::<f64>::from_vec(&[1], vec![x0v]).unwrap();
    let mut rng = RngStream::new(7);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n {
        let e1 = rng.gaussian::<f64>(&[1]).unwrap();
        let xt = q_sample(&x0, t, &e1, &s).unwrap();
        let e2 = rng.gaussian::<f64>(&[1]).unwrap();
        let xprev = posterior_sample(&x0, &xt, t, &e2, &s).unwrap().data()[0];
        sum += xprev;
        sumsq += xprev * xprev;
    }
    let emp_mean = sum / n as f64;
    let emp_var = sumsq / n as f64 - emp_mean * emp_mean;
    let want_mean = s.alpha_bar(t - 1).sqrt() * x0v;
    let want_var = 1.0 - s.alpha_bar(t - 1);
    assert!((emp_mean - want_mean).abs() < 0.01, "{emp_mean} vs {want_mean}");
    assert!(
        (emp_var - want_var).abs() < 0.01 * want_var.max(0.1),
        "{emp_var} vs {want_var}"
    );
}

#[test]
fn posterior_gradient_wrt_x0_is_the_coefficient() {
    let s = toy_schedule();
    let t = 2;
    // Differentiable path: d posterior_sample / d x0 = coef_x0[t].
    let tape: Tape<f64> = Tape::new();
    let x0 = tape.variable(Tensor::from_vec(&[1, 1], vec![0.25]).unwrap());
    let xt = tape.constant(Tensor::from_vec(&[1, 1], vec![-0.5]).unwrap());
    let noise = Tensor::<f64>::from_vec(&[1, 1], vec![0.3]).unwrap();
    let out = posterior_sample_rows_var(&x0, &xt, &[t], &noise, &s);
    let grad = backward(&out.sum_all(), &[&x0])[0].tensor();
    assert!((grad.data()[0] - s.coef_x0(t)).abs() < 1e-12);

    // Finite-difference on the tensor-level path agrees.
    let h = 1e-6;
    let noise_t = Tensor::<f64>::from_vec(&[1], vec![0.3]).unwrap();
    let xt_t = Tensor::<f64>::from_vec(&[1], vec![-0.5]).unwrap();
    let at = |v: f64| {
        let x = Tensor::<f64>::from_vec(&[1], vec![v]).unwrap();
        posterior_sample(&x, &xt_t, t, &noise_t, &s).unwrap().data()[0]
    };
    let fd = (at(0.25 + h) - at(0.25 - h)) / (2.0 * h);
    assert!((fd - s.coef_x0(t)).abs() < 1e-6);
}

#[test]
fn rows_variants_match_single_t_paths() {
    let s = toy_schedule();
    let mut rng = RngStream::new(5);
    let x0 = rng.gaussian::<f64>(&[3, 2]).unwrap();
    let noise = rng.gaussian::<f64>(&[3, 2]).unwrap();
    let ts = [1usize, 2, 4];
    let batched = q_sample_rows(&x0, &ts, &noise, &s).unwrap();
    for (i, &t) in ts.iter().enumerate() {
        let x0_row = Tensor::<f64>::from_vec(&[2], x0.row(i).to_vec()).unwrap();
        let n_row = Tensor::<f64>::from_vec(&[2], noise.row(i).to_vec()).unwrap();
        let single = q_sample(&x0_row, t, &n_row, &s).unwrap();
        assert_eq!(batched.row(i), single.data());
    }
}

#[test]
fn forward_step_composes_to_the_marginal() {
    // Chaining steps 1..=t with zero noise scales by sqrt(abar_t).
    let s = toy_schedule();
    let x0 = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
    let zero = Tensor::<f64>::zeros(&[1]);
    let mut x = x0.clone();
    for t in 1..=4 {
        x = forward_step(&x, t, &zero, &s).unwrap();
        assert!((x.data()[0] - s.alpha_bar(t).sqrt()).abs() < 1e-12);
    }
}
