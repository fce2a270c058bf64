// Noise schedules, timestep grids and prediction conversions.
//
//   cargo run --example schedules
use moviekit::schedules::{
    add_noise, convert_prediction, make_schedule, sample_logit_normal_t, Prediction, ScheduleKind, TimestepSamplerConfig,
};
use moviekit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let vp = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon)?;
    println!("vp-linear: 10 DDIM steps at {:?}", vp.timesteps(10)?);
    for t in [0, 250, 500, 999] {
        let (a, s) = vp.coeffs(t)?;
        println!("  t={t:4} alpha={a:.4} sigma={s:.4} alpha^2+sigma^2={:.12}", a * a + s * s);
    }

    let euler = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::V)?;
    println!("euler-discrete student levels (model time): {:?}", euler.model_times.iter().map(|t| t.round()).collect::<Vec<_>>());
    let lcm = make_schedule(ScheduleKind::LcmUniform, 5, Prediction::Epsilon)?;
    println!("lcm-uniform teacher grid (model time): {:?}", lcm.model_times);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = Tensor::randn(&[1, 4, 8, 8], &mut rng);
    let eps = Tensor::randn(&[1, 4, 8, 8], &mut rng);
    let xt = add_noise(&x0, &eps, 600, &vp)?;
    let v = convert_prediction(&eps, Prediction::Epsilon, Prediction::V, &xt, 600, &vp)?;
    let x0_from_v = convert_prediction(&v, Prediction::V, Prediction::Sample, &xt, 600, &vp)?;
    println!("x0 recovered from v at t=600: max error {:.2e}", x0_from_v.sub(&x0)?.max_abs());

    for (m, s) in [(0.0, 1.0), (-1.0, 1.0), (-1.0, 2.0)] {
        let cfg = TimestepSamplerConfig::new(m, s, 1000)?;
        let mut draws: Vec<usize> = (0..20_000).map(|_| sample_logit_normal_t(&cfg, &mut rng)).collect();
        draws.sort_unstable();
        println!("logit-normal (m={m}, s={s}): median t {}", draws[draws.len() / 2]);
    }
    Ok(())
}
