// Three-pass classifier-free guidance against a distilled single pass.
//
//   cargo run --example cfg_guidance
use moviekit::denoiser::{build_denoiser, Conditioning, DenoiserConfig};
use moviekit::distill::init_guided_student;
use moviekit::guidance::{cfg_combine, edit_distilled, edit_multipass, NfeCounter};
use moviekit::schedules::{make_schedule, Prediction, ScheduleKind};
use moviekit::synthdata::encode_instructions;
use moviekit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let shape = [1, 4, 8, 8];
    let (u, i, f) = (Tensor::randn(&shape, &mut rng), Tensor::randn(&shape, &mut rng), Tensor::randn(&shape, &mut rng));
    let unit = cfg_combine(&u, &i, &f, 1.0, 1.0)?;
    let no_text = cfg_combine(&u, &i, &f, 1.0, 0.0)?;
    println!("s=(1,1) gives the full-condition pass: {:.1e}", unit.sub(&f)?.max_abs());
    println!("s=(1,0) gives the image-only pass:     {:.1e}", no_text.sub(&i)?.max_abs());

    let base = build_denoiser(&DenoiserConfig::toy(), &mut rng)?;
    let student = init_guided_student(&base)?;
    let sched = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon)?;
    let image = Tensor::randn(&shape, &mut rng);
    let cond = Conditioning::new(Some(image), Some(encode_instructions(&[3])?)).with_scales(vec![1.5], vec![7.5]);
    let x_t = Tensor::randn(&shape, &mut rng);

    for steps in [1, 10, 30] {
        let mut three = NfeCounter::new();
        edit_multipass(&base, &x_t, &cond, &sched, steps, &mut rng, &mut three)?;
        let mut one = NfeCounter::new();
        edit_distilled(&student, &x_t, &cond, &sched, steps, &mut rng, &mut one)?;
        println!("{steps:2} steps: multipass {} calls, distilled {} calls", three.denoiser_calls, one.denoiser_calls);
    }
    Ok(())
}
