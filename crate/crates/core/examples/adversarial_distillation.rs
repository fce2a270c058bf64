// Single-step adversarial distillation with a frozen teacher-feature
// discriminator, checkpointing and resuming halfway.
//
//   cargo run --example adversarial_distillation -- [iters]
use moviekit::autoencoder::AutoencoderPair;
use moviekit::denoiser::{build_denoiser, DenoiserConfig};
use moviekit::distill::{
    init_guided_student, init_v_student, AdversarialConfig, AdversarialTrainer, Discriminator, HeadConfig, LatentDataset,
    TrainState,
};
use moviekit::evaluate::single_step_gap;
use moviekit::synthdata::Split;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let iters: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ae = AutoencoderPair::new(&mut rng);
    let data = LatentDataset::synthetic(&ae, 16, 0, Split::Train)?;
    let teacher = init_guided_student(&build_denoiser(&DenoiserConfig::toy(), &mut rng)?)?;
    let student = init_v_student(&teacher)?;

    let cfg = AdversarialConfig {
        iters,
        batch: 2,
        teacher_steps: 2,
        ..Default::default()
    };
    let before = single_step_gap(&teacher, &student, &data, 4, cfg.teacher_steps, cfg.student_timesteps, 9)?;

    let disc = Discriminator::new(&teacher, HeadConfig::default(), &mut rng)?;
    let mut trainer = AdversarialTrainer::new(&teacher, student, disc, &data, cfg.clone(), 7)?;
    for _ in 0..iters / 2 {
        let r = trainer.step()?;
        println!(
            "iter {} disc {:.4} gen {:.4} mse {:.4}",
            r.iter,
            r.loss_disc.unwrap_or(f64::NAN),
            r.loss_gen.unwrap_or(f64::NAN),
            r.loss_mse.unwrap_or(f64::NAN)
        );
    }

    let ckpt = trainer.state().to_checkpoint();
    let path = std::env::temp_dir().join("moviekit-adv-state.mvkt");
    ckpt.save(&path, moviekit::checkpoint::Dtype::F64)?;
    println!("saved state after {} iterations to {}", trainer.iteration, path.display());
    drop(trainer);

    let state = TrainState::from_checkpoint(&moviekit::checkpoint::Checkpoint::load(&path)?)?;
    let disc = Discriminator::new(&teacher, HeadConfig::default(), &mut rng)?;
    let mut trainer = AdversarialTrainer::resume(&teacher, disc, &data, cfg.clone(), &state)?;
    while trainer.iteration < iters {
        let r = trainer.step()?;
        println!("iter {} (resumed) total {:.4}", r.iter, r.loss_total);
    }
    trainer.disc.verify_frozen()?;

    let student = trainer.into_student();
    let after = single_step_gap(&teacher, &student, &data, 4, cfg.teacher_steps, cfg.student_timesteps, 9)?;
    println!("one-step gap to the {}-step teacher: {before:.4} -> {after:.4}", cfg.teacher_steps);
    Ok(())
}
