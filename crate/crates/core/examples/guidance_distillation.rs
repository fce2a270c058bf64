// Train a small base editor, then distill its guided output into one pass.
//
//   cargo run --example guidance_distillation -- [base_iters] [distill_iters]
use moviekit::autoencoder::AutoencoderPair;
use moviekit::denoiser::{build_denoiser, DenoiserConfig};
use moviekit::distill::{
    guidance_probe, ignore, init_guided_student, probe_mse, train_base, train_guidance_distill, BaseTrainConfig,
    GuidanceDistillConfig, LatentDataset,
};
use moviekit::synthdata::Split;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arg(i: usize, default: usize) -> anyhow::Result<usize> {
    Ok(std::env::args().nth(i).map(|s| s.parse()).transpose()?.unwrap_or(default))
}

fn main() -> anyhow::Result<()> {
    let (base_iters, distill_iters) = (arg(1, 100)?, arg(2, 100)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ae = AutoencoderPair::new(&mut rng);
    let data = LatentDataset::synthetic(&ae, 32, 0, Split::Train)?;

    let mut base = build_denoiser(&DenoiserConfig::toy(), &mut rng)?;
    let cfg = BaseTrainConfig {
        iters: base_iters,
        batch: 4,
        ..Default::default()
    };
    let log = train_base(&mut base, &data, &cfg, &mut rng, &mut ignore)?;
    println!("base: loss {:.4} -> {:.4}", log[0].loss_total, log.last().unwrap().loss_total);

    let mut student = init_guided_student(&base)?;
    let probe = guidance_probe(&base, &data, 8, 1, None)?;
    let unit = guidance_probe(&base, &data, 8, 2, Some((1.0, 1.0)))?;
    println!("student before: probe mse {:.5}, unit-scale mse {:.5}", probe_mse(&student, &probe)?, probe_mse(&student, &unit)?);

    let cfg = GuidanceDistillConfig {
        iters: distill_iters,
        batch: 4,
        ..Default::default()
    };
    let mut every = |r: &moviekit::distill::IterRecord| {
        if r.iter % 25 == 0 {
            println!("  iter {:4} loss {:.5}", r.iter, r.loss_total);
        }
    };
    train_guidance_distill(&base, &mut student, &data, &cfg, &mut rng, &mut every)?;
    println!("student after:  probe mse {:.5}, unit-scale mse {:.5}", probe_mse(&student, &probe)?, probe_mse(&student, &unit)?);
    Ok(())
}
