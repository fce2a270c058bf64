// Train the big autoencoder, distill the tiny one, compare PSNR.
//
//   cargo run --example autoencoder -- [iters]
use moviekit::autoencoder::{psnr, stack_images, train_pair, AutoencoderPair, AutoencoderTrainConfig, Which};
use moviekit::synthdata::{triplet_at, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let iters: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(60);
    let corpus = (0..32)
        .map(|i| triplet_at(0, i, Split::Train).map(|t| t.source))
        .collect::<moviekit::Result<Vec<_>>>()?;
    let val = stack_images(&(0..8).map(|i| triplet_at(0, i, Split::Val).map(|t| t.source)).collect::<moviekit::Result<Vec<_>>>()?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ae = AutoencoderPair::new(&mut rng);
    let cfg = AutoencoderTrainConfig {
        big_iters: iters,
        tiny_iters: iters / 2,
        batch: 4,
        ..Default::default()
    };
    let log = train_pair(&mut ae, &corpus, &cfg, &mut rng)?;
    println!(
        "big recon loss {:.4} -> {:.4}, tiny distill {:.4} -> {:.4}",
        log.big_recon[0],
        log.big_recon.last().unwrap(),
        log.tiny_distill[0],
        log.tiny_distill.last().unwrap()
    );

    for (enc, dec) in [(Which::Big, Which::Big), (Which::Big, Which::Tiny), (Which::Tiny, Which::Tiny)] {
        let out = ae.roundtrip(&val, enc, dec)?;
        println!("encode {enc:?} / decode {dec:?}: {:.2} dB", psnr(&out, &val)?);
    }
    let z = ae.encode(&val, Which::Big)?;
    println!("latents {:?}, std {:.3}", z.shape(), (z.sq_norm() / z.len() as f64).sqrt());
    Ok(())
}
