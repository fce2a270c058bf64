// Per-frame FLOPs and denoiser calls for the four pipeline variants.
//
//   cargo run --example flops_report
use moviekit::autoencoder::{AutoencoderPair, Which};
use moviekit::costmodel::{denoiser_catalog, flops_of, ladder, pruning_delta, PipelineCosts, UnetSpec};
use moviekit::denoiser::DenoiserConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn table(title: &str, costs: &PipelineCosts, unit: f64) -> anyhow::Result<()> {
    println!("{title}");
    println!("  {:<20} {:>5} {:>4} {:>12} {:>12} {:>12}", "variant", "steps", "nfe", "denoiser", "autoenc", "per frame");
    for r in ladder(costs)? {
        println!(
            "  {:<20} {:>5} {:>4} {:>12.4} {:>12.4} {:>12.4}",
            r.variant.name(),
            r.steps,
            r.nfe,
            r.denoiser_tflops * unit,
            r.autoencoder_tflops * unit,
            r.per_frame_tflops * unit
        );
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let unet = UnetSpec::sd15().catalog();
    println!(
        "reference U-Net: {:.1} GFLOPs per pass at 64x64 latents, level-0 attention is {:.1}% of it",
        flops_of(&unet),
        100.0 * pruning_delta(&unet, &[0])?
    );
    table("reference costs (TFLOPs)", &PipelineCosts::reference()?, 1.0)?;

    let cfg = DenoiserConfig::toy();
    let ae = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
    let toy = PipelineCosts::from_catalogs(
        &denoiser_catalog(&cfg, 8, 8),
        &denoiser_catalog(&cfg.pruned(), 8, 8),
        &ae.catalog(Which::Big, 64, 64),
        &ae.catalog(Which::Tiny, 64, 64),
    );
    table("toy models on 64x64 frames (MFLOPs)", &toy, 1e6)?;
    Ok(())
}
