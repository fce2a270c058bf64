use moviekit::autoencoder::{latent_gap, psnr, stack_images, train_pair, AutoencoderPair, AutoencoderTrainConfig, Which};
use moviekit::synthdata::{triplet_at, Split};
use moviekit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sources(n: u64, split: Split) -> Vec<Tensor> {
    (0..n).map(|i| triplet_at(0, i, split).unwrap().source).collect()
}

/// Full-length training run: 2k iterations on 500 images.
#[test]
#[ignore = "about 50 minutes on one core; run with --ignored"]
fn trained_pair_meets_reconstruction_targets() {
    let corpus = sources(500, Split::Train);
    let held_out = stack_images(&sources(100, Split::Val)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ae = AutoencoderPair::new(&mut rng);
    train_pair(&mut ae, &corpus, &AutoencoderTrainConfig::default(), &mut rng).unwrap();

    let db = |enc, dec| psnr(&ae.roundtrip(&held_out, enc, dec).unwrap(), &held_out).unwrap();
    let big = db(Which::Big, Which::Big);
    let hybrid = db(Which::Big, Which::Tiny);
    let tiny = db(Which::Tiny, Which::Tiny);
    let gap = latent_gap(&ae, &held_out).unwrap();
    eprintln!("big {big:.2} dB, hybrid {hybrid:.2} dB, tiny {tiny:.2} dB, latent gap {gap:.4}");
    assert!(big > 25.0, "big roundtrip {big:.2} dB");
    assert!(gap < 0.05, "latent gap {gap:.4}");
    assert!(hybrid.is_finite() && (hybrid - tiny).abs() < 3.0, "hybrid {hybrid:.2} vs tiny {tiny:.2}");
}
