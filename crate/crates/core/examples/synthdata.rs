// The synthetic editing corpus: instructions, triplets, clips.
//
//   cargo run --example synthdata -- [out_dir]
use std::path::PathBuf;

use moviekit::synthdata::{gen_video, read_corpus, save_png, triplet_at, write_corpus, Split, VOCAB};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("moviekit-synth"));
    println!("instructions:");
    for ins in VOCAB {
        println!("  {:>2} {}", ins.id(), ins.name());
    }

    let t = triplet_at(0, 3, Split::Train)?;
    println!("train item 3: instruction {} on a {:?} image", t.instruction_id, t.source.shape());
    let again = triplet_at(0, 3, Split::Train)?;
    println!("regenerated item 3 identical: {}", again.source == t.source && again.edited == t.edited);

    let entries = write_corpus(&out.join("corpus"), 8, 0, Split::Val)?;
    println!("wrote {} pairs + manifest to {}", entries.len(), out.join("corpus").display());
    println!("read back {} triplets", read_corpus(&out.join("corpus"))?.len());

    let (src, dst) = gen_video(&mut ChaCha8Rng::seed_from_u64(1), 4, 2)?;
    for (i, (a, b)) in src.frames.iter().zip(&dst.frames).enumerate() {
        save_png(&out.join(format!("clip_{i}_source.png")), a)?;
        save_png(&out.join(format!("clip_{i}_edited.png")), b)?;
    }
    println!("wrote a 4-frame clip and its reference edit to {}", out.display());
    Ok(())
}
