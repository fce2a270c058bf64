// The whole staged pipeline at smoke scale, driven through the same entry
// point as the `moviekit` binary.
//
//   cargo run --example cli_pipeline -- [workdir]
use std::path::PathBuf;

use moviekit::run::{run, Command, Invocation};

fn main() -> anyhow::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("moviekit-pipeline"));
    let small: &[(Command, &[&str])] = &[
        (Command::GenData, &["train=16", "val=8"]),
        (Command::TrainAutoencoder, &["train.big_iters=20", "train.tiny_iters=10", "train.batch=4"]),
        (Command::TrainBase, &["train.iters=20", "train.batch=4"]),
        (Command::DistillGuidance, &["train.iters=10", "train.batch=4", "probe_items=4"]),
        (Command::FinetuneV, &["train.iters=10", "train.batch=4"]),
        (Command::DistillAdversarial, &["train.iters=4", "train.batch=2", "eval_items=4"]),
        (Command::EditVideo, &["frames=4", "variant=adversarial-1step"]),
        (Command::ProfileFlops, &[]),
        (Command::Eval, &["probe_items=4", "control_items=4", "gap_items=4", "guidance_steps=2"]),
        (Command::Plot, &[]),
    ];
    for (cmd, sets) in small {
        let inv = sets.iter().fold(Invocation::new(&dir), |i, s| i.set(*s));
        let out = run(*cmd, &inv)?;
        println!("{cmd:<20} -> {}", out.display());
    }
    let eval = std::fs::read_to_string(dir.join("runs/eval/eval.json"))?;
    println!("{eval}");
    Ok(())
}
