// Edit a clip with every pipeline variant, with and without cross-frame
// attention, and write the frames out.
//
//   cargo run --example video_edit -- [out_dir]
use std::path::PathBuf;

use moviekit::autoencoder::AutoencoderPair;
use moviekit::costmodel::Variant;
use moviekit::denoiser::{build_denoiser, DenoiserConfig};
use moviekit::distill::{init_guided_student, init_v_student};
use moviekit::run::prune_model;
use moviekit::synthdata::gen_video;
use moviekit::videoedit::{edit_video, frame_consistency, select_anchor, write_clip_pngs, EditRequest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("moviekit-edit"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ae = AutoencoderPair::new(&mut rng);
    let base = build_denoiser(&DenoiserConfig::toy(), &mut rng)?;
    let guided = init_guided_student(&base)?;
    let single = init_v_student(&guided)?;
    let pruned = prune_model(&base)?;

    let (clip, _) = gen_video(&mut rng, 5, 2)?;
    println!("{} frames, anchor frame {}, source consistency {:.4}", clip.len(), select_anchor(clip.len())?, frame_consistency(&clip)?);

    let runs = [
        (Variant::BaseMultipass, &base, 3),
        (Variant::MobilePruned, &pruned, 3),
        (Variant::GuidanceDistilled, &guided, 3),
        (Variant::Adversarial1Step, &single, 1),
    ];
    for (variant, model, steps) in runs {
        for cross_frame in [false, true] {
            let req = EditRequest {
                steps,
                cross_frame,
                ..EditRequest::new(2, variant)
            };
            let edit = edit_video(&clip, &req, &ae, model)?;
            let c = edit.counters;
            println!(
                "{:<20} cross-frame {:<5} nfe {:>3} (per frame {:>2}), encoder {} decoder {}, consistency {:.4}",
                variant.name(),
                cross_frame,
                c.nfe.denoiser_calls,
                c.nfe.denoiser_calls / clip.len(),
                c.encoder_calls,
                c.decoder_calls,
                frame_consistency(&edit.clip)?
            );
            if cross_frame {
                write_clip_pngs(&out.join(variant.name()), &edit.clip)?;
            }
        }
    }
    println!("frames written under {}", out.display());
    Ok(())
}
