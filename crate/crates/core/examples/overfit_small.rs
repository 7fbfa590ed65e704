//! Overfits the default model on 8 synthetic samples and reports masked
//! accuracy, retrieval and attention locality.
//!
//! cargo run --release -p oclip-core --example overfit_small

use std::time::Instant;

use oclip_core::eval::{masked_accuracy, mean_locality, retrieval_accuracy, AttnSelect};
use oclip_core::model::{ForwardOptions, ModelConfig};
use oclip_core::synthdata::{render_corpus, GenConfig};
use oclip_core::trainer::{TrainConfig, Trainer};

fn main() -> oclip_core::Result<()> {
    let corpus = render_corpus(0, 8, &GenConfig::default())?;
    let config = ModelConfig::default();
    let mut trainer = Trainer::new(
        config.clone(),
        TrainConfig {
            steps: 300,
            ..TrainConfig::default()
        },
    )?;
    let started = Instant::now();
    while !trainer.is_done() {
        let m = trainer.step(&corpus)?;
        if (m.step + 1) % 50 == 0 {
            println!(
                "step {:>3}  l_cls {:.4}  l_bc {:.4}  acc {:.3}  [{:.1}s]",
                m.step + 1,
                m.l_cls,
                m.l_bc,
                m.acc,
                started.elapsed().as_secs_f64()
            );
        }
    }
    let params = trainer.params();
    let acc = masked_accuracy(params, &config, &corpus, ForwardOptions::default())?;
    let r = retrieval_accuracy(params, &config, &corpus, 8, 0)?;
    let (ratio, count) = mean_locality(params, &config, &corpus, AttnSelect::default(), 0)?;
    println!(
        "masked acc {:.4} ({}/{})",
        acc.accuracy(),
        acc.correct,
        acc.total
    );
    println!(
        "retrieval i2t {:.3} t2i {:.3}",
        r.image_to_text, r.text_to_image
    );
    println!("locality {ratio:.3} over {count} instances");
    Ok(())
}
