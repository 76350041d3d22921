//! Runs the desk-scale protocol: convergence of every pretraining mode and
//! learning curves for none vs BiLM. Takes a few minutes on one core.

use std::time::Instant;

use bilm_ner::desk::{compare_modes_with, learning_curves_with, prepare, pretrain_all, DeskProtocol};
use bilm_ner::transfer::PretrainMode;

fn main() -> bilm_ner::Result<()> {
    let p = DeskProtocol::default();
    let data = prepare(&p)?;
    println!("vocab {} words, {} train / {} dev / {} test sentences", data.vocab.words.len(), data.train.len(), data.dev.len(), data.test.len());
    let t = Instant::now();
    let cks = pretrain_all(&data, &p)?;
    println!("pretrained {} language models in {:.0}s", cks.len(), t.elapsed().as_secs_f64());
    for s in compare_modes_with(&data, &p, &PretrainMode::ALL, &cks)? {
        println!(
            "{:<5} epochs to dev F1 {:.2}: {:.2}  test F1 {:.4}",
            s.mode.as_str(),
            p.threshold,
            s.mean_epochs_to(p.threshold, p.ner.epochs),
            s.mean_test_f1()
        );
    }
    for (mode, pts) in learning_curves_with(&data, &p, &[PretrainMode::None, PretrainMode::BiLm], &[0.25, 0.5, 1.0], &cks)? {
        let cells: Vec<String> = pts.iter().map(|(f, f1)| format!("{f:.2}:{f1:.4}")).collect();
        println!("curve {:<5} {}", mode.as_str(), cells.join("  "));
    }
    println!("{:.0}s", t.elapsed().as_secs_f64());
    Ok(())
}
