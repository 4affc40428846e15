//! Runs the desk-scale training task and prints the held-out scores.

use std::time::Instant;

use fanet_core::trainer::{desk_run, DeskConfig};

fn main() -> fanet_core::Result<()> {
    let cfg = DeskConfig::default();
    let start = Instant::now();
    let report = desk_run::<f32>(&cfg, None)?;
    let losses = report.result.losses();
    for (i, chunk) in losses.chunks(50).enumerate() {
        println!(
            "steps {:>3}..{:>3}: mean L1 {:.5}",
            i * 50,
            i * 50 + chunk.len(),
            chunk.iter().sum::<f64>() / chunk.len() as f64
        );
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report.evaluation).expect("serializable")
    );
    println!(
        "psnr gain {:.3} dB, ssim gain {:.4}, {:.1}s",
        report.evaluation.psnr_gain(),
        report.evaluation.ssim_gain(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
