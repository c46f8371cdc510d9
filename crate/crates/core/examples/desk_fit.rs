//! Fit the default synthetic desk scene and print evaluation metrics.
//!
//! Usage: `cargo run --release --example desk_fit -- [iterations] [flashless|hard|falloff|full] [arc_deg] [reflected_depth] [tilt_deg] [beta_lo beta_hi]`

use std::time::Instant;

use flash_splat::eval::evaluate;
use flash_splat::pipeline::{fit, FitConfig};
use flash_splat::synth::{emit_dataset, DatasetSpec};

fn main() -> flash_splat::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let variant = args.get(2).map(String::as_str).unwrap_or("");
    let mut spec = DatasetSpec::default();
    if let Some(arc) = args.get(3).and_then(|s| s.parse().ok()) {
        spec.arc_deg = arc;
    }
    if let Some(d) = args.get(4).and_then(|s| s.parse().ok()) {
        spec.reflected_depth = d;
    }
    if let Some(t) = args.get(5).and_then(|s| s.parse().ok()) {
        spec.transmitted_tilt_deg = t;
    }
    if let (Some(lo), Some(hi)) = (args.get(6).and_then(|s| s.parse().ok()), args.get(7).and_then(|s| s.parse().ok())) {
        spec.beta_range = [lo, hi];
    }
    let mut cfg = FitConfig::default();
    cfg.train.iterations = iterations;
    match variant {
        "flashless" => {
            spec.flashless = true;
            cfg.flashless = true;
        }
        "hard" => {
            spec.falloff = true;
            cfg.hard_linear = Some(1.0 + spec.alpha);
        }
        "falloff" => spec.falloff = true,
        _ => {}
    }
    let t0 = Instant::now();
    let ds = emit_dataset(&spec)?;
    println!("dataset {:.1}s", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let out = fit(&ds.captures, ds.flash_points.as_ref(), &ds.noflash_points, &cfg, None)?;
    println!("fit {:.1}s, init accuracy {:?}", t1.elapsed().as_secs_f64(), out.init_accuracy);
    for row in out.log.iter().step_by((iterations / 10).max(1)) {
        println!("{:5} {:8} l1 {:.4} dssim {:.4} lin {:.4} total {:.4}", row.iteration, row.view_id, row.l1, row.dssim, row.linearity, row.total);
    }
    let mut views = Vec::new();
    for v in ds.captures.views.iter().chain(&ds.heldout) {
        let held = ds.heldout.iter().any(|h| h.view_id == v.view_id);
        views.push((v, ds.truth_for(&v.view_id).unwrap(), held));
    }
    let rep = evaluate(&out.scene, &views)?;
    for v in &rep.views {
        println!("{:8} T {:.2} dB  R {:.2} dB  paired {:?}", v.view_id, v.transmission_psnr, v.reflection_psnr, v.paired_psnr);
    }
    println!("held-in T {:.2}  held-out T {:.2}", rep.heldin.transmission_psnr, rep.heldout.transmission_psnr);
    for id in out.scene.cloud_ids() {
        println!("{} {}", id.name(), out.scene.cloud(id).unwrap().len());
    }
    Ok(())
}
