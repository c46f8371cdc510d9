//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Criteria 5 to 8 run full desk-scale fits through the command-line layer and
//! dominate the runtime; set `ACCEPTANCE_QUICK` to run only criteria 1 to 4.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flash_splat::camera::{Intrinsics, RigidTransform};
use flash_splat::composite::{flatten_scene, unflatten_scene, TransmissionMode};
use flash_splat::eval::EvalReport;
use flash_splat::init::{align_clouds, classify_points, ClassifyParams, Similarity};
use flash_splat::losses::{dssim_loss, pearson_linearity_loss, total_loss, LossWeights};
use flash_splat::synth::{
    build_scene, emit_dataset, origin_view, paired_subtract, random_gaussian_scene, render_oracle, DatasetSpec, LOOK_AT,
    MASK_REFLECTED,
};
use flash_splat::ImageMap;
use flash_splat_cli::{eval_cmd, fit_cmd, synth, EvalArgs, FitArgs, SynthArgs};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> ImageMap {
    let data = (0..w * h * c).map(|_| rng.random_range(lo..hi)).collect();
    ImageMap::from_vec(w, h, c, data).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let modes = [TransmissionMode::Paired, TransmissionMode::HardLinear { c: 1.4 }, TransmissionMode::Flashless];
    let weights = LossWeights::default();
    let step = 1e-4;
    let (mut ok, mut total) = (0usize, 0usize);
    let scenes = 20;
    for s in 0..scenes {
        let n = rng.random_range(6..=20);
        let mode = modes[s % modes.len()];
        let scene = random_gaussian_scene(&mut rng, n, s % 2, mode);
        let target = random_map(&mut rng, 16, 16, 3, 0.05, 0.5);
        let view = origin_view("grad", 16, 16, s % 4 != 1).with_image(target);
        let (_, g) = total_loss(&scene, &view, &weights).unwrap();
        let g = g.flatten();
        let base = flatten_scene(&scene);
        let mut work = scene.clone();
        let mut p = base.clone();
        for i in 0..base.len() {
            let mut eval = |d: f64| {
                p[i] = base[i] + d;
                unflatten_scene(&mut work, &p).unwrap();
                total_loss(&work, &view, &weights).unwrap().0.total
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            p[i] = base[i];
            total += 1;
            if (fd - g[i]).abs() <= (1e-3 * fd.abs().max(g[i].abs())).max(1e-6) {
                ok += 1;
            }
        }
    }
    let frac = ok as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        frac >= 0.99 && secs < 300.0,
        format!("{ok}/{total} parameters agree ({:.3}%) over {scenes} scenes in {secs:.1}s", 100.0 * frac),
    )
}

fn oracle_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst: f64 = 0.0;
    let mut min_energy = f64::INFINITY;
    for s in 0..10u64 {
        let spec = DatasetSpec {
            alpha: rng.random_range(0.2..1.5),
            seed: 50 + s,
            ..Default::default()
        };
        let scene = build_scene(&spec, spec.seed);
        let k = spec.intrinsics();
        let eye = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2));
        let pose = RigidTransform::look_at(eye, Vector3::from(LOOK_AT), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let n = render_oracle(&scene, &k, &pose, false).unwrap();
        let f = render_oracle(&scene, &k, &pose, true).unwrap();
        let diff = f.image.zip_map(&n.image, |a, b| a - b).unwrap();
        let expect = n.t_noflash.map(|t| spec.alpha * t);
        worst = worst.max(diff.max_abs_diff(&expect));

        let shifted_k = Intrinsics { cx: k.cx + 2.0, ..k };
        let fs = render_oracle(&scene, &shifted_k, &pose, true).unwrap();
        let sub = paired_subtract(&fs.image, &n.image).unwrap();
        let mut energy = 0.0;
        for y in 0..k.height {
            for x in 0..k.width {
                if n.mask[y * k.width + x] & MASK_REFLECTED != 0 && n.beta.get(x, y, 0) > 0.0 {
                    for c in 0..3 {
                        let e = sub.get(x, y, c) - spec.alpha * n.t_noflash.get(x, y, c);
                        energy += e * e;
                    }
                }
            }
        }
        min_energy = min_energy.min(energy);
    }
    outcome(
        worst < 1e-6 && min_energy > 0.0,
        format!("max |(I_F - I_N) - alpha T_N| = {worst:.2e}; min shifted-pair artifact energy = {min_energy:.3e}"),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for _ in 0..100 {
        let (w, h) = (rng.random_range(2..20), rng.random_range(2..20));
        let a = random_map(&mut rng, w, h, 3, 0.0, 1.0);
        let (k, b0) = (rng.random_range(0.1..5.0), rng.random_range(-1.0..1.0));
        let pos = a.map(|v| k * v + b0);
        let neg = a.map(|v| -k * v + b0);
        let cst = ImageMap::filled(w, h, 3, rng.random_range(0.0..1.0));
        let lp = pearson_linearity_loss(&a, &pos).unwrap();
        let ln = pearson_linearity_loss(&a, &neg).unwrap();
        let lc = pearson_linearity_loss(&a, &cst).unwrap();
        let lcc = pearson_linearity_loss(&cst, &cst).unwrap();
        worst = worst.max((lp + 1.0).abs()).max((ln - 1.0).abs()).max(lc.abs()).max(lcc.abs());

        let d = dssim_loss(&a, &a).unwrap();
        if d.abs() > 1e-12 {
            failures.push(format!("DSSIM(x,x) = {d:e}"));
        }

        let b = random_map(&mut rng, w, h, 3, 0.0, 1.0);
        let base = pearson_linearity_loss(&a, &b).unwrap();
        let (s1, t1, s2, t2) = (rng.random_range(0.1..10.0), rng.random_range(-2.0..2.0), rng.random_range(0.1..10.0), rng.random_range(-2.0..2.0));
        let moved = pearson_linearity_loss(&a.map(|v| s1 * v + t1), &b.map(|v| s2 * v + t2)).unwrap();
        if (moved - base).abs() > 1e-9 {
            failures.push(format!("affine invariance off by {:e}", (moved - base).abs()));
        }
    }
    if worst > 1e-9 {
        failures.push(format!("pearson identity off by {worst:e}"));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("100 random cases; max identity error {worst:.1e}")
    } else {
        failures.into_iter().take(3).collect::<Vec<_>>().join("; ")
    };
    outcome(pass, detail)
}

fn init_accuracy() -> Outcome {
    let clean = emit_dataset(&DatasetSpec::default()).unwrap();
    let acc_clean = classify_points(clean.flash_points.as_ref().unwrap(), &clean.noflash_points, &ClassifyParams::default())
        .unwrap()
        .accuracy()
        .unwrap();
    let noisy = emit_dataset(&DatasetSpec {
        color_noise: 0.05,
        ..Default::default()
    })
    .unwrap();
    let acc_noisy = classify_points(noisy.flash_points.as_ref().unwrap(), &noisy.noflash_points, &ClassifyParams::default())
        .unwrap()
        .accuracy()
        .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut sets: Vec<Vec<Vector3<f64>>> = vec![clean.captures.views.iter().map(|v| v.world_to_cam.center()).collect()];
    for _ in 0..4 {
        sets.push((0..15).map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect());
    }
    let mut err: f64 = 0.0;
    for src in &sets {
        let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let truth = Similarity {
            scale: 2.0,
            rotation: Rotation3::from_axis_angle(&axis, 30f64.to_radians()).into_inner(),
            translation: Vector3::new(0.7, -1.2, 3.0),
        };
        let dst: Vec<_> = src.iter().rev().map(|p| truth.apply(p)).collect();
        let a = align_clouds(src, &dst).unwrap().transform;
        err = err
            .max((a.scale - truth.scale).abs())
            .max((a.rotation - truth.rotation).abs().max())
            .max((a.translation - truth.translation).abs().max());
    }
    outcome(
        acc_clean >= 0.99 && acc_noisy >= 0.90 && err < 1e-6,
        format!(
            "accuracy {:.2}% noiseless, {:.2}% with 5% noise; similarity recovery error {err:.1e} over {} sets",
            100.0 * acc_clean,
            100.0 * acc_noisy,
            sets.len()
        ),
    )
}

struct Runs {
    root: tempfile::TempDir,
}

impl Runs {
    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn dataset(&self, name: &str, spec: &DatasetSpec) -> PathBuf {
        let spec_path = self.path(&format!("{name}.spec.json"));
        fs::write(&spec_path, serde_json::to_string(spec).unwrap()).unwrap();
        let out = self.path(name);
        synth(&SynthArgs {
            spec: Some(spec_path),
            out: out.clone(),
            seed: None,
        })
        .unwrap();
        out
    }

    /// Fit then evaluate; returns the report and the fit time in seconds.
    fn fit_eval(&self, data: &Path, name: &str, flashless: bool, hard_linear: Option<f64>, iterations: Option<usize>) -> (EvalReport, f64) {
        let out = self.path(name);
        let start = Instant::now();
        fit_cmd(&FitArgs {
            data: data.to_path_buf(),
            config: None,
            out: out.clone(),
            flashless,
            hard_linear,
            no_init: false,
            seed: Some(7),
            iterations,
        })
        .unwrap();
        let secs = start.elapsed().as_secs_f64();
        let report = eval_cmd(&EvalArgs {
            ckpt: out.clone(),
            data: data.to_path_buf(),
            out: self.path(&format!("{name}.report.json")),
        })
        .unwrap();
        eprintln!(
            "  {name}: fit {secs:.0}s, T_N PSNR held-in {:.2} dB, held-out {:.2} dB",
            report.heldin.transmission_psnr, report.heldout.transmission_psnr
        );
        (report, secs)
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let runs = Runs {
        root: tempfile::tempdir().unwrap(),
    };
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradient correctness", gradient_correctness());
    report(2, "oracle flash identity", oracle_identity());
    report(3, "loss identities", loss_identities());
    report(4, "initialization accuracy", init_accuracy());

    if std::env::var_os("ACCEPTANCE_QUICK").is_some() {
        println!("ACCEPTANCE_QUICK set: criteria 5-8 (full fits) not run");
        let failed = results.iter().filter(|r| !r.2.pass).count();
        std::process::exit(i32::from(failed > 0));
    }

    let desk = runs.dataset("desk", &DatasetSpec::default());
    let (full, secs) = runs.fit_eval(&desk, "full", false, None, None);
    report(
        5,
        "end-to-end separation",
        outcome(
            full.heldin.transmission_psnr >= 25.0 && full.heldout.transmission_psnr >= 20.0 && secs <= 1800.0 && full.is_finite(),
            format!(
                "T_N PSNR {:.2} dB held-in (>= 25), {:.2} dB held-out (>= 20), fit {secs:.0}s",
                full.heldin.transmission_psnr, full.heldout.transmission_psnr
            ),
        ),
    );

    let flashless_data = runs.dataset(
        "desk_flashless",
        &DatasetSpec {
            flashless: true,
            ..Default::default()
        },
    );
    let (ablated, _) = runs.fit_eval(&flashless_data, "flashless", true, None, None);
    let gap = full.all.transmission_psnr - ablated.all.transmission_psnr;
    report(
        6,
        "flash-cue ablation",
        outcome(
            gap >= 3.0,
            format!(
                "full {:.2} dB vs flashless {:.2} dB, gap {gap:.2} dB (>= 3)",
                full.all.transmission_psnr, ablated.all.transmission_psnr
            ),
        ),
    );

    let falloff_spec = DatasetSpec {
        falloff: true,
        ..Default::default()
    };
    let falloff = runs.dataset("desk_falloff", &falloff_spec);
    let (soft, _) = runs.fit_eval(&falloff, "soft", false, None, None);
    let (hard, _) = runs.fit_eval(&falloff, "hard", false, Some(1.0 + falloff_spec.alpha), None);
    report(
        7,
        "hard-linear ablation",
        outcome(
            soft.all.transmission_psnr >= hard.all.transmission_psnr,
            format!(
                "falloff flash: soft {:.2} dB vs hard-linear {:.2} dB",
                soft.all.transmission_psnr, hard.all.transmission_psnr
            ),
        ),
    );

    let (r1, _) = runs.fit_eval(&desk, "repeat_a", false, None, Some(400));
    let (r2, _) = runs.fit_eval(&desk, "repeat_b", false, None, Some(400));
    let a = tree_bytes(&runs.path("repeat_a"));
    let b = tree_bytes(&runs.path("repeat_b"));
    let ra = fs::read(runs.path("repeat_a.report.json")).unwrap();
    let rb = fs::read(runs.path("repeat_b.report.json")).unwrap();
    report(
        8,
        "determinism",
        outcome(
            a == b && r1 == r2 && ra == rb,
            format!("{} checkpoint files compared byte-for-byte; reports identical: {}", a.len(), ra == rb),
        ),
    );

    let failed: Vec<_> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
