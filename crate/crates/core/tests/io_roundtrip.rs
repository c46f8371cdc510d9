use std::fs;
use std::path::Path;

use flash_splat::composite::TransmissionMode;
use flash_splat::io::checkpoint::{read_checkpoint, write_checkpoint};
use flash_splat::io::dataset::{read_dataset, write_dataset};
use flash_splat::io::pfm::{read_pfm, write_pfm};
use flash_splat::io::ply::{read_cloud, read_points, write_cloud, write_points};
use flash_splat::io::{read_log_csv, write_log_csv};
use flash_splat::optim::LogRow;
use flash_splat::synth::{emit_dataset, random_gaussian_scene, DatasetSpec};
use flash_splat::ImageMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        width: 24,
        height: 16,
        flash_views: 3,
        noflash_views: 3,
        points_transmitted: 150,
        points_reflected: 150,
        texture_res: 32,
        ..Default::default()
    }
}

fn files_equal(a: &Path, b: &Path) {
    let mut names: Vec<_> = walk(a);
    names.sort();
    let mut other: Vec<_> = walk(b);
    other.sort();
    assert_eq!(names, other);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n}");
    }
}

fn walk(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out
}

#[test]
fn pfm_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for channels in [1, 3] {
        let m = ImageMap::from_fn(13, 7, channels, |_, _, _| rng.random_range(-2.0f32..2.0) as f64);
        let p = dir.path().join(format!("m{channels}.pfm"));
        write_pfm(&p, &m).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back, m);
        let p2 = dir.path().join("again.pfm");
        write_pfm(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }
}

#[test]
fn cloud_ply_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = random_gaussian_scene(&mut rng, 9, 1, TransmissionMode::Paired);
    for cloud in [&scene.t_noflash, &scene.beta] {
        let p = dir.path().join("c.ply");
        write_cloud(&p, cloud).unwrap();
        assert_eq!(&read_cloud(&p).unwrap(), cloud);
    }
}

#[test]
fn checkpoint_roundtrip_all_modes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [TransmissionMode::Paired, TransmissionMode::HardLinear { c: 1.7 }, TransmissionMode::Flashless] {
        let scene = random_gaussian_scene(&mut rng, 5, 0, mode);
        write_checkpoint(dir.path(), &scene, 42).unwrap();
        let (back, m) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(back, scene);
        assert_eq!(m.iteration, 42);
        assert_eq!(dir.path().join("T_F.ply").exists(), mode == TransmissionMode::Paired);
    }
}

#[test]
fn points_ply_roundtrip_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let ds = emit_dataset(&small_spec()).unwrap();
    let p = dir.path().join("n.ply");
    write_points(&p, &ds.noflash_points).unwrap();
    let once = read_points(&p).unwrap();
    assert_eq!(once.positions, ds.noflash_points.positions);
    assert_eq!(once.labels, ds.noflash_points.labels);
    for (a, b) in once.colors.iter().zip(&ds.noflash_points.colors) {
        for k in 0..3 {
            assert!((a[k].powf(1.0 / 2.2) - b[k].clamp(0.0, 1.0).powf(1.0 / 2.2)).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let p2 = dir.path().join("n2.ply");
    write_points(&p2, &once).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
}

#[test]
fn dataset_directory_rewrites_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ds = emit_dataset(&small_spec()).unwrap();
    write_dataset(a.path(), &ds).unwrap();
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back.spec, ds.spec);
    assert_eq!(back.captures.views.len(), ds.captures.views.len());
    assert_eq!(back.heldout.len(), ds.heldout.len());
    assert_eq!(back.truth.len(), ds.truth.len());
    for (x, y) in back.captures.views.iter().zip(&ds.captures.views) {
        assert_eq!(x.view_id, y.view_id);
        assert_eq!(x.flash, y.flash);
        assert_eq!(x.world_to_cam, y.world_to_cam);
        assert!(x.image.as_ref().unwrap().max_abs_diff(y.image.as_ref().unwrap()) < 1e-6);
    }
    for (x, y) in back.truth.iter().zip(&ds.truth) {
        assert_eq!(x.layers.mask, y.layers.mask);
    }
    write_dataset(b.path(), &back).unwrap();
    files_equal(a.path(), b.path());
}

#[test]
fn flashless_dataset_has_no_flash_points() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        flashless: true,
        ..small_spec()
    };
    write_dataset(dir.path(), &emit_dataset(&spec).unwrap()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert!(back.flash_points.is_none());
    assert!(back.captures.views.iter().all(|v| !v.flash));
}

#[test]
fn csv_log_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<LogRow> = (0..5)
        .map(|i| LogRow {
            iteration: i,
            view_id: format!("view_{i:03}"),
            l1: 0.1 / (i + 1) as f64,
            dssim: 1.0 / 3.0,
            linearity: -0.987654321,
            depth: 1e-7,
            total: 0.3 + i as f64,
        })
        .collect();
    let p = dir.path().join("log.csv");
    write_log_csv(&p, &rows).unwrap();
    assert_eq!(read_log_csv(&p).unwrap(), rows);
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad");
    fs::write(&p, "PF\n2 2\n-1.0\nabc").unwrap();
    assert!(read_pfm(&p).is_err());
    fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nend_header\n0.5\n").unwrap();
    assert!(read_points(&p).is_err());
    assert!(read_cloud(&p).is_err());
    assert!(read_pfm(&dir.path().join("missing.pfm")).is_err());
}
