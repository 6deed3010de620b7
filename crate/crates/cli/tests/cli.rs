use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spine_cascade::autodiff::{AdamConfig, Tensor};
use spine_cascade::nets::{load_checkpoint, save_checkpoint, NetConfig, NetKind, UNet};
use spine_cascade::phantom::{read_dataset_manifest, read_phantom, DATASET_FILE};
use spine_cascade::pipeline::{read_report, write_bundle, CascadeResult, VertebraInstance, REPORT_FILE};
use spine_cascade::volume::{write_volume, Geometry, LabelVolume, Volume};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spine-cascade")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: usize, seed: u64) -> Output {
    run(&["phantom-gen", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", p(dir)])
}

const TINY_TRAIN: &str = r#"
iterations = 1
dataset = "data"
checkpoint = "ckpt/net.json"

[net]
in_channels = 1
out_channels = 4
depth = 1
base_width = 2
width_growth = 2

[augment]
crop_dims = [16, 16, 16]
"#;

fn tiny_net(kind: NetKind) -> NetConfig {
    let (i, o) = if kind == NetKind::Semantic { (1, 4) } else { (2, 1) };
    NetConfig { in_channels: i, out_channels: o, depth: 1, base_width: 2, width_growth: 2 }
}

/// A net whose output is the constant `bias` everywhere.
fn constant_checkpoint(path: &Path, kind: NetKind, bias: &[f32]) {
    let mut net = UNet::new(tiny_net(kind), 0).unwrap();
    for prm in net.params_mut() {
        if prm.name == "head.weight" {
            prm.value = Tensor::zeros(prm.value.shape().to_vec());
        } else if prm.name == "head.bias" {
            prm.value = Tensor::new(vec![bias.len()], bias.to_vec());
        }
    }
    save_checkpoint(&net, kind, &AdamConfig::default(), path).unwrap();
}

#[test]
fn phantom_gen_writes_cases_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&gen(&a, 3, 4)), 0);
    assert_eq!(code(&gen(&b, 3, 4)), 0);
    let m = read_dataset_manifest(&a).unwrap();
    assert_eq!(m.cases.len(), 3);
    for c in &m.cases {
        assert!(a.join(c).is_dir());
        for f in ["ct.json", "classes.json", "instances.json", "truth.json", "centroids.json"] {
            assert_eq!(fs::read(a.join(c).join(f)).unwrap(), fs::read(b.join(c).join(f)).unwrap(), "{c}/{f}");
        }
    }
    assert_eq!(fs::read(a.join(DATASET_FILE)).unwrap(), fs::read(b.join(DATASET_FILE)).unwrap());
}

#[test]
fn infeasible_spec_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.toml");
    fs::write(&cfg, "ranges = { min_len = 6, max_len = 9 }\n[phantom]\ndims = [12, 12, 96]\n").unwrap();
    let o = run(&["phantom-gen", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("needs"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["phantom-gen"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "iteratons = 3\n").unwrap();
    assert_eq!(code(&run(&["train-stage1", "--config", p(&cfg)])), 2);
    fs::write(&cfg, "lr = -1.0\n").unwrap();
    assert_eq!(code(&run(&["train-stage1", "--config", p(&cfg)])), 2);
}

fn train_once(dir: &Path, stage: &str, config: &str, out: Option<&Path>) -> Output {
    let cfg = dir.join(format!("{stage}.toml"));
    fs::write(&cfg, config).unwrap();
    let mut args = vec![stage, "--config", p(&cfg), "--seed", "3"];
    if let Some(o) = out {
        args.extend(["--out", p(o)]);
    }
    run(&args)
}

#[test]
fn one_iteration_training_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(&dir.path().join("data"), 2, 1)), 0);
    let o = train_once(dir.path(), "train-stage1", TINY_TRAIN, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // paths in the config resolve against its directory
    let ckpt = dir.path().join("ckpt/net.json");
    let (net, kind, _) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(kind, NetKind::Semantic);
    assert_eq!(net.config(), &tiny_net(NetKind::Semantic));
    let csv = fs::read_to_string(dir.path().join("ckpt/net.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("iteration,loss\n1,"));

    let again = dir.path().join("again.json");
    assert_eq!(code(&train_once(dir.path(), "train-stage1", TINY_TRAIN, Some(&again))), 0);
    // manifests differ only in the payload file name
    let manifest = |f: &Path, bin: &str| fs::read_to_string(f).unwrap().replace(bin, "PAYLOAD");
    assert_eq!(manifest(&ckpt, "net.bin"), manifest(&again, "again.bin"));
    assert_eq!(fs::read(dir.path().join("ckpt/net.bin")).unwrap(), fs::read(dir.path().join("again.bin")).unwrap());

    let stage2 = TINY_TRAIN.replace("in_channels = 1", "in_channels = 2").replace("out_channels = 4", "out_channels = 1");
    let s2 = dir.path().join("s2.json");
    let o = train_once(dir.path(), "train-stage2", &stage2, Some(&s2));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_checkpoint(&s2).unwrap().1, NetKind::Instance);
    let s2b = dir.path().join("s2b.json");
    assert_eq!(code(&train_once(dir.path(), "train-stage2", &stage2, Some(&s2b))), 0);
    assert_eq!(fs::read(dir.path().join("s2.bin")).unwrap(), fs::read(dir.path().join("s2b.bin")).unwrap());
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_once(dir.path(), "train-stage1", TINY_TRAIN, None)), 3);
}

fn nets(dir: &Path, stage1_bias: &[f32], stage2_bias: f32) -> (PathBuf, PathBuf) {
    let s1 = dir.join("s1.json");
    let s2 = dir.join("s2.json");
    constant_checkpoint(&s1, NetKind::Semantic, stage1_bias);
    constant_checkpoint(&s2, NetKind::Instance, &[stage2_bias]);
    (s1, s2)
}

#[test]
fn air_volume_exits_with_no_spine_code() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("air.json");
    write_volume(&Volume::filled(Geometry::unit([16, 16, 16]), -1000.0), &vol).unwrap();
    let (s1, s2) = nets(dir.path(), &[5.0, 0.0, 0.0, 0.0], -5.0);
    let o = run(&["infer", "--volume", p(&vol), "--stage1", p(&s1), "--stage2", p(&s2), "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no spine"));
}

#[test]
fn infer_writes_bundle_and_slices() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("ct.json");
    write_volume(&Volume::filled(Geometry::unit([16, 16, 32]), 400.0), &vol).unwrap();
    // every voxel thoracic; the instance net accepts its whole window
    let (s1, s2) = nets(dir.path(), &[0.0, 0.0, 5.0, 0.0], 5.0);
    let cfg = dir.path().join("cascade.toml");
    fs::write(&cfg, "stage1_window = [16, 16, 16]\n[stage2]\npatch_dims = [16, 16, 8]\n").unwrap();
    let out = dir.path().join("r");
    let args = ["infer", "--volume", p(&vol), "--stage1", p(&s1), "--stage2", p(&s2), "--config", p(&cfg), "--out", p(&out), "--dump-slices"];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["stage1.json", "instances.json", "report.json", "axial_mid.pgm", "sagittal_mid.pgm"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = read_report(&out.join(REPORT_FILE)).unwrap();
    assert!(!report.instances.is_empty());
    assert!(report.instances.iter().all(|i| i.class.name() == "thoracic"));
    let pgm = fs::read(out.join("sagittal_mid.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 32\n255\n"));
    assert_eq!(pgm.len(), 13 + 16 * 32);
    // a wrong checkpoint kind is a data error
    let swapped = ["infer", "--volume", p(&vol), "--stage1", p(&s2), "--stage2", p(&s1), "--out", p(&out)];
    assert_eq!(code(&run(&swapped)), 3);
}

/// Bundle reproducing a phantom's truth, optionally without its last vertebra.
fn truth_bundle(case: &Path, out: &Path, drop_last: bool) -> usize {
    let t = read_phantom(case).unwrap();
    let mut n = t.num_instances();
    let mut ids = t.instance_labels.clone();
    if drop_last {
        ids = ids.map(|l| if l as usize == n { 0 } else { l });
        n -= 1;
    }
    let instances = (0..n)
        .map(|i| VertebraInstance {
            id: i as u16 + 1,
            class: t.anatomical[i].class(),
            anatomical: Some(t.anatomical[i]),
            anchored: true,
            truncated: t.truncated[i],
            centroid_mm: t.centroids_mm[i],
            voxels: 0,
        })
        .collect();
    let r = CascadeResult { instances, stage1_labels: t.class_labels.clone(), instance_labels: ids, warnings: vec![] };
    write_bundle(&r, out).unwrap();
    t.num_instances()
}

#[test]
fn eval_of_truth_is_perfect_and_pools_cases() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, 2, 2)), 0);
    let (c0, c1) = (data.join("case_0000"), data.join("case_0001"));
    let (p0, p1) = (dir.path().join("p0"), dir.path().join("p1"));
    let n0 = truth_bundle(&c0, &p0, false);
    let out = dir.path().join("eval1");
    let o = run(&["eval", "--pred", p(&p0), "--truth", p(&c0), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seg = fs::read_to_string(out.join("segmentation.csv")).unwrap();
    assert_eq!(seg.lines().nth(1), Some("case_0000,1.0000,0.0000,0.0000,1.0000"));
    let loc = fs::read_to_string(out.join("localization.csv")).unwrap();
    assert_eq!(loc.lines().nth(1), Some(format!("all,0.0000,0.0000,1.0000,{n0}").as_str()));

    let n1 = truth_bundle(&c1, &p1, true);
    let out = dir.path().join("eval2");
    let o = run(&["eval", "--pred", p(&p0), "--pred", p(&p1), "--truth", p(&c0), "--truth", p(&c1), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let loc = fs::read_to_string(out.join("localization.csv")).unwrap();
    let all: Vec<&str> = loc.lines().nth(1).unwrap().split(',').collect();
    let pooled = (n0 + n1 - 1) as f64 / (n0 + n1) as f64;
    assert_eq!(all[3], format!("{pooled:.4}"));
    assert_eq!(all[4], (n0 + n1).to_string());
    let seg = fs::read_to_string(out.join("segmentation.csv")).unwrap();
    assert_eq!(seg.lines().count(), 3);

    let o = run(&["eval", "--pred", p(&p0), "--truth", p(&c0), "--truth", p(&c1), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn eval_rejects_geometry_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, 1, 3)), 0);
    let pred = dir.path().join("p");
    let g = Geometry::unit([4, 4, 4]);
    let r = CascadeResult {
        instances: vec![],
        stage1_labels: LabelVolume::filled(g.clone(), 0),
        instance_labels: LabelVolume::filled(g, 0),
        warnings: vec![],
    };
    write_bundle(&r, &pred).unwrap();
    let o = run(&["eval", "--pred", p(&pred), "--truth", p(&data.join("case_0000")), "--out", p(&dir.path().join("e"))]);
    assert_eq!(code(&o), 3);
}
