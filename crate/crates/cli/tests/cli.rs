use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use priorfield::embedding_diffusion::read_pairs;
use priorfield::{
    csg_combine, make_primitive_sdf, CsgOp, FieldConfig, Lattice, PrimitiveSpec, SdfGrid, VoxelField,
};
use serde_json::Value;

/// Tests run one at a time so the timed smoke run measures an idle machine.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn priorfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorfield"))
        .args(args)
        .env_remove("PRIORFIELD_GUIDANCE_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = priorfield(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn decode_png(path: &Path) -> (u32, u32, Vec<u8>) {
    let dec = png::Decoder::new(fs::File::open(path).unwrap());
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

/// Vertices and 0-based faces of an OBJ file.
fn parse_obj(path: &Path) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let (mut v, mut f) = (Vec::new(), Vec::new());
    for line in fs::read_to_string(path).unwrap().lines() {
        let parts: Vec<&str> = line.split(' ').collect();
        match parts[0] {
            "v" => v.push([1, 2, 3].map(|i| parts[i].parse().unwrap())),
            "f" => f.push([1, 2, 3].map(|i| parts[i].parse::<usize>().unwrap() - 1)),
            other => panic!("unexpected OBJ record {other:?}"),
        }
    }
    (v, f)
}

fn watertight(faces: &[[usize; 3]]) -> bool {
    let mut uses: HashMap<(usize, usize), u32> = HashMap::new();
    for t in faces {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *uses.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    !faces.is_empty() && uses.values().all(|&c| c == 2)
}

fn bbox(v: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    v.iter().fold(([f64::MAX; 3], [f64::MIN; 3]), |(lo, hi), p| {
        ([0, 1, 2].map(|i| lo[i].min(p[i])), [0, 1, 2].map(|i| hi[i].max(p[i])))
    })
}

fn sphere_prior(dir: &Path, name: &str, dims: usize, radius: f64) -> PathBuf {
    let path = dir.join(name);
    ok(&["make-prior", "--shape", "sphere", "--radius", &radius.to_string(), "--dims", &dims.to_string(), "--out", p(&path)]);
    path
}

#[test]
fn help_exits_zero_everywhere() {
    let _serial = serial();
    for args in [
        vec!["--help"],
        vec!["make-prior", "--help"],
        vec!["optimize", "--help"],
        vec!["render", "--help"],
        vec!["extract-mesh", "--help"],
        vec!["diffusion", "--help"],
        vec!["diffusion", "train", "--help"],
        vec!["diffusion", "sample", "--help"],
    ] {
        let out = ok(&args);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{args:?}");
    }
}

#[test]
fn make_prior_matches_the_library() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let path = sphere_prior(dir.path(), "s.sdfg", 64, 0.5);
    let spec = PrimitiveSpec::Sphere { center: [0.0; 3], radius: 0.5 };
    let expect = make_primitive_sdf(&spec, [64; 3], [-1.0; 3], 2.0 / 64.0).unwrap();
    let got = SdfGrid::load(&path).unwrap();
    assert_eq!(got.lattice(), expect.lattice());
    let same = got.values().iter().zip(expect.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same);

    let boxed = dir.path().join("b.sdfg");
    ok(&["make-prior", "--shape", "box", "--center", "0.3,0,0", "--half-extents", "0.2,0.4,0.2", "--dims", "64", "--out", p(&boxed)]);
    let union = dir.path().join("u.sdfg");
    ok(&["make-prior", "--op", "union", "--inputs", p(&path), p(&boxed), "--out", p(&union)]);
    let expect = csg_combine(&SdfGrid::load(&path).unwrap(), &SdfGrid::load(&boxed).unwrap(), CsgOp::Union).unwrap();
    assert_eq!(SdfGrid::load(&union).unwrap(), expect);
}

#[test]
fn usage_errors_exit_two() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let out = priorfield(&["make-prior", "--shape", "sphere"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    let out = priorfield(&["make-prior", "--out", p(&dir.path().join("x.sdfg"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = priorfield(&["make-prior", "--shape", "sphere", "--radius", "-1", "--out", p(&dir.path().join("x.sdfg"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = priorfield(&["render", "--input", p(&dir.path().join("missing.vfld")), "--out", p(&dir.path().join("x.png"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = priorfield(&["optimize", "--guidance", "remote", "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--prompt"));
}

#[test]
fn render_is_deterministic_and_sees_asymmetry() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lat = Lattice::centered_cube(16, 1.0).unwrap();
    let empty = d.join("empty.vfld");
    VoxelField::init_transparent(lat, 1e-6, &FieldConfig::default()).unwrap().save(&empty).unwrap();
    let white = d.join("white.png");
    ok(&["render", "--input", p(&empty), "--out", p(&white), "--width", "20", "--height", "12", "--samples", "32"]);
    let (w, h, px) = decode_png(&white);
    assert_eq!((w, h), (20, 12));
    assert!(px.iter().all(|&c| c == 255));

    // A sphere with a box sticking out along +x.
    let sphere = sphere_prior(d, "s.sdfg", 24, 0.4);
    let boxed = d.join("b.sdfg");
    ok(&["make-prior", "--shape", "box", "--center", "0.5,0,0", "--half-extents", "0.35,0.15,0.15", "--dims", "24", "--out", p(&boxed)]);
    let shape = d.join("shape.sdfg");
    ok(&["make-prior", "--op", "union", "--inputs", p(&sphere), p(&boxed), "--out", p(&shape)]);
    let render = |az: &str, name: &str| {
        let out = d.join(name);
        ok(&["render", "--input", p(&shape), "--out", p(&out), "--azimuth", az, "--elevation", "0", "--width", "32", "--height", "32", "--samples", "64"]);
        fs::read(out).unwrap()
    };
    let a = render("90", "a.png");
    assert_eq!(a, render("90", "a2.png"));
    let b = render("270", "b.png");
    assert_ne!(decode_png(&d.join("a.png")).2, decode_png(&d.join("b.png")).2);
    assert_ne!(a, b);
}

#[test]
fn extract_mesh_outputs() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sphere = sphere_prior(d, "s.sdfg", 64, 0.6);
    let obj = d.join("s.obj");
    ok(&["extract-mesh", "--input", p(&sphere), "--out", p(&obj)]);
    let (v, f) = parse_obj(&obj);
    assert!(!v.is_empty() && watertight(&f));
    let s = 2.0 / 64.0;
    for x in &v {
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        assert!((r - 0.6).abs() < s * 3f64.sqrt(), "radius {r}");
    }

    let lat = Lattice::centered_cube(8, 1.0).unwrap();
    let flat = d.join("flat.sdfg");
    SdfGrid::new(lat, vec![1.0; lat.len()]).unwrap().save(&flat).unwrap();
    let empty = d.join("flat.obj");
    let out = ok(&["extract-mesh", "--input", p(&flat), "--out", p(&empty)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(fs::read(&empty).unwrap(), b"");

    // Opacity surfaces of a prior-initialized field nest by iso level.
    let coarse = sphere_prior(d, "c.sdfg", 32, 0.5);
    let field = d.join("c.vfld");
    let sdf = SdfGrid::load(&coarse).unwrap();
    VoxelField::init_from_prior(&sdf, 0.05, 1e-6, &FieldConfig::default()).unwrap().save(&field).unwrap();
    let meshes: Vec<_> = ["0.25", "0.5"]
        .iter()
        .map(|iso| {
            let out = d.join(format!("iso{iso}.obj"));
            ok(&["extract-mesh", "--input", p(&field), "--out", p(&out), "--resolution", "48", "--iso", iso]);
            parse_obj(&out)
        })
        .collect();
    let (outer, inner) = (bbox(&meshes[0].0), bbox(&meshes[1].0));
    for a in 0..3 {
        assert!(outer.0[a] < inner.0[a] && inner.1[a] < outer.1[a]);
    }
    assert!(watertight(&meshes[1].1));
}

/// Small photometric configuration for quick runs.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "steps": 200,
        "seed": 3,
        "lr_grid": 0.3,
        "lr_mlp": 0.01,
        "checkpoint_every": 0,
        "camera": {"width": 24, "height": 24, "radius": 4.0, "fov_y_deg": 40.0},
        "render": {"samples_per_ray": 48, "near": 2.2, "far": 5.8},
        "weights": {"w_guidance": 1.0, "w_transmittance": 0.0, "w_prior": 0.0, "tau_target": 0.88},
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn totals(metrics: &Path) -> Vec<(u64, f64)> {
    fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            (v["step"].as_u64().unwrap(), v["total"].as_f64().unwrap())
        })
        .collect()
}

#[test]
fn photometric_smoke_run() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let target = sphere_prior(d, "t.sdfg", 16, 0.5);
    let cfg = small_config(d);
    let run = d.join("run");
    let t0 = Instant::now();
    let args = ["optimize", "--guidance", "photometric", "--target", p(&target), "--views", "4", "--dims", "16", "--config", p(&cfg), "--snapshot-every", "100", "--out", p(&run)];
    ok(&args);
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s");

    let curve = totals(&run.join("metrics.jsonl"));
    assert_eq!(curve.len(), 200);
    assert_eq!(curve.first().unwrap().0, 0);
    let (first, last) = (curve[0].1, curve[199].1);
    assert!(last < first, "loss {first} -> {last}");

    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["steps_completed"], 200);
    assert_eq!(manifest["config"]["steps"], 200);
    assert!(manifest["started_at"].as_f64().unwrap() <= manifest["finished_at"].as_f64().unwrap());
    let snaps: Vec<&str> = manifest["snapshots"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    assert_eq!(snaps.len(), 8);
    for az in ["000", "090", "180", "270"] {
        assert!(snaps.iter().any(|s| s.ends_with(&format!("step_000200_az{az}.png"))));
        assert!(Path::new(snaps.iter().find(|s| s.contains("step_000100_")).unwrap()).exists());
    }
    assert!(run.join("field.vfld").exists() && run.join("field.adam").exists());

    // Same seed, same bytes.
    let again = d.join("again");
    let mut args2 = args.to_vec();
    *args2.last_mut().unwrap() = p(&again);
    ok(&args2);
    for f in ["field.vfld", "field.adam", "metrics.jsonl", "snapshots/step_000200_az090.png"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_steps_and_resume() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let target = sphere_prior(d, "t.sdfg", 12, 0.5);
    let prior = sphere_prior(d, "p.sdfg", 12, 0.3);
    let cfg = small_config(d);
    let base = |out: &Path, steps: &str| {
        vec![
            "optimize".to_string(), "--guidance".into(), "photometric".into(), "--target".into(), p(&target).into(),
            "--views".into(), "4".into(), "--prior".into(), p(&prior).into(), "--config".into(), p(&cfg).into(),
            "--snapshot-every".into(), "0".into(), "--steps".into(), steps.into(), "--out".into(), p(out).into(),
        ]
    };
    let call = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let zero = d.join("zero");
    call(base(&zero, "0"));
    let init = VoxelField::init_from_prior(
        &SdfGrid::load(&prior).unwrap(),
        0.05,
        1e-6,
        &FieldConfig { seed: 3, ..FieldConfig::default() },
    )
    .unwrap();
    let mut bytes = Vec::new();
    init.write_to(&mut bytes).unwrap();
    assert_eq!(fs::read(zero.join("field.vfld")).unwrap(), bytes);
    assert_eq!(read_json(&zero.join("manifest.json"))["steps_completed"], 0);

    let straight = d.join("straight");
    call(base(&straight, "20"));
    let resumed = d.join("resumed");
    call(base(&resumed, "12"));
    let mut args = base(&resumed, "20");
    args.push("--resume".into());
    call(args);
    let steps: Vec<u64> = totals(&resumed.join("metrics.jsonl")).iter().map(|s| s.0).collect();
    assert_eq!(steps, (0..20).collect::<Vec<_>>());
    let manifest = read_json(&resumed.join("manifest.json"));
    assert_eq!(manifest["resumed_from_step"], 12);
    assert_eq!(manifest["steps_completed"], 20);
    assert_eq!(fs::read(resumed.join("field.vfld")).unwrap(), fs::read(straight.join("field.vfld")).unwrap());
    assert_eq!(fs::read(resumed.join("metrics.jsonl")).unwrap(), fs::read(straight.join("metrics.jsonl")).unwrap());
}

#[test]
fn remote_guidance_exit_codes() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let prior = sphere_prior(d, "p.sdfg", 12, 0.4);
    let cfg = small_config(d);
    let stub = d.join("stub");
    ok(&["optimize", "--guidance", "remote", "--stub", "--prompt", "a chair", "--prior", p(&prior), "--config", p(&cfg), "--steps", "3", "--snapshot-every", "0", "--out", p(&stub)]);
    let manifest = read_json(&stub.join("manifest.json"));
    assert_eq!(manifest["guidance"]["kind"], "remote");
    assert_eq!(manifest["steps_completed"], 3);

    // Nothing listens on port 9; the endpoint comes from the environment.
    let down = d.join("down");
    let out = Command::new(env!("CARGO_BIN_EXE_priorfield"))
        .args(["optimize", "--guidance", "remote", "--prompt", "a chair", "--prior", p(&prior), "--config", p(&cfg), "--steps", "3", "--out", p(&down)])
        .env("PRIORFIELD_GUIDANCE_ENDPOINT", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(down.join("field.vfld").exists());
    assert_eq!(read_json(&down.join("manifest.json"))["status"], "failed");

}

#[test]
fn overflow_exits_four() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let target = sphere_prior(d, "t.sdfg", 12, 0.5);
    let cfg = small_config(d);
    let blown = d.join("blown");
    let out = priorfield(&["optimize", "--guidance", "photometric", "--target", p(&target), "--views", "2", "--dims", "12", "--config", p(&cfg), "--steps", "3", "--lr-grid", "1e300", "--out", p(&blown)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&blown.join("manifest.json"))["status"], "failed");
}

#[test]
fn diffusion_train_and_sample() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("toy.edif");
    let metrics = d.join("loss.jsonl");
    ok(&["diffusion", "train", "--generator", "gaussian_mixture", "--steps", "2000", "--out", p(&model), "--metrics", p(&metrics)]);
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 2000);
    let manifest = read_json(&Path::new(&format!("{}.manifest.json", p(&model))).to_path_buf());
    assert_eq!(manifest["preset"], "desk");
    assert_eq!(manifest["steps_completed"], 2000);

    let dump = d.join("samples.eprs");
    let out = ok(&["diffusion", "sample", "--model", p(&model), "--out", p(&dump), "--count", "2000", "--seed", "5", "--reference", "gaussian_mixture"]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["count"], 4000);
    for entry in summary["per_condition"].as_array().unwrap() {
        let sw = entry["sliced_wasserstein"].as_f64().unwrap();
        assert!(sw < 0.1, "sliced Wasserstein {sw} for {}", entry["condition"]);
    }
    let pairs = read_pairs(&mut fs::File::open(&dump).unwrap()).unwrap();
    assert_eq!(pairs.len(), 4000);

    let again = d.join("again.eprs");
    ok(&["diffusion", "sample", "--model", p(&model), "--out", p(&again), "--count", "2000", "--seed", "5", "--reference", "gaussian_mixture"]);
    assert_eq!(fs::read(&dump).unwrap(), fs::read(&again).unwrap());

    let one = d.join("one.eprs");
    ok(&["diffusion", "sample", "--model", p(&model), "--out", p(&one), "--count", "10", "--condition", "0,1"]);
    let pairs = read_pairs(&mut fs::File::open(&one).unwrap()).unwrap();
    assert!(pairs.iter().all(|p| p.condition == vec![0.0, 1.0]));
    assert_eq!(priorfield(&["diffusion", "sample", "--model", p(&model), "--out", p(&one), "--label", "7"]).status.code(), Some(2));
}

#[test]
fn diffusion_presets_and_bad_data() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("full.edif");
    ok(&["diffusion", "train", "--generator", "rings", "--pairs", "64", "--preset", "full", "--steps", "0", "--out", p(&model), "--metrics", p(&d.join("m.jsonl"))]);
    let m = read_json(Path::new(&format!("{}.manifest.json", p(&model))));
    assert_eq!(m["preset"], "full");
    assert_eq!(m["config"]["timesteps"], 100);
    assert_eq!(m["config"]["lr"], 1.1e-4);
    assert_eq!(m["config"]["clip_norm"], 0.5);
    assert_eq!(m["config"]["batch_size"], 1024);
    assert!(model.exists());

    let bad = d.join("bad.eprs");
    fs::write(&bad, b"EPRX\x01\x00\x00\x00").unwrap();
    let out = priorfield(&["diffusion", "train", "--data", p(&bad), "--out", p(&d.join("x.edif"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = d.join("bad.json");
    fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    let out = priorfield(&["diffusion", "train", "--generator", "rings", "--config", p(&cfg), "--out", p(&d.join("y.edif"))]);
    assert_eq!(out.status.code(), Some(2));
}
