use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tct_core::bench::{parse_curves, parse_scanpaths, parse_summary, reaggregate_curve, ScanpathRecord};
use tct_core::encoder::{save_weights, EncoderConfig, EncoderWeights, NormKind, WeightProfile};

fn tct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tct"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tct(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: PathBuf) -> String {
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn records(path: PathBuf) -> Vec<ScanpathRecord> {
    parse_scanpaths(&read(path), "scanpaths").unwrap()
}

/// Synthesizes two scenes and returns the arguments that search the first one.
fn scene(dir: &Path) -> Vec<String> {
    ok(&["synth", "--out", p(&dir.join("syn")), "--trials", "2"]);
    let manifest = read(dir.join("syn/manifest.txt"));
    let line = manifest.lines().next().unwrap();
    let field = |key: &str| {
        line.split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{key}=")))
            .unwrap()
            .to_string()
    };
    let syn = dir.join("syn");
    vec![
        "--search".into(),
        p(&syn.join(field("search"))).into(),
        "--target".into(),
        p(&syn.join(field("target"))).into(),
        "--box".into(),
        field("box"),
    ]
}

fn with(base: &[String], extra: &[&str]) -> Vec<String> {
    extra.iter().map(|s| s.to_string()).chain(base.iter().cloned()).collect()
}

fn as_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn search_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = scene(dir.path());
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&as_refs(&with(&args, &["search", "--out", p(&out)])));
    }
    for file in ["scanpath.jsonl", "effective_config.toml"] {
        assert_eq!(read(dir.path().join("a").join(file)), read(dir.path().join("b").join(file)));
    }
}

#[test]
fn vit_ablation_equals_empty_layer_sets() {
    let dir = tempfile::tempdir().unwrap();
    let args = scene(dir.path());
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, "[modulation]\ntarget_layers = \"\"\ncontext_layers = \"\"\n").unwrap();
    let vit = dir.path().join("vit");
    let empty = dir.path().join("empty");
    ok(&as_refs(&with(&args, &["search", "--out", p(&vit), "--ablation", "vit"])));
    ok(&as_refs(&with(&args, &["search", "--out", p(&empty), "--config", p(&cfg)])));
    let (a, b) = (records(vit.join("scanpath.jsonl")), records(empty.join("scanpath.jsonl")));
    assert_eq!(a[0].fixations, b[0].fixations);
    assert_eq!(a[0].found, b[0].found);
}

#[test]
fn dumped_map_argmax_is_first_fixation() {
    let dir = tempfile::tempdir().unwrap();
    let args = scene(dir.path());
    let out = dir.path().join("s");
    let maps = dir.path().join("maps");
    ok(&as_refs(&with(&args, &["search", "--out", p(&out), "--dump-map", p(&maps)])));
    let text = read(maps.join("map.txt"));
    let mut lines = text.lines();
    let width: usize = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    let values: Vec<f64> = lines.flat_map(|l| l.split(' ').map(|v| v.parse::<f64>().unwrap())).collect();
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let first = records(out.join("scanpath.jsonl"))[0].fixations[0];
    assert_eq!([best % width, best / width], first);
    assert!(maps.join("map.pgm").exists());
    assert!(maps.join("fixation-0001.pgm").exists());
}

#[test]
fn bench_tables_have_expected_cardinality_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&[
        "bench", "--out", p(&out), "--trials", "10", "--variants", "tct,target-alone,vit", "--n-max", "7",
    ]);
    let recs = records(out.join("scanpaths.jsonl"));
    assert_eq!(recs.len(), 30);
    let curves = parse_curves(&read(out.join("curves.csv")), "curves.csv").unwrap();
    assert_eq!(curves.len(), 3);
    assert!(curves.iter().all(|(_, c)| c.len() == 7));
    let summary = parse_summary(&read(out.join("summary.csv")), "summary.csv").unwrap();
    for ((name, curve), row) in curves.iter().zip(&summary) {
        assert_eq!(name, &row.variant);
        assert_eq!(row.trials, 10);
        let (_, avg) = reaggregate_curve(curve, row.trials);
        assert_eq!(avg, row.avg_fixations_within_n_max);
    }
    assert!(read(out.join("effective_config.toml")).contains("n_max = 7"));
}

#[test]
fn manifest_bench_matches_synthetic_bench() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    ok(&["synth", "--out", p(&syn), "--trials", "3", "--congruency", "incongruent"]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let common = ["--variants", "tct,context-alone,random", "--trials", "3"];
    ok(&[&["bench", "--out", p(&a), "--congruency", "incongruent"][..], &common].concat());
    ok(&[&["bench", "--out", p(&b), "--manifest", p(&syn.join("manifest.txt"))][..], &common].concat());
    assert_eq!(read(a.join("scanpaths.jsonl")), read(b.join("scanpaths.jsonl")));
    assert_eq!(read(a.join("summary.csv")), read(b.join("summary.csv")));
}

#[test]
fn jobs_do_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let common = ["--trials", "4", "--variants", "tct,random"];
    ok(&[&["bench", "--out", p(&a), "--jobs", "1"][..], &common].concat());
    ok(&[&["bench", "--out", p(&b), "--jobs", "3"][..], &common].concat());
    for f in ["scanpaths.jsonl", "curves.csv", "summary.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)));
    }
}

#[test]
fn ablate_writes_both_congruencies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    ok(&["ablate", "--out", p(&out), "--trials", "2", "--variants", "tct,context-at-early"]);
    for sub in ["congruent", "incongruent"] {
        assert_eq!(records(out.join(sub).join("scanpaths.jsonl")).len(), 2 + 2 * 4);
    }
    let table = read(out.join("congruency.csv"));
    assert!(table.starts_with("variant,congruent_avg,incongruent_avg,gap,relative_gap\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn weights_round_trip_through_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sr.toml");
    fs::write(&cfg, "[encoder]\nprofile = \"seeded-random\"\nlayers = 2\n").unwrap();
    let file = dir.path().join("w.tctw");
    ok(&["inspect-weights", "--config", p(&cfg), "--save", p(&file)]);
    let out = ok(&["inspect-weights", p(&file)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("stored profile: seeded-random"), "{text}");
    assert!(text.contains("blocks.2.mlp.fc2.bias"), "{text}");
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n\n[search]\nprofile = 3\n").unwrap();
    let out = tct(&["bench", "--config", p(&bad), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:4:"), "{err}");

    let manifest = dir.path().join("m.txt");
    fs::write(&manifest, "# header\ntrial id=a search=s.ppm\n").unwrap();
    let out = tct(&["bench", "--manifest", p(&manifest), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m.txt:2:"));

    let out = tct(&["search", "--search", "missing.ppm", "--target", "t.ppm", "--box", "0,0,1,1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(tct(&["bench", "--variants", "nope"]).status.code(), Some(1));
    assert_eq!(tct(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tct(&["--help"]).status.code(), Some(0));
}

#[test]
fn broken_internal_invariant_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = EncoderConfig {
        channels: 3,
        patch_size: 8,
        hidden_dim: 8,
        heads: 1,
        layers: 2,
        mlp_dim: 4,
        use_position_embeddings: false,
        profile: WeightProfile::SeededRandom,
        norm: NormKind::Identity,
    };
    let mut parts = EncoderWeights::seeded_random(&config, 1, None).unwrap().into_parts();
    for layer in &mut parts.layers {
        layer.qkv = layer.qkv.scale(1e200);
        layer.out = layer.out.scale(1e200);
    }
    let file = dir.path().join("huge.tctw");
    save_weights(&EncoderWeights::new(parts).unwrap(), &file).unwrap();
    let cfg = dir.path().join("huge.toml");
    fs::write(&cfg, format!("[encoder]\nprofile = \"file\"\nweights = {:?}\n", p(&file))).unwrap();
    let args = scene(dir.path());
    let out = tct(&as_refs(&with(&args, &["search", "--config", p(&cfg), "--out", p(&dir.path().join("o"))])));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
