use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
dataset.sbm.block_sizes = 10,10
dataset.sbm.p_in = 0.6
dataset.sbm.p_out = 0.15
dataset.sbm.feat_dim = 5
dataset.geometric.n_per_class = 10
dataset.geometric.num_classes = 2
dataset.geometric.feat_dim = 5
dataset.geometric.k = 5
sparsifier.c_grid = 2,4
sparsifier.targets.sbm = 0.4
sparsifier.targets.geometric = 0.4
sparsifier.draws_per_level = 2
sparsifier.probes = 20
sparsifier.probe_repeats = 1
model.widths = 3
training.epochs = 3
training.hidden_width = 3
training.targets.sbm = 0.4
training.targets.geometric = 0.4
geometry.k = 3
geometry.hidden_width.sbm = 3
geometry.hidden_width.geometric = 3
geometry.train_epochs = 3
";

fn specgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specgeo")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn every_subcommand_succeeds_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for cmd in ["generate", "stability", "training", "geometry"] {
        let o = specgeo(&[cmd, "--config", &cfg, "--out", out, "--strict"]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["sbm.graph", "geometric.masks.csv", "stability.csv", "level_summary.csv", "training_sbm.csv", "geometry.json", "geometry_manifest.txt"] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }
}

#[test]
fn same_seed_gives_identical_files_and_seed_flag_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        assert_eq!(code(&specgeo(&["stability", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed])), 0);
    }
    let read = |d: &Path| std::fs::read(d.join("stability.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let manifest = std::fs::read_to_string(a.join("stability_manifest.txt")).unwrap();
    assert!(manifest.contains("config.master_seed = 3"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "sparsifier.probes = many\n");
    assert_eq!(code(&specgeo(&["stability", "--config", &bad])), 2);
    let unknown = write_config(dir.path(), "no.such.key = 1\n");
    assert_eq!(code(&specgeo(&["generate", "--config", &unknown])), 2);
    assert_eq!(code(&specgeo(&["stability", "--bogus-flag"])), 2);
}

#[test]
fn generation_failure_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = "dataset.families = sbm\ndataset.sbm.block_sizes = 30,30\ndataset.sbm.p_in = 0.01\ndataset.sbm.p_out = 0.001\n";
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("o");
    assert_eq!(code(&specgeo(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()])), 3);
}

#[test]
fn divergence_exits_with_5() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("training.epochs = 3", "training.epochs = 60")
        + "dataset.families = sbm\ntraining.lr_one_layer = 1e12\ntraining.grad_clip_norm = none\n";
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("o");
    let o = specgeo(&["training", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}
