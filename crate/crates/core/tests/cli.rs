use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[data.synthetic]
images = 160

[train]
epochs = 2
triplets_per_epoch = 48
learning_rate = 1e-3

[eval]
triplets = 100
"#;

fn asen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asen"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = asen(dir, args);
    assert!(
        out.status.success(),
        "asen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    let c = ["--config", "small.toml"];

    let stdout = ok(dir, &[&c[..], &["--out", "raw", "gen-data"]].concat());
    assert!(stdout.contains("# resolved configuration (seed 5)"));
    assert!(stdout.contains("wrote 160 images"));
    assert_eq!(fs::read_dir(dir.join("raw/images")).unwrap().count(), 160);

    ok(
        dir,
        &[&c[..], &["--out", "data", "split", "--data", "raw"]].concat(),
    );
    let manifest = fs::read_to_string(dir.join("data/manifest.txt")).unwrap();
    assert!(manifest.starts_with("@source raster\n@attribute top_left "));
    assert_eq!(manifest.matches(" split=train").count(), 128);
    assert_eq!(manifest.matches(" split=test").count(), 16);

    for variant in ["full", "triplet_plain"] {
        let stdout = ok(
            dir,
            &[
                &c[..],
                &[
                    "--variant",
                    variant,
                    "--out",
                    "run",
                    "train",
                    "--data",
                    "data",
                ],
            ]
            .concat(),
        );
        assert!(stdout.contains("best epoch"));
        let log = fs::read_to_string(dir.join(format!("run/{variant}.train_log.tsv"))).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], "epoch\tmean_loss\tlr\tval_metric");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1\t"));
    }

    let ck = ["--checkpoint", "run/full.ckpt"];
    ok(
        dir,
        &[
            &c[..],
            &["--out", "eval", "eval-map", "--data", "data"],
            &ck[..],
        ]
        .concat(),
    );
    let table = fs::read_to_string(dir.join("eval/map_full.tsv")).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "model\ttop_left\ttop_right\tbottom_left\tbottom_right\toverall"
    );
    assert!(table.lines().nth(1).unwrap().starts_with("full\t"));

    ok(
        dir,
        &[
            &c[..],
            &["--out", "eval", "eval-triplet", "--data", "data"],
            &ck[..],
        ]
        .concat(),
    );
    let acc = fs::read_to_string(dir.join("eval/triplet_full.tsv")).unwrap();
    assert!(acc.starts_with("model\taccuracy\nfull\t"));

    let stdout = ok(
        dir,
        &[
            &c[..],
            &[
                "--attrs", "top_left", "--out", "eval", "rerank", "--data", "data",
            ],
            &["--initial", "run/triplet_plain.ckpt"],
            &ck[..],
        ]
        .concat(),
    );
    assert!(stdout.contains("mean top-"));
    let rerank = fs::read_to_string(dir.join("eval/rerank.tsv")).unwrap();
    assert!(rerank.starts_with("query\tap_before\tap_after\tinitial\treranked\n"));

    ok(
        dir,
        &[
            &c[..],
            &[
                "--out",
                "eval",
                "export-attention",
                "--data",
                "data",
                "--limit",
                "3",
            ],
            &ck[..],
        ]
        .concat(),
    );
    let files: Vec<_> = fs::read_dir(dir.join("eval/attention")).unwrap().collect();
    assert_eq!(files.len(), 3);
    let text = fs::read_to_string(files[0].as_ref().unwrap().path()).unwrap();
    let blocks: Vec<&str> = text
        .lines()
        .filter(|l| l.split(' ').count() == 4 && l.starts_with("img_"))
        .collect();
    assert_eq!(blocks.len(), 4);
    let weights: f64 = text
        .lines()
        .skip(1)
        .take(4)
        .flat_map(|l| l.split(' ').map(|v| v.parse::<f64>().unwrap()))
        .sum();
    assert!((weights - 1.0).abs() < 1e-6);
}

#[test]
fn checkpoint_from_another_variant_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    let c = ["--config", "small.toml"];
    ok(dir, &[&c[..], &["--out", "raw", "gen-data"]].concat());
    ok(
        dir,
        &[&c[..], &["--out", "data", "split", "--data", "raw"]].concat(),
    );
    ok(
        dir,
        &[
            &c[..],
            &[
                "--variant",
                "csn",
                "--out",
                "run",
                "train",
                "--data",
                "data",
            ],
        ]
        .concat(),
    );
    let out = asen(
        dir,
        &[
            &c[..],
            &["eval-map", "--data", "data", "--checkpoint", "run/csn.ckpt"],
        ]
        .concat(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different architecture"));
}

#[test]
fn grad_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["grad-check"]);
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    assert_eq!(asen(dir, &["--bogus"]).status.code(), Some(1));
    assert_eq!(asen(dir, &["--help"]).status.code(), Some(0));

    // unknown key: parse error names its line
    fs::write(
        dir.join("bad.toml"),
        "seed = 1\n\n[train]\nlearning_rat = 1.0\n",
    )
    .unwrap();
    let out = asen(dir, &["--config", "bad.toml", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));

    // missing data directory
    let out = asen(dir, &["split", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));

    // damaged raster
    fs::write(dir.join("tiny.toml"), "[data.synthetic]\nimages = 20\n").unwrap();
    ok(dir, &["--config", "tiny.toml", "--out", "raw", "gen-data"]);
    fs::write(dir.join("raw/images/img_00.ppm"), b"P6\n32 32\n255\n\x00").unwrap();
    let out = asen(dir, &["--config", "tiny.toml", "split", "--data", "raw"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    // invalid configuration value
    fs::write(dir.join("neg.toml"), "[data.synthetic]\nnoise = 2.0\n").unwrap();
    assert_eq!(
        asen(dir, &["--config", "neg.toml", "gen-data"])
            .status
            .code(),
        Some(1)
    );
}
