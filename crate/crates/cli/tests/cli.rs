use std::path::Path;
use std::process::{Command, Stdio};

use rmac_cli::{exit_status, run, EXIT_FATAL, EXIT_OK, EXIT_PARTIAL};

fn rmac(args: &[&str]) -> anyhow::Result<rmac_cli::commands::Outcome> {
    run(std::iter::once("rmac").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (images, tensors, models) = (
        root.join("images"),
        root.join("tensors"),
        root.join("models"),
    );
    let (gallery, gt, eval) = (
        root.join("gallery.rmds"),
        root.join("gt.csv"),
        root.join("eval"),
    );
    let common = [
        "--dim",
        "16",
        "--k",
        "16",
        "--stub-channels",
        "16",
        "--jobs",
        "2",
    ];

    rmac(&[
        "synth",
        "--out",
        s(root),
        "--groups",
        "4",
        "--per-group",
        "3",
        "--size",
        "96",
    ])
    .unwrap();
    assert!(gt.is_file());
    let r = rmac(
        &[
            &["extract", "--images", s(&images), "--out", s(&tensors)][..],
            &common,
        ]
        .concat(),
    );
    assert_eq!(exit_status(&r), EXIT_OK);
    assert!(tensors.join("g000_v00").join("320.rmtf").is_file());
    let manifest = std::fs::read_to_string(tensors.join("extract.manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\tok")).count(), 12);
    let stamp = std::fs::metadata(tensors.join("g000_v00").join("160.rmtf"))
        .unwrap()
        .modified()
        .unwrap();

    // a rerun rewrites nothing and reproduces the manifest
    rmac(
        &[
            &["extract", "--images", s(&images), "--out", s(&tensors)][..],
            &common,
        ]
        .concat(),
    )
    .unwrap();
    let rerun = std::fs::read_to_string(tensors.join("extract.manifest.tsv")).unwrap();
    assert_eq!(rerun, manifest);
    let after = std::fs::metadata(tensors.join("g000_v00").join("160.rmtf"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(stamp, after);

    rmac(
        &[
            &["fit", "--tensors", s(&tensors), "--out", s(&models)][..],
            &common,
        ]
        .concat(),
    )
    .unwrap();
    for f in [
        "whitening.rmpw",
        "dictionary.rmdc",
        "fit.conf",
        "inertia.tsv",
        "sample.txt",
    ] {
        assert!(models.join(f).is_file(), "{f} missing");
    }
    let fitted = std::fs::read_to_string(models.join("fit.conf")).unwrap();
    assert!(fitted.lines().any(|l| l.starts_with("config_hash = ")));

    rmac(
        &[
            &[
                "embed",
                "--tensors",
                s(&tensors),
                "--models",
                s(&models),
                "--out",
                s(&gallery),
            ][..],
            &common,
        ]
        .concat(),
    )
    .unwrap();
    let set = rmac_core::tensor_io::read_descriptors(&gallery).unwrap();
    assert_eq!((set.len(), set.dim()), (12, 16));

    // refuses to clobber without --force
    let again = rmac(
        &[
            &[
                "embed",
                "--tensors",
                s(&tensors),
                "--models",
                s(&models),
                "--out",
                s(&gallery),
            ][..],
            &common,
        ]
        .concat(),
    );
    assert_eq!(exit_status(&again), EXIT_FATAL);

    // models fit with one pooling cannot be used with another
    let mismatch = rmac(
        &[
            &[
                "embed",
                "--tensors",
                s(&tensors),
                "--models",
                s(&models),
                "--out",
                s(&root.join("x.rmds")),
                "--pooling",
                "mac",
            ][..],
            &common,
        ]
        .concat(),
    );
    assert!(format!("{:#}", mismatch.unwrap_err()).contains("pooling"));

    rmac(&[
        "evaluate",
        "--index",
        s(&gallery),
        "--gt",
        s(&gt),
        "--topk",
        "5",
        "--out",
        s(&eval),
    ])
    .unwrap();
    let metrics = std::fs::read_to_string(eval.join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("queries\t12\nNAR\t"));
    assert!(metrics.contains("MAP@5\t"));

    let rankings = root.join("rankings.tsv");
    rmac(&[
        "search",
        "--index",
        s(&gallery),
        "--topk",
        "3",
        "--out",
        s(&rankings),
    ])
    .unwrap();
    let text = std::fs::read_to_string(&rankings).unwrap();
    assert_eq!(text.lines().count(), 36);
    assert!(text
        .lines()
        .all(|l| l.split('\t').next() != l.split('\t').nth(2)));

    let sheet = root.join("sheet.html");
    rmac(&[
        "contact-sheet",
        "--rankings",
        s(&rankings),
        "--images",
        s(&images),
        "--gt",
        s(&gt),
        "--out",
        s(&sheet),
    ])
    .unwrap();
    let html = std::fs::read_to_string(&sheet).unwrap();
    assert_eq!(html.matches("class=\"row\"").count(), 12);
    assert!(html.contains("src=\"images/g000_v00.png\""));

    let table = rmac(
        &[
            &[
                "ablate",
                "--tensors",
                s(&tensors),
                "--gt",
                s(&gt),
                "--methods",
                "R-MAC,mr+smac+ura",
                "--topk",
                "5",
            ][..],
            &common,
        ]
        .concat(),
    );
    assert_eq!(exit_status(&table), EXIT_OK);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bin = env!("CARGO_BIN_EXE_rmac");
    let status = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("RUST_LOG", "error")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .unwrap()
            .code()
            .unwrap()
    };

    assert_eq!(
        status(&[
            "synth",
            "--out",
            s(root),
            "--groups",
            "5",
            "--per-group",
            "2",
            "--size",
            "64"
        ]),
        EXIT_OK as i32
    );
    std::fs::write(root.join("images").join("g001_v01.png"), b"garbage").unwrap();
    let out = root.join("t");
    let code = status(&[
        "extract",
        "--images",
        s(&root.join("images")),
        "--out",
        s(&out),
        "--stub-channels",
        "8",
    ]);
    assert_eq!(code, EXIT_PARTIAL as i32);
    let manifest = std::fs::read_to_string(out.join("extract.manifest.tsv")).unwrap();
    assert!(manifest.contains("g001_v01\tfailed: "));
    assert_eq!(manifest.lines().count(), 10);
    let tensors: usize = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| std::fs::read_dir(e.path()).unwrap().count())
        .sum();
    assert_eq!(tensors, 27);

    assert_eq!(
        status(&[
            "evaluate",
            "--index",
            s(&root.join("missing.rmds")),
            "--gt",
            "x.csv"
        ]),
        EXIT_FATAL as i32
    );
    assert_eq!(
        status(&[
            "fit",
            "--tensors",
            s(&out),
            "--out",
            s(&root.join("m")),
            "--pooling",
            "gem"
        ]),
        EXIT_FATAL as i32
    );
    assert_eq!(status(&["--help"]), EXIT_OK as i32);
    assert_eq!(status(&["no-such-command"]), EXIT_FATAL as i32);
}

#[test]
fn config_file_and_environment_layering() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "groups = 2\nper_group = 2\nsize = 64\n").unwrap();
    let out = dir.path().join("synth");
    let bin = env!("CARGO_BIN_EXE_rmac");
    let code = Command::new(bin)
        .args(["synth", "--config", s(&conf), "--out", s(&out)])
        .env("RMF_GROUPS", "3")
        .env("RUST_LOG", "error")
        .status()
        .unwrap()
        .code()
        .unwrap();
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 6);
}
