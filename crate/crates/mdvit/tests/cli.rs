//! CLI contract: exit codes and the synth/train/eval/compare round trip,
//! driven in-process through `cli::run`.

use mdvit::cli::run;

fn tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "image_size=32,32\n\
         num_domains=2\n\
         encoder_channels=8,16,24,32\n\
         layers_per_block=1,1,1,1,1,1,1,1\n\
         num_heads=2\n\
         bridge_hidden=64\n\
         peer_hidden=32\n\
         paradigm=mat\n\
         epochs=1\n\
         batch_size=4\n\
         base_lr=0.001\n\
         augment=false\n\
         seed=7\n",
    )
    .unwrap();
    path
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(["mdvit"]), 2);
    assert_eq!(run(["mdvit", "no-such-command"]), 2);
    assert_eq!(run(["mdvit", "train"]), 2);
    assert_eq!(run(["mdvit", "synth", "--out"]), 2);
}

#[test]
fn help_exits_with_0() {
    assert_eq!(run(["mdvit", "--help"]), 0);
    assert_eq!(run(["mdvit", "train", "--help"]), 0);
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    assert_eq!(
        run([
            "mdvit",
            "eval",
            "--ckpt",
            missing.to_str().unwrap(),
            "--data",
            dir.path().to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn synth_train_eval_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root);
    let data = root.join("data");
    let runs = root.join("runs");
    let reports = root.join("reports");
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();

    assert_eq!(
        run([
            "mdvit",
            "synth",
            "--out",
            &s(&data),
            "--domains",
            "2",
            "--n",
            "8",
            "--size",
            "32",
            "--seed",
            "7",
        ]),
        0
    );
    assert!(data.join("domain0/images").is_dir());
    assert!(data.join("domain1/masks").is_dir());

    assert_eq!(
        run([
            "mdvit",
            "train",
            "--config",
            &s(&cfg),
            "--data",
            &s(&data),
            "--out",
            &s(&runs),
            "--fold",
            "0",
            "--max-steps",
            "1",
            "--json",
        ]),
        0
    );
    assert!(runs.join("mat_final.ckpt").is_file());

    for paradigm in ["st", "jt"] {
        assert_eq!(
            run([
                "mdvit",
                "eval",
                "--ckpt",
                &s(&runs.join("mat_final.ckpt")),
                "--data",
                &s(&data),
                "--fold",
                "0",
                "--out",
                &s(&reports),
                "--paradigm",
                paradigm,
                "--json",
            ]),
            0
        );
    }
    assert!(reports.join("eval_st_fold0.json").is_file());
    assert!(reports.join("eval_st_fold0.csv").is_file());

    assert_eq!(
        run([
            "mdvit",
            "compare",
            "--reports",
            &s(&reports.join("eval_st_fold0.json")),
            &s(&reports.join("eval_jt_fold0.json")),
            "--margin",
            "1.0",
        ]),
        0
    );

    // Compare without the required jt report is a runtime error.
    assert_eq!(
        run([
            "mdvit",
            "compare",
            "--reports",
            &s(&reports.join("eval_st_fold0.json")),
        ]),
        1
    );
}

#[test]
fn params_reports_frozen_counts() {
    assert_eq!(run(["mdvit", "params", "--json"]), 0);
}
