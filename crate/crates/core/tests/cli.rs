use std::path::Path;
use std::process::Command;

fn mi_embed(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mi-embed"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "mi-embed {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = r#"
repeats = 1
seed = 5

[data.synthetic]
n_users = 48
samples_per_user = 20
dim = 8

[split]
members = 12
nonmembers = 12

[victim]
hidden = [8]
epochs = 10

[shadow]
n_shadows = 2
member_users = 12
nonmember_users = 12

[attack]
epochs = 50
"#;

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("config.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let split = d.join("split");

    mi_embed(&[
        "gen-data",
        "--config",
        p(&config),
        "--out",
        p(&d.join("all.csv")),
        "--split-dir",
        p(&split),
    ]);
    for f in ["victim_train.csv", "probe.csv", "shadow_pool.csv", "split.json"] {
        assert!(split.join(f).exists(), "{f} missing");
    }

    mi_embed(&[
        "train-victim",
        "--data",
        p(&split.join("victim_train.csv")),
        "--config",
        p(&config),
        "--out",
        p(&d.join("victim.json")),
    ]);
    mi_embed(&[
        "train-shadows",
        "--pool",
        p(&split.join("shadow_pool.csv")),
        "--config",
        p(&config),
        "--out-dir",
        p(&d.join("shadows")),
    ]);
    mi_embed(&[
        "train-attack",
        "--attack-dataset",
        p(&d.join("shadows/attack_dataset.csv")),
        "--features",
        "both",
        "--config",
        p(&config),
        "--out",
        p(&d.join("attack.json")),
    ]);
    mi_embed(&[
        "infer",
        "--attack-model",
        p(&d.join("attack.json")),
        "--victim",
        p(&d.join("victim.json")),
        "--data",
        p(&split.join("probe.csv")),
        "--k",
        "10",
        "--report",
        p(&d.join("infer.csv")),
    ]);
    let infer = std::fs::read_to_string(d.join("infer.csv")).unwrap();
    assert!(infer.starts_with("user_id,encoder_id,k_used,c_u,p_u,label,score"));
    assert_eq!(infer.lines().count(), 1 + 24);

    mi_embed(&[
        "baseline-encodermi",
        "--victim",
        p(&d.join("victim.json")),
        "--data",
        p(&split.join("probe.csv")),
        "--mode",
        "unknown",
        "--shadow-dir",
        p(&d.join("shadows")),
        "--n-views",
        "3",
        "--report",
        p(&d.join("baseline.csv")),
    ]);
    assert_eq!(
        std::fs::read_to_string(d.join("baseline.csv")).unwrap().lines().count(),
        1 + 24
    );

    let out = mi_embed(&["experiment", "--config", p(&config), "--out", p(&d.join("report.json"))]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("attack"));
    let table = mi_embed(&["report", "--input", p(&d.join("report.json")), "--format", "table"]);
    assert_eq!(out.stdout, table.stdout);
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "no_such_key = true\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mi-embed"))
        .args([
            "experiment",
            "--config",
            p(&config),
            "--out",
            p(&dir.path().join("r.json")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
