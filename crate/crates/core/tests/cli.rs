use std::path::Path;
use std::process::{Command, Output};

use vgskit::abx::Triplet;
use vgskit::featstore::{write_features, write_jsonl, FeatureMatrix};
use vgskit::semeval::Judgment;
use vgskit::synth::{abx_dataset, clustered_utterances, matched_embeddings, AbxConfig};

fn vgskit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgskit")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn help_exits_zero_and_bad_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let help = vgskit(dir.path(), &["abx", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--features"));
    assert_eq!(vgskit(dir.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(vgskit(dir.path(), &["score-pairs", "--pos", "a"]).status.code(), Some(1));
    assert_eq!(vgskit(dir.path(), &["score-pairs", "--pos", "a", "--neg", "b"]).status.code(), Some(2));
}

#[test]
fn retrieve_reports_recalls() {
    let dir = tempfile::tempdir().unwrap();
    let (captions, images, manifest) = matched_embeddings(20, 5, 32, 0.05, 1);
    write_features(&captions, dir.path().join("q.fvf")).unwrap();
    write_features(&images, dir.path().join("t.fvf")).unwrap();
    manifest.write(dir.path().join("pairs.jsonl")).unwrap();
    let out = stdout(&vgskit(
        dir.path(),
        &["retrieve", "--queries", "q.fvf", "--targets", "t.fvf", "--manifest", "pairs.jsonl", "--kc", "20", "--n", "10"],
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.contains("recall=1 ")), "{out}");
    assert!(lines[0].starts_with("direction=speech_to_image n=1 "));

    // a fine table that reverses every preference
    let fine: Vec<Vec<f32>> = (0..captions.rows())
        .map(|c| (0..images.rows()).map(|j| if manifest.image_of(c) == j { -1.0 } else { 1.0 }).collect())
        .collect();
    write_features(&FeatureMatrix::from_rows(&fine).unwrap(), dir.path().join("f.fvf")).unwrap();
    let out = stdout(&vgskit(
        dir.path(),
        &[
            "--format", "json", "retrieve", "--queries", "q.fvf", "--targets", "t.fvf", "--fine-scores", "f.fvf",
            "--manifest", "pairs.jsonl", "--kc", "5", "--n", "5",
        ],
    ));
    let first: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(first["recall"], 0);
    assert_eq!(first["fine_calls"], 500);
}

#[test]
fn abx_and_semantic_on_synthetic_features() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("feats");
    std::fs::create_dir(&feats).unwrap();
    let (features, triplets) = abx_dataset(&AbxConfig::default(), 3);
    for (id, seq) in &features {
        write_features(seq.matrix(), feats.join(format!("{id}.fvf"))).unwrap();
    }
    let records: Vec<Triplet> = triplets.triplets().to_vec();
    write_jsonl(&records, dir.path().join("t.jsonl")).unwrap();
    let out = stdout(&vgskit(dir.path(), &["abx", "--features", "feats", "--triplets", "t.jsonl"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("group=across "));
    assert!(lines[2].starts_with("group=overall error_pct=0 triples=200"), "{out}");

    let judgments = vec![
        Judgment::new("c0_t0", "c0_t1", 0.9),
        Judgment::new("c0_t0", "c1_t0", 0.1),
        Judgment::new("c2_t0", "c2_t3", 0.8),
        Judgment::new("c3_t1", "c5_t2", 0.2),
    ];
    write_jsonl(&judgments, dir.path().join("j.jsonl")).unwrap();
    let out = stdout(&vgskit(
        dir.path(),
        &["--format", "json", "semantic", "--features", "feats", "--judgments", "j.jsonl", "--pool", "max"],
    ));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["pool"], "max");
    assert_eq!(v["pairs"], 4);
    assert!(v["score"].as_f64().unwrap().abs() <= 100.0);
}

#[test]
fn seed_changes_kmeans_and_threads_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("feats");
    std::fs::create_dir(&feats).unwrap();
    for seq in clustered_utterances(4, 200, 6, 10, 5) {
        write_features(seq.matrix(), feats.join(format!("{}.fvf", seq.id()))).unwrap();
    }
    let fit = |seed: &str, threads: &str, out: &str| {
        stdout(&vgskit(
            dir.path(),
            &["--seed", seed, "--threads", threads, "kmeans-fit", "--features", "feats", "--k", "8", "--out", out],
        ));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = fit("1", "1", "a.fvf");
    let b = fit("1", "4", "b.fvf");
    let c = fit("2", "1", "c.fvf");
    assert_eq!(a, b);
    assert_ne!(a, c);

    let out = stdout(&vgskit(dir.path(), &["quantize", "--model", "a.fvf", "--features", "feats", "--out", "u.jsonl"]));
    assert!(out.starts_with("utterances=4 frames=800 "), "{out}");
    let units = std::fs::read_to_string(dir.path().join("u.jsonl")).unwrap();
    assert_eq!(units.lines().count(), 4);
    assert!(units.starts_with("{\"utterance_id\":\"utt0000\",\"units\":\""));
}
