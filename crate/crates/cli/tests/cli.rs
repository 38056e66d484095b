use std::fs;
use std::path::Path;
use std::process::Command;

use objdino_core::heads::HeadSelection;
use objdino_core::store::{write_dump, ActivationDump, DumpHeader};
use objdino_core::{HeadId, Matrix};

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["objdino"];
    full.extend_from_slice(args);
    let code = objdino_cli::run(full, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_with_suffix(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

#[test]
fn gen_writes_one_dump_and_sidecar_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let (code, _, err) = cli(&["gen", "--seed", "1", "--images", "20", "--grid", "14", "--planted", "11:0,11:1,9:3", "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(count_with_suffix(&out, ".objdump"), 20);
    assert_eq!(count_with_suffix(&out, ".gt.json"), 20);
    let gt = fs::read_to_string(out.join("img_0000.gt.json")).unwrap();
    assert!(gt.contains("\"planted_heads\":[[9,3],[11,0],[11,1]]"), "{gt}");
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(cli(&["gen", "--seed", "4", "--images", "3", "--grid", "8", "--out", s(dir)]).0, 0);
    }
    for name in ["img_0000.objdump", "img_0002.gt.json", "ground_truth.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    assert_eq!(cli(&["gen", "--planted", "", "--out", s(&out)]).0, 2);
    assert_eq!(cli(&["gen", "--planted", "12:0", "--out", s(&out)]).0, 2);
    assert_eq!(cli(&["gen", "--images", "0", "--out", s(&out)]).0, 2);
    assert_eq!(cli(&["frobnicate"]).0, 2);
    assert_eq!(cli(&["eval"]).0, 2);

    assert_eq!(cli(&["gen", "--images", "1", "--grid", "6", "--layers", "2", "--heads", "2", "--out", s(&out)]).0, 0);
    let sel = tmp.path().join("sel.json");
    let (code, _, err) = cli(&["analyze", s(&out), "--k", "5", "--out", s(&sel)]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = cli(&["analyze", s(&out), "--tau", "0", "--out", s(&sel)]);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&["analyze", s(&out), "--wq", "0.9", "--out", s(&sel)]);
    assert_eq!(code, 2);
}

#[test]
fn single_image_analysis_has_binary_frequencies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    assert_eq!(cli(&["gen", "--images", "1", "--grid", "8", "--out", s(&out)]).0, 0);
    let sel_path = tmp.path().join("sel.json");
    let (code, _, err) = cli(&["analyze", s(&out.join("img_0000.objdump")), "--out", s(&sel_path)]);
    assert_eq!(code, 0, "{err}");
    let sel = HeadSelection::from_json(&fs::read_to_string(&sel_path).unwrap()).unwrap();
    assert_eq!(sel.per_head_frequency.len(), 144);
    assert!(sel.per_head_frequency.values().all(|&f| f == 0.0 || f == 1.0));
    let csv = fs::read_to_string(tmp.path().join("sel.layers.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,active_heads,mean_frequency"));
    assert_eq!(lines.count(), 12);
}

#[test]
fn analyze_rejects_mixed_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(cli(&["gen", "--images", "1", "--grid", "6", "--layers", "3", "--heads", "3", "--out", s(&a)]).0, 0);
    assert_eq!(cli(&["gen", "--images", "1", "--grid", "6", "--layers", "3", "--heads", "4", "--out", s(&b)]).0, 0);
    let (code, _, err) = cli(&["analyze", s(&a), s(&b), "--k", "2", "--out", s(&tmp.path().join("x.json"))]);
    assert_eq!(code, 1);
    assert!(err.contains("L=3, H=3"), "{err}");
}

#[test]
fn eval_of_ground_truth_as_predictions_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.jsonl");
    let preds = tmp.path().join("p.jsonl");
    fs::write(&gt, "{\"image_id\":\"a\",\"boxes\":[[0,0,32,32]]}\n{\"image_id\":\"b\",\"boxes\":[[16,16,48,64],[0,0,8,8]]}\n").unwrap();
    fs::write(&preds, "{\"image_id\":\"a\",\"bbox\":[0,0,32,32]}\n{\"image_id\":\"b\",\"bbox\":[16,16,48,64]}\n").unwrap();
    let (code, out, err) = cli(&["eval", "--pred", s(&preds), "--gt", s(&gt)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out, "CorLoc: 100.00\n");
}

#[test]
fn eval_reports_chair_and_pope() {
    let tmp = tempfile::tempdir().unwrap();
    let chair = tmp.path().join("c.jsonl");
    let syn = tmp.path().join("syn.json");
    let pope = tmp.path().join("p.jsonl");
    fs::write(&chair, "{\"mentioned\":[\"puppy\",\"cat\"],\"truth\":[\"dog\"]}\n").unwrap();
    fs::write(&syn, "{\"puppy\":\"dog\"}").unwrap();
    fs::write(
        &pope,
        "{\"predicted\":\"yes\",\"actual\":\"yes\"}\n{\"predicted\":\"yes\",\"actual\":\"no\"}\n{\"predicted\":\"no\",\"actual\":\"no\"}\n{\"predicted\":\"no\",\"actual\":\"no\"}\n",
    )
    .unwrap();
    let (code, out, err) = cli(&["eval", "--chair", s(&chair), "--synonyms", s(&syn), "--pope", s(&pope)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        out,
        "CHAIR_S: 100.00\nCHAIR_I: 50.00\nPOPE accuracy: 75.00\nPOPE precision: 50.00\nPOPE recall: 100.00\nPOPE F1: 66.67\n"
    );
}

#[test]
fn data_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    assert_eq!(cli(&["gen", "--images", "1", "--grid", "6", "--layers", "2", "--heads", "2", "--out", s(&out)]).0, 0);
    let missing = tmp.path().join("nope.json");
    let (code, _, _) = cli(&["discover", s(&out), "--selection", s(&missing), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(code, 1);

    let bad_gt = tmp.path().join("gt.jsonl");
    let preds = tmp.path().join("p.jsonl");
    fs::write(&bad_gt, "{\"image_id\":\"a\",\"boxes\":[[5,5,1,1]]}\n").unwrap();
    fs::write(&preds, "{\"image_id\":\"a\",\"bbox\":[0,0,4,4]}\n").unwrap();
    assert_eq!(cli(&["eval", "--pred", s(&preds), "--gt", s(&bad_gt)]).0, 1);
    fs::write(&bad_gt, "not json\n").unwrap();
    assert_eq!(cli(&["eval", "--pred", s(&preds), "--gt", s(&bad_gt)]).0, 1);
}

#[test]
fn render_of_constant_saliency_is_all_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let header = DumpHeader::for_grid(1, 1, 2, 2, 3, 4);
    let tensors = (0..3).map(|_| Matrix::new(6, 2, vec![1.0; 12]).unwrap()).collect();
    let dump = ActivationDump::new(header, tensors).unwrap();
    let dump_path = tmp.path().join("flat.objdump");
    write_dump(&dump, &dump_path).unwrap();
    let sel = HeadSelection {
        object_cluster: 0,
        heads: vec![HeadId::new(0, 0)],
        final_layer_counts: vec![1],
        per_head_frequency: [(HeadId::new(0, 0), 1.0)].into(),
        images: 1,
    };
    let sel_path = tmp.path().join("sel.json");
    fs::write(&sel_path, sel.to_json().unwrap()).unwrap();
    let pgm_path = tmp.path().join("m.pgm");
    let (code, _, err) = cli(&["render", s(&dump_path), "--selection", s(&sel_path), "--out", s(&pgm_path)]);
    assert_eq!(code, 0, "{err}");
    let pgm = fs::read(&pgm_path).unwrap();
    let header = b"P5\n12 8\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 96);
    assert!(pgm[header.len()..].iter().all(|&b| b == 0));
}

#[test]
fn render_makes_the_object_bright() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    assert_eq!(cli(&["gen", "--seed", "2", "--images", "1", "--grid", "8", "--out", s(&c)]).0, 0);
    let sel = tmp.path().join("sel.json");
    assert_eq!(cli(&["analyze", s(&c), "--out", s(&sel)]).0, 0);
    let pgm_path = tmp.path().join("m.pgm");
    let dump = c.join("img_0000.objdump");
    assert_eq!(cli(&["render", s(&dump), "--selection", s(&sel), "--out", s(&pgm_path)]).0, 0);
    let gt = objdino_core::store::read_ground_truth(c.join("img_0000.gt.json")).unwrap();
    let pgm = fs::read(&pgm_path).unwrap();
    let body = &pgm[b"P5\n128 128\n255\n".len()..];
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (i, &v) in body.iter().enumerate() {
        let (r, col) = (i / 128 / 16, i % 128 / 16);
        if gt.contains_patch(r, col) {
            inside.push(v as f64);
        } else {
            outside.push(v as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&inside) > mean(&outside) + 100.0, "{} vs {}", mean(&inside), mean(&outside));
}

#[test]
fn decode_prints_tokens() {
    use objdino_core::decoding::{write_logits, Branch, LogitStream};
    let tmp = tempfile::tempdir().unwrap();
    let std = LogitStream::new(
        vec![vec![0.0, 5.0, 0.0, 0.0], vec![2.0, 1.8, 0.0, 0.0], vec![0.0, 0.0, 0.0, 9.0]],
        4,
        3,
        Branch::Standard,
    )
    .unwrap();
    let guid = LogitStream::new(vec![vec![0.0; 4], vec![0.0, 1.0, 0.0, 0.0], vec![0.0; 4]], 4, 3, Branch::Guidance).unwrap();
    let (sp, gp) = (tmp.path().join("s.bin"), tmp.path().join("g.bin"));
    write_logits(&std, &sp).unwrap();
    write_logits(&guid, &gp).unwrap();
    assert_eq!(cli(&["decode", "--standard", s(&sp), "--guidance", s(&gp)]).1, "1 1\n");
    assert_eq!(cli(&["decode", "--standard", s(&sp), "--guidance", s(&gp), "--alpha", "0"]).1, "1 0\n");
    assert_eq!(cli(&["decode", "--standard", s(&sp), "--guidance", s(&gp), "--mode", "convex", "--alpha", "1"]).1, "1 0\n");
    let (code, _, _) = cli(&["decode", "--standard", s(&sp), "--guidance", s(&gp), "--max-new-tokens", "64", "--alpha", "-1"]);
    assert_eq!(code, 2);
}

#[test]
fn env_fallback_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    assert_eq!(cli(&["gen", "--images", "1", "--grid", "6", "--layers", "2", "--heads", "2", "--out", s(&c)]).0, 0);
    let sel = tmp.path().join("sel.json");
    let bin = env!("CARGO_BIN_EXE_objdino");
    let run = |extra: &[&str]| {
        Command::new(bin)
            .args(["analyze", s(&c), "--k", "2", "--out", s(&sel)])
            .args(extra)
            .env("OBJDINO_TAU", "-1")
            .output()
            .unwrap()
    };
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--tau", "60"]).status.code(), Some(0));
}
