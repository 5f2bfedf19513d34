use rbo_core::evalharness::{evaluate, report_files, EvalConfig};
use rbo_core::pipeline::{infer, train, ModelParams, TrainConfig};
use rbo_core::synthdata::{crop_pair, export_sequence, gen_sequence, import_sequence, regenerate, SequenceSpec};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        iterations: 3,
        batch: 2,
        hidden: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn exported_sequence_reimports_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let seq = gen_sequence(&SequenceSpec {
        seed: 21,
        frames: 4,
        ..SequenceSpec::default()
    })
    .unwrap();
    export_sequence(&seq, dir.path()).unwrap();

    let back = import_sequence(dir.path()).unwrap();
    assert_eq!(back.gt, seq.gt);
    assert_eq!(back.distractors, seq.distractors);
    for (a, b) in back.frames.iter().zip(&seq.frames) {
        let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "8-bit quantisation error {worst}");
    }
    assert_eq!(regenerate(dir.path()).unwrap(), seq);
}

#[test]
fn checkpoint_round_trip_preserves_inference() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&tiny_config()).unwrap();
    let path = dir.path().join("m.ckpt");
    out.params.save(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    assert_eq!(loaded, out.params);

    let seq = gen_sequence(&SequenceSpec::default()).unwrap();
    let pair = crop_pair(&seq, 1, 64, 128).unwrap();
    let a = infer(&out.params, &pair.template, &pair.search).unwrap();
    let b = infer(&loaded, &pair.template, &pair.search).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_reports_are_reproducible() {
    let model = train(&tiny_config()).unwrap().params;
    let ecfg = EvalConfig {
        sequences: 2,
        frames: 4,
        ..EvalConfig::default()
    };
    let run = || {
        let seqs = ecfg.sequences().unwrap();
        let report = evaluate(&model, &seqs, &ecfg.track_options(), &ecfg.diag_options()).unwrap();
        report_files(&report).unwrap()
    };
    let (first, second) = (run(), run());
    assert_eq!(first, second);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["metrics.csv", "success.csv", "precision.csv"]);
    let metrics = &first[0].1;
    assert_eq!(metrics.lines().count(), 2 + 2 + 1, "schema, header, two sequences, mean");
}

#[test]
fn config_text_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        seed: 77,
        lr: 0.003,
        ..TrainConfig::default()
    };
    let path = dir.path().join("c.txt");
    std::fs::write(&path, cfg.to_kv()).unwrap();
    let back = TrainConfig::parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, cfg);
}
