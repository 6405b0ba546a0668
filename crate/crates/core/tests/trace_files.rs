use commitlens::conditions::{ConditionSpec, ToyStyle};
use commitlens::generate::{toy_condition_batch, ToyBatch};
use commitlens::projection::delta_from_verbalizer_scores;
use commitlens::synthetic::{synthesize_batch, MixingKind, SyntheticWorld};
use commitlens::trace::TrajectoryTrace;
use commitlens::trace_io::{
    parse_trace_line, read_traces, validate_file, write_traces, write_traces_to, DELTA_RECOMPUTE_TOL,
};
use serde_json::json;

fn synthetic(n: usize, seed: u64) -> Vec<TrajectoryTrace> {
    let world = SyntheticWorld::new(&["canonical", "prompt_shift"], MixingKind::Rotated, 4);
    synthesize_batch(&world, n, seed).unwrap()
}

fn scored(n: usize) -> Vec<TrajectoryTrace> {
    let spec = ConditionSpec::builtin("verbalizer_shift").unwrap();
    let batch = ToyBatch {
        n,
        seed: 12,
        style: ToyStyle {
            wrong_rate: 0.3,
            ..ToyStyle::default()
        },
        bare: true,
        keep_verbalizer_scores: true,
        stop_at_onset_line: false,
    };
    toy_condition_batch(&spec, &batch).unwrap()
}

#[test]
fn hundred_traces_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let mut traces = synthetic(45, 2);
    traces.extend(scored(10));
    traces[0].extra.insert("adapter_note".into(), json!({"k": [1, 2]}));
    traces[1].states[0].extra.insert("logit_lens".into(), json!([0.25]));
    assert_eq!(traces.len(), 100);
    assert_eq!(write_traces(&traces, &path).unwrap(), 100);
    let back = read_traces(&path).unwrap();
    assert_eq!(back, traces);
    for (a, b) in back.iter().zip(&traces) {
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.delta.to_bits(), y.delta.to_bits());
        }
    }
}

#[test]
fn lines_parse_independently() {
    let traces = synthetic(5, 3);
    let mut buf = Vec::new();
    write_traces_to(&traces, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.reverse();
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(parse_trace_line(line, i + 1).unwrap(), traces[traces.len() - 1 - i]);
    }
}

#[test]
fn exported_verbalizer_scores_reproduce_delta() {
    let traces = scored(8);
    let mut checked = 0;
    for tr in &traces {
        for s in &tr.states {
            let vs = s.verbalizer_scores.as_ref().unwrap();
            let d = delta_from_verbalizer_scores(&vs["yes"], &vs["no"]).unwrap();
            assert!((d - s.delta).abs() <= DELTA_RECOMPUTE_TOL);
            checked += 1;
        }
    }
    assert!(checked > 100);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    write_traces(&traces, &path).unwrap();
    let report = validate_file(&path).unwrap();
    assert!(report.is_valid(), "{:?}", report.issues);
    assert_eq!((report.traces, report.parsed), (8, 8));

    let mut bad = traces.clone();
    bad[3].states[2].delta += 1e-3;
    write_traces(&bad, &path).unwrap();
    let report = validate_file(&path).unwrap();
    assert_eq!(report.issues.len(), 1);
    assert_eq!(report.issues[0].line, 4);
}

#[test]
fn synthesis_and_serialization_are_deterministic() {
    let bytes = |traces: &[TrajectoryTrace]| {
        let mut buf = Vec::new();
        write_traces_to(traces, &mut buf).unwrap();
        buf
    };
    assert_eq!(bytes(&synthetic(20, 9)), bytes(&synthetic(20, 9)));
    assert_ne!(bytes(&synthetic(20, 9)), bytes(&synthetic(20, 10)));
    assert_eq!(bytes(&scored(5)), bytes(&scored(5)));
}
