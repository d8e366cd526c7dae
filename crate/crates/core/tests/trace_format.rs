use groundprobe::trace_store::{
    decode_trace, decode_unembedding, encode_trace, encode_unembedding, read_trace, validate_trace, write_trace,
    Setting, TraceError, TraceHeader, TraceRecord, TraceSet, Unembedding, TRACE_MAGIC,
};
use proptest::prelude::*;

fn records(l: usize, d: usize, v: usize) -> impl Strategy<Value = Vec<TraceRecord>> {
    let record = (
        "[a-z0-9-]{1,12}",
        prop::collection::vec(prop::collection::vec(any::<f32>(), d), l),
        1usize..4,
        prop::option::of(any::<bool>()),
    )
        .prop_flat_map(move |(id, hidden, t, correct)| {
            (
                Just(id),
                Just(hidden),
                prop::collection::vec(prop::collection::vec(-100f32..100.0, v), t),
                prop::collection::vec(0..v as u32, t),
                Just(correct),
            )
        })
        .prop_map(
            |(datapoint_id, hidden_states, output_logits, generated_token_ids, correct)| TraceRecord {
                datapoint_id,
                hidden_states,
                output_logits,
                generated_token_ids,
                correct,
            },
        );
    prop::collection::vec(record, 0..5)
}

fn trace() -> impl Strategy<Value = (TraceHeader, Vec<TraceRecord>)> {
    (1usize..5, 1usize..6, 2usize..7).prop_flat_map(|(l, d, v)| {
        records(l, d, v).prop_map(move |recs| (TraceHeader::new("m", Setting::Visual, l, d, v, recs.len()), recs))
    })
}

fn bits(recs: &[TraceRecord]) -> Vec<Vec<u32>> {
    recs.iter()
        .map(|r| {
            r.hidden_states
                .iter()
                .chain(&r.output_logits)
                .flatten()
                .map(|x| x.to_bits())
                .collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn file_round_trip_is_bit_exact((header, recs) in trace()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vlt");
        write_trace(&header, &recs, &path).unwrap();
        let (h2, r2) = read_trace(&path).unwrap();
        prop_assert_eq!(&h2, &header);
        prop_assert_eq!(bits(&r2), bits(&recs));
        let ids: Vec<_> = r2.iter().map(|r| (&r.datapoint_id, &r.generated_token_ids, r.correct)).collect();
        let want: Vec<_> = recs.iter().map(|r| (&r.datapoint_id, &r.generated_token_ids, r.correct)).collect();
        prop_assert_eq!(ids, want);
        prop_assert_eq!(encode_trace(&h2, &r2).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn any_single_byte_change_is_rejected((header, recs) in trace(), pos in any::<prop::sample::Index>(), delta in 1u8..=255) {
        let mut bytes = encode_trace(&header, &recs).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] = bytes[i].wrapping_add(delta);
        prop_assert!(decode_trace(&bytes).is_err());
    }

    #[test]
    fn unembedding_round_trip(v in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f32> = (0..v * d).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f32) / 7.0).collect();
        let u = Unembedding::new("m", v, d, data).unwrap();
        prop_assert_eq!(decode_unembedding(&encode_unembedding(&u)).unwrap(), u);
    }
}

const SEED_TRACE: &[u8] = include_bytes!("../fuzz/corpus/decode_trace/visual.vlt");

#[test]
fn checked_in_trace_decodes_and_validates() {
    assert_eq!(&SEED_TRACE[..8], TRACE_MAGIC);
    let (header, recs) = decode_trace(SEED_TRACE).unwrap();
    assert_eq!((header.num_layers, header.hidden_dim, header.vocab_size), (3, 6, 4));
    assert_eq!(header.setting, Setting::Visual);
    assert_eq!(recs.len(), 2);
    assert!(validate_trace(&header, &recs).is_valid());
    assert_eq!(encode_trace(&header, &recs).unwrap(), SEED_TRACE);
}

#[test]
fn trace_set_read_reports_path() {
    match TraceSet::read("/nonexistent/x.vlt") {
        Err(TraceError::Io { path, .. }) => assert!(path.ends_with("x.vlt")),
        other => panic!("{other:?}"),
    }
}
