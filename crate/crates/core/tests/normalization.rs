use prophet::vote::normalize_answer;

#[test]
fn reference_table() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/normalization.json");
    let rows: Vec<(String, String)> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert!(rows.len() >= 50);
    let bad: Vec<_> = rows
        .iter()
        .filter(|(input, want)| normalize_answer(input) != *want)
        .map(|(input, want)| format!("{input:?}: got {:?}, want {want:?}", normalize_answer(input)))
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn table_outputs_are_fixed_points() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/normalization.json");
    let rows: Vec<(String, String)> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    for (_, want) in rows {
        assert_eq!(normalize_answer(&want), want);
    }
}
