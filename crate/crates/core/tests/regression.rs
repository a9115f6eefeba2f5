use std::io::BufReader;

use jmb_core::channel::{
    draw_channel, read_fixture, stream_id, stream_rng, CsitConfig, StreamPurpose,
};

#[test]
fn channel_draw_matches_stored_fixture() {
    let file = std::fs::File::open(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/channel_4x3_seed20240.txt"
    ))
    .unwrap();
    let (stored, seed) = read_fixture(BufReader::new(file)).unwrap();
    assert_eq!(seed, 20240);
    let cfg = CsitConfig::new(stored.rows(), stored.cols(), 0.0, 1.0, 1.0).unwrap();
    let fresh = draw_channel(
        &mut stream_rng(seed, stream_id(StreamPurpose::Channel, 0, 0, 0)),
        &cfg,
    );
    // Text round trip uses shortest round-trip formatting, so equality is exact.
    assert_eq!(fresh, stored);
}
