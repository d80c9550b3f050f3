use std::time::Duration;

use dualcritic::codec::external::ExternalEncoder;
use dualcritic::codec::{build_gop, run_episode, run_episode_with, Difficulty};
use dualcritic::Error;

const STUB: &str = env!("CARGO_BIN_EXE_codec-stub");

fn launch(args: &[&str], timeout: Duration) -> dualcritic::Result<ExternalEncoder> {
    ExternalEncoder::launch(STUB, args, timeout)
}

#[test]
fn loopback_matches_in_process_simulator_bit_for_bit() {
    let mut enc = launch(&[], Duration::from_secs(10)).unwrap();
    assert_eq!(enc.peer_name(), "simulator-stub");
    for seed in 0..5 {
        let g = build_gop(8, seed, Difficulty::Fast).unwrap();
        let policy = |v: &dualcritic::codec::EpisodeView<'_>| Ok(18 + 3 * v.position as i32);
        let remote = run_episode_with(&mut enc, &g, policy).unwrap();
        let local = run_episode(&g, policy).unwrap();
        assert_eq!(remote, local);
    }
    enc.close().unwrap();
}

#[test]
fn negative_bits_is_a_protocol_error() {
    let mut enc = launch(&["--fault", "negative-bits"], Duration::from_secs(10)).unwrap();
    let g = build_gop(4, 1, Difficulty::Slow).unwrap();
    let err = run_episode_with(&mut enc, &g, |_| Ok(30)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn slow_endpoint_times_out() {
    let mut enc = launch(&["--delay-ms", "2000"], Duration::from_millis(200)).unwrap();
    let g = build_gop(4, 1, Difficulty::Slow).unwrap();
    let err = run_episode_with(&mut enc, &g, |_| Ok(30)).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

#[test]
fn malformed_reply_is_a_transport_error() {
    let mut enc = launch(&["--fault", "malformed"], Duration::from_secs(10)).unwrap();
    let g = build_gop(4, 1, Difficulty::Slow).unwrap();
    let err = run_episode_with(&mut enc, &g, |_| Ok(30)).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

#[test]
fn version_mismatch_fails_the_handshake() {
    let err = launch(&["--fault", "wrong-version"], Duration::from_secs(10)).err().unwrap();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn missing_program_is_a_transport_error() {
    let err = ExternalEncoder::launch("/nonexistent/encoder", Vec::<String>::new(), Duration::from_secs(1))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Transport(_)));
}
