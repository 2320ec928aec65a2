mod common;

use common::checks::{self, random_message};
use common::rng;
use fleet_core::error::DecodeError;
use fleet_core::protocol::{decode_message, encode_message, Message, WireMessage, FRAME_OVERHEAD};
use proptest::prelude::*;

#[test]
fn decode_inverts_encode_on_ten_thousand_messages() {
    assert_eq!(checks::round_trip_failures(10_000, 91), 0);
}

proptest! {
    #[test]
    fn control_messages_round_trip(round in any::<u64>(), v in any::<u64>(), id in any::<u32>()) {
        for m in [
            Message::RoundBegin { round, group_version: v },
            Message::RoundAck { agent_id: id, round, adopted_version: v },
        ] {
            prop_assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_message(&bytes);
    }

    #[test]
    fn truncation_is_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = encode_message(&random_message(&mut rng(seed)));
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assert!(decode_message(&bytes[..keep]).is_err());
    }
}

#[test]
fn every_single_byte_payload_flip_is_detected() {
    let (detected, flips) = checks::flip_detection(40, 92);
    assert!(flips > 1000);
    assert_eq!(detected, flips, "{detected}/{flips} flips detected");
}

#[test]
fn header_corruption_is_typed() {
    let bytes = encode_message(&Message::RoundBegin { round: 3, group_version: 2 });
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_message(&bad), Err(DecodeError::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_message(&bad), Err(DecodeError::BadVersion(9))));
    let mut bad = bytes.clone();
    bad[6] = 77;
    assert!(matches!(decode_message(&bad), Err(DecodeError::UnknownMessageType(77))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_message(&long), Err(DecodeError::TrailingBytes(1))));
    assert!(WireMessage::decode(&bytes[..FRAME_OVERHEAD - 1]).is_err());
}

#[test]
fn golden_files_are_byte_stable() {
    let bad = checks::golden_mismatches();
    assert!(bad.is_empty(), "{bad:?} differ from {}; rerun with UPDATE_GOLDEN=1 after a deliberate format change", checks::golden_dir().display());
}
