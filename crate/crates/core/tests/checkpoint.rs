use proptest::prelude::*;

use retag::checkpoint::{Checkpoint, Header, MAGIC};
use retag::model::{init_params, param_shapes, ModelConfig};
use retag::tables::{Strategy, Vocab};
use retag::Error;

fn sample(seed: u64, count: usize) -> Checkpoint {
    let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(&[words.join(" ")], 1);
    let model = ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 4,
        ffn: 6,
        vocab_size: vocab.len(),
        max_len: 12,
        codebook_size: 3,
        strategy: Strategy::ReTag,
        codebook_count: count,
        ..ModelConfig::default()
    };
    Checkpoint {
        params: init_params(&model, seed).unwrap(),
        model,
        train_digest: format!("digest-{seed}"),
        vocab,
    }
}

fn split(bytes: &[u8]) -> (Header, usize) {
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    (serde_json::from_slice(&bytes[13..13 + hlen]).unwrap(), 13 + hlen)
}

#[test]
fn manifest_regions_tile_the_payload() {
    let ck = sample(1, 6);
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..5], MAGIC);
    let (header, start) = split(&bytes);
    let mut cursor = 0;
    for e in &header.manifest {
        assert_eq!(e.byte_offset, cursor);
        assert_eq!(e.byte_length, 8 * e.shape.iter().product::<usize>() as u64);
        cursor += e.byte_length;
    }
    assert_eq!(start as u64 + cursor, bytes.len() as u64);
    let mut names: Vec<&str> = header.manifest.iter().map(|e| e.name.as_str()).collect();
    names.sort();
    let mut want: Vec<String> = param_shapes(&ck.model).into_iter().map(|(n, _)| n).collect();
    want.sort();
    assert_eq!(names, want);
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = sample(2, 2).to_bytes().unwrap();
    for len in (0..bytes.len()).step_by(7) {
        assert!(Checkpoint::from_bytes(&bytes[..len]).is_err(), "prefix of {len} bytes loaded");
    }
}

#[test]
fn overlapping_regions_are_rejected() {
    let bytes = sample(3, 6).to_bytes().unwrap();
    let (mut header, start) = split(&bytes);
    header.manifest[1].byte_offset = 0;
    let json = serde_json::to_vec(&header).unwrap();
    let mut forged = MAGIC.to_vec();
    forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
    forged.extend_from_slice(&json);
    forged.extend_from_slice(&bytes[start..]);
    assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::Corruption(_))));
}

#[test]
fn unknown_header_keys_are_rejected() {
    let bytes = sample(4, 6).to_bytes().unwrap();
    let (header, start) = split(&bytes);
    let mut value = serde_json::to_value(&header).unwrap();
    value["extra"] = serde_json::json!(1);
    let json = serde_json::to_vec(&value).unwrap();
    let mut forged = MAGIC.to_vec();
    forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
    forged.extend_from_slice(&json);
    forged.extend_from_slice(&bytes[start..]);
    assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::Format(_))));
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ck = sample(5, 2);
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn roundtrip_is_bitwise(seed in any::<u64>(), six in any::<bool>()) {
        let ck = sample(seed, if six { 6 } else { 2 });
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (name, t) in ck.params.iter() {
            let u = back.params.get(name).unwrap();
            prop_assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn any_flipped_payload_byte_is_caught(seed in 0u64..8, pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let bytes = sample(seed, 6).to_bytes().unwrap();
        let (_, start) = split(&bytes);
        let mut bad = bytes.clone();
        let i = start + pos.index(bytes.len() - start);
        bad[i] ^= 1 << bit;
        prop_assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corruption(_))));
    }
}
