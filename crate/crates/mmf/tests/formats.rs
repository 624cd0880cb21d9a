use std::fs;

use mmf::checkpoint;
use mmf::data::{load_triplets, read_block, read_manifest, write_block, write_manifest, Manifest, TripletFormat};
use mmf::Error;
use mmf_core::episodes::{make_meta_test_suite, partition_and_normalize, Rating};
use mmf_core::metatrain::{Checkpoint, TrainConfig};
use mmf_core::rng::stream;
use mmf_core::{ModelConfig, ModelParams};

fn ratings() -> Vec<Rating> {
    let mut out = Vec::new();
    for u in 0..40u64 {
        for i in 0..50u64 {
            if (u * 13 + i * 7) % 4 == 0 {
                out.push(Rating::new(u + 1, i + 1, ((u * i) % 5 + 1) as f64));
            }
        }
    }
    out
}

#[test]
fn all_three_triplet_formats_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let rs = ratings();
    let tab: String = rs.iter().map(|r| format!("{}\t{}\t{}\t978300760\n", r.user, r.item, r.value)).collect();
    let dcolon: String = rs.iter().map(|r| format!("{}::{}::{}::978300760\n", r.user, r.item, r.value)).collect();
    let csv: String = std::iter::once("userId,itemId,rating\n".to_string())
        .chain(rs.iter().map(|r| format!("{},{},{}\n", r.user, r.item, r.value)))
        .collect();
    for (name, text, format) in [
        ("u.data", tab, TripletFormat::MovielensTab),
        ("ratings.dat", dcolon, TripletFormat::MovielensDcolon),
        ("r.csv", csv, TripletFormat::Csv),
    ] {
        let path = tmp.path().join(name);
        fs::write(&path, text).unwrap();
        assert_eq!(load_triplets(&path, format).unwrap(), rs, "{name}");
    }
}

#[test]
fn blocks_and_manifests_survive_the_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let split = partition_and_normalize(&ratings(), [0.7, 0.1, 0.2], &mut stream(1, 0)).unwrap();
    let path = tmp.path().join("train.tsv");
    write_block(&path, &split.train, &split.normalization).unwrap();
    let (block, norm) = read_block(&path).unwrap();
    assert_eq!(block, split.train);
    assert_eq!(norm, split.normalization);

    let episodes = make_meta_test_suite(&split.test, 3, 5, 5, 0.5, &mut stream(1, 1)).unwrap();
    let m = Manifest { normalization: split.normalization, episodes };
    let mp = tmp.path().join("m.manifest");
    write_manifest(&mp, &m).unwrap();
    assert_eq!(read_manifest(&mp).unwrap(), m);
}

fn checkpoint_bytes() -> (Checkpoint, Vec<u8>) {
    let config = TrainConfig {
        model: ModelConfig { exml_channels: vec![3, 3], ff_hidden: 4, ff_layers: 3, latent: 2, lambda_init: 0.5 },
        ..TrainConfig::default()
    };
    let ck = Checkpoint {
        params: ModelParams::init(&config.model, 9).unwrap(),
        config,
        normalization: mmf_core::episodes::Normalization { mean: 3.5, std: 1.25 },
        best_valid_loss: 0.75,
        best_epoch: 4,
    };
    let bytes = checkpoint::encode(&ck).unwrap();
    (ck, bytes)
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let (ck, bytes) = checkpoint_bytes();
    let path = tmp.path().join("m.ckpt");
    checkpoint::save(&path, &ck).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);
    assert_eq!(checkpoint::load(&path).unwrap(), ck);

    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(&path).is_err());

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 20;
    flipped[mid] ^= 0x80;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checksum { .. })));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&path, &newer).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Version { found: 7, .. })));

    assert!(matches!(checkpoint::load(&tmp.path().join("absent")), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_header_is_readable_text() {
    let (_, bytes) = checkpoint_bytes();
    assert_eq!(&bytes[..4], b"MMF1");
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    assert!(text.starts_with("model.exml_channels=3,3\n"));
    assert!(text.contains("norm.mean=3.5000000000000000e0\n"));
    assert!(text.contains("best_epoch=4\n"));
}

#[test]
fn evaluation_is_unchanged_by_a_checkpoint_round_trip() {
    use mmf_core::metatrain::{evaluate, Sequential};
    use mmf_core::synthetic::TaskFamily;
    let tmp = tempfile::tempdir().unwrap();
    let (ck, _) = checkpoint_bytes();
    let fam = TaskFamily { rows: 10, cols: 10, ..TaskFamily::default() };
    let suite = make_meta_test_suite(&fam.task(0), 3, 10, 10, 0.5, &mut stream(5, 0)).unwrap();
    let before = evaluate(&ck.params, &suite, ck.config.adapt, &Sequential).unwrap();
    let path = tmp.path().join("m.ckpt");
    checkpoint::save(&path, &ck).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let after = evaluate(&loaded.params, &suite, loaded.config.adapt, &Sequential).unwrap();
    let bits = |r: &mmf_core::metatrain::EvalReport| r.scores.iter().map(|s| (s.test_mse.to_bits(), s.train_mse.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
}
