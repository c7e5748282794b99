use std::fs;
use std::path::Path;

use rand::Rng;
use sia_core::model_io::{
    decode_input, encode_input, load_ann, load_network, load_spikes, save_ann, save_network,
    save_spikes, spikes_path, ModelIoError, ModelManifest, SpikeInputFile, FORMAT_VERSION,
    SPIKE_HEADER_BYTES,
};
use sia_core::snn::FrameDims;
use sia_core::synth::{random_frames, rng};
use sia_oracle::fixtures::{random_ann, random_net};

fn edit_manifest(stem: &Path, f: impl FnOnce(&mut ModelManifest)) {
    let path = stem.with_extension("manifest.json");
    let mut m: ModelManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut m);
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
}

#[test]
fn ann_bundles_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ann");
    for seed in 0..10_000 {
        let model = random_ann(seed);
        let paths = save_ann(&stem, &model).unwrap();
        assert_eq!(load_ann(&paths.manifest).unwrap(), model, "seed {seed}");
    }
}

#[test]
fn networks_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("net");
    for seed in 0..10_000 {
        let net = random_net(seed);
        save_network(&stem, &net).unwrap();
        assert_eq!(load_network(&stem).unwrap(), net, "seed {seed}");
    }
}

#[test]
fn spike_files_round_trip() {
    let mut r = rng(11);
    for _ in 0..10_000 {
        let dims = FrameDims::new(r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..9));
        let t = r.gen_range(1..9);
        let p = r.gen_range(0.0..1.0);
        let frames = random_frames(&mut r, dims, t, p);
        let file = encode_input(&frames).unwrap();
        let back = SpikeInputFile::from_bytes(&file.to_bytes()).unwrap();
        assert_eq!(decode_input(&back).unwrap(), frames);
    }
    let dir = tempfile::tempdir().unwrap();
    let frames = random_frames(&mut r, FrameDims::new(3, 5, 7), 4, 0.5);
    let path = save_spikes(
        &spikes_path(&dir.path().join("in")),
        &encode_input(&frames).unwrap(),
    )
    .unwrap();
    assert!(path.to_string_lossy().ends_with("in.spikes.bin"));
    assert_eq!(decode_input(&load_spikes(&path).unwrap()).unwrap(), frames);
}

#[test]
fn flipped_blob_byte_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("net");
    let paths = save_network(&stem, &random_net(1)).unwrap();
    let mut bytes = fs::read(&paths.blob).unwrap();
    bytes[3] ^= 0x40;
    fs::write(&paths.blob, bytes).unwrap();
    assert!(matches!(
        load_network(&stem),
        Err(ModelIoError::Checksum { .. })
    ));
}

#[test]
fn truncated_and_padded_blobs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ann");
    let paths = save_ann(&stem, &random_ann(2)).unwrap();
    let bytes = fs::read(&paths.blob).unwrap();
    fs::write(&paths.blob, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(
        load_ann(&stem),
        Err(ModelIoError::Truncated { .. })
    ));
    let mut longer = bytes.clone();
    longer.push(0);
    fs::write(&paths.blob, longer).unwrap();
    assert!(matches!(load_ann(&stem), Err(ModelIoError::Structure(_))));
}

#[test]
fn out_of_bounds_and_overlapping_tensors_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("net");
    save_network(&stem, &random_net(3)).unwrap();
    edit_manifest(&stem, |m| {
        let d = m.layers[0].tensors.get_mut("weights").unwrap();
        d.offset = m.blob_bytes - 1;
    });
    assert!(matches!(
        load_network(&stem),
        Err(ModelIoError::OutOfBounds { .. })
    ));

    save_network(&stem, &random_net(3)).unwrap();
    edit_manifest(&stem, |m| {
        let g = m.layers[0].tensors["g"].offset;
        m.layers[0].tensors.get_mut("h").unwrap().offset = g;
    });
    assert!(matches!(
        load_network(&stem),
        Err(ModelIoError::Overlap { .. })
    ));

    // A hostile length is refused before anything is allocated.
    save_network(&stem, &random_net(3)).unwrap();
    edit_manifest(&stem, |m| {
        m.layers[0].tensors.get_mut("weights").unwrap().len = u64::MAX;
    });
    assert!(load_network(&stem).is_err());
}

#[test]
fn version_and_model_kind_checked() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("net");
    save_network(&stem, &random_net(4)).unwrap();
    assert!(matches!(
        load_ann(&stem),
        Err(ModelIoError::ModelKind { .. })
    ));
    edit_manifest(&stem, |m| m.format_version = FORMAT_VERSION + 1);
    match load_network(&stem) {
        Err(ModelIoError::Version { found, supported }) => {
            assert_eq!(found, FORMAT_VERSION + 1);
            assert_eq!(supported, FORMAT_VERSION);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_network(&dir.path().join("absent")),
        Err(ModelIoError::Io { .. })
    ));
    assert!(matches!(
        load_spikes(&dir.path().join("absent.spikes.bin")),
        Err(ModelIoError::Io { .. })
    ));
}

#[test]
fn corrupt_spike_files_rejected() {
    let frames = random_frames(&mut rng(5), FrameDims::new(2, 3, 3), 3, 0.5);
    let good = encode_input(&frames).unwrap().to_bytes();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(
        SpikeInputFile::from_bytes(&bad),
        Err(ModelIoError::BadMagic)
    ));

    let mut bad = good.clone();
    bad[8] = 7;
    assert!(matches!(
        SpikeInputFile::from_bytes(&bad),
        Err(ModelIoError::Version { .. })
    ));

    let mut bad = good.clone();
    *bad.last_mut().unwrap() ^= 1;
    assert!(matches!(
        SpikeInputFile::from_bytes(&bad),
        Err(ModelIoError::Checksum { .. })
    ));

    assert!(matches!(
        SpikeInputFile::from_bytes(&good[..good.len() - 1]),
        Err(ModelIoError::Truncated { .. })
    ));
    assert!(SpikeInputFile::from_bytes(&good[..SPIKE_HEADER_BYTES - 1]).is_err());
}
