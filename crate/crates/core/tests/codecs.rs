use proptest::prelude::*;
use trigen_core::codecs::{concat_latents, split_latents, train_codec, CodecConfig, CodecSet, Modality, ModalityCodec};
use trigen_core::corpus::{generate_samples, CorpusConfig, Triplet};
use trigen_core::util::rng;
use trigen_core::Tensor;

fn config() -> CodecConfig {
    CodecConfig { height: 16, width: 16, depth: 2, hidden: 8, latent_channels: 2, steps: 150, batch_size: 8, ..CodecConfig::default() }
}

fn data(n: usize) -> Vec<Triplet> {
    generate_samples(&CorpusConfig::with_size(16, 16), n, 3).unwrap()
}

#[test]
fn encoding_is_deterministic_and_shaped() {
    let ts = data(5);
    let refs: Vec<&Triplet> = ts.iter().collect();
    for m in Modality::ALL {
        let a = ModalityCodec::new(m, config(), 4).unwrap();
        let b = ModalityCodec::new(m, config(), 4).unwrap();
        let za = a.encode_triplets(&refs).unwrap();
        assert_eq!(za.shape(), &[5, 4, 4, 2]);
        assert_eq!(za, b.encode_triplets(&refs).unwrap());
        assert_eq!(a.encode(&ts[2]).unwrap(), za.narrow(0, 2, 1).unwrap().reshape([4, 4, 2]).unwrap());
        let y = a.decode(&za).unwrap();
        assert_eq!(y.shape(), &[5, 16, 16, a.out_channels()]);
    }
}

#[test]
fn batch_order_only_permutes_latents() {
    let ts = data(6);
    let fwd: Vec<&Triplet> = ts.iter().collect();
    let rev: Vec<&Triplet> = ts.iter().rev().collect();
    let codec = ModalityCodec::new(Modality::Ir, config(), 1).unwrap();
    let a = codec.encode_triplets(&fwd).unwrap();
    let b = codec.encode_triplets(&rev).unwrap();
    for i in 0..6 {
        assert_eq!(a.narrow(0, i, 1).unwrap(), b.narrow(0, 5 - i, 1).unwrap());
    }
}

#[test]
fn mismatched_latents_are_rejected() {
    let codec = ModalityCodec::new(Modality::Vis, config(), 1).unwrap();
    assert!(codec.decode(&Tensor::zeros([1, 4, 4, 3])).is_err());
    assert!(codec.decode_labels(&Tensor::zeros([1, 4, 4, 2])).is_err());
    assert!(concat_latents(&Tensor::zeros([1, 2, 2, 2]), &Tensor::zeros([1, 2, 2, 2]), &Tensor::zeros([1, 2, 2, 3])).is_err());
    assert!(split_latents(&Tensor::zeros([1, 2, 2, 4])).is_err());
}

#[test]
fn training_lowers_reconstruction_error_and_survives_a_round_trip() {
    let ts = data(24);
    let refs: Vec<&Triplet> = ts.iter().collect();
    let fresh = ModalityCodec::new(Modality::Vis, config(), 9).unwrap();
    let (trained, curve) = train_codec(Modality::Vis, &ts, &config()).unwrap();
    assert!(!curve.epoch_losses.is_empty());
    let before = fresh.reconstruction_error(&refs).unwrap();
    let after = trained.reconstruction_error(&refs).unwrap();
    assert!(after < before, "{after} vs {before}");

    let make = |m| train_codec(m, &ts[..4], &CodecConfig { steps: 2, ..config() }).unwrap().0;
    let set = CodecSet::new(trained.clone(), make(Modality::Ir), make(Modality::Label)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    let back = CodecSet::load(dir.path()).unwrap();
    assert_eq!(back.encode_triplets(&refs).unwrap(), set.encode_triplets(&refs).unwrap());
    assert_eq!(back.vis.decode(&set.vis.encode_triplets(&refs).unwrap()).unwrap(), trained.decode(&trained.encode_triplets(&refs).unwrap()).unwrap());
}

proptest! {
    #[test]
    fn split_inverts_concat(b in 1usize..4, h in 1usize..5, c in 1usize..4, seed in 0u64..500) {
        let mut r = rng(seed);
        let parts: Vec<Tensor> = (0..3).map(|_| Tensor::randn([b, h, h, c], 1.0, &mut r)).collect();
        let z = concat_latents(&parts[0], &parts[1], &parts[2]).unwrap();
        prop_assert_eq!(z.shape(), &[b, h, h, 3 * c][..]);
        let (v, i, l) = split_latents(&z).unwrap();
        prop_assert_eq!(&v, &parts[0]);
        prop_assert_eq!(&i, &parts[1]);
        prop_assert_eq!(&l, &parts[2]);
        prop_assert_eq!(concat_latents(&v, &i, &l).unwrap(), z);
    }
}
