use std::path::Path;

use proptest::prelude::*;
use srstereo::checkpoint::{decode, encode, Checkpoint};
use srstereo::formats::*;
use srstereo_core::params::ParamStore;
use srstereo_core::{Grid, Image, Tensor};

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..12, 1usize..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pfm_round_trips_f32_values((h, w) in dims(), seed in any::<u64>()) {
        let mut state = seed;
        let g = Grid::from_fn(h, w, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f64::from(f32::from_bits((state >> 32) as u32 & 0x7f7f_ffff)) * if state & 1 == 0 { 1.0 } else { -1.0 }
        });
        let back = decode_pfm(Path::new("p"), &encode_pfm(&g)).unwrap();
        let bits = |g: &Grid<f64>| g.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&g));
    }

    #[test]
    fn ppm_round_trips_8bit_levels((h, w) in dims(), levels in proptest::collection::vec(any::<u8>(), 3 * 11 * 11)) {
        let data = (0..3 * h * w).map(|i| f64::from(levels[i]) / 255.0).collect();
        let img = Image::from_planar(3, h, w, data);
        let back = decode_ppm(Path::new("p"), &encode_ppm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.as_slice(), img.as_slice());
    }

    #[test]
    fn pgm_round_trips_masks((h, w) in dims(), bits in proptest::collection::vec(any::<bool>(), 11 * 11)) {
        let m = Grid::from_vec(h, w, bits[..h * w].to_vec());
        prop_assert_eq!(decode_pgm(Path::new("p"), &encode_pgm(&m)).unwrap(), m);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(values in proptest::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
        let split = split.min(values.len());
        let mut params = ParamStore::new();
        params.add("a", Tensor::from_vec(&[split], values[..split].to_vec()));
        params.add("b.weight", Tensor::from_vec(&[1, values.len() - split], values[split..].to_vec()));
        let ck = Checkpoint { kind: "stereo".into(), config: "seed = 1\n".into(), params };
        let bytes = encode(&ck);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        let flat: Vec<u64> = back.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        prop_assert_eq!(flat, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::from_fn(3, 5, |y, x| (y * 5 + x) as f64 * 0.5 - 2.0);
    write_pfm(&dir.path().join("d.pfm"), &g).unwrap();
    assert_eq!(read_pfm(&dir.path().join("d.pfm")).unwrap(), g);
    let m = Grid::from_fn(3, 5, |y, x| (x + y) % 2 == 0);
    write_pgm(&dir.path().join("m.pgm"), &m).unwrap();
    assert_eq!(read_pgm(&dir.path().join("m.pgm")).unwrap(), m);
}
