use numcore::{read_checkpoint, write_checkpoint, ParamStore, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_byte_exact(
        entries in prop::collection::vec(
            ("[a-z0-9._]{1,24}", prop::collection::vec(1usize..5, 1..4), any::<u64>()),
            0..6,
        )
    ) {
        let tensors: Vec<(String, Tensor)> = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, bits))| {
                let n: usize = shape.iter().product();
                // arbitrary bit patterns, including negative zero and subnormals
                let data = (0..n as u64)
                    .map(|j| f64::from_bits(bits.wrapping_mul(j + 1).rotate_left(j as u32) & !(0x7ffu64 << 52) | ((j % 3) << 60)))
                    .collect();
                (format!("{i}.{name}"), Tensor::from_vec(shape, data).unwrap())
            })
            .collect();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.shape(), t1.shape());
            let a: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

#[test]
fn file_round_trip_through_store() {
    let mut store = ParamStore::new();
    store.insert("base1.weight", Tensor::from_vec(vec![2, 1, 1], vec![0.1, -3.5]).unwrap()).unwrap();
    store.insert("base1.bias", Tensor::zeros(&[2])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let file = std::fs::File::create(&path).unwrap();
    write_checkpoint(file, store.names().iter().map(String::as_str).zip(store.values())).unwrap();
    let back = read_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back[0].0, "base1.weight");
    assert_eq!(&back[0].1, store.get("base1.weight").unwrap());
    assert_eq!(&back[1].1, store.get("base1.bias").unwrap());
}

#[test]
fn truncated_file_is_an_error() {
    let t = Tensor::ones(&[4]);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, [("x", &t)]).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(read_checkpoint(&bytes[..]).is_err());
}
