use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(fill));
    r
}

#[test]
fn normalization_round_trip() {
    assert_eq!(normalize_u8(255), 1.0);
    assert_eq!(normalize_u8(0), -1.0);
    for p in 0..=255u8 {
        assert_eq!(to_u8(normalize_u8(p)), p);
    }
    let x = Tensor::from_vec(vec![-1.0, 0.0, 1.0, 3.0]);
    assert_eq!(denormalize(&x).data(), &[0.0, 0.5, 1.0, 1.0]);
}

#[test]
fn cifar_records() {
    let mut bytes = record(7, |i| (i % 256) as u8);
    bytes.extend(record(2, |i| if i < 1024 { 255 } else { 0 }));
    assert_eq!(bytes[0], 7);
    let ds = parse_cifar10(&bytes).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels(), &[7, 2]);
    assert_eq!(ds.sample_shape(), &[3, 32, 32]);
    let b = ds.all().unwrap();
    assert_eq!(b.images.shape(), &[2, 3, 32, 32]);
    assert_eq!(b.images.data()[0], -1.0);
    assert_eq!(b.images.data()[255], 1.0);
    // second image: red plane white, green and blue black
    assert_eq!(b.images.data()[3072], 1.0);
    assert_eq!(b.images.data()[3072 + 1024], -1.0);

    assert!(matches!(parse_cifar10(&bytes[..3000]), Err(Error::Format(_))));
    assert!(matches!(parse_cifar10(&record(10, |_| 0)), Err(Error::Format(_))));
}

#[test]
fn cifar_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    for (k, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let mut bytes = Vec::new();
        for j in 0..3 {
            bytes.extend(record(((k + j) % 10) as u8, |_| 128));
        }
        std::fs::write(dir.path().join(name), bytes).unwrap();
    }
    std::fs::write(dir.path().join(CIFAR_TEST_FILE), record(4, |_| 0)).unwrap();
    let train = load_cifar10_binary(dir.path(), Split::Train).unwrap();
    assert_eq!(train.len(), 15);
    assert_eq!(&train.labels()[..4], &[0, 1, 2, 1]);
    let test = load_cifar10_binary(dir.path(), Split::Test).unwrap();
    assert_eq!(test.labels(), &[4]);
    let single = load_cifar10_binary(&dir.path().join(CIFAR_TEST_FILE), Split::Train).unwrap();
    assert_eq!(single, test);
    std::fs::remove_file(dir.path().join(CIFAR_TRAIN_FILES[2])).unwrap();
    assert!(matches!(
        load_cifar10_binary(dir.path(), Split::Train),
        Err(Error::Io(_))
    ));
}

/// Runs against the real dataset when `CIFAR10_DIR` points at the binary
/// batch directory.
#[test]
#[ignore = "needs the CIFAR-10 binary files"]
fn cifar_real_split_sizes() {
    let dir = std::env::var("CIFAR10_DIR").expect("CIFAR10_DIR");
    let train = load_cifar10_binary(Path::new(&dir), Split::Train).unwrap();
    assert_eq!(train.len(), 50_000);
    let test = load_cifar10_binary(Path::new(&dir), Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
}

#[test]
fn eight_gaussians_modes_and_balance() {
    let ds = toy_2d(Toy2d::EightGaussians, 8000, &mut rng(0)).unwrap();
    assert_eq!(ds.num_classes(), 8);
    let pts = ds.all().unwrap().images;
    let centers = eight_gaussian_centers();
    let mut far = 0;
    for (i, p) in pts.data().chunks(2).enumerate() {
        let (cx, cy) = centers[ds.labels()[i]];
        if (p[0] - cx).hypot(p[1] - cy) >= 0.5 {
            far += 1;
        }
    }
    assert!(far as f64 / 8000.0 <= 0.001);
    let mut hist = [0usize; 8];
    ds.labels().iter().for_each(|&y| hist[y] += 1);
    assert!(hist.iter().all(|&c| (c as f64 - 1000.0).abs() <= 50.0));
    assert_eq!(
        toy_2d(Toy2d::EightGaussians, 100, &mut rng(1)).unwrap(),
        toy_2d(Toy2d::EightGaussians, 100, &mut rng(1)).unwrap()
    );
}

#[test]
fn two_moons_shape() {
    let ds = toy_2d(Toy2d::TwoMoons, 2000, &mut rng(2)).unwrap();
    let pts = ds.all().unwrap().images;
    for (i, p) in pts.data().chunks(2).enumerate() {
        // distance to the arc's circle stays within a few noise widths
        let (cx, cy) = if ds.labels()[i] == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
        assert!(((p[0] - cx).hypot(p[1] - cy) - 1.0).abs() < 0.3);
    }
    assert!("spiral".parse::<Toy2d>().is_err());
    assert!(toy_2d(Toy2d::TwoMoons, 0, &mut rng(2)).is_err());
}

#[test]
fn tiny_shapes_classes() {
    let ds = tiny_shapes(400, 8, &mut rng(3)).unwrap();
    let b = ds.all().unwrap();
    assert_eq!(b.images.shape(), &[400, 1, 8, 8]);
    assert!(b.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let mut hist = [0usize; 4];
    for (img, &y) in b.images.data().chunks(64).zip(&b.labels) {
        hist[y] += 1;
        let rows_const = (0..8).all(|r| img[r * 8..r * 8 + 8].iter().all(|&v| v == img[r * 8]));
        let cols_const = (0..8).all(|c| (0..8).all(|r| img[r * 8 + c] == img[c]));
        match Shape::ALL[y] {
            Shape::HorizontalStripes => assert!(rows_const),
            Shape::VerticalStripes => assert!(cols_const),
            _ => assert!(img.iter().any(|&v| v > -1.0) && img.iter().any(|&v| v == -1.0)),
        }
    }
    assert!(hist.iter().all(|&c| c == 100));
    assert!(tiny_shapes(4, 7, &mut rng(3)).is_err());
}

#[test]
fn batching_covers_each_example_once() {
    let ds = tiny_shapes(103, 8, &mut rng(4)).unwrap();
    let it = batches(&ds, 10, &mut rng(5)).unwrap();
    assert_eq!(it.num_batches(), 11);
    let all: Vec<LabeledBatch> = it.map(Result::unwrap).collect();
    assert_eq!(all.len(), 11);
    assert_eq!(all.last().unwrap().len(), 3);
    // each image appears exactly once: match by content
    let full = ds.all().unwrap();
    let mut seen = vec![0usize; 103];
    for b in &all {
        for img in b.images.data().chunks(64) {
            let i = full.images.data().chunks(64).position(|c| c == img).unwrap();
            seen[i] += 1;
        }
    }
    assert_eq!(seen.iter().filter(|&&c| c == 0).count(), 0);
    assert_eq!(seen.iter().sum::<usize>(), 103);
    let again: Vec<LabeledBatch> = batches(&ds, 10, &mut rng(5)).unwrap().map(Result::unwrap).collect();
    assert_eq!(all, again);
    assert!(batches(&ds, 0, &mut rng(5)).is_err());
}
