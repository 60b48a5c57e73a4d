//! Synthetic CIFAR-10 binary files for tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use resnet_elu::data::{CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES, IMAGE_BYTES};
use resnet_elu::Rng;

/// One record: label byte then pixels. Each class has its own mean color,
/// so a small network can learn the task.
pub fn synthetic_record(label: u8, rng: &mut Rng) -> Vec<u8> {
    let mut r = Vec::with_capacity(1 + IMAGE_BYTES);
    r.push(label);
    let plane = IMAGE_BYTES / 3;
    for ch in 0..3 {
        let base = 40.0 + 170.0 * (((label as usize * 7 + ch * 3) % 10) as f64 / 9.0);
        for _ in 0..plane {
            let v = base + 30.0 * rng.normal();
            r.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    r
}

/// Writes `train_per_file` records into each of the five train files and
/// `test` records into the test file.
pub fn write_cifar10_fixture(dir: &Path, train_per_file: usize, test: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    for name in CIFAR10_TRAIN_FILES {
        let bytes: Vec<u8> = (0..train_per_file)
            .flat_map(|_| synthetic_record(rng.below(10) as u8, &mut rng))
            .collect();
        fs::write(dir.join(name), bytes).unwrap();
    }
    let bytes: Vec<u8> = (0..test)
        .flat_map(|_| synthetic_record(rng.below(10) as u8, &mut rng))
        .collect();
    fs::write(dir.join(CIFAR10_TEST_FILE), bytes).unwrap();
}
