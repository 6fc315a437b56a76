//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use habitat::core::raster::Raster;
use habitat::core::rng;
use habitat::core::taxonomy::ClassSpec;
use habitat::core::ClassTaxonomy;
use habitat::imaging::encode_png;
use habitat::model::{BackboneKind, ClassifierConfig};
use habitat::training::ExperimentConfig;
use rand::Rng;

/// Two classes separable by colour alone.
pub fn colour_taxonomy() -> ClassTaxonomy {
    ClassTaxonomy::new(
        "colours/v1",
        vec![
            ClassSpec::new("Reddish", "RED", "Warm-toned scenes"),
            ClassSpec::new("Bluish", "BLU", "Cool-toned scenes"),
        ],
    )
    .unwrap()
}

/// A noisy texture around `base`.
pub fn textured(base: [u8; 3], size: usize, seed: u64) -> Raster {
    let mut r = rng::stream(seed);
    let noise: Vec<i16> = (0..size * size).map(|_| r.random_range(-40..=40)).collect();
    Raster::from_fn(size, size, |x, y| {
        let n = noise[y * size + x];
        let shade = ((x + y) % 16) as i16 - 8;
        base.map(|c| (c as i16 + n + shade).clamp(0, 255) as u8)
    })
    .unwrap()
}

pub fn class_colour(abbr: &str) -> [u8; 3] {
    match abbr {
        "RED" => [200, 50, 40],
        "BLU" => [40, 70, 200],
        other => {
            let h = rng::derive_seed(7, other);
            [(h & 0xff) as u8, (h >> 8 & 0xff) as u8, (h >> 16 & 0xff) as u8]
        }
    }
}

/// Writes `per_class` PNG images per taxonomy class under `root/{ABBR}/`.
pub fn write_dataset(root: &Path, taxonomy: &ClassTaxonomy, per_class: usize, size: usize, seed: u64) {
    for class in taxonomy.classes() {
        let dir = root.join(&class.abbreviation);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let img = textured(
                class_colour(&class.abbreviation),
                size,
                rng::derive_indexed(seed, &class.abbreviation, i as u64),
            );
            std::fs::write(dir.join(format!("img{i:03}.png")), encode_png(&img)).unwrap();
        }
    }
}

/// Small, randomly initialised experiment for a `k`-class taxonomy.
pub fn small_experiment(k: usize, input_size: usize, target_per_class: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().seeded(seed);
    cfg.model = ClassifierConfig {
        n_classes: k,
        backbone: BackboneKind::Tiny,
        pretrained: false,
        input_size,
        ..cfg.model
    };
    cfg.preprocess.target_size = input_size;
    cfg.balance.target_per_class = target_per_class;
    cfg
}
