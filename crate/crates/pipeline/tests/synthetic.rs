use ucad::data::{synthetic_tasks, TrainData};
use ucad::run::backbone_for;
use ucad::RunConfig;
use ucad_core::kernels::cosine_sim;
use ucad_core::memory::MemoryBank;

fn mean_feature(rows: &[Vec<f64>]) -> Vec<f64> {
    let c = rows[0].len();
    (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

#[test]
fn texture_families_are_separable_in_key_space() {
    let cfg = RunConfig::default();
    let bb = backbone_for(&cfg, &MemoryBank::new()).unwrap();
    let tasks = synthetic_tasks(&cfg).unwrap();
    // Per task, mean key feature of the first and second half of its images.
    let halves: Vec<(Vec<f64>, Vec<f64>)> = tasks
        .iter()
        .map(|t| {
            let TrainData::Images(d) = &t.train else { unreachable!() };
            let per_image: Vec<Vec<f64>> = d
                .images
                .iter()
                .map(|im| {
                    let g = bb.key_features(im).unwrap();
                    mean_feature(&g.to_patch_set().rows().map(<[f64]>::to_vec).collect::<Vec<_>>())
                })
                .collect();
            let mid = per_image.len() / 2;
            (mean_feature(&per_image[..mid]), mean_feature(&per_image[mid..]))
        })
        .collect();
    let within: Vec<f64> = halves.iter().map(|(a, b)| cosine_sim(a, b).unwrap()).collect();
    let min_within = within.iter().copied().fold(f64::INFINITY, f64::min);
    for i in 0..halves.len() {
        for j in 0..halves.len() {
            if i != j {
                let across = cosine_sim(&halves[i].0, &halves[j].1).unwrap();
                assert!(across < min_within, "{} vs {}: {across} >= {min_within}", tasks[i].name, tasks[j].name);
            }
        }
    }
}

#[test]
fn generation_is_reproducible_per_seed() {
    let cfg = RunConfig::default();
    let a = synthetic_tasks(&cfg).unwrap();
    let b = synthetic_tasks(&cfg).unwrap();
    let c = synthetic_tasks(&RunConfig { seed: 43, ..cfg }).unwrap();
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        let (TrainData::Images(x), TrainData::Images(y), TrainData::Images(z)) = (&x.train, &y.train, &z.train) else {
            unreachable!()
        };
        assert_eq!(x.images, y.images);
        assert_ne!(x.images, z.images);
    }
    for t in &a {
        assert_eq!(t.test.iter().filter(|s| s.anomalous).count(), 10);
        assert!(t.test.iter().filter(|s| s.anomalous).all(|s| s.mask.count() > 0));
        assert!(t.test.iter().filter(|s| !s.anomalous).all(|s| s.mask.count() == 0));
    }
}
