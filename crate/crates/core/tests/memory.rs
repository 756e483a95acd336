use proptest::prelude::*;
use ucad_core::backbone::{TextPrompt, VisualPrompt};
use ucad_core::memory::{bank_file_size, Calibration, MemoryBank, TaskMemory, TaskShape};
use ucad_core::rng::Rng;
use ucad_core::tensor::{Matrix, PatchSet};
use ucad_core::Error;

/// Rows scattered around `direction * 4`, so tasks separate by direction.
fn cluster(rng: &mut Rng, n: usize, c: usize, direction: usize) -> PatchSet<f64> {
    let data = (0..n * c).map(|i| if i % c == direction { 4.0 } else { 0.0 } + 0.5 * rng.normal()).collect();
    PatchSet::new(n, c, data).unwrap()
}

fn task(name: &str, rng: &mut Rng, c: usize, keys: usize, bank_rows: usize, direction: usize) -> TaskMemory<f64> {
    let k = cluster(rng, keys, c, direction);
    let g = cluster(rng, bank_rows, c, direction);
    let text = TextPrompt::standard_normal(5, 32, name, rng).unwrap();
    let visual = VisualPrompt::uniform(6, 2, c, rng).unwrap();
    TaskMemory::new(name, k, text, visual, g, Calibration::centered(rng.normal()), Calibration::centered(rng.normal())).unwrap()
}

fn shape(t: &TaskMemory<f64>) -> TaskShape {
    TaskShape {
        name_len: t.task_name.len(),
        channels: t.channels(),
        keys: t.keys.count(),
        text_rows: t.text_prompt.learnable.rows(),
        text_dim: t.text_prompt.learnable.cols(),
        layers: t.visual_prompt.n_layers(),
        prompt_len: t.visual_prompt.prompt_len(),
        bank_rows: t.feature_bank.count(),
    }
}

#[test]
fn fifteen_tasks_of_196_keys() {
    let mut rng = Rng::new(31);
    let mut bank = MemoryBank::new();
    for i in 0..15 {
        bank.insert_task(task(&format!("t{i:02}"), &mut rng, 64, 196, 32, i)).unwrap();
    }
    let rows: usize = bank.tasks().iter().map(|t| t.keys.count()).sum();
    assert_eq!(rows, 15 * 196);
    for i in 0..15 {
        let (j, sim) = bank.infer_task(&cluster(&mut rng, 196, 64, i)).unwrap();
        assert_eq!(j, i);
        assert!(sim > 0.5);
    }
}

#[test]
fn file_size_for_two_tasks() {
    let mut rng = Rng::new(32);
    let mut bank = MemoryBank::new();
    bank.insert_task(task("bolt", &mut rng, 64, 196, 196, 0)).unwrap();
    bank.insert_task(task("nut", &mut rng, 64, 196, 100, 1)).unwrap();
    let shapes: Vec<TaskShape> = bank.tasks().iter().map(shape).collect();
    let bytes = bank.to_bytes();
    assert_eq!(bytes.len(), bank_file_size(&shapes));
    // Header, then per task: name, keys, text prompt, visual prompt, bank, calibration.
    let per = |name: usize, g: usize| 2 + name + 8 + 4 * 196 * 64 + 8 + 4 * 5 * 32 + 8 + 4 * 6 * 2 * 64 + 4 + 4 * g * 64 + 32;
    assert_eq!(bytes.len(), 12 + per(4, 196) + per(3, 100));
}

#[test]
fn task_inference_separates_clusters() {
    let mut rng = Rng::new(33);
    let mut bank = MemoryBank::new();
    for i in 0..5 {
        bank.insert_task(task(&format!("c{i}"), &mut rng, 16, 40, 10, i)).unwrap();
    }
    let mut hits = 0;
    for trial in 0..100 {
        let truth = trial % 5;
        let (got, _) = bank.infer_task(&cluster(&mut rng, 20, 16, truth)).unwrap();
        hits += usize::from(got == truth);
    }
    assert!(hits >= 99, "{hits}/100");
}

#[test]
fn earlier_tasks_are_untouched_by_later_inserts() {
    let mut rng = Rng::new(34);
    let mut bank = MemoryBank::new();
    bank.insert_task(task("first", &mut rng, 8, 10, 10, 0)).unwrap();
    let before = bank.tasks()[0].to_bytes();
    for i in 1..5 {
        bank.insert_task(task(&format!("next{i}"), &mut rng, 8, 10, 10, i)).unwrap();
        assert_eq!(bank.tasks()[0].to_bytes(), before);
    }
}

#[test]
fn save_and_load_through_a_file() {
    let mut rng = Rng::new(35);
    let mut bank = MemoryBank::new();
    bank.insert_task(task("a", &mut rng, 8, 6, 5, 0)).unwrap();
    bank.insert_task(task("b", &mut rng, 8, 6, 5, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.cmpb");
    bank.save(&path).unwrap();
    let back = MemoryBank::<f64>::load(&path).unwrap();
    assert_eq!(back, bank);
    let q = cluster(&mut rng, 7, 8, 1);
    assert_eq!(back.infer_task(&q).unwrap(), bank.infer_task(&q).unwrap());
    assert!(matches!(MemoryBank::<f64>::load(dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn mismatched_widths_are_rejected() {
    let mut rng = Rng::new(36);
    let keys = cluster(&mut rng, 4, 8, 0);
    let bank_rows = cluster(&mut rng, 4, 6, 0);
    let text = TextPrompt::new(Matrix::zeros(5, 4), "x").unwrap();
    let visual = VisualPrompt::zeros(2, 2, 8).unwrap();
    let r = TaskMemory::new("x", keys, text, visual, bank_rows, Calibration::centered(0.0), Calibration::centered(0.0));
    assert!(matches!(r, Err(Error::DimensionMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_proper_prefix_fails_to_load(seed in 0u64..1000, c in 1usize..5) {
        let mut rng = Rng::new(seed);
        let mut bank = MemoryBank::new();
        bank.insert_task(task("p", &mut rng, c, 3, 2, 0)).unwrap();
        let bytes = bank.to_bytes();
        prop_assert_eq!(&MemoryBank::<f64>::from_bytes(&bytes).unwrap(), &bank);
        for cut in 0..bytes.len() {
            prop_assert!(MemoryBank::<f64>::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
