use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ucad::features::{write_features, FeatureFile};
use ucad_core::rng::Rng;
use ucad_core::tensor::FeatureGrid;
use ucad_core::tuning::RegionMask;

const SMALL: &str = "\
tasks = stripes, dots
epochs = 1
train_images = 4
test_normal = 2
test_anomalous = 2
";

fn ucad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucad")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_sequence_writes_tables_and_bank() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    let o = ucad(&["run-sequence", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("avg_fm"));
    for f in ["results.tsv", "image_auroc_matrix.tsv", "pixel_aupr_matrix.tsv", "training_log.tsv", "metadata.txt", "bank.cmpb"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let meta = std::fs::read_to_string(out.join("metadata.txt")).unwrap();
    assert!(meta.contains("mode=synthetic"));
    assert!(meta.contains("visual_prompt_tuning=on"));
    assert!(meta.contains("seed=3"));

    let table = ucad(&["export-bank", "--bank", s(&out.join("bank.cmpb"))]);
    assert!(table.status.success());
    let text = stdout(&table);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("stripes") && text.contains("dots"));
}

#[test]
fn pixel_dataset_adapt_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let data = dir.path().join("data");
    assert!(ucad(&["gen-synthetic", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let defect = data.join("dots/test/defect");
    assert!(defect.is_dir());

    let pixel = config(dir.path(), &format!("mode = pixel-images\ndata_dir = {}\n", data.display()));
    let bank = dir.path().join("bank.cmpb");
    for task in ["stripes", "dots"] {
        let o = ucad(&["adapt", "--config", s(&pixel), "--task", task, "--bank", s(&bank)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let image = std::fs::read_dir(&defect).unwrap().next().unwrap().unwrap().path();
    let maps = dir.path().join("maps");
    let o = ucad(&["infer", "--config", s(&pixel), "--bank", s(&bank), "--input", s(&image), "--out", s(&maps)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("dots"));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    assert_eq!(std::fs::metadata(maps.join(format!("{stem}.f32"))).unwrap().len(), 224 * 224 * 4);
    let pgm = std::fs::read(maps.join(format!("{stem}.pgm"))).unwrap();
    assert!(pgm.starts_with(b"P5\n224 224\n255\n"));

    let o = ucad(&["eval", "--config", s(&pixel), "--bank", s(&bank)]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l.starts_with("average\t")));

    // Adapting the same task again is refused as a configuration problem.
    let again = ucad(&["adapt", "--config", s(&pixel), "--task", "dots", "--bank", s(&bank)]);
    assert_eq!(again.status.code(), Some(2));
}

fn feature_grids(rng: &mut Rng, n: usize, offset: f64) -> Vec<FeatureGrid<f64>> {
    (0..n).map(|_| FeatureGrid::new(8, 8, 64, (0..8 * 8 * 64).map(|i| if i % 64 < 8 { offset } else { 0.0 } + rng.normal()).collect()).unwrap()).collect()
}

#[test]
fn feature_file_mode_skips_visual_prompt_tuning() {
    let dir = tempfile::tempdir().unwrap();
    let staging = dir.path().join("staging");
    std::fs::create_dir_all(&staging).unwrap();
    let data = dir.path().join("features");
    let mut rng = Rng::new(5);
    for (task, offset) in [("alpha", 3.0), ("beta", -3.0)] {
        let train = FeatureFile { grids: feature_grids(&mut rng, 6, offset), regions: None };
        let mut test = feature_grids(&mut rng, 4, offset);
        let mut regions = Vec::new();
        for (i, g) in test.iter_mut().enumerate() {
            let mut labels = vec![0u16; 64];
            if i % 2 == 1 {
                let mut values = g.as_slice().to_vec();
                for p in [9, 10, 17, 18] {
                    labels[p] = 1;
                    for v in &mut values[p * 64..(p + 1) * 64] {
                        *v += 6.0;
                    }
                }
                *g = FeatureGrid::new(8, 8, 64, values).unwrap();
            }
            regions.push(RegionMask::new(8, 8, labels).unwrap());
        }
        let test = FeatureFile { grids: test, regions: Some(regions) };
        for (split, file) in [("train", train), ("test", test)] {
            let p = staging.join(format!("{task}-{split}.cadf"));
            write_features(&p, &file).unwrap();
            let o = ucad(&["import-features", "--input", s(&p), "--task", task, "--split", split, "--out", s(&data)]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
    }
    assert!(data.join("beta.test.cadf").is_file());

    let cfg = dir.path().join("features.cfg");
    std::fs::write(&cfg, format!("mode = feature-files\ndata_dir = {}\ntasks = alpha, beta\nepochs = 2\n", data.display())).unwrap();
    let out = dir.path().join("out");
    let o = ucad(&["run-sequence", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = std::fs::read_to_string(out.join("metadata.txt")).unwrap();
    assert!(meta.contains("mode=feature-files"));
    assert!(meta.contains("visual_prompt_tuning=off"));
    assert!(meta.contains("task_id_accuracy=1.000000"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    assert_eq!(ucad(&["run-sequence", "--config", s(&cfg), "--tap-score-layer", "9"]).status.code(), Some(2));
    assert_eq!(ucad(&["run-sequence", "--set", "nonsense=1"]).status.code(), Some(2));
    assert_eq!(ucad(&["run-sequence", "--alpha", "1.5"]).status.code(), Some(2));

    let junk = dir.path().join("junk.cmpb");
    std::fs::write(&junk, b"not a bank").unwrap();
    assert_eq!(ucad(&["export-bank", "--bank", s(&junk)]).status.code(), Some(3));
    assert_eq!(ucad(&["export-bank", "--bank", s(&dir.path().join("missing"))]).status.code(), Some(3));

    let out = dir.path().join("out");
    let diverge = ucad(&["run-sequence", "--config", s(&cfg), "--set", "learning_rate=1e300", "--out", s(&out)]);
    assert_eq!(diverge.status.code(), Some(4), "{}", String::from_utf8_lossy(&diverge.stderr));
}
