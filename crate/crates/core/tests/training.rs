use hquic::checkpoint;
use hquic::config::Config;
use hquic::image::ImageTensor;
use hquic::training::{rd_sweep, train_model, Dataset, RunPaths, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let base: [f64; 3] = [
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.4..0.8),
    ];
    let waves: [(f64, f64, f64); 3] = std::array::from_fn(|_| {
        (
            rng.gen_range(1.0..6.0),
            rng.gen_range(1.0..6.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
        )
    });
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for i in 0..size {
            for j in 0..size {
                let (u, v) = (i as f64 / size as f64, j as f64 / size as f64);
                let w: f64 = waves.iter().map(|&(a, b, p)| (a * u + b * v + p).sin()).sum::<f64>() / 3.0;
                data[(c * size + i) * size + j] = (base[c] + 0.2 * w + 0.02 * rng.gen::<f64>()).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(size, size, data)
}

fn scenes(n: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scene(size, &mut rng)).collect()
}

/// Default hyperparameters on a narrow model and 32-pixel crops.
fn narrow() -> Config {
    let mut c = Config::default();
    c.model.n = 16;
    c.model.m = 16;
    c.train.crop = 32;
    c.train.batch_size = 4;
    c
}

#[test]
fn fixed_batch_loss_halves_within_300_steps() {
    let cfg = narrow();
    let batch = ImageTensor::batch(&scenes(4, 32, 0)).unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let first = trainer.step(&batch).unwrap();
    let mut last = first;
    for _ in 1..300 {
        last = trainer.step(&batch).unwrap();
        assert!(last.rate >= 0.0 && last.mse255 >= 0.0 && last.lta >= 0.0);
    }
    assert!(last.total < 0.5 * first.total, "{} -> {}", first.total, last.total);
}

fn read_rows(path: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = narrow();
    cfg.model.n = 8;
    cfg.model.m = 8;
    cfg.fbwt.heads = 2;
    cfg.train.batch_size = 2;
    cfg.train.lr = 1e-3;
    let data = Dataset {
        images: scenes(5, 40, 1),
    };

    cfg.train.steps = 50;
    let full = RunPaths::in_dir(dir.path(), "full");
    let report = train_model(&data, &cfg, &full, None).unwrap();
    assert_eq!(report.final_step, 50);
    let full_rows = read_rows(&full.metrics);
    assert_eq!(full_rows.len(), 51);
    assert_eq!(full_rows[0], "step,rate,mse255,lta,total");

    let split = RunPaths::in_dir(dir.path(), "split");
    cfg.train.steps = 25;
    train_model(&data, &cfg, &split, None).unwrap();
    cfg.train.steps = 50;
    train_model(&data, &cfg, &split, Some(&split.checkpoint)).unwrap();
    assert_eq!(read_rows(&split.metrics), full_rows);

    let a = checkpoint::load(&full.checkpoint).unwrap();
    let b = checkpoint::load(&split.checkpoint).unwrap();
    assert_eq!(a.model.param_hash(), b.model.param_hash());
}

#[test]
fn no_fbwt_checkpoint_has_no_fbwt_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = narrow();
    cfg.fbwt.enabled = false;
    cfg.train.steps = 3;
    cfg.train.batch_size = 2;
    let paths = RunPaths::in_dir(dir.path(), "nofbwt");
    train_model(
        &Dataset {
            images: scenes(2, 32, 2),
        },
        &cfg,
        &paths,
        None,
    )
    .unwrap();
    let ck = checkpoint::load(&paths.checkpoint).unwrap();
    assert!(!ck.model.has_fbwt_params());
    assert!(ck.model.store.iter().all(|(name, _)| !name.contains("fbwt")));
    assert!(ck.model.is_frozen());
}

#[test]
fn sweep_writes_one_checkpoint_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = narrow();
    cfg.model.n = 8;
    cfg.model.m = 8;
    cfg.fbwt.heads = 2;
    cfg.train.steps = 2;
    cfg.train.batch_size = 2;
    let reports = rd_sweep(
        &Dataset {
            images: scenes(2, 32, 3),
        },
        &[0.0025, 0.0483],
        &cfg,
        dir.path(),
    )
    .unwrap();
    assert_eq!(reports.len(), 2);
    for (r, lambda) in reports.iter().zip([0.0025, 0.0483]) {
        let ck = checkpoint::load(&r.paths.checkpoint).unwrap();
        assert_eq!(ck.model.config().loss.lambda, lambda);
        assert_eq!(read_rows(&r.paths.metrics).len(), 3);
    }
}
