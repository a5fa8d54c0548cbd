use dfno_core::heat::{gen_dataset, GenDataConfig};
use dfno_core::model::config::Activation;
use dfno_core::train::{run_training, TrainConfig};

#[test]
#[ignore]
fn full_criterion6_probe() {
    let data = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    gen_dataset(&GenDataConfig {
        n_samples: 250,
        grid: 32,
        n_t: 10,
        seed: 21,
        out_dir: data.path().to_string_lossy().into_owned(),
    })
    .unwrap();
    println!("gen 250 samples: {:?}", t0.elapsed());

    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        partition: vec![1, 1, 1, 1, 1],
        dataset_dir: data.path().to_string_lossy().into_owned(),
        out_dir: out.path().to_string_lossy().into_owned(),
        train_samples: 200,
        val_samples: 50,
        epochs: 30,
        batch_size: 1,
        learning_rate: 1e-3,
        seed: 33,
        width: 4,
        num_blocks: 4,
        modes: vec![8, 8, 4],
        activation: Activation::Relu,
    };
    let t1 = std::time::Instant::now();
    let history = run_training(&cfg, 1).unwrap();
    println!("1-worker 30 epochs: {:?}", t1.elapsed());
    for row in &history {
        println!("epoch {:2}: train {:.4} val {:.4}", row.epoch, row.train, row.val);
    }
    let first = history.first().unwrap();
    let last = history.last().unwrap();
    println!(
        "ratio {:.3} (need <= 0.5), val {:.3} (need < 0.8)",
        last.train / first.train,
        last.val
    );

    let out4 = tempfile::tempdir().unwrap();
    let mut cfg4 = cfg.clone();
    cfg4.partition = vec![1, 1, 2, 2, 1];
    cfg4.out_dir = out4.path().to_string_lossy().into_owned();
    let t2 = std::time::Instant::now();
    let h4 = run_training(&cfg4, 4).unwrap();
    println!("4-worker 30 epochs: {:?}", t2.elapsed());
    let max_gap = history
        .iter()
        .zip(&h4)
        .map(|(a, b)| ((a.train - b.train).abs() / a.train).max((a.val - b.val).abs() / a.val))
        .fold(0.0f64, f64::max);
    println!("max per-epoch relative gap 1w vs 4w: {max_gap:.3e} (need < 1e-6)");
}
