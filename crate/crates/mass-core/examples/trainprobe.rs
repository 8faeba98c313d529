// Scratch probe for training dynamics; run with --release.

use mass_core::context::{split_train_test, tensor_to_dataset};
use mass_core::gan::GanConfig;
use mass_core::metrics::{self, MomentTriple};
use mass_core::synth::synth_dataset;
use mass_core::trace::{Feature, Normalization};
use mass_core::trainer::{conditional_gradient_descent, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(200, |s| s.parse().unwrap());
    let hidden: usize = args.get(2).map_or(64, |s| s.parse().unwrap());

    let targets = MomentTriple {
        mu: 0.35,
        sigma: 0.2,
        skew: 1.5,
    };
    let raw = synth_dataset(1, 100, 12, 0.5, &targets).unwrap();
    let ds = tensor_to_dataset(&raw);
    let (train, test) = split_train_test(&ds, 7, 10).unwrap();
    let train_n = train.normalize(Normalization::MinMax);
    let test_n = test.normalize(Normalization::MinMax);

    let gan_cfg = GanConfig {
        hidden_size: hidden,
        num_layers: 2,
        seq_len: 12,
        batch_users: 100,
    };
    let train_cfg = TrainConfig {
        max_epochs: epochs,
        seed: 11,
        ..TrainConfig::default()
    };

    let t0 = std::time::Instant::now();
    let out = conditional_gradient_descent(gan_cfg, &train_cfg, &train_n).unwrap();
    let elapsed = t0.elapsed();
    println!(
        "epochs_run={} elapsed={:.1}s per_epoch={:.0}ms warning={}",
        out.epochs_run,
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() * 1000.0 / out.epochs_run.max(1) as f64,
        out.no_candidate_warning
    );

    for r in out.log.iter().filter(|r| r.validation.is_some()) {
        let v = r.validation.as_ref().unwrap();
        println!(
            "epoch {:4} l_corr={:.4} l_mom={:.4} worst={:.4} improved={} uni=({:.3},{:.3}) l_d={:.3}",
            r.epoch, v.l_corr, v.l_mom, v.l_worst, v.improved, v.uni_l_corr, v.uni_l_mom, r.l_d
        );
    }

    // Table-1 style evaluation of the returned model.
    let model = &out.model;
    let z = mass_core::gan::LatentBatch::from_seed(99, 100, 12);
    let batch = mass_core::gan::generator_forward(model, &z).unwrap();
    for (name, data) in [("train", &train_n), ("test", &test_n)] {
        let cd = metrics::corr_distance(
            &metrics::corr_vector(data).unwrap(),
            &metrics::corr_vector(&batch).unwrap(),
        )
        .unwrap();
        let mut md = 0.0;
        for f in Feature::ALL {
            md += metrics::moments_distance(
                &metrics::moments(data, f).unwrap(),
                &metrics::moments(&batch, f).unwrap(),
            ) / 2.0;
        }
        println!("{name}: corr_dist={cd:.4} mom_dist={md:.4}");
    }
    let nov = metrics::novelty(&batch, Feature::Download).unwrap();
    println!("novelty(K=12)={nov:.4}");
    let z100 = mass_core::gan::LatentBatch::from_seed(100, 100, 100);
    let b100 = mass_core::gan::generator_forward(model, &z100).unwrap();
    println!(
        "novelty(K=100)={:.4}",
        metrics::novelty(&b100, Feature::Download).unwrap()
    );
}
