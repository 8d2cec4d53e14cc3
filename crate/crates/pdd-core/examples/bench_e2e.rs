use pdd_core::data::{gen_abnormal, gen_normal, normalize, SyntheticSpec};
use pdd_core::model::*;
use pdd_core::optim::AdamConfig;
use pdd_core::scoring::{self, ScoreReduction};
use pdd_core::tensor::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(42);
    let spec = SyntheticSpec::default();
    let train: Vec<Tensor<f32>> = (0..spec.n_train_normal as u64)
        .map(|i| normalize(&gen_normal(&spec, i).image_tensor(), 64, 64).unwrap())
        .collect();
    let mut model = ModelConfig::default();
    model.encoder.seed = seed;
    let config = TrainerConfig {
        model,
        epochs,
        batch_size: 8,
        lr_max: 2e-3,
        lr_min: 0.0,
        adam: AdamConfig::default(),
        train_seed: seed ^ 0x5eed,
    };
    let t0 = std::time::Instant::now();
    let mut trainer = Trainer::new(config, &train).unwrap();
    for e in 0..epochs {
        let s = trainer.run_epoch().unwrap();
        if e % 10 == 0 || e == epochs - 1 {
            eprintln!("epoch {:>3}: total {:.5} kr {:.3} prp {:.3} div {:.4} lr {:.2e}", e, s.total, s.kr, s.prp, s.div, s.lr);
        }
    }
    eprintln!("train time: {:.1?}", t0.elapsed());

    // Eval
    let t0 = std::time::Instant::now();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..spec.n_test_normal as u64 {
        let s = gen_normal(&spec, 1_000_000 + i);
        let img = normalize::<f32>(&s.image_tensor(), 64, 64).unwrap();
        let map = anomaly_maps(&trainer.bundle, &img, ScorePairs::Fused, 4.0).unwrap();
        scores.push(scoring::image_score(map.data(), ScoreReduction::Max));
        labels.push(0u8);
    }
    for i in 0..spec.n_test_abnormal as u64 {
        let s = gen_abnormal(&spec, i);
        let img = normalize::<f32>(&s.image_tensor(), 64, 64).unwrap();
        let map = anomaly_maps(&trainer.bundle, &img, ScorePairs::Fused, 4.0).unwrap();
        scores.push(scoring::image_score(map.data(), ScoreReduction::Max));
        labels.push(1u8);
    }
    let auroc = scoring::auroc(&scores, &labels).unwrap();
    let ap = scoring::average_precision(&scores, &labels).unwrap();
    let f1 = scoring::f1_max(&scores, &labels).unwrap();
    // also student-student scoring comparison
    let mut ss_scores = Vec::new();
    for i in 0..spec.n_test_normal as u64 {
        let s = gen_normal(&spec, 1_000_000 + i);
        let img = normalize::<f32>(&s.image_tensor(), 64, 64).unwrap();
        let map = anomaly_maps(&trainer.bundle, &img, ScorePairs::StudentStudent, 4.0).unwrap();
        ss_scores.push(scoring::image_score(map.data(), ScoreReduction::Max));
    }
    for i in 0..spec.n_test_abnormal as u64 {
        let s = gen_abnormal(&spec, i);
        let img = normalize::<f32>(&s.image_tensor(), 64, 64).unwrap();
        let map = anomaly_maps(&trainer.bundle, &img, ScorePairs::StudentStudent, 4.0).unwrap();
        ss_scores.push(scoring::image_score(map.data(), ScoreReduction::Max));
    }
    let ss_auroc = scoring::auroc(&ss_scores, &labels).unwrap();
    eprintln!("eval time: {:.1?}", t0.elapsed());
    println!("seed {seed} epochs {epochs}: AUROC {auroc:.4}  AP {ap:.4}  F1max {f1:.4}  ss-AUROC {ss_auroc:.4}");
}
