use pdd_core::data::{gen_normal, SyntheticSpec};
use pdd_core::model::*;
use pdd_core::optim::AdamConfig;
use pdd_core::data::normalize;

fn main() {
    let spec = SyntheticSpec::default();
    let t0 = std::time::Instant::now();
    let images: Vec<_> = (0..200u64)
        .map(|i| {
            let s = gen_normal(&spec, i);
            normalize::<f32>(&s.image_tensor(), 64, 64).unwrap()
        })
        .collect();
    println!("datagen: {:.2?}", t0.elapsed());
    let config = TrainerConfig {
        model: ModelConfig::default(),
        epochs: 100,
        batch_size: 8,
        lr_max: 2e-3,
        lr_min: 0.0,
        adam: AdamConfig::default(),
        train_seed: 1,
    };
    let t0 = std::time::Instant::now();
    let mut trainer = Trainer::new(config, &images).unwrap();
    println!("trainer init (teacher cache): {:.2?}", t0.elapsed());
    let t0 = std::time::Instant::now();
    for e in 0..3 {
        let s = trainer.run_epoch().unwrap();
        println!("epoch {e}: total {:.5} kr {:.4} prp {:.4} div {:.4}  ({:.2?}/epoch)", s.total, s.kr, s.prp, s.div, t0.elapsed() / (e as u32 + 1));
    }
}
