use pdd_core::data::*;
use pdd_core::model::*;
use pdd_core::optim::AdamConfig;
use pdd_core::tape::{CosineAxis, Tape};
use pdd_core::tensor::Tensor;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(40);
    let paradigm = match std::env::args().nth(2).as_deref() {
        Some("rd") => Paradigm::Rd1t1s,
        _ => Paradigm::Full2t2s,
    };
    let spec = SyntheticSpec::default();
    let train: Vec<Tensor<f32>> = (0..200u64)
        .map(|i| normalize(&gen_normal(&spec, i).image_tensor(), 64, 64).unwrap())
        .collect();
    let config = TrainerConfig {
        model: ModelConfig { paradigm, ..Default::default() },
        epochs,
        batch_size: 8,
        lr_max: 2e-3,
        lr_min: 0.0,
        adam: AdamConfig::default(),
        train_seed: 42 ^ 0x5eed,
    };
    let mut trainer = Trainer::new(config, &train).unwrap();
    for e in 0..epochs {
        let s = trainer.run_epoch().unwrap();
        if e % 20 == 0 || e + 1 == epochs {
            eprintln!("epoch {e}: total {:.4} kr {:.3}", s.total, s.kr);
        }
    }
    let bundle = &mut trainer.bundle;

    // One training image and one unseen normal + teacher decomposition.
    for (name, img_src) in [("train img", gen_normal(&spec, 0)), ("unseen normal", gen_normal(&spec, TEST_NORMAL_OFFSET))] {
        let img = normalize::<f32>(&img_src.image_tensor(), 64, 64).unwrap();
        let feats = bundle.teacher_features(&img).unwrap();
        // Component magnitudes inside f_b per stage.
        print!("{name}: ");
        for i in 1..=4 {
            let fb = feats.f_b.stage(i);
            let std_fb = std(fb.data());
            let std_fc = std(feats.f_c.stage(i).data());
            let std_fm = feats.f_m.as_ref().map(|m| std(m.stage(i).data())).unwrap_or(0.0);
            print!("st{i}: fb {std_fb:.2} fc {std_fc:.2} fm {std_fm:.2} | ");
        }
        println!();
        // Eval-mode student cos.
        let (s1_eval, _) = bundle.student_pyramids_eval(&feats).unwrap();
        for i in 1..=4 {
            let mut t = Tape::new();
            let c = pdd_core::ops::cosine(&mut t, &feats.f_b.stage(i).detached(), &s1_eval.stage(i).detached(), CosineAxis::Flat).unwrap();
            let m = pdd_core::ops::mse(&mut t, &feats.f_b.stage(i).detached(), &s1_eval.stage(i).detached()).unwrap();
            let v = std(feats.f_b.stage(i).data());
            print!("st{i}: cos {:.3} mse {:.2} var {:.2} | ", c.data()[0], m.item(), v * v);
        }
        println!("\n");
    }
}

fn std(d: &[f32]) -> f64 {
    let n = d.len() as f64;
    let mean: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}
