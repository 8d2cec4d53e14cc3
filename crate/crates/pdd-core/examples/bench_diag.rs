use pdd_core::data::*;
use pdd_core::model::*;
use pdd_core::optim::AdamConfig;
use pdd_core::scoring::{self, aggregate_map, gaussian_smooth, ScoreReduction};
use pdd_core::tape::Tape;
use pdd_core::tensor::{FeaturePyramid, Tensor};
use pdd_core::objectives::{loss_kr, LossWeights};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(40);
    let spec = SyntheticSpec::default();
    let train: Vec<Tensor<f32>> = (0..200u64)
        .map(|i| normalize(&gen_normal(&spec, i).image_tensor(), 64, 64).unwrap())
        .collect();
    let config = TrainerConfig {
        model: ModelConfig::default(),
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
        if e % 10 == 0 || e + 1 == epochs {
            eprintln!("epoch {e}: total {:.4} kr {:.3} prp {:.3} div {:.4}", s.total, s.kr, s.prp, s.div);
        }
    }
    let bundle = &trainer.bundle;

    // Collect per-sample pyramids.
    let n_each = 30u64;
    struct Item {
        label: u8,
        f_b: FeaturePyramid<f32>,
        s1: FeaturePyramid<f32>,
        s2: FeaturePyramid<f32>,
        mask: Option<Vec<u8>>,
    }
    let mut items = Vec::new();
    for i in 0..n_each {
        for (label, sample) in [(0u8, gen_normal(&spec, TEST_NORMAL_OFFSET + i)), (1u8, gen_abnormal(&spec, i))] {
            let img = normalize::<f32>(&sample.image_tensor(), 64, 64).unwrap();
            let feats = bundle.teacher_features(&img).unwrap();
            let (s1, s2) = bundle.student_pyramids_eval(&feats).unwrap();
            items.push(Item { label, f_b: feats.f_b, s1, s2: s2.unwrap(), mask: sample.mask.clone() });
        }
    }
    let labels: Vec<u8> = items.iter().map(|x| x.label).collect();

    let auroc_of = |scores: &[f64]| scoring::auroc(scores, &labels).map(|v| format!("{v:.4}")).unwrap_or("undef".into());

    // Scorers over (pairs, stages, sigma, reduction)
    let map_score = |item: &Item, pairs: &str, stages: &[usize], sigma: f64, red: ScoreReduction| -> f64 {
        let pair_list: Vec<(&FeaturePyramid<f32>, &FeaturePyramid<f32>)> = match pairs {
            "fused" => vec![(&item.f_b, &item.s1), (&item.f_b, &item.s2)],
            "s1" => vec![(&item.f_b, &item.s1)],
            "s2" => vec![(&item.f_b, &item.s2)],
            "ss" => vec![(&item.s1, &item.s2)],
            _ => unreachable!(),
        };
        // stage-restricted aggregate: rebuild pyramids with only chosen stages? simpler: compute full then subtract? do manual:
        let mut scratch = Tape::new();
        let mut total: Option<Tensor<f32>> = None;
        for (t, s) in &pair_list {
            for &i in stages {
                let cos = pdd_core::ops::cosine(&mut scratch, &t.stage(i).detached(), &s.stage(i).detached(), pdd_core::tape::CosineAxis::Channel).unwrap();
                let d = pdd_core::ops::affine(&mut scratch, &cos, -1.0, 1.0).unwrap();
                let d = pdd_core::ops::bilinear_resize(&mut scratch, &d, 64, 64).unwrap();
                total = Some(match total { None => d, Some(acc) => pdd_core::ops::add(&mut scratch, &acc, &d).unwrap() });
            }
        }
        let map = gaussian_smooth(&total.unwrap(), sigma).unwrap();
        scoring::image_score(map.data(), red)
    };

    let all = [1usize, 2, 3, 4];
    println!("--- AUROC by scorer ---");
    for (name, pairs, stages, sigma, red) in [
        ("fused all s4 max", "fused", &all[..], 4.0, ScoreReduction::Max),
        ("fused all s4 mean", "fused", &all[..], 4.0, ScoreReduction::Mean),
        ("fused all s2 max", "fused", &all[..], 2.0, ScoreReduction::Max),
        ("fused all s0 max", "fused", &all[..], 0.0, ScoreReduction::Max),
        ("s1 all s4 max", "s1", &all[..], 4.0, ScoreReduction::Max),
        ("s2 all s4 max", "s2", &all[..], 4.0, ScoreReduction::Max),
        ("ss  all s4 max", "ss", &all[..], 4.0, ScoreReduction::Max),
        ("fused st1 s4 max", "fused", &all[..1], 4.0, ScoreReduction::Max),
        ("fused st2 s4 max", "fused", &all[1..2], 4.0, ScoreReduction::Max),
        ("fused st3 s4 max", "fused", &all[2..3], 4.0, ScoreReduction::Max),
        ("fused st4 s4 max", "fused", &all[3..], 4.0, ScoreReduction::Max),
        ("s1 st1 s0 max", "s1", &all[..1], 0.0, ScoreReduction::Max),
        ("s1 st1 s2 mean", "s1", &all[..1], 2.0, ScoreReduction::Mean),
    ] {
        let scores: Vec<f64> = items.iter().map(|it| map_score(it, pairs, stages, sigma, red)).collect();
        println!("{name:<20} {}", auroc_of(&scores));
    }

    // L2 reconstruction scorer
    let mut tape = Tape::new();
    let l2_scores: Vec<f64> = items.iter().map(|it| loss_kr(&mut tape, &it.f_b, &it.s1).unwrap().item() as f64).collect();
    println!("{:<20} {}", "L2 kr(s1)", auroc_of(&l2_scores));
    let l2b: Vec<f64> = items.iter().map(|it| loss_kr(&mut tape, &it.f_b, &it.s2).unwrap().item() as f64).collect();
    println!("{:<20} {}", "L2 kr(s2)", auroc_of(&l2b));

    // Lesion vs background map intensity on abnormal samples (fused, sigma 0)
    let mut in_mask = 0.0; let mut out_mask = 0.0; let mut n_ab = 0.0;
    for it in &items {
        if it.label == 0 { continue; }
        let pairs = [(&it.f_b, &it.s1), (&it.f_b, &it.s2)];
        let map = aggregate_map(&pairs, 64, 64).unwrap();
        let mask = it.mask.as_ref().unwrap();
        let (mut mi, mut mo, mut ci, mut co) = (0.0f64, 0.0f64, 0, 0);
        for (k, &m) in mask.iter().enumerate() {
            let v = map.data()[k] as f64;
            if m == 1 { mi += v; ci += 1; } else { mo += v; co += 1; }
        }
        in_mask += mi / ci as f64;
        out_mask += mo / co as f64;
        n_ab += 1.0;
    }
    println!("--- abnormal maps: lesion mean {:.4} vs background mean {:.4} ---", in_mask / n_ab, out_mask / n_ab);

    // cosine levels: mean per-stage flat cosine between f_b and s1 on normal vs abnormal
    for stage in 1..=4 {
        let mut c_norm = 0.0; let mut c_ab = 0.0; let (mut n0, mut n1) = (0.0, 0.0);
        for it in &items {
            let mut t = Tape::new();
            let c = pdd_core::ops::cosine(&mut t, &it.f_b.stage(stage).detached(), &it.s1.stage(stage).detached(), pdd_core::tape::CosineAxis::Flat).unwrap();
            let v = c.data()[0] as f64;
            if it.label == 0 { c_norm += v; n0 += 1.0; } else { c_ab += v; n1 += 1.0; }
        }
        println!("stage {stage}: mean flat cos(f_b, s1) normal {:.4} abnormal {:.4}", c_norm / n0, c_ab / n1);
    }
    let _ = LossWeights::default();
}
