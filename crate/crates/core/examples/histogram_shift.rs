//! Pretrains on one scene distribution and compares image-level BALD
//! histograms on held-out images from the same distribution and from a
//! shifted one.

use segal::acquisition::{AcquisitionKind, AcquisitionSpec};
use segal::al_loop::{score_images, McSettings};
use segal::model::{init_model, train, Architecture, TrainConfig};
use segal::stats::score_histogram;
use segal::synth::{Dataset, SceneConfig};

fn main() -> segal::Result<()> {
    let small = |cfg: SceneConfig, seed| SceneConfig {
        height: 32,
        width: 32,
        seed,
        ..cfg
    };
    let a = Dataset::synthesize(&small(SceneConfig::pretrain_a(), 1), 60, 0)?;
    let b = Dataset::synthesize(&small(SceneConfig::field_b(), 2), 20, 0)?;

    let (fit, held_out) = a.samples().split_at(40);
    let pairs: Vec<_> = fit.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
    let arch = Architecture::standard(1, 3, 0.5)?;
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let (model, _) = train(&init_model(&arch, 4)?, &pairs, &cfg)?;

    let spec = AcquisitionSpec::new(AcquisitionKind::Bald);
    let mc = McSettings {
        samples: 20,
        dropout_p: 0.5,
        seed: 8,
    };
    let held_ids: Vec<u32> = held_out.iter().map(|s| s.id).collect();
    let sa: Vec<f64> = score_images(&model, &a, &held_ids, &spec, mc)?.iter().map(|s| s.score).collect();
    let sb: Vec<f64> = score_images(&model, &b, &b.ids(), &spec, mc)?.iter().map(|s| s.score).collect();

    let hi = sa.iter().chain(&sb).cloned().fold(0.0, f64::max);
    let ha = score_histogram(&sa, 10, (0.0, hi))?;
    let hb = score_histogram(&sb, 10, (0.0, hi))?;
    println!("{:>17}  {:>4}  {:>4}", "bin", "A", "B");
    for (x, y) in ha.iter().zip(&hb) {
        println!("[{:.4}, {:.4})  {:>4}  {:>4}", x.lo, x.hi, x.count, y.count);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean BALD: A {:.4}  B {:.4}", mean(&sa), mean(&sb));
    Ok(())
}
