//! Trains a small model on synthetic scenes, then looks at the spread of
//! Monte-Carlo dropout predictions on one unseen image.

use segal::acquisition::{aggregate, bald_map, entropy, Aggregation};
use segal::model::{init_model, train, Architecture, TrainConfig};
use segal::synth::{Dataset, SceneConfig};

fn main() -> segal::Result<()> {
    let scene = SceneConfig {
        height: 32,
        width: 32,
        seed: 3,
        ..SceneConfig::corn_weed()
    };
    let data = Dataset::synthesize(&scene, 25, 0)?;
    let (train_set, test) = data.samples().split_at(24);
    let pairs: Vec<_> = train_set.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();

    let arch = Architecture::standard(1, 3, 0.5)?;
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let (model, report) = train(&init_model(&arch, 1)?, &pairs, &cfg)?;
    println!("loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);

    let img = &test[0].image;
    let stack = model.mc_predict(img, 20, 0.5, 99)?;
    let map = bald_map(&stack)?;

    // the most uncertain pixel, with its per-sample class distributions
    let (best, score) = map
        .raw()
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let (row, col) = (best / map.width(), best % map.width());
    println!("most uncertain pixel ({row},{col}) BALD {score:.4}");
    for s in 0..4 {
        let d = stack.pixel_dist(s, row, col);
        println!("  sample {s}: {d:.3?}  entropy {:.3}", entropy(&d)?);
    }

    let mean = aggregate(test[0].id, &map, Aggregation::Mean)?;
    let top = aggregate(test[0].id, &map, Aggregation::top_percent(map.len()))?;
    println!("image score: mean {:.4}, sum over top 1% of pixels {:.4}", mean.score, top.score);

    let det = model.predict(img)?.argmax(0);
    let agree = det.data().iter().zip(test[0].mask.data()).filter(|(a, b)| a == b).count();
    println!("deterministic pixel accuracy {:.3}", agree as f64 / det.data().len() as f64);
    Ok(())
}
