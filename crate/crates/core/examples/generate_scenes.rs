//! Renders a small synthetic dataset for each scene preset and prints the
//! resulting class balance.
//!
//!     cargo run --example generate_scenes -- /tmp/scenes

use std::path::PathBuf;

use segal::synth::{class_stats, generate_dataset, group_sizes, inject_redundancy, Jitter, SceneConfig};

fn main() -> segal::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("segal-scenes"));

    for name in ["sugarbeet", "corn_weed", "pretrain_a", "field_b"] {
        let cfg = SceneConfig {
            seed: 11,
            ..SceneConfig::preset(name)?
        };
        let manifest = generate_dataset(&cfg, 40, &root.join(name))?;
        let f = class_stats(&manifest)?;
        println!(
            "{name:<10} {} images  background {:.3}  crop {:.3}  weed {:.3}",
            manifest.entries.len(),
            f[0],
            f[1],
            f[2]
        );
    }

    // a pool where every scene has two jittered near-duplicates
    let cfg = SceneConfig {
        seed: 12,
        ..SceneConfig::corn_weed()
    };
    let src = generate_dataset(&cfg, 10, &root.join("corn_weed_x3"))?;
    let jitter = Jitter {
        max_shift: 2,
        noise_amplitude: 0.02,
    };
    let dup = inject_redundancy(&src, 3, jitter, 7)?;
    println!(
        "redundant pool: {} images in {} groups",
        dup.entries.len(),
        group_sizes(&dup).len()
    );
    println!("written under {}", root.display());
    Ok(())
}
