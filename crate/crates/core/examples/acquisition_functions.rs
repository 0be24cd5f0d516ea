//! Compares BALD, PowerBALD and Random selection on a fixed set of scores.

use segal::acquisition::{
    powerbald_weights, select_bald, select_powerbald, select_random, Aggregation, ImageScore,
};

fn main() -> segal::Result<()> {
    let raw = [0.30, 0.28, 0.27, 0.05, 0.04, 0.04, 0.03, 0.02, 0.01, 0.0];
    let scores: Vec<ImageScore> = raw
        .iter()
        .enumerate()
        .map(|(i, &score)| ImageScore {
            id: i as u32,
            score,
            aggregation: Aggregation::Mean,
        })
        .collect();
    let ids: Vec<u32> = scores.iter().map(|s| s.id).collect();

    println!("BALD top 3:      {:?}", select_bald(&scores, 3)?);
    for t in [0.5, 1.0, 4.0] {
        let w = powerbald_weights(&raw, t);
        println!("PowerBALD T={t}:  weights {:.3?}", &w[..4]);
    }

    // how often each image is picked by PowerBALD over many seeds
    let mut hits = [0usize; 10];
    for seed in 0..2000 {
        for id in select_powerbald(&scores, 3, 1.0, seed)? {
            hits[id as usize] += 1;
        }
    }
    println!("PowerBALD picks per image over 2000 draws: {hits:?}");
    println!("Random 3:        {:?}", select_random(&ids, 3, 5)?);
    Ok(())
}
