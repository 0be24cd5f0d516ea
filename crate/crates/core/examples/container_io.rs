//! Writes a probability stack to an ALTS container, reads it back, checks it
//! and scores it.

use segal::acquisition::{aggregate, bald_map, Aggregation};
use segal::container::{decode, encode, Metadata};
use segal::tensor::{validate_stack, ProbabilityStack};

fn main() -> segal::Result<()> {
    // two MC samples, two classes, a 1x2 image; the samples disagree on the
    // first pixel and agree on the second
    let stack = ProbabilityStack::new(2, 2, 1, 2, vec![0.9, 0.3, 0.1, 0.7, 0.1, 0.3, 0.9, 0.7])?;

    let mut meta = Metadata::new();
    meta.insert("source".into(), "example".into());
    let bytes = encode(&stack.to_tensor(), &meta)?;
    println!("{} bytes, magic {:?}", bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap());

    let (tensor, meta_back) = decode(&bytes)?;
    println!("dims {:?}, metadata {meta_back:?}", tensor.dims());
    let back = ProbabilityStack::from_tensor(tensor)?;
    validate_stack(&back).into_result()?;

    let map = bald_map(&back)?;
    println!("BALD map {:.4?}", map.raw());
    println!("image score {:.4}", aggregate(0, &map, Aggregation::Mean)?.score);

    // a corrupted header is rejected
    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("corrupted: {}", decode(&bad).unwrap_err());
    Ok(())
}
