//! Confidence intervals and one-way ANOVA over repeated runs.

use segal::stats::{mean_ci, one_way_anova};

fn main() -> segal::Result<()> {
    let bald = vec![0.612, 0.634, 0.621];
    let powerbald = vec![0.641, 0.652, 0.637];
    let random = vec![0.588, 0.604, 0.579];

    for (name, v) in [("BALD", &bald), ("PowerBALD", &powerbald), ("Random", &random)] {
        let ci = mean_ci(v, 0.95)?;
        println!("{name:<10} mean {:.4}  95% CI [{:.4}, {:.4}]", ci.mean, ci.lower, ci.upper);
    }

    let r = one_way_anova(&[bald, powerbald, random])?;
    println!(
        "ANOVA F({}, {}) = {:.3}, p = {:.4}{}",
        r.df_between,
        r.df_within,
        r.f,
        r.p,
        if r.significant { " (significant)" } else { "" }
    );

    // identical groups carry no information
    match one_way_anova(&[vec![0.5; 3], vec![0.5; 3]]) {
        Err(e) => println!("constant groups: {e}"),
        Ok(r) => println!("constant groups: F = {}", r.f),
    }
    Ok(())
}
