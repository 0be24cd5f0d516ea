//! A scaled-down active-learning experiment comparing the three
//! acquisitions, followed by the per-round summary.

use segal::acquisition::{AcquisitionKind, AcquisitionSpec};
use segal::al_loop::{run_experiment, ExperimentConfig, ExperimentData};
use segal::model::{Architecture, TrainConfig};
use segal::report::{summarize, CurveRow};
use segal::synth::{Dataset, SceneConfig};

fn main() -> segal::Result<()> {
    let scene = |seed| SceneConfig {
        height: 32,
        width: 32,
        seed,
        ..SceneConfig::corn_weed()
    };
    let pool = Dataset::synthesize(&scene(1), 40, 0)?;
    let val = Dataset::synthesize(&scene(2), 10, 1000)?;
    let data = ExperimentData {
        pool: &pool,
        val: &val,
        warm_start: None,
    };

    let mut rows = Vec::new();
    for kind in AcquisitionKind::ALL {
        let cfg = ExperimentConfig {
            run_id: "demo".into(),
            acquisition: AcquisitionSpec::new(kind),
            iterations: 3,
            sample_size: 5,
            initial_size: 5,
            mc_samples: 8,
            repetitions: 2,
            arch: Architecture::standard(1, 3, 0.5)?,
            train: TrainConfig {
                epochs: 30,
                learning_rate: 0.1,
                ..TrainConfig::default()
            },
            seed: 42,
            ..ExperimentConfig::standard(kind)
        };
        let out = run_experiment(&cfg, &data)?;
        for r in &out.records {
            rows.push(CurveRow::from_record(&cfg.run_id, r)?);
        }
        let t = &out.traces[0];
        println!("{kind}: repetition 0 annotated {:?}", t.annotated.last().unwrap());
    }

    println!("{:>4} {:>10} {:>5} {:>7}  ci", "iter", "acq", "n", "mIoU");
    for s in summarize(&rows)? {
        let ci = s.ci.map(|(lo, hi)| format!("[{lo:.3}, {hi:.3}]")).unwrap_or_default();
        println!("{:>4} {:>10} {:>5} {:>7.3}  {ci}", s.iteration, s.acquisition, s.n_labeled, s.mean);
    }
    Ok(())
}
