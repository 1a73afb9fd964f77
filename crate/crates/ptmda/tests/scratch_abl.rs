//! Temporary recipe probe; not part of the gate.

use ptmda::data::{gen_synthetic, Domain, SyntheticFamily, SyntheticSpec};
use ptmda::eval::{run_ablation, standard_variants};
use ptmda::trainer::TrainConfig;

fn moons(n: usize, seed: u64) -> (Vec<Domain<f64>>, Domain<f64>) {
    let spec = SyntheticSpec {
        family: SyntheticFamily::RotatedMoons { angles_deg: vec![0.0, 30.0, 60.0, 90.0] },
        n_per_domain: n,
        noise_std: 0.1,
        seed,
    };
    let mut domains = gen_synthetic(&spec).unwrap();
    let target = domains.pop().unwrap();
    (domains, target)
}

#[test]
fn ablation_recipes() {
    let (sources, target) = moons(500, 0);
    for (e1, e2) in [(30usize, 30usize), (60, 60), (100, 30)] {
        let base = TrainConfig {
            epochs_stage1: e1,
            epochs_stage2: e2,
            ..TrainConfig::default()
        };
        let table =
            run_ablation(&sources, &target, &base, &standard_variants(), &[0, 1, 2, 3, 4], 1)
                .unwrap();
        let mut line = format!("e1={e1} e2={e2}:");
        for v in &standard_variants() {
            let accs: Vec<f64> = table
                .rows
                .iter()
                .filter(|r| r.variant == v.name)
                .map(|r| r.accuracy)
                .collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            line.push_str(&format!(" {}={mean:.4}", v.name));
        }
        println!("{line}");
    }
}
