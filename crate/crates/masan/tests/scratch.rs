use masan::harness::*;

#[test]
fn ablation_seed1_twice() {
    for round in 0..2 {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("train_steps", "150").unwrap();
        cfg.apply("ablation_seeds", "1").unwrap();
        let out = run_ablation::<f32>(&cfg).unwrap();
        println!("round {round}: attention acc {:.4} addition acc {:.4}", out.rows[0].accuracy, out.rows[1].accuracy);
    }
}
