use dmhe_core::config::HarnessConfig;
use dmhe_core::scenarios::{run_closed_loop, NoTuner};
use dmhe_core::weights::ThetaParams;

#[test]
fn probe_trained_vs_untrained_landscape() {
    let config = HarnessConfig::default();
    let setup = config.setup().unwrap();

    for (name, g1, g2) in [
        ("initial  (0.40, 0.80)", 0.4, 0.8),
        ("trained  (0.96, 0.20)", 0.96, 0.2),
    ] {
        let theta = ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, g1, g2);
        let outcome =
            run_closed_loop(&setup, &theta, &config.gains, &mut NoTuner).unwrap();
        assert!(outcome.failure.is_none(), "{:?}", outcome.failure);
        println!(
            "{name}: disturbance rms {:.4}  position rms {:.4}  mean loss {:.4e}",
            outcome.log.disturbance_rms(),
            outcome.log.position_rms(),
            outcome.log.mean_loss()
        );
    }
    panic!("probe");
}
