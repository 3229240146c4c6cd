use ofvio::dataset::SyntheticSetup;
use ofvio::estimator::{run_odometry, FrontEndKind, OdometryConfig};

#[test]
fn zero_motion_stays_within_a_centimetre() {
    let seq = SyntheticSetup::stationary(3.0).synthesize().unwrap();
    let origin = seq.ground_truth[0].position;
    for kind in [FrontEndKind::Of, FrontEndKind::Host] {
        let run = run_odometry(&seq, kind, &OdometryConfig::default()).unwrap();
        assert!(run.trajectory.len() >= 25);
        let worst = run
            .trajectory
            .iter()
            .map(|p| (p.position - origin).norm())
            .fold(0.0f64, f64::max);
        assert!(worst < 0.01, "{kind:?}: drifted {worst} m");
    }
}

#[test]
fn short_run_tracks_ground_truth() {
    let seq = SyntheticSetup::circle_figure_eight(4.0).synthesize().unwrap();
    let run = run_odometry(&seq, FrontEndKind::Of, &OdometryConfig::default()).unwrap();
    let m = ofvio::eval::evaluate(&run.trajectory, &seq.ground_truth, ofvio::eval::DEFAULT_MAX_DT, 15.0).unwrap();
    assert!(m.ate_over_path < 0.01, "ATE {} over {} m", m.sim3.rmse, m.path_length_m);
    for h in &run.cost_histories {
        assert!(h.windows(2).all(|w| w[1] < w[0]));
    }
}
