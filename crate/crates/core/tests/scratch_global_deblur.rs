// temporary calibration probe, removed before finish
use std::sync::Arc;

use flowguide::control::{global_control_solve, GuidanceConfig};
use flowguide::data::{sample_base, sample_discs16};
use flowguide::dynamics::euler_sample;
use flowguide::inverse::{simulate_measurement, ForwardOperator, TerminalLoss};
use flowguide::metrics::psnr;
use flowguide::model::load_checkpoint;

#[test]
#[ignore]
fn global_deblur_ceiling() {
    let model = load_checkpoint(&std::env::temp_dir().join("discs_8000.ckpt")).unwrap();
    let truths = sample_discs16(3, 999);
    let op = Arc::new(ForwardOperator::gaussian_blur(16, 16, 1.0));

    // free endpoint quality reference
    for (i, truth) in truths.iter().enumerate() {
        let x0 = sample_base(1, 256, 500 + i as u64).swap_remove(0);
        for n in [20usize, 100] {
            let traj = euler_sample(&model, &x0, n).unwrap();
            let end = traj.terminal();
            let outside = end.iter().filter(|v| !(-0.1..=1.1).contains(*v)).count();
            if i == 0 {
                println!(
                    "free sample N={n}: psnr-vs-truth {:.2} pixels outside [-0.1,1.1]: {outside}/256",
                    psnr(&end.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>(), truth, 1.0)
                );
            }
        }
    }

    for lambda in [0.2, 0.5, 1.0] {
        let mut deg = 0.0;
        let mut res = 0.0;
        let t0 = std::time::Instant::now();
        for (i, truth) in truths.iter().enumerate() {
            let obs = simulate_measurement(&op, truth, 0.05, 100 + i as u64);
            deg += psnr(&obs.y, truth, 1.0) / 3.0;
            let phi = TerminalLoss::data_fidelity(obs);
            let x0 = sample_base(1, 256, 500 + i as u64).swap_remove(0);
            let c = GuidanceConfig::new(lambda, 20).with_inner(1500, 0.02);
            let r = global_control_solve(&model, &x0, &phi, &c).unwrap();
            let restored: Vec<f64> =
                r.terminal_state().iter().map(|v| v.clamp(0.0, 1.0)).collect();
            res += psnr(&restored, truth, 1.0) / 3.0;
        }
        println!(
            "global l={lambda}: degraded {deg:.2} restored {res:.2} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }
}
