// temporary calibration probe, removed before finish
use std::sync::Arc;

use flowguide::control::{
    global_control_solve, mpc_delta_t, mpc_rhc, mpc_rhc_single, GuidanceConfig,
};
use flowguide::data::{hexagon_boundary_distance, sample_base, sample_discs16, SplitMix64};
use flowguide::dynamics::euler_sample;
use flowguide::field::VectorField;
use flowguide::inverse::{simulate_measurement, ForwardOperator, TerminalLoss};
use flowguide::metrics::{psnr, trajectory_distance};
use flowguide::model::{train, Discs16Pairs, HexagonPairs, MlpVectorField, TrainConfig};

fn train_hexagon() -> MlpVectorField {
    let config = TrainConfig {
        batch_size: 256,
        iterations: 5000,
        learning_rate: 1e-3,
        hidden: vec![64, 64],
        seed: 0,
        dataset: "hexagon".into(),
    };
    let t0 = std::time::Instant::now();
    let (model, losses) = train(&mut HexagonPairs::new(0), &config).unwrap();
    let initial = losses[0];
    let final_mean: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    println!(
        "hexagon train: {:.1}s, initial loss {initial:.4}, final mean {final_mean:.4} (ratio {:.3})",
        t0.elapsed().as_secs_f64(),
        final_mean / initial
    );
    model
}

#[test]
#[ignore]
fn hexagon_pipeline() {
    let model = train_hexagon();

    // endpoint quality
    let starts = sample_base(500, 2, 123);
    let mut close = 0;
    let mut dists = Vec::new();
    for x0 in &starts {
        let traj = euler_sample(&model, x0, 100).unwrap();
        let d = hexagon_boundary_distance(traj.terminal());
        dists.push(d);
        if d < 0.15 {
            close += 1;
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "endpoints within 0.15: {close}/500; median {:.4}, p90 {:.4}, max {:.4}",
        dists[250], dists[450], dists[499]
    );

    // grid refinement
    let mut ok = 0;
    for seed in 0..20 {
        let x0 = &sample_base(1, 2, 1000 + seed)[0];
        let e25 = euler_sample(&model, x0, 25).unwrap();
        let e100 = euler_sample(&model, x0, 100).unwrap();
        let e200 = euler_sample(&model, x0, 200).unwrap();
        let d = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let coarse = d(e25.terminal(), e200.terminal());
        let fine = d(e100.terminal(), e200.terminal());
        if fine < coarse {
            ok += 1;
        }
    }
    println!("grid refinement holds for {ok}/20 seeds");

    // corner steering: global + rhc over K
    let corner = vec![1.0, -(3.0f64.sqrt())];
    let phi = TerminalLoss::target(corner.clone());
    let x0 = &sample_base(1, 2, 7)[0];
    let lambda = 10.0;
    let n = 20;
    let t0 = std::time::Instant::now();
    let gconf = GuidanceConfig::new(lambda, n).with_inner(3000, 0.02);
    let global = global_control_solve(&model, x0, &phi, &gconf).unwrap();
    println!(
        "global: J {:.4} energy {:.4} phi {:.6} evals {} iters {} ({:.1}s)",
        global.objective,
        global.control_energy,
        global.terminal_loss,
        global.differentiated_field_evals,
        global.inner_iterations,
        t0.elapsed().as_secs_f64()
    );
    for k in [1usize, 2, 4, 8] {
        let t1 = std::time::Instant::now();
        let conf = GuidanceConfig::new(lambda, n).with_lookahead(k).with_inner(1200, 0.02);
        let r = mpc_rhc(&model, x0, &phi, &conf).unwrap();
        let dist = trajectory_distance(&r.trajectory, &global.trajectory);
        println!(
            "rhc K={k}: traj dist {dist:.5} phi {:.6} energy {:.4} J {:.4} ({:.1}s)",
            r.terminal_loss,
            r.control_energy,
            r.objective,
            t1.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn discs_pipeline() {
    let config = TrainConfig {
        batch_size: 128,
        iterations: 1500,
        learning_rate: 1e-3,
        hidden: vec![512, 512],
        seed: 0,
        dataset: "discs16".into(),
    };
    let t0 = std::time::Instant::now();
    let (model, losses) = train(&mut Discs16Pairs::new(0), &config).unwrap();
    println!(
        "discs train: {:.1}s, initial {:.4}, final-100 mean {:.4}",
        t0.elapsed().as_secs_f64(),
        losses[0],
        losses[losses.len() - 100..].iter().sum::<f64>() / 100.0
    );

    // unconditional sample sanity: pixel range
    let x0 = &sample_base(1, 256, 50)[0];
    let s = euler_sample(&model, x0, 20).unwrap();
    let end = s.terminal();
    let inside = end.iter().filter(|v| (-0.2..=1.2).contains(*v)).count();
    println!("sample pixels within [-0.2, 1.2]: {inside}/256");

    // denoising with delta-t
    let truth = &sample_discs16(6, 999)[5];
    let op = Arc::new(ForwardOperator::identity(256));
    let obs = simulate_measurement(&op, truth, 0.2, 11);
    let noisy_psnr = psnr(&obs.y, truth, 1.0);
    let phi = TerminalLoss::data_fidelity(obs);
    for lambda_tilde in [0.5, 2.0, 8.0] {
        let mut conf = GuidanceConfig::new(lambda_tilde, 20).with_inner(20, 0.1);
        conf.rescale_lambda = true;
        let t1 = std::time::Instant::now();
        let r = mpc_delta_t(&model, &sample_base(1, 256, 77)[0], &phi, &conf).unwrap();
        let restored: Vec<f64> = r.terminal_state().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        println!(
            "deltat lt={lambda_tilde}: psnr {:.2} (noisy {noisy_psnr:.2}) phi {:.3} ({:.1}s)",
            psnr(&restored, truth, 1.0),
            r.terminal_loss,
            t1.elapsed().as_secs_f64()
        );
    }

    // rhc1 and rhc3 on denoising
    for (name, k, lambda) in [("rhc1", 1usize, 0.15), ("rhc1", 1, 0.5), ("rhc3", 3, 0.15), ("rhc3", 3, 0.5)] {
        let op = Arc::new(ForwardOperator::identity(256));
        let obs = simulate_measurement(&op, truth, 0.2, 11);
        let phi = TerminalLoss::data_fidelity(obs);
        let conf = GuidanceConfig::new(lambda, 20).with_lookahead(k).with_inner(20, 0.1);
        let t1 = std::time::Instant::now();
        let r = if k == 1 {
            mpc_rhc_single(&model, &sample_base(1, 256, 77)[0], &phi, &conf).unwrap()
        } else {
            mpc_rhc(&model, &sample_base(1, 256, 77)[0], &phi, &conf).unwrap()
        };
        let restored: Vec<f64> = r.terminal_state().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        println!(
            "{name} lambda={lambda}: psnr {:.2} (noisy {noisy_psnr:.2}) ({:.1}s), evals {}",
            psnr(&restored, truth, 1.0),
            t1.elapsed().as_secs_f64(),
            r.differentiated_field_evals
        );
    }
}
