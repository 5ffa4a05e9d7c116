//! Closed-loop task behaviour of the scripted controllers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wheelgait::energy::PowerPredictor;
use wheelgait::env::{EnvConfig, EstimateSource, GaitMode, Pilot, ResidualSource};
use wheelgait::eval::{eval_energy, eval_tracking, EvalSettings, Task};
use wheelgait::gait::{GaitId, VelocityCommand};
use wheelgait::policy::OBS_DIM;
use wheelgait::reference::ReferenceController;
use wheelgait::trainer::{collect_horizon_samples, fit_predictor};

fn settings() -> EvalSettings {
    EvalSettings {
        n_envs: 4,
        duration: 10.0,
        ..EvalSettings::default()
    }
}

fn reference(gait_mode: GaitMode) -> Pilot {
    Pilot {
        residual: ResidualSource::Reference(ReferenceController::default()),
        gait_mode,
        estimate: EstimateSource::GroundTruth,
    }
}

/// Reference residual with gait selection from a predictor fitted on its own rollouts.
fn switching_pilot() -> Pilot {
    let mut cmds = vec![VelocityCommand::ZERO; 4];
    for k in 0..8 {
        let v = 0.3 + 0.1 * k as f64;
        cmds.push(VelocityCommand::new(v, 0.0, 0.0));
        cmds.push(VelocityCommand::new(0.0, if k % 2 == 0 { v } else { -v }, 0.0));
    }
    let res = ResidualSource::Reference(ReferenceController::default());
    let samples = collect_horizon_samples(&res, &EnvConfig::default(), &cmds, 20.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pred = PowerPredictor::new(OBS_DIM, 3, &[128, 128], &mut rng);
    fit_predictor(&mut pred, &samples, 1e-3, 128, 3000, &mut rng).unwrap();
    reference(GaitMode::Predictive {
        predictor: pred,
        temperature: 0.5,
    })
}

#[test]
fn lateral_tracking_needs_legs() {
    let s = settings();
    let driving = eval_tracking(&Pilot::nominal(GaitId::DRIVING), "driving", &s, Task::Vy, Some(0.3)).unwrap();
    let switching = eval_tracking(&switching_pilot(), "switching", &s, Task::Vy, Some(0.3)).unwrap();
    // Scored on the commanded axis: the legged gaits wobble in yaw, which the
    // full three-axis error also counts.
    let (d, w) = (driving.tasks[0].axis_mse[1], switching.tasks[0].axis_mse[1]);
    // Wheels cannot roll sideways, so driving alone leaves the command untracked.
    assert!(d > 0.08, "driving lateral mse {d}");
    assert!(w < 0.7 * d, "switching {w} vs driving {d}; {:?}", switching.tasks[0]);
    let legged: f64 = switching.tasks[0].gait_usage.iter().filter(|g| g.gait != "driving").map(|g| g.fraction).sum();
    assert!(legged >= 0.75, "legged fraction {legged}");
}

#[test]
fn forward_task_cheaper_than_lateral() {
    let s = settings();
    let pilot = switching_pilot();
    let fwd = eval_energy(&pilot, "switching", &s, Task::Vx, Some(0.5)).unwrap();
    let lat = eval_energy(&pilot, "switching", &s, Task::Vy, Some(0.3)).unwrap();
    let zero = eval_energy(&pilot, "switching", &s, Task::Zero, None).unwrap();
    let (pf, pl, pz) = (fwd.tasks[0].mean_power, lat.tasks[0].mean_power, zero.tasks[0].mean_power);
    assert!(pf < pl, "forward {pf} W, lateral {pl} W");
    assert!(pz < pf, "standing {pz} W, forward {pf} W; {:?}", zero.tasks[0]);
    assert!(pz < 2.0, "standing {pz} W {:?}", zero.tasks[0].gait_usage);
}
