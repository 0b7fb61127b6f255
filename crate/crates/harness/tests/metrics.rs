use dtx_core::heads::{FramePredictions, PlanPrediction};
use dtx_core::labels::FrameLabels;
use dtx_core::{ModelConfig, Preset};
use dtx_harness::metrics::{open_loop_metrics, oracle_predictions};
use dtx_harness::Error;
use dtx_simworld::{default_cameras, generate_clip, generate_scenario, Family};

fn labelled_frames() -> (ModelConfig, Vec<FrameLabels>) {
    let cfg = ModelConfig::desk(Preset::Small);
    let mut labels = Vec::new();
    for (fam, seed) in [(Family::CutIn, 1), (Family::Merge, 2)] {
        let clip = generate_clip(generate_scenario(fam, seed), 25..28, default_cameras(32), &cfg).unwrap();
        labels.extend(clip.frames.into_iter().map(|f| f.labels));
    }
    assert!(labels.iter().any(|l| !l.boxes.is_empty()));
    assert!(labels.iter().any(|l| !l.polylines.is_empty()));
    (cfg, labels)
}

#[test]
fn oracle_predictions_score_perfectly() {
    let (cfg, labels) = labelled_frames();
    let preds: Vec<_> = labels.iter().map(|l| oracle_predictions(l, &cfg)).collect();
    let m = open_loop_metrics(&preds, &labels).unwrap();
    assert_eq!(m.frames, labels.len());
    for ap in m.det_ap {
        assert!((ap - 1.0).abs() < 1e-12, "{:?}", m.det_ap);
    }
    assert!((m.map_ap - 1.0).abs() < 1e-12);
    assert!(m.min_ade < 1e-9 && m.min_fde < 1e-9 && m.miss_rate == 0.0);
    assert_eq!(m.motion_matches, labels.iter().map(|l| l.boxes.len()).sum::<usize>());
    assert!(m.plan_l2 < 1e-9);
}

#[test]
fn empty_predictions_score_zero() {
    let (cfg, labels) = labelled_frames();
    let preds: Vec<_> = labels
        .iter()
        .map(|l| FramePredictions {
            boxes: Vec::new(),
            motions: Vec::new(),
            map: Vec::new(),
            plan: oracle_predictions(l, &cfg).plan,
        })
        .collect();
    let m = open_loop_metrics(&preds, &labels).unwrap();
    assert_eq!(m.det_ap, [0.0; 4]);
    assert_eq!(m.map_ap, 0.0);
    assert_eq!(m.motion_matches, 0);
    assert!(m.min_ade.is_finite());
}

#[test]
fn min_ade_takes_the_best_of_two_modes() {
    let (cfg, labels) = labelled_frames();
    let shift = |traj: &[[f64; 2]], dx: f64| traj.iter().map(|p| [p[0] + dx, p[1]]).collect::<Vec<_>>();
    let preds: Vec<_> = labels
        .iter()
        .map(|l| {
            let mut p = oracle_predictions(l, &cfg);
            for (m, b) in p.motions.iter_mut().zip(&l.boxes) {
                m.modes = vec![shift(&b.future, 1.0), shift(&b.future, 3.0)];
                m.logits = vec![0.0, 0.0];
            }
            p
        })
        .collect();
    let m = open_loop_metrics(&preds, &labels).unwrap();
    // both modes are rigid shifts in the agent frame, so distances survive the rotation
    assert!((m.min_ade - 1.0).abs() < 1e-9, "{}", m.min_ade);
    assert!((m.min_fde - 1.0).abs() < 1e-9);
    assert_eq!(m.miss_rate, 0.0);
}

#[test]
fn plan_horizon_mismatch_is_an_error() {
    let (cfg, labels) = labelled_frames();
    let preds: Vec<_> = labels
        .iter()
        .map(|l| {
            let mut p = oracle_predictions(l, &cfg);
            p.plan = PlanPrediction {
                modes: p.plan.modes.iter().map(|m| m[..m.len() - 1].to_vec()).collect(),
                logits: p.plan.logits.clone(),
            };
            p
        })
        .collect();
    assert!(matches!(open_loop_metrics(&preds, &labels), Err(Error::HorizonMismatch(_))));
    assert!(matches!(open_loop_metrics(&preds[1..], &labels), Err(Error::InvalidArgument(_))));
}
