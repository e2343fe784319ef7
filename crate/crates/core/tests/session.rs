//! Full teaching session replayed through the perception-driven pipeline.

use cuelearn::detection::{detect, DetectionModel};
use cuelearn::geometry::iou;
use cuelearn::orchestrator::{
    log_to_jsonl, run_session, Action, PipelineConfig, SocialModels, SocialTrainingConfig, StateKind,
};
use cuelearn::simworld::{object_by_label, render_frame, ScenarioScript};

#[test]
fn scripted_session_reaches_ready_with_a_working_detector() {
    let models = SocialModels::train(&SocialTrainingConfig::default()).unwrap();
    let obj = object_by_label("006_mustard_bottle").unwrap();
    let script = ScenarioScript::session(obj.clone(), 21, 300);
    let cfg = PipelineConfig::default();
    let out = run_session(&script, &models, &cfg).unwrap();

    assert_eq!(out.final_state.state, StateKind::Ready, "{:?}", out.final_state);
    assert_eq!(out.annotations.len(), 300);
    assert!(out.annotations.iter().all(|a| a.label == obj.label));

    let visited: Vec<StateKind> = out.log.iter().map(|r| r.state_after).collect();
    for k in [StateKind::Engaging, StateKind::AwaitCommand, StateKind::LocateHand, StateKind::Acquire, StateKind::Train] {
        assert!(visited.contains(&k), "{k:?} never entered");
    }
    // engagement needs eleven consecutive frames of eye contact, which starts at frame 5
    let engaged = out.log.iter().find(|r| r.actions.contains(&Action::Engage)).unwrap();
    assert!(engaged.time >= 15.0 / 7.0 - 1e-9, "engaged at {}", engaged.time);

    // detections on the tail frames hit the held object
    let mut hits = 0;
    let mut tail = 0;
    for r in &out.log {
        for a in &r.actions {
            if let Action::Detections { frame_index, detections } = a {
                tail += 1;
                let (_, gt) = render_frame(&script, &script.intrinsics(), *frame_index);
                let truth = gt.true_object_box.unwrap();
                if detections.iter().any(|d| d.label == obj.label && iou(&d.bbox, &truth) >= 0.5) {
                    hits += 1;
                }
            }
        }
    }
    assert!(tail >= 10, "{tail} detection frames");
    assert!(hits * 10 >= tail * 8, "{hits}/{tail}");

    let model = out.detector.unwrap();
    let bytes = model.to_bytes();
    let back = DetectionModel::from_bytes(&bytes, &model.registry()).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let (frame, _) = render_frame(&script, &script.intrinsics(), script.n_frames - 1);
    assert_eq!(detect(&back, &frame), detect(&model, &frame));
    assert_eq!(log_to_jsonl(&out.log).unwrap().lines().count(), out.log.len());
}
