//! Social classifiers trained and evaluated on simulated people.

use cuelearn::classifiers::{
    hand_label, hand_selection, model_select, mutual_gaze, online_teacher_update, svm_train, CalibratedSvm,
    OnlineTrainerState, SearchScheme, TEACHER_BATCH,
};
use cuelearn::orchestrator::{
    gaze_grid, gaze_training_set, hand_target_label, with_mirrored, mutual_gaze_label, SocialModels, SocialTrainingConfig,
};
use cuelearn::perception::{gaze_feature, Hand, KeypointSet};
use cuelearn::simworld::{
    gaze_dataset, object_by_label, render_frame, FaceRegistry, GazeSample, GazeTarget, NoiseParams, ScenarioScript,
    DEFAULT_EMBEDDING_SIGMA,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

const PERSONS: u64 = 24;
const TRAIN_PERSONS: usize = 19;

fn models() -> &'static SocialModels {
    static M: OnceLock<SocialModels> = OnceLock::new();
    M.get_or_init(|| SocialModels::train(&SocialTrainingConfig::default()).unwrap())
}

/// Seeded 19/5 partition of the simulated identities.
fn person_split(seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut ids: Vec<u64> = (0..PERSONS).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(TRAIN_PERSONS);
    (ids, test)
}

fn subset(data: &[GazeSample], persons: &[u64]) -> Vec<GazeSample> {
    data.iter().filter(|s| persons.contains(&s.person)).cloned().collect()
}

#[test]
fn held_out_person_splits() {
    let mut hand_acc = Vec::new();
    let mut gaze_acc = Vec::new();
    for split in 0..5u64 {
        let data = gaze_dataset(PERSONS, 20, &NoiseParams::default(), 500 + split);
        let (train_ids, test_ids) = person_split(split);
        let (train, test) = (subset(&data, &train_ids), subset(&data, &test_ids));

        let (x, y) = gaze_training_set(&with_mirrored(&train), hand_target_label);
        let (tx, ty) = gaze_training_set(&test, hand_target_label);
        let hand = CalibratedSvm::fit(&x, &y, &gaze_grid(x[0].len()), SearchScheme::FiveFoldGrid, split).unwrap();
        hand_acc.push(hand.model.accuracy(&tx, &ty).unwrap());

        let (x, y) = gaze_training_set(&train, mutual_gaze_label);
        let (tx, ty) = gaze_training_set(&test, mutual_gaze_label);
        let p = model_select(&x, &y, &gaze_grid(x[0].len()), SearchScheme::FiveFoldGrid).unwrap();
        let m = svm_train(&x, &y, p.c, p.gamma).unwrap();
        gaze_acc.push(m.accuracy(&tx, &ty).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(hand_acc.iter().all(|a| *a >= 0.95), "hand selection {hand_acc:?}");
    assert!(mean(&gaze_acc) >= 0.95, "mutual gaze {gaze_acc:?}");
}

fn teacher_keypoints(script: &ScenarioScript, frame: u32) -> (KeypointSet, GazeTarget) {
    let (_, gt) = render_frame(script, &script.intrinsics(), frame);
    (gt.teacher().unwrap().keypoints.clone(), gt.teacher_gaze)
}

#[test]
fn scripted_session_gaze_is_recognized() {
    let m = models();
    let script = ScenarioScript::session(object_by_label("025_mug").unwrap(), 1, 300);
    let hand = script.teacher.held_hand;
    let mut correct = 0;
    let frames = 0..60u32;
    for f in frames.clone() {
        let (kp, target) = teacher_keypoints(&script, f);
        let feat = gaze_feature(&kp).unwrap();
        let contact = mutual_gaze(&feat, &m.mutual_gaze).unwrap();
        if contact == (target == GazeTarget::AtRobot) {
            correct += 1;
        }
        if target == GazeTarget::at_hand(hand) {
            let sel = hand_selection(&feat, &m.hand).unwrap();
            assert_eq!(sel.p, hand, "frame {f}");
            assert!(sel.c > 0.5, "frame {f}: confidence {}", sel.c);
        }
    }
    assert!(correct as f64 >= 0.9 * frames.len() as f64, "{correct}/{}", frames.len());

    // a translated face is the same face
    let (kp, _) = teacher_keypoints(&script, 10);
    let shifted = kp.map_xy(|x, y| (x + 7.0, y - 3.0));
    let a = gaze_feature(&kp).unwrap();
    let b = gaze_feature(&shifted).unwrap();
    assert_eq!(mutual_gaze(&a, &m.mutual_gaze).unwrap(), mutual_gaze(&b, &m.mutual_gaze).unwrap());
}

#[test]
fn mirrored_face_swaps_the_selected_hand() {
    let m = models();
    let data = gaze_dataset(6, 10, &NoiseParams::default(), 77);
    let mut checked = 0;
    for s in data.iter().filter(|s| s.target == GazeTarget::AtLeftHand) {
        // faces cut off by the image border carry no gaze feature
        let Ok(feat) = gaze_feature(&s.keypoints) else { continue };
        let (cx, _) = s.keypoints.head_centroid().unwrap();
        let mirrored = gaze_feature(&s.keypoints.mirrored(cx)).unwrap();
        assert_eq!(hand_selection(&feat, &m.hand).unwrap().p, Hand::Left);
        assert_eq!(hand_selection(&mirrored, &m.hand).unwrap().p, Hand::Right);
        checked += 1;
    }
    assert!(checked >= 50, "{checked} faces checked");
    assert_eq!(hand_label(Hand::Left), -hand_label(Hand::Right));
}

fn batch(registry: &FaceRegistry, identity: u64, k: u64, sigma: f64) -> Vec<Vec<f64>> {
    (0..TEACHER_BATCH as u64).map(|i| registry.embedding(identity, k << 32 | i, sigma).unwrap()).collect()
}

#[test]
fn teacher_training_stops_after_one_clean_batch() {
    let reg = FaceRegistry::global();
    let pool = reg.negatives_pool(DEFAULT_EMBEDDING_SIGMA);
    let state = online_teacher_update(OnlineTrainerState::new(5), &batch(reg, 0, 0, DEFAULT_EMBEDDING_SIGMA), &pool).unwrap();
    assert!(state.terminated);
    assert_eq!(state.batches_collected, 1);
    assert!(state.val_accuracy >= 0.99);
    let model = state.current_model.as_ref().unwrap();
    model.check_dual_feasibility(1e-6).unwrap();
    for id in [0u64, 1, 4, 9, 200] {
        let e = reg.embedding(id, 999, DEFAULT_EMBEDDING_SIGMA).unwrap();
        assert_eq!(model.decision(&e).unwrap() > 0.0, id == 0, "identity {id}");
    }
}

#[test]
fn noisy_embeddings_need_a_second_batch() {
    let reg = FaceRegistry::global();
    let sigma = 0.4;
    let pool = reg.negatives_pool(sigma);
    let state = online_teacher_update(OnlineTrainerState::new(5), &batch(reg, 0, 0, sigma), &pool).unwrap();
    assert!(!state.terminated, "validation accuracy {}", state.val_accuracy);
    let state = online_teacher_update(state, &batch(reg, 0, 1, sigma), &pool).unwrap();
    assert_eq!(state.batches_collected, 2);
    assert_eq!(state.positives.len(), 2 * TEACHER_BATCH);
    assert_eq!(state.negatives.len(), 2 * TEACHER_BATCH);
}

#[test]
fn mirroring_maps_left_gaze_onto_right_gaze() {
    let data = gaze_dataset(3, 1, &NoiseParams::zero(), 77);
    for person in 0..3 {
        let find = |t| data.iter().find(|s| s.person == person && s.target == t).unwrap();
        let (left, right) = (find(GazeTarget::AtLeftHand), find(GazeTarget::AtRightHand));
        let (cx, _) = left.keypoints.head_centroid().unwrap();
        let m = gaze_feature(&left.keypoints.mirrored(cx)).unwrap().values;
        let r = gaze_feature(&right.keypoints).unwrap().values;
        for (a, b) in m.iter().zip(&r) {
            assert!((a - b).abs() < 1e-9, "person {person}: {a} vs {b}");
        }
        let back = left.keypoints.mirrored(cx).mirrored(cx);
        for j in cuelearn::perception::FACE_JOINTS {
            let (a, b) = (back.get(j).unwrap(), left.keypoints.get(j).unwrap());
            assert!((a.x - b.x).abs() < 1e-9 && a.y == b.y, "{j}");
        }
    }
}
