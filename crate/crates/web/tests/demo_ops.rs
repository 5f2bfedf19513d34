use rbo_web::{rank_cls_eval, rank_iou_eval, Scene};

#[test]
fn scene_target_box_encloses_a_coloured_region() {
    let s = Scene::build(5, 1, 0.8, 2).unwrap();
    let rgba = s.rgba_of(0);
    let b = s.boxes_of(0);
    let (cx, cy) = (((b[0] + b[2]) / 2.0) as usize, ((b[1] + b[3]) / 2.0) as usize);
    let i = 4 * (cy * 128 + cx);
    assert_eq!(rgba[i + 3], 255);
    // default target colour is mostly red
    assert!(rgba[i] > rgba[i + 1] && rgba[i] > rgba[i + 2]);
}

#[test]
fn large_margin_violation_is_linear() {
    // softplus(50) / 50 is 1 to double precision
    let [l, ..] = rank_cls_eval(1.0, 0.0, 0.0, 50.0).unwrap();
    assert!((l - 1.0).abs() < 1e-12);
}

#[test]
fn aligned_orderings_give_tau_one() {
    let out = rank_iou_eval(&[0.9, 0.5, 0.1], &[0.8, 0.6, 0.2], 3.0).unwrap();
    assert_eq!(out[1], 1.0);
    assert!(rank_iou_eval(&[0.9], &[0.8, 0.1], 3.0).is_err());
}
