use std::sync::Arc;

use rand::Rng;
use viewformer_core::attention::PlanBuilder;
use viewformer_core::codebook::TokenGrid;
use viewformer_core::gradcheck::{random_episode, tiny_model_config};
use viewformer_core::model::{loss_nvs, loss_pose, to_world_frame, EpisodeBatch, Model, ModelConfig, Tasks, POSE_DIM};
use viewformer_core::pose::{canonicalize_poses, normalize3, CameraPose, Quat};
use viewformer_core::rng::{normal_tensor, seeded};
use viewformer_core::{Tape, Tensor};

fn config() -> ModelConfig {
    ModelConfig {
        n: 5,
        n_min: 2,
        d_m: 16,
        layers: 2,
        heads: 2,
        ..tiny_model_config()
    }
}

struct Outputs {
    logits: Tensor<f64>,
    poses: Tensor<f64>,
    input: Tensor<f64>,
    nvs_rows: Vec<usize>,
    loc_rows: Vec<usize>,
}

fn run(model: &Model<f64>, ep: &EpisodeBatch) -> Outputs {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model
        .forward_train(&mut tape, &bound, std::slice::from_ref(ep), Tasks::Both)
        .unwrap();
    Outputs {
        logits: tape.value(out.token_logits.unwrap()).clone(),
        poses: tape.value(out.pose_estimates.unwrap()).clone(),
        input: tape.value(out.input).clone(),
        nvs_rows: out.nvs_rows,
        loc_rows: out.loc_rows,
    }
}

fn block(t: &Tensor<f64>, q: usize, b: usize) -> &[f64] {
    let w = t.shape()[1];
    &t.data()[q * b * w..(q + 1) * b * w]
}

#[test]
fn later_views_never_influence_earlier_positions() {
    let cfg = config();
    let b = cfg.block();
    let mut rng = seeded(1);
    let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let ep = random_episode(&cfg, &mut rng);
    let base = run(&model, &ep);
    for m in cfg.n_min + 1..cfg.n {
        let mut changed = ep.clone();
        let idx = changed.tokens[m]
            .indices()
            .iter()
            .map(|t| (t + 1) % cfg.n_lat)
            .collect();
        changed.tokens[m] = TokenGrid::new(cfg.k, idx, cfg.n_lat).unwrap();
        changed.poses[m] = CameraPose::new([3.0, -1.0, 2.0], Quat::from_axis_angle([0.0, 1.0, 0.0], 1.0)).unwrap();
        let other = run(&model, &changed);
        for j in cfg.n_min..m {
            let q = j - cfg.n_min;
            assert_eq!(
                block(&base.logits, q, b),
                block(&other.logits, q, b),
                "synthesis at {j} saw view {m}"
            );
            assert_eq!(
                block(&base.poses, q, b),
                block(&other.poses, q, b),
                "localization at {j} saw view {m}"
            );
        }
        let q = m - cfg.n_min;
        assert_ne!(block(&base.logits, q, b), block(&other.logits, q, b));
    }
}

#[test]
fn pose_loss_leaves_mask_token_untouched() {
    let cfg = config();
    let mut rng = seeded(2);
    let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let ep = random_episode(&cfg, &mut rng);

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model
        .forward_train(&mut tape, &bound, std::slice::from_ref(&ep), Tasks::Both)
        .unwrap();
    let l = loss_pose(&mut tape, out.pose_estimates.unwrap(), &out.pose_targets).unwrap();
    let grads = tape.backward(l).unwrap();
    let tok = grads.get(bound[model.token_embedding()]).unwrap();
    assert!(tok.row(cfg.mask_token()).iter().all(|&g| g == 0.0));
    assert!(tok.data().iter().any(|&g| g != 0.0));
    let head = model.params.find("head.w").unwrap();
    assert!(grads
        .get(bound[head])
        .is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model
        .forward_train(&mut tape, &bound, std::slice::from_ref(&ep), Tasks::Both)
        .unwrap();
    let l = loss_nvs(&mut tape, out.token_logits.unwrap(), &out.token_targets).unwrap();
    let grads = tape.backward(l).unwrap();
    let mask = grads.get(bound[model.pose_mask()]);
    assert!(mask.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    let loc = model.params.find("loc.w2").unwrap();
    assert!(grads.get(bound[loc]).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn every_query_position_receives_gradient() {
    let cfg = config();
    let b = cfg.block();
    let mut rng = seeded(3);
    let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let ep = random_episode(&cfg, &mut rng);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model
        .forward_train(&mut tape, &bound, std::slice::from_ref(&ep), Tasks::Both)
        .unwrap();
    let a = loss_nvs(&mut tape, out.token_logits.unwrap(), &out.token_targets).unwrap();
    let p = loss_pose(&mut tape, out.pose_estimates.unwrap(), &out.pose_targets).unwrap();
    let l = tape.add(a, p).unwrap();
    let grads = tape.backward(l).unwrap();
    let gx = grads.get(out.input).unwrap();
    let queries = cfg.n - cfg.n_min;
    assert_eq!(out.nvs_rows.len(), queries * b);
    assert_eq!(out.loc_rows.len(), queries * b);
    for rows in [&out.nvs_rows, &out.loc_rows] {
        for q in rows.chunks(b) {
            let norm: f64 = q.iter().flat_map(|&r| gx.row(r)).map(|g| g * g).sum();
            assert!(norm > 0.0);
        }
    }
}

#[test]
fn branch_streams_differ_from_trunk_only_in_the_masked_term() {
    let cfg = config();
    let b = cfg.block();
    let mut rng = seeded(4);
    let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let ep = random_episode(&cfg, &mut rng);
    let out = run(&model, &ep);
    let tok = model.params.get(model.token_embedding());
    let pos = model.params.get(model.positional_embedding());
    let mask = model.params.get(model.pose_mask());

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let canon = canonicalize_poses(&ep.poses).unwrap();
    let inputs: Vec<_> = canon
        .iter()
        .map(|p| viewformer_core::model::PoseInput::Pose(*p))
        .collect();
    let pe = model.pose_embed(&mut tape, &bound, &inputs).unwrap();
    let pe = tape.value(pe).clone();

    for j in 0..cfg.n {
        for t in 0..b {
            let trunk = out.input.row(j * b + t);
            let s = ep.tokens[j].indices()[t];
            // trunk = token + pose + position, with position shared by all views
            for c in 0..cfg.d_m {
                let expect = tok.row(s)[c] + pe.row(j)[c] + pos.row(t)[c];
                assert!((trunk[c] - expect).abs() < 1e-12);
            }
            if j < cfg.n_min {
                continue;
            }
            let q = j - cfg.n_min;
            let nvs = out.input.row(out.nvs_rows[q * b + t]);
            let loc = out.input.row(out.loc_rows[q * b + t]);
            for c in 0..cfg.d_m {
                let d_nvs = nvs[c] - trunk[c];
                assert!((d_nvs - (tok.row(cfg.mask_token())[c] - tok.row(s)[c])).abs() < 1e-12);
                let d_loc = loc[c] - trunk[c];
                assert!((d_loc - (mask.data()[c] - pe.row(j)[c])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn degenerate_tree_matches_trunk() {
    let cfg = config();
    let b = cfg.block();
    let mut rng = seeded(5);
    let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let trunk = normal_tensor::<f64>(&[cfg.n * b, cfg.d_m], 1.0, &mut rng);
    let mut builder = PlanBuilder::new(b);
    let first = builder.push_trunk(cfg.n);
    builder.push_branch(first, 0..cfg.n);
    builder.push_branch(first, 0..cfg.n);
    let plan = Arc::new(builder.build());
    let mut data = trunk.data().to_vec();
    data.extend_from_slice(trunk.data());
    data.extend_from_slice(trunk.data());
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = tape.constant(Tensor::new(&[3 * cfg.n * b, cfg.d_m], data).unwrap());
    let h = model.backbone(&mut tape, &bound, x, &plan).unwrap();
    let h = tape.value(h);
    let size = cfg.n * b * cfg.d_m;
    for branch in 1..3 {
        let err = h.data()[..size]
            .iter()
            .zip(&h.data()[branch * size..(branch + 1) * size])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "branch {branch}: {err:e}");
    }
}

fn random_rigid(rng: &mut impl Rng) -> CameraPose {
    let axis = normalize3([
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
    ]);
    let q = Quat::from_axis_angle(axis, rng.random::<f64>() * 6.0);
    CameraPose::new(
        [
            rng.random::<f64>() * 4.0 - 2.0,
            rng.random::<f64>() * 4.0 - 2.0,
            rng.random::<f64>(),
        ],
        q,
    )
    .unwrap()
}

#[test]
fn global_rigid_transform_does_not_change_outputs() {
    let cfg = config();
    let mut rng = seeded(6);
    let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    for _ in 0..10 {
        let ep = random_episode(&cfg, &mut rng);
        let g = random_rigid(&mut rng);
        let mut moved = ep.clone();
        moved.poses = ep.poses.iter().map(|p| g.compose(p)).collect();
        let (a, b) = (run(&model, &ep), run(&model, &moved));
        let diff = |x: &Tensor<f64>, y: &Tensor<f64>| x.max_abs_diff(y);
        assert!(diff(&a.input, &b.input) < 1e-9);
        assert!(diff(&a.logits, &b.logits) < 1e-9);
        assert!(diff(&a.poses, &b.poses) < 1e-9);
    }
}

#[test]
fn canonical_poses_return_to_world_frame() {
    let mut rng = seeded(7);
    for _ in 0..100 {
        let poses: Vec<CameraPose> = (0..4).map(|_| random_rigid(&mut rng)).collect();
        let canon = canonicalize_poses(&poses).unwrap();
        for (c, p) in canon.iter().zip(&poses) {
            let back = to_world_frame(&poses[0], c);
            for (x, y) in back.to_array().iter().zip(p.to_array()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let mut rng = seeded(8);
    let logits = normal_tensor::<f64>(&[12, 9], 2.0, &mut rng);
    let targets: Vec<usize> = (0..12).map(|_| rng.random_range(0..9)).collect();
    let mut expect = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect -= (row[t].exp() / z).ln();
    }
    expect /= 12.0;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let got = loss_nvs(&mut tape, l, &targets).unwrap();
    assert!((tape.value(got).data()[0] - expect).abs() < 1e-12);

    let onehot = Tensor::from_fn(&[12, 9], |i| if i % 9 == targets[i / 9] { 60.0 } else { 0.0 });
    let l = tape.constant(onehot);
    let got = loss_nvs(&mut tape, l, &targets).unwrap();
    assert!(tape.value(got).data()[0] < 1e-20);
}

#[test]
fn pose_loss_terms_are_separable() {
    let target = [[0.5, -1.0, 2.0, 0.8, 0.6, 0.0, 0.0]; 4];
    let terms = |s: f64| {
        let mut est = Vec::new();
        for t in &target {
            let mut e = *t;
            e[0] += s * 0.3;
            e[2] -= s * 0.1;
            e[4] += 0.2;
            est.extend_from_slice(&e);
        }
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new(&[4, POSE_DIM], est).unwrap());
        let l = loss_pose(&mut tape, v, &target).unwrap();
        tape.value(l).data()[0]
    };
    let quat_term = 0.2f64 * 0.2 / 4.0;
    let pos1 = terms(1.0) - quat_term;
    let pos3 = terms(3.0) - quat_term;
    assert!((pos1 - (0.09 + 0.01) / 3.0).abs() < 1e-12);
    assert!((pos3 - 9.0 * pos1).abs() < 1e-12);
    assert!((terms(0.0) - quat_term).abs() < 1e-15);
}

#[test]
fn single_pass_pose_inference() {
    let cfg = config();
    let mut rng = seeded(9);
    let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let ep = random_episode(&cfg, &mut rng);
    let ctx: Vec<_> = (0..3).map(|i| (&ep.tokens[i], ep.poses[i])).collect();
    let before = model.forward_passes();
    let p = model.infer_pose(&ctx, &ep.tokens[3]).unwrap();
    assert_eq!(model.forward_passes(), before + 1);
    assert!(p.is_unit());
    assert!(p.orientation.w >= 0.0);
    assert_eq!(model.infer_pose(&ctx, &ep.tokens[3]).unwrap(), p);
}
