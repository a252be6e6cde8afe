use std::sync::Arc;

use viewformer_core::attention::{
    branch_attention, branching_node_count, causal_block_attention, materialized_mask_attention, naive_node_count,
    naive_tree_attention, plan_forward, AttentionPlan, AttentionTriplet, BlockCausalMask, PlanBuilder,
};
use viewformer_core::rng::{normal_tensor, stream};
use viewformer_core::Tensor;

const WIDTH: usize = 8;

fn triplet(rows: usize, branch: usize, block: usize, seed: u64) -> AttentionTriplet<f64> {
    let mut rng = stream(seed, 100 + branch as u64, rows as u64 * 31 + block as u64);
    AttentionTriplet::new(
        normal_tensor(&[rows, WIDTH], 1.0, &mut rng),
        normal_tensor(&[rows, WIDTH], 1.0, &mut rng),
        normal_tensor(&[rows, WIDTH], 1.0, &mut rng),
        branch,
        block,
    )
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn grid() -> impl Iterator<Item = (u64, usize, usize)> {
    (0..20u64).flat_map(|s| {
        [2usize, 4, 8]
            .into_iter()
            .flat_map(move |n| [1usize, 2, 4].into_iter().map(move |k| (s, n, k)))
    })
}

#[test]
fn branch_attention_matches_flattened_sequences() {
    for (seed, n, k) in grid() {
        let b = k * k;
        let trunk = triplet(n * b, 0, b, seed);
        for branch in 1..=2 {
            let br = triplet(n * b, branch, b, seed);
            let dense = branch_attention(&trunk, &br).unwrap();
            for j in 1..=n {
                let naive = naive_tree_attention(&trunk, &br, j).unwrap();
                let rows = &dense.data()[(j - 1) * b * WIDTH..j * b * WIDTH];
                let err = max_abs_diff(rows, naive.data());
                assert!(err < 1e-5, "seed {seed} n {n} k {k} branch {branch} j {j}: {err:e}");
            }
        }
    }
}

#[test]
fn causal_attention_matches_materialized_mask() {
    for (seed, n, k) in grid() {
        let b = k * k;
        let t = triplet(n * b, 0, b, seed);
        let fast = causal_block_attention(&t).unwrap();
        let mask = BlockCausalMask::new(n, b).expand();
        let slow = materialized_mask_attention(&t.queries, &t.keys, &t.values, &mask).unwrap();
        let err = max_abs_diff(fast.data(), slow.data());
        assert!(err < 1e-6, "seed {seed} n {n} k {k}: {err:e}");
    }
}

/// The blockwise kernel used by the model, evaluated on a whole tree.
fn tree_kernel(trunk: &AttentionTriplet<f64>, branches: &[&AttentionTriplet<f64>], heads: usize) -> Tensor<f64> {
    let n = trunk.images();
    let plan = AttentionPlan::tree(n, trunk.block, branches.len());
    let stack = |f: fn(&AttentionTriplet<f64>) -> &Tensor<f64>| {
        let mut data = f(trunk).data().to_vec();
        for b in branches {
            data.extend_from_slice(f(b).data());
        }
        Tensor::new(&[plan.rows(), WIDTH], data).unwrap()
    };
    let (q, k, v) = (stack(|t| &t.queries), stack(|t| &t.keys), stack(|t| &t.values));
    plan_forward(&q, &k, &v, heads, &plan).unwrap().0
}

#[test]
fn tree_kernel_matches_dense_forms() {
    for (seed, n, k) in grid().filter(|g| g.0 < 5) {
        let b = k * k;
        let trunk = triplet(n * b, 0, b, seed);
        let (b1, b2) = (triplet(n * b, 1, b, seed), triplet(n * b, 2, b, seed));
        let out = tree_kernel(&trunk, &[&b1, &b2], 1);
        let part = |i: usize| &out.data()[i * n * b * WIDTH..(i + 1) * n * b * WIDTH];
        assert!(max_abs_diff(part(0), causal_block_attention(&trunk).unwrap().data()) < 1e-12);
        assert!(max_abs_diff(part(1), branch_attention(&trunk, &b1).unwrap().data()) < 1e-12);
        assert!(max_abs_diff(part(2), branch_attention(&trunk, &b2).unwrap().data()) < 1e-12);
    }
}

#[test]
fn heads_attend_independently() {
    let (n, b, heads) = (3, 4, 2);
    let trunk = triplet(n * b, 0, b, 9);
    let br = triplet(n * b, 1, b, 9);
    let out = tree_kernel(&trunk, &[&br], heads);
    let dh = WIDTH / heads;
    let slice = |t: &Tensor<f64>, h: usize| {
        let rows = t.shape()[0];
        Tensor::from_fn(&[rows, dh], |i| t.data()[(i / dh) * WIDTH + h * dh + i % dh])
    };
    for h in 0..heads {
        let th = AttentionTriplet::new(
            slice(&trunk.keys, h),
            slice(&trunk.queries, h),
            slice(&trunk.values, h),
            0,
            b,
        )
        .unwrap();
        let bh = AttentionTriplet::new(slice(&br.keys, h), slice(&br.queries, h), slice(&br.values, h), 1, b).unwrap();
        let expect = branch_attention(&th, &bh).unwrap();
        let got = slice(
            &Tensor::new(&[n * b, WIDTH], out.data()[n * b * WIDTH..].to_vec()).unwrap(),
            h,
        );
        assert!(max_abs_diff(got.data(), expect.data()) < 1e-12);
    }
}

#[test]
fn hand_computed_tree() {
    // k = 1, d_m = 2; every query is [√2, 0] so each logit is the key's
    // first coordinate.
    let q = Tensor::new(&[3, 2], [2f64.sqrt(), 0.0].repeat(3)).unwrap();
    let l = |v: f64| v.ln();
    let trunk = AttentionTriplet::new(
        Tensor::new(&[3, 2], vec![0.0, 0.0, l(3.0), 0.0, 50.0, 0.0]).unwrap(),
        q.clone(),
        Tensor::new(&[3, 2], vec![8.0, 0.0, 0.0, 8.0, 0.0, 0.0]).unwrap(),
        0,
        1,
    )
    .unwrap();
    let branch = AttentionTriplet::new(
        Tensor::new(&[3, 2], vec![l(5.0), 0.0, l(7.0), 0.0, l(4.0), 0.0]).unwrap(),
        q,
        Tensor::new(&[3, 2], vec![2.0, 2.0, 4.0, 0.0, 1.0, 1.0]).unwrap(),
        1,
        1,
    )
    .unwrap();
    // j=1: own block only. j=2: weights 1:7 over (trunk 1, own).
    // j=3: weights 1:3:4 over (trunk 1, trunk 2, own); trunk 3 is excluded.
    let expect = [2.0, 2.0, 4.5, 0.0, 1.5, 3.5];
    let got = branch_attention(&trunk, &branch).unwrap();
    assert!(max_abs_diff(got.data(), &expect) < 1e-12, "{:?}", got.data());
    let trunk_out = causal_block_attention(&trunk).unwrap();
    assert!(max_abs_diff(&trunk_out.data()[..4], &[8.0, 0.0, 2.0, 6.0]) < 1e-12);
}

#[test]
fn first_branch_position_is_self_attention() {
    let b = 4;
    let trunk = triplet(3 * b, 0, b, 3);
    let br = triplet(3 * b, 1, b, 3);
    let own = |t: &Tensor<f64>| Tensor::new(&[b, WIDTH], t.data()[..b * WIDTH].to_vec()).unwrap();
    let single = AttentionTriplet::new(own(&br.keys), own(&br.queries), own(&br.values), 0, b).unwrap();
    let expect = causal_block_attention(&single).unwrap();
    let naive = naive_tree_attention(&trunk, &br, 1).unwrap();
    let dense = branch_attention(&trunk, &br).unwrap();
    assert!(max_abs_diff(naive.data(), expect.data()) < 1e-12);
    assert!(max_abs_diff(&dense.data()[..b * WIDTH], expect.data()) < 1e-12);
}

#[test]
fn degenerate_tree_equals_trunk() {
    let (n, b) = (4, 4);
    let trunk = triplet(n * b, 0, b, 5);
    let same = AttentionTriplet {
        branch: 1,
        ..trunk.clone()
    };
    let causal = causal_block_attention(&trunk).unwrap();
    for j in 1..=n {
        let naive = naive_tree_attention(&trunk, &same, j).unwrap();
        let rows = &causal.data()[(j - 1) * b * WIDTH..j * b * WIDTH];
        assert!(max_abs_diff(rows, naive.data()) < 1e-12);
    }
    let dense = branch_attention(&trunk, &same).unwrap();
    assert!(max_abs_diff(dense.data(), causal.data()) < 1e-12);
}

fn perturb_block(t: &AttentionTriplet<f64>, image: usize) -> AttentionTriplet<f64> {
    let mut p = t.clone();
    let (b, d) = (t.block, t.width());
    for m in [&mut p.keys, &mut p.queries, &mut p.values] {
        for v in &mut m.data_mut()[image * b * d..(image + 1) * b * d] {
            *v += 3.0;
        }
    }
    p
}

#[test]
fn later_images_do_not_leak() {
    let (n, b) = (5, 4);
    let trunk = triplet(n * b, 0, b, 6);
    let (b1, b2) = (triplet(n * b, 1, b, 6), triplet(n * b, 2, b, 6));
    let base = tree_kernel(&trunk, &[&b1, &b2], 2);
    for m in 1..n {
        let changed = tree_kernel(&perturb_block(&trunk, m), &[&b1, &b2], 2);
        for row in 0..3 {
            for j in 0..m {
                let at = |t: &Tensor<f64>| t.data()[(row * n + j) * b * WIDTH..(row * n + j + 1) * b * WIDTH].to_vec();
                assert_eq!(at(&base), at(&changed), "tree row {row} block {j} saw image {m}");
            }
        }
    }
}

#[test]
fn branches_are_isolated() {
    let (n, b) = (4, 1);
    let trunk = triplet(n * b, 0, b, 8);
    let (b1, b2) = (triplet(n * b, 1, b, 8), triplet(n * b, 2, b, 8));
    let base = tree_kernel(&trunk, &[&b1, &b2], 1);
    let mut changed_b1 = b1.clone();
    for v in changed_b1
        .values
        .data_mut()
        .iter_mut()
        .chain(changed_b1.keys.data_mut())
    {
        *v *= -2.0;
    }
    let changed = tree_kernel(&trunk, &[&changed_b1, &b2], 1);
    let size = n * b * WIDTH;
    assert_eq!(base.data()[..size], changed.data()[..size]);
    assert_eq!(base.data()[2 * size..], changed.data()[2 * size..]);
    assert_ne!(base.data()[size..2 * size], changed.data()[size..2 * size]);
}

#[test]
fn attention_rows_are_stochastic() {
    let (n, b, heads) = (4, 4, 2);
    let mut builder = PlanBuilder::new(b);
    let trunk = builder.push_trunk(n);
    builder.push_branch(trunk, 0..n);
    builder.push_branch(trunk, 2..n);
    let plan = Arc::new(builder.build());
    let mut rng = stream(1, 2, 3);
    let q = normal_tensor::<f64>(&[plan.rows(), WIDTH], 2.0, &mut rng);
    let k = normal_tensor::<f64>(&[plan.rows(), WIDTH], 2.0, &mut rng);
    let v = normal_tensor::<f64>(&[plan.rows(), WIDTH], 1.0, &mut rng);
    let (_, probs) = plan_forward(&q, &k, &v, heads, &plan).unwrap();
    let mut at = 0;
    for _ in 0..heads {
        for qb in 0..plan.num_blocks() {
            let keys = plan.key_rows(qb);
            for _ in 0..b {
                let row = &probs[at..at + keys];
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                at += keys;
            }
        }
    }
    assert_eq!(at, probs.len());
}

#[test]
fn node_counts_match_closed_forms() {
    for n in [2usize, 4, 8, 16, 32] {
        for k in [1usize, 2, 4] {
            let b = k * k;
            assert_eq!(branching_node_count(n, b, 2), 3 * n * b);
            assert_eq!(AttentionPlan::tree(n, b, 2).rows(), 3 * n * b);
            let naive: usize = (3..=n).map(|i| i * b).sum();
            assert_eq!(naive_node_count(n, 2, b), naive);
        }
    }
}

#[test]
fn shape_errors() {
    let mut rng = stream(0, 0, 0);
    let t = normal_tensor::<f64>(&[6, 4], 1.0, &mut rng);
    assert!(AttentionTriplet::new(t.clone(), t.clone(), t.clone(), 0, 4).is_err());
    let a = AttentionTriplet::new(t.clone(), t.clone(), t.clone(), 0, 3).unwrap();
    let u = normal_tensor::<f64>(&[6, 4], 1.0, &mut rng);
    let other = AttentionTriplet::new(u.clone(), u.clone(), u, 1, 2).unwrap();
    assert!(branch_attention(&a, &other).is_err());
    assert!(naive_tree_attention(&a, &a, 0).is_err());
    assert!(naive_tree_attention(&a, &a, 3).is_err());
}
