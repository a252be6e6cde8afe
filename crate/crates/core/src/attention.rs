//! Block-causal and branching attention.
//!
//! Sequences are made of *blocks* of `k²` rows, one block per image. The
//! trunk row of the tree holds every view; each branch row holds, at
//! position `j`, a masked variant of view `j` that sees the trunk prefix
//! `1..j-1` plus its own block.
//!
//! Three routes compute the same thing:
//! * [`plan_forward`]: blockwise kernel that only touches allowed key blocks
//!   (used by the model, differentiable through the tape);
//! * [`causal_block_attention`] / [`branch_attention`]: the dense `D`, `C`,
//!   `S′`, `S″` matrix formulation;
//! * [`materialized_mask_attention`] / [`naive_tree_attention`]: reference
//!   oracles over an explicitly flattened sequence and materialized mask.
//!
//! Masked entries are removed before the softmax, so every query row
//! renormalises over its allowed set. Logits are scaled by `1/sqrt(d)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{gemm, Real, Strided};
use crate::tape::softmax_in_place;
use crate::tensor::{matmul, Tensor};

/// For every query block, the contiguous runs `(first_block, count)` of key
/// blocks it attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPlan {
    block: usize,
    keys: Vec<Vec<(usize, usize)>>,
}

impl AttentionPlan {
    pub fn new(block: usize, keys: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        if block == 0 {
            return Err(Error::Config("attention block size must be positive".into()));
        }
        let n = keys.len();
        for (q, runs) in keys.iter().enumerate() {
            if runs.iter().all(|&(_, c)| c == 0) {
                return Err(Error::Config(format!("query block {q} attends to nothing")));
            }
            if runs.iter().any(|&(s, c)| s + c > n) {
                return Err(Error::Config(format!("query block {q} has a key run past {n} blocks")));
            }
        }
        Ok(AttentionPlan { block, keys })
    }

    /// Plain block-causal plan: block `j` sees blocks `0..=j`.
    pub fn causal(n: usize, block: usize) -> Self {
        let mut b = PlanBuilder::new(block);
        b.push_trunk(n);
        b.build()
    }

    /// Trunk of `n` blocks followed by `branches` rows of `n` blocks each.
    pub fn tree(n: usize, block: usize, branches: usize) -> Self {
        let mut b = PlanBuilder::new(block);
        let trunk = b.push_trunk(n);
        for _ in 0..branches {
            b.push_branch(trunk, 0..n);
        }
        b.build()
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn num_blocks(&self) -> usize {
        self.keys.len()
    }

    pub fn rows(&self) -> usize {
        self.keys.len() * self.block
    }

    pub fn key_runs(&self, query_block: usize) -> &[(usize, usize)] {
        &self.keys[query_block]
    }

    /// Number of key rows visible to `query_block`.
    pub fn key_rows(&self, query_block: usize) -> usize {
        self.keys[query_block].iter().map(|&(_, c)| c).sum::<usize>() * self.block
    }

    /// Total query/key score pairs evaluated, i.e. attention work per head.
    pub fn score_pairs(&self) -> usize {
        (0..self.num_blocks()).map(|q| self.block * self.key_rows(q)).sum()
    }
}

/// Incremental construction of an [`AttentionPlan`] from trunks and branches.
#[derive(Clone, Debug)]
pub struct PlanBuilder {
    block: usize,
    keys: Vec<Vec<(usize, usize)>>,
}

impl PlanBuilder {
    pub fn new(block: usize) -> Self {
        PlanBuilder {
            block,
            keys: Vec::new(),
        }
    }

    /// Appends a trunk of `n` blocks; returns the index of its first block.
    pub fn push_trunk(&mut self, n: usize) -> usize {
        let first = self.keys.len();
        for j in 0..n {
            self.keys.push(vec![(first, j + 1)]);
        }
        first
    }

    /// Appends one branch block per position (0-based) in `positions`; the
    /// block at position `j` sees trunk blocks `0..j` and itself.
    pub fn push_branch(&mut self, trunk_first: usize, positions: impl IntoIterator<Item = usize>) {
        for j in positions {
            let own = self.keys.len();
            let mut runs = Vec::with_capacity(2);
            if j > 0 {
                runs.push((trunk_first, j));
            }
            runs.push((own, 1));
            self.keys.push(runs);
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn build(self) -> AttentionPlan {
        AttentionPlan::new(self.block, self.keys).expect("builder produces valid plans")
    }
}

fn check_plan<T: Real>(q: &Tensor<T>, heads: usize, plan: &AttentionPlan) -> Result<(usize, usize)> {
    let (rows, dm) = q.dims2("block_attention")?;
    if rows != plan.rows() {
        return Err(Error::shape("block_attention", q.shape(), &[plan.rows(), dm]));
    }
    if heads == 0 || dm % heads != 0 {
        return Err(Error::Config(format!(
            "model width {dm} not divisible by {heads} heads"
        )));
    }
    Ok((dm, dm / heads))
}

fn prob_offsets(plan: &AttentionPlan) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(plan.num_blocks());
    let mut total = 0;
    for qb in 0..plan.num_blocks() {
        offsets.push(total);
        total += plan.block * plan.key_rows(qb);
    }
    (offsets, total)
}

/// Multi-head blockwise attention. Returns the output and the attention
/// probabilities (per head, per query block, `block × key_rows`).
pub fn plan_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    plan: &AttentionPlan,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (dm, dh) = check_plan(q, heads, plan)?;
    let b = plan.block;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (offsets, per_head) = prob_offsets(plan);
    let mut probs = vec![T::zero(); per_head * heads];
    let mut out = vec![T::zero(); plan.rows() * dm];
    for h in 0..heads {
        for qb in 0..plan.num_blocks() {
            let l = plan.key_rows(qb);
            let base = h * per_head + offsets[qb];
            let scores = &mut probs[base..base + b * l];
            let qs = Strided {
                offset: qb * b * dm + h * dh,
                rs: dm,
                cs: 1,
            };
            let mut col = 0;
            for &(start, count) in plan.key_runs(qb) {
                let rows = count * b;
                let ks = Strided {
                    offset: start * b * dm + h * dh,
                    rs: 1,
                    cs: dm,
                };
                gemm(
                    b,
                    dh,
                    rows,
                    scale,
                    q.data(),
                    qs,
                    k.data(),
                    ks,
                    T::zero(),
                    scores,
                    Strided {
                        offset: col,
                        rs: l,
                        cs: 1,
                    },
                );
                col += rows;
            }
            for row in scores.chunks_mut(l) {
                softmax_in_place(row);
            }
            let mut col = 0;
            for (i, &(start, count)) in plan.key_runs(qb).iter().enumerate() {
                let rows = count * b;
                let beta = if i == 0 { T::zero() } else { T::one() };
                gemm(
                    b,
                    rows,
                    dh,
                    T::one(),
                    scores,
                    Strided {
                        offset: col,
                        rs: l,
                        cs: 1,
                    },
                    v.data(),
                    Strided {
                        offset: start * b * dm + h * dh,
                        rs: dm,
                        cs: 1,
                    },
                    beta,
                    &mut out,
                    qs,
                );
                col += rows;
            }
        }
    }
    Ok((Tensor::from_parts(vec![plan.rows(), dm], out), probs))
}

#[allow(clippy::type_complexity)]
pub fn plan_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: &Tensor<T>,
    heads: usize,
    plan: &AttentionPlan,
    probs: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (dm, dh) = check_plan(q, heads, plan)?;
    let b = plan.block;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (offsets, per_head) = prob_offsets(plan);
    let n = plan.rows() * dm;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut ds = Vec::new();
    for h in 0..heads {
        for qb in 0..plan.num_blocks() {
            let l = plan.key_rows(qb);
            let base = h * per_head + offsets[qb];
            let p = &probs[base..base + b * l];
            let qs = Strided {
                offset: qb * b * dm + h * dh,
                rs: dm,
                cs: 1,
            };
            ds.clear();
            ds.resize(b * l, T::zero());
            let mut col = 0;
            for &(start, count) in plan.key_runs(qb) {
                let rows = count * b;
                let rs = Strided {
                    offset: start * b * dm + h * dh,
                    rs: dm,
                    cs: 1,
                };
                // dP = dO · Vᵀ
                gemm(
                    b,
                    dh,
                    rows,
                    T::one(),
                    g.data(),
                    qs,
                    v.data(),
                    Strided {
                        offset: rs.offset,
                        rs: 1,
                        cs: dm,
                    },
                    T::zero(),
                    &mut ds,
                    Strided {
                        offset: col,
                        rs: l,
                        cs: 1,
                    },
                );
                // dV += Pᵀ · dO
                gemm(
                    rows,
                    b,
                    dh,
                    T::one(),
                    p,
                    Strided {
                        offset: col,
                        rs: 1,
                        cs: l,
                    },
                    g.data(),
                    qs,
                    T::one(),
                    &mut dv,
                    rs,
                );
                col += rows;
            }
            for (dsr, pr) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot: T = dsr.iter().zip(pr).map(|(&d, &p)| d * p).sum();
                for (d, &pv) in dsr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            let mut col = 0;
            for &(start, count) in plan.key_runs(qb) {
                let rows = count * b;
                let rs = Strided {
                    offset: start * b * dm + h * dh,
                    rs: dm,
                    cs: 1,
                };
                gemm(
                    b,
                    rows,
                    dh,
                    scale,
                    &ds,
                    Strided {
                        offset: col,
                        rs: l,
                        cs: 1,
                    },
                    k.data(),
                    rs,
                    T::one(),
                    &mut dq,
                    qs,
                );
                gemm(
                    rows,
                    b,
                    dh,
                    scale,
                    &ds,
                    Strided {
                        offset: col,
                        rs: 1,
                        cs: l,
                    },
                    q.data(),
                    qs,
                    T::one(),
                    &mut dk,
                    rs,
                );
                col += rows;
            }
        }
    }
    let shape = q.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), dq),
        Tensor::from_parts(shape.clone(), dk),
        Tensor::from_parts(shape, dv),
    ))
}

/// One row of the attention tree: keys, queries and values of shape
/// `(n·k²) × d_m`. `branch == 0` is the trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTriplet<T> {
    pub keys: Tensor<T>,
    pub queries: Tensor<T>,
    pub values: Tensor<T>,
    pub branch: usize,
    /// Tokens per image (`k²`).
    pub block: usize,
}

impl<T: Real> AttentionTriplet<T> {
    pub fn new(keys: Tensor<T>, queries: Tensor<T>, values: Tensor<T>, branch: usize, block: usize) -> Result<Self> {
        let (rows, _) = keys.dims2("attention triplet")?;
        if queries.shape() != keys.shape() || values.shape() != keys.shape() {
            return Err(Error::shape("attention triplet", keys.shape(), queries.shape()));
        }
        if block == 0 || rows % block != 0 {
            return Err(Error::shape("attention triplet", keys.shape(), &[block]));
        }
        Ok(AttentionTriplet {
            keys,
            queries,
            values,
            branch,
            block,
        })
    }

    /// Number of images `n`.
    pub fn images(&self) -> usize {
        self.keys.shape()[0] / self.block
    }

    pub fn width(&self) -> usize {
        self.keys.shape()[1]
    }

    fn block_rows(t: &Tensor<T>, block: usize, j: usize) -> &[T] {
        let d = t.shape()[1];
        &t.data()[j * block * d..(j + 1) * block * d]
    }
}

/// Image-level causal mask: `allows(i, j)` is true when a token of image
/// `i` may attend to image `j` (0-based), i.e. `j <= i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCausalMask {
    pub images: usize,
    pub block: usize,
}

impl BlockCausalMask {
    pub fn new(images: usize, block: usize) -> Self {
        BlockCausalMask { images, block }
    }

    pub fn allows(&self, query_image: usize, key_image: usize) -> bool {
        key_image <= query_image
    }

    /// The token-level mask `M ⊗ 1^{k²×k²}` as a dense boolean matrix.
    pub fn expand(&self) -> Vec<Vec<bool>> {
        let n = self.images * self.block;
        (0..n)
            .map(|r| (0..n).map(|c| self.allows(r / self.block, c / self.block)).collect())
            .collect()
    }
}

fn validate_pair<T: Real>(trunk: &AttentionTriplet<T>, branch: &AttentionTriplet<T>) -> Result<()> {
    if trunk.keys.shape() != branch.keys.shape() || trunk.block != branch.block {
        return Err(Error::shape(
            "branch_attention",
            trunk.keys.shape(),
            branch.keys.shape(),
        ));
    }
    Ok(())
}

/// Trunk attention: each token of image `j` attends to every token of images
/// `1..=j`.
pub fn causal_block_attention<T: Real>(trunk: &AttentionTriplet<T>) -> Result<Tensor<T>> {
    let plan = AttentionPlan::causal(trunk.images(), trunk.block);
    let (out, _) = plan_forward(&trunk.queries, &trunk.keys, &trunk.values, 1, &plan)?;
    Ok(out)
}

/// Branch attention in the dense matrix form:
///
/// ```text
/// D  = Q⁽ⁱ⁾ K⁽⁰⁾ᵀ                      (n k² × n k²)
/// C  = blockdiag(Q⁽ⁱ⁾_j K⁽ⁱ⁾_jᵀ)        (n k² × k²)
/// S  = softmax([D, C]) over (M - I) ⊗ 1 and the C columns
/// R⁽ⁱ⁾ = S′ V⁽⁰⁾ + blockdiag(S″_j V⁽ⁱ⁾_j)
/// ```
pub fn branch_attention<T: Real>(trunk: &AttentionTriplet<T>, branch: &AttentionTriplet<T>) -> Result<Tensor<T>> {
    validate_pair(trunk, branch)?;
    let (n, b, d) = (trunk.images(), trunk.block, trunk.width());
    let rows = n * b;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let kt = transpose(&trunk.keys);
    let dmat = matmul(&branch.queries, &kt)?;
    let mask = BlockCausalMask::new(n, b);

    let width = rows + b;
    let mut s = vec![T::zero(); rows * width];
    for r in 0..rows {
        let j = r / b;
        let row = &mut s[r * width..(r + 1) * width];
        for c in 0..rows {
            let strictly_before = mask.allows(j, c / b) && c / b != j;
            row[c] = if strictly_before {
                dmat.data()[r * rows + c] * scale
            } else {
                T::neg_infinity()
            };
        }
        let qr = &branch.queries.data()[r * d..(r + 1) * d];
        let kb = AttentionTriplet::block_rows(&branch.keys, b, j);
        for t in 0..b {
            let kr = &kb[t * d..(t + 1) * d];
            row[rows + t] = qr.iter().zip(kr).map(|(&x, &y)| x * y).sum::<T>() * scale;
        }
        softmax_in_place(row);
    }

    let mut out = vec![T::zero(); rows * d];
    // S′ V⁽⁰⁾
    gemm(
        rows,
        rows,
        d,
        T::one(),
        &s,
        Strided {
            offset: 0,
            rs: width,
            cs: 1,
        },
        trunk.values.data(),
        Strided::row_major(0, d),
        T::zero(),
        &mut out,
        Strided::row_major(0, d),
    );
    // blockwise S″_j V⁽ⁱ⁾_j
    for j in 0..n {
        gemm(
            b,
            b,
            d,
            T::one(),
            &s,
            Strided {
                offset: j * b * width + rows,
                rs: width,
                cs: 1,
            },
            branch.values.data(),
            Strided::row_major(j * b * d, d),
            T::one(),
            &mut out,
            Strided::row_major(j * b * d, d),
        );
    }
    Ok(Tensor::from_parts(vec![rows, d], out))
}

fn transpose<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[c, r], |i| x.data()[(i % r) * c + i / r])
}

/// Reference attention with an explicit token-level mask (`true` = allowed).
/// Scores are scaled by `1/sqrt(d)` and masked with `-inf` before softmax.
pub fn materialized_mask_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &[Vec<bool>],
) -> Result<Tensor<T>> {
    let (rows, d) = q.dims2("materialized_mask_attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() || mask.len() != rows {
        return Err(Error::shape("materialized_mask_attention", q.shape(), k.shape()));
    }
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut out = vec![T::zero(); rows * d];
    let mut weights = vec![T::zero(); rows];
    for r in 0..rows {
        for c in 0..rows {
            weights[c] = if mask[r][c] {
                let mut dot = T::zero();
                for t in 0..d {
                    dot += q.data()[r * d + t] * k.data()[c * d + t];
                }
                dot * scale
            } else {
                T::neg_infinity()
            };
        }
        softmax_in_place(&mut weights);
        for c in 0..rows {
            for t in 0..d {
                out[r * d + t] += weights[c] * v.data()[c * d + t];
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows, d], out))
}

/// Oracle for branch position `j` (1-based): materialises the flattened
/// sequence `[trunk image 1, .., trunk image j-1, branch image j]`, runs
/// block-causal attention over it and returns the final block's outputs.
pub fn naive_tree_attention<T: Real>(
    trunk: &AttentionTriplet<T>,
    branch: &AttentionTriplet<T>,
    j: usize,
) -> Result<Tensor<T>> {
    validate_pair(trunk, branch)?;
    let (n, b, d) = (trunk.images(), trunk.block, trunk.width());
    if j == 0 || j > n {
        return Err(Error::Validation(format!("tree position {j} outside 1..={n}")));
    }
    let flatten = |trunk_part: &Tensor<T>, branch_part: &Tensor<T>| {
        let mut data = trunk_part.data()[..(j - 1) * b * d].to_vec();
        data.extend_from_slice(AttentionTriplet::block_rows(branch_part, b, j - 1));
        Tensor::from_parts(vec![j * b, d], data)
    };
    let q = flatten(&trunk.queries, &branch.queries);
    let k = flatten(&trunk.keys, &branch.keys);
    let v = flatten(&trunk.values, &branch.values);
    let mask = BlockCausalMask::new(j, b).expand();
    let full = materialized_mask_attention(&q, &k, &v, &mask)?;
    Ok(Tensor::from_parts(vec![b, d], full.data()[(j - 1) * b * d..].to_vec()))
}

/// Tree nodes processed per layer by branching attention: `(p + 1)·n·k²`.
pub fn branching_node_count(n: usize, block: usize, branches: usize) -> usize {
    (branches + 1) * n * block
}

/// Nodes processed per layer when every query position gets its own
/// sequence: `Σ_{i=n_min+1..n} i·k²`.
pub fn naive_node_count(n: usize, n_min: usize, block: usize) -> usize {
    (n_min + 1..=n).map(|i| i * block).sum()
}
