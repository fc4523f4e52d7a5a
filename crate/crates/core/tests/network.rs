mod common;

use std::sync::Arc;

use common::*;
use ofgprn::grsan::{Grsan, GrsanConfig, Matrix, Mode, NormAdj, ParamStore, Session};
use ofgprn::model::{GraphInput, ModelConfig, OfGprn};
use ofgprn::pyramid::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
}

fn permuted_graph(nb: &[Vec<usize>], perm: &[usize]) -> Vec<Vec<usize>> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    perm.iter()
        .map(|&old| {
            let mut l: Vec<usize> = nb[old].iter().map(|&j| inv[j]).collect();
            l.sort_unstable();
            l
        })
        .collect()
}

#[test]
fn radix_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (input, _) = random_graph_problem(&mut rng, 30, 5);
    let (model, mut store) = OfGprn::new(ModelConfig::full(5), 1).unwrap();
    jitter(&mut store, &mut rng, 0.2);
    for mode in [Mode::Train, Mode::Eval] {
        let mut s = Session::new(&store, mode);
        let vars = model.forward(&mut s, &input).unwrap();
        assert_eq!(vars.backbone.attention.len(), 5);
        for block in &vars.backbone.attention {
            assert_eq!(block.len(), 2);
            for &a in block {
                let m = s.value(a);
                assert_eq!(m.rows(), 2);
                for j in 0..m.cols() {
                    let col: f64 = (0..m.rows()).map(|r| m.get(r, j)).sum();
                    assert!((col - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn backbone_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nb = random_graph(&mut rng, 25, 12);
    let x = random_matrix(&mut rng, 25, 6);
    let mut store = ParamStore::new();
    let grsan = Grsan::register(&mut store, "g", &GrsanConfig::with_defaults(6), &mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    let mut perm: Vec<usize> = (0..25).collect();
    perm.shuffle(&mut rng);

    let run = |adj: NormAdj, x: Matrix| {
        let mut s = Session::new(&store, Mode::Train);
        let xv = s.tape.constant(x);
        let out = grsan.forward(&mut s, &Arc::new(adj), xv).unwrap();
        out.outputs.iter().map(|&v| s.value(v).clone()).collect::<Vec<_>>()
    };
    let adj = NormAdj::from_neighbors(&nb).unwrap();
    let plain = run(adj.clone(), x.clone());
    let permuted = run(adj.permuted(&perm).unwrap(), x.permute_rows(&perm));
    for (a, b) in plain.iter().zip(&permuted) {
        assert!(a.permute_rows(&perm).max_abs_diff(b) <= 1e-9);
    }
}

#[test]
fn finest_scores_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 30;
    let nb = random_graph(&mut rng, n, 15);
    let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let pnb = permuted_graph(&nb, &perm);
    let pfeats: Vec<Vec<f64>> = perm.iter().map(|&o| feats[o].clone()).collect();
    let input = |nb: &[Vec<usize>], f: &[Vec<f64>]| GraphInput {
        features: Matrix::from_rows(f).unwrap(),
        hierarchy: Arc::new(build_hierarchy_from_graph(nb, f, 5).unwrap()),
    };
    let (model, mut store) = OfGprn::new(ModelConfig::full(4), 3).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    let a = model.predict(&store, &input(&nb, &feats)).unwrap();
    let b = model.predict(&store, &input(&pnb, &pfeats)).unwrap();
    for (i, &old) in perm.iter().enumerate() {
        assert!((b[0][i] - a[0][old]).abs() <= 1e-9);
    }
}

#[test]
fn hierarchy_counts_follow_schedule_for_every_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 1..=1000usize {
        let nb = random_graph(&mut rng, n, n / 3);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen::<f64>()]).collect();
        let h = build_hierarchy_from_graph(&nb, &feats, 5).unwrap();
        let mut want = vec![n];
        for _ in 1..5 {
            let last = *want.last().unwrap();
            want.push(last.div_ceil(4).max(1));
        }
        assert_eq!(h.counts(), want, "n = {n}");
    }
}

/// Union-find over each parent's children, restricted to level edges.
fn parents_are_connected(h: &Hierarchy) -> bool {
    for lvl in 0..h.depth() - 1 {
        let level = h.level(lvl);
        let n = level.node_count();
        let mut root: Vec<usize> = (0..n).collect();
        fn find(r: &mut Vec<usize>, mut x: usize) -> usize {
            while r[x] != x {
                r[x] = r[r[x]];
                x = r[x];
            }
            x
        }
        for &(a, b) in level.edges() {
            if level.parent()[a] == level.parent()[b] {
                let (ra, rb) = (find(&mut root, a), find(&mut root, b));
                root[ra] = rb;
            }
        }
        let parents = h.level(lvl + 1).node_count();
        let mut rep = vec![None; parents];
        for v in 0..n {
            let r = find(&mut root, v);
            match rep[level.parent()[v]] {
                None => rep[level.parent()[v]] = Some(r),
                Some(x) if x != r => return false,
                _ => {}
            }
        }
    }
    true
}

#[test]
fn parent_clusters_are_connected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let nb = random_graph(&mut rng, 40, 20);
        let feats: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let h = build_hierarchy_from_graph(&nb, &feats, 5).unwrap();
        assert!(parents_are_connected(&h));
    }
}

#[test]
fn pool_up_matches_group_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (n, parents) = (rng.gen_range(1..30), rng.gen_range(1..8));
        let mut assign: Vec<usize> = (0..n).map(|_| rng.gen_range(0..parents)).collect();
        assign.iter_mut().take(parents.min(n)).enumerate().for_each(|(i, a)| *a = i);
        let parents = parents.min(n);
        let x = random_matrix(&mut rng, n, 3);
        let got = pool_up(&x, &assign, parents).unwrap();
        for p in 0..parents {
            let kids: Vec<usize> = (0..n).filter(|&i| assign[i] == p).collect();
            for j in 0..3 {
                let mean = kids.iter().map(|&i| x.get(i, j)).sum::<f64>() / kids.len() as f64;
                assert!((got.get(p, j) - mean).abs() <= 1e-12);
            }
        }
        let once = pool_up(&unpool(&got, &assign).unwrap(), &assign, parents).unwrap();
        assert!(once.max_abs_diff(&got) <= 1e-12);
    }
    assert!(pool_up(&Matrix::zeros(3, 1), &[0, 1], 2).is_err());
}

fn dense_adj(nb: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let n = nb.len();
    let deg: Vec<f64> = nb.iter().map(|l| l.len() as f64 + 1.0).collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = 1.0 / deg[i];
        for &j in &nb[i] {
            a[i][j] = 1.0 / (deg[i] * deg[j]).sqrt();
        }
    }
    a
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn add_bias(a: &mut [Vec<f64>], b: &[f64]) {
    a.iter_mut().for_each(|r| r.iter_mut().zip(b).for_each(|(x, y)| *x += y));
}

#[test]
fn two_level_pyramid_matches_unrolled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let nb = vec![vec![1], vec![0, 2], vec![1, 3], vec![2]];
    let feats: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen::<f64>()]).collect();
    let h = build_hierarchy_from_graph(&nb, &feats, 2).unwrap();
    assert_eq!(h.counts(), vec![4, 1]);
    let mut store = ParamStore::new();
    let cfg = PyramidConfig { levels: 2, width: 4 };
    let pyr = FeaturePyramid::register(&mut store, "p", &[3, 3], cfg, &mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.3);
    let blocks = [random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 4, 3)];

    let mut s = Session::new(&store, Mode::Train);
    let bv: Vec<_> = blocks.iter().map(|b| s.tape.constant(b.clone())).collect();
    let out = pyr.forward(&mut s, &bv, &h).unwrap().collect(&s);

    let p = |id| rows(store.value(id));
    let mean: Vec<Vec<f64>> = vec![(0..3).map(|j| (0..4).map(|i| blocks[1].get(i, j)).sum::<f64>() / 4.0).collect()];
    let (w1, b1) = pyr.lateral_params(1);
    let mut lat1 = mm(&mean, &p(w1));
    add_bias(&mut lat1, &p(b1)[0]);
    let (w0, b0) = pyr.lateral_params(0);
    let mut fused0 = mm(&rows(&blocks[0]), &p(w0));
    add_bias(&mut fused0, &p(b0)[0]);
    add_bias(&mut fused0, &lat1[0]);
    let level = |fused: &Vec<Vec<f64>>, adj: Vec<Vec<f64>>, i: usize| {
        let (cw, cb) = pyr.context_params(i).expect("both levels are contextual");
        let mut f = mm(&mm(&adj, fused), &p(cw));
        add_bias(&mut f, &p(cb)[0]);
        f.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = v.max(0.0)));
        let (hw, hb) = pyr.head_params(i);
        let mut logit = mm(&f, &p(hw));
        add_bias(&mut logit, &p(hb)[0]);
        logit.iter().map(|r| 1.0 / (1.0 + (-r[0]).exp())).collect::<Vec<f64>>()
    };
    let s0 = level(&fused0, dense_adj(&nb), 0);
    let s1 = level(&lat1, vec![vec![1.0]], 1);
    for (a, b) in out.scores[0].iter().zip(&s0) {
        assert!((a - b).abs() <= 1e-10);
    }
    assert!((out.scores[1][0] - s1[0]).abs() <= 1e-10);
    assert!(max_abs_diff(&rows(&out.fused[0]), &fused0) <= 1e-10);
}

#[test]
fn zero_lateral_leaves_unpooled_parent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nb = random_graph(&mut rng, 12, 4);
    let feats: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.gen::<f64>()]).collect();
    let h = build_hierarchy_from_graph(&nb, &feats, 3).unwrap();
    let mut store = ParamStore::new();
    let pyr = FeaturePyramid::register(&mut store, "p", &[2, 2, 2], PyramidConfig { levels: 3, width: 3 }, &mut rng).unwrap();
    for i in 0..2 {
        let (w, b) = pyr.lateral_params(i);
        *store.value_mut(w) = Matrix::zeros(2, 3);
        *store.value_mut(b) = Matrix::zeros(1, 3);
    }
    let mut s = Session::new(&store, Mode::Eval);
    let bv: Vec<_> = (0..3).map(|_| s.tape.constant(random_matrix(&mut rng, 12, 2))).collect();
    let out = pyr.forward(&mut s, &bv, &h).unwrap().collect(&s);
    for lvl in 0..2 {
        let up = unpool(&out.fused[lvl + 1], h.level(lvl).parent()).unwrap();
        assert_eq!(up, out.fused[lvl]);
    }
}

#[test]
fn levels_own_their_parameters() {
    let (model, store) = OfGprn::new(ModelConfig::full(4), 0).unwrap();
    let pyr = model.pyramid().unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..5 {
        let (a, b) = pyr.lateral_params(i);
        let (c, d) = pyr.head_params(i);
        for id in [a, b, c, d] {
            assert!(seen.insert(store.name(id).to_string()));
        }
        assert_eq!(pyr.context_params(i).is_some(), matches!(i, 0 | 3 | 4));
    }
}

proptest! {
    #[test]
    fn schedule_is_ceil_quarter(n in 1usize..=1000, levels in 1usize..=8) {
        let c = level_counts(n, levels);
        prop_assert_eq!(c.len(), levels);
        prop_assert_eq!(c[0], n);
        for w in c.windows(2) {
            prop_assert_eq!(w[1], w[0].div_ceil(4).max(1));
        }
    }
}
