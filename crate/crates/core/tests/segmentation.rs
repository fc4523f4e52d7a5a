mod common;

use std::collections::BTreeSet;

use common::*;
use ofgprn::image::ImagePlane;
use ofgprn::segmentation::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn methods() -> Vec<Segmenter> {
    ["paper-slic", "paper-felz", "paper-quickshift", "slic-100", "felz-40", "quickshift-6"]
        .iter()
        .map(|n| preset(n).unwrap())
        .collect()
}

fn assert_contract(img: &ImagePlane, labels: &LabelMap) {
    assert_eq!((labels.width(), labels.height()), (img.width(), img.height()));
    assert_eq!(labels.labels().len(), img.len());
    let used: BTreeSet<u32> = labels.labels().iter().copied().collect();
    let k = labels.segment_count() as u32;
    assert_eq!(used, (0..k).collect::<BTreeSet<_>>());
}

#[test]
fn corpus_contracts_for_every_method() {
    for img in fixture_corpus() {
        for seg in methods() {
            let a = seg.segment(&img).unwrap();
            assert_contract(&img, &a);
            assert_eq!(a, seg.segment(&img).unwrap(), "{} is not deterministic", seg.method_name());
        }
    }
}

#[test]
fn felzenszwalb_noise_respects_min_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_plane(&mut rng, 64, 64);
    let labels = felzenszwalb(&img, 50.0, 0.8, 64).unwrap();
    assert!(labels.sizes().iter().all(|&s| s >= 64));
}

#[test]
fn quickshift_forest_links_uphill_within_reach() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = random_plane(&mut rng, 20, 16);
    let forest = quickshift_forest(&img, 3.0, 6.0, 0.5).unwrap();
    for p in 0..img.len() {
        let q = forest.parent[p];
        if q != p {
            assert!(forest.ranks_above(q, p));
            assert!(forest.parent_dist[p] <= 6.0);
        }
    }
}

#[test]
fn rag_invariants_on_corpus() {
    for img in fixture_corpus() {
        let labels = preset("paper-quickshift").unwrap().segment(&img).unwrap();
        let rag = build_rag(&labels, std::slice::from_ref(&img)).unwrap();
        let adj = rag.adjacency_dense();
        for i in 0..adj.len() {
            assert!(!adj[i][i]);
            for j in 0..adj.len() {
                assert_eq!(adj[i][j], adj[j][i]);
            }
        }
        assert_eq!(rag.areas().iter().sum::<usize>(), img.len());
        assert_eq!(rag.feature_dim(), 1 + GEOMETRY_FEATURES);
    }
}

#[test]
fn foreground_nodes_stay_connected() {
    // A plus-shaped bright region is 4-connected; its segments must be too.
    let img = ImagePlane::from_fn(30, 30, |x, y| {
        if (12..18).contains(&x) || (12..18).contains(&y) {
            0.8 + 0.01 * ((x * 7 + y * 3) % 5) as f64
        } else {
            0.1
        }
    });
    let labels = preset("paper-slic").unwrap().segment(&img).unwrap();
    let rag = build_rag(&labels, std::slice::from_ref(&img)).unwrap();
    let fg: Vec<usize> = (0..rag.node_count()).filter(|&i| rag.features()[i][0] > 0.5).collect();
    assert!(!fg.is_empty());
    let mut seen = vec![false; rag.node_count()];
    let mut stack = vec![fg[0]];
    seen[fg[0]] = true;
    while let Some(u) = stack.pop() {
        for &v in rag.neighbors(u) {
            if !seen[v] && fg.contains(&v) {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    assert!(fg.iter().all(|&i| seen[i]));
}

#[test]
fn two_by_two_grid_rag() {
    let labels = LabelMap::from_raw(2, 2, &[0, 1, 2, 3]).unwrap();
    let rag = build_rag(&labels, &[ImagePlane::zeros(2, 2)]).unwrap();
    assert_eq!(rag.node_count(), 4);
    assert_eq!(rag.edges(), &[(0, 1), (0, 2), (1, 3), (2, 3)]);
}
