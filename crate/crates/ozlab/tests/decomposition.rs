//! Decomposition of sampled clusters near the threshold, where finite clusters are large.

use ozlab::cluster_geometry::{decompose_all, decomposition_batch, Cluster, ClusterRecord};
use ozlab::lattice::LatticeSpec;
use ozlab::rc_measure::{BoundaryCondition, RCParams};

const EPS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

#[test]
fn large_clusters_reconstruct_and_nest() {
    let spec = LatticeSpec::cube(3, 16).unwrap();
    let params = RCParams::new(1.5, 0.3).unwrap();
    let t = [1.0, 0.0, 0.0];
    let mut big: Vec<Cluster> = Vec::new();
    let batch = decomposition_batch(
        &spec,
        &params,
        &BoundaryCondition::Free,
        &t,
        &EPS,
        20_000,
        10_000,
        8,
        |c| {
            if c.vertices.len() >= 20 {
                big.push(c.clone());
            }
        },
    )
    .unwrap();
    assert!(batch.target_reached);
    assert!(batch.all_reconstruct() && batch.all_nested());
    assert!(big.len() >= 10, "only {} large clusters", big.len());
    assert!(batch.rows.iter().any(|r| r.cone_points[3] > 0 && r.vertices > 2));
    for (i, c) in big.iter().enumerate() {
        let line = serde_json::to_string(&ClusterRecord::new(i, c)).unwrap();
        let back: ClusterRecord = serde_json::from_str(&line).unwrap();
        let c2 = back.cluster();
        assert_eq!((&c2.vertices, &c2.edges), (&c.vertices, &c.edges));
        assert_eq!(
            decompose_all(&c2, &t, &EPS).unwrap(),
            decompose_all(c, &t, &EPS).unwrap()
        );
    }
}

#[test]
fn bad_openings_rejected() {
    let spec = LatticeSpec::cube(2, 4).unwrap();
    let params = RCParams::new(2.0, 0.5).unwrap();
    let r = decomposition_batch(
        &spec,
        &params,
        &BoundaryCondition::Free,
        &[1.0, 0.0],
        &[0.4, 0.2],
        1,
        1,
        0,
        |_| {},
    );
    assert!(r.is_err());
}
