//! The wired norm used by the census against the box method at two margins.
//!
//! Checked on every polymer through the anchor with at most 5 plaquettes and
//! on every larger one (up to 8) whose wired norm is nonzero. The remaining
//! polymers of size 6 to 8 are too many to push through the box method.

use ozlab::lattice::{Plaquette, ZEdge};
use ozlab::polymer::{for_each_plaquette_polymer, polymer_norm, Norm};

#[test]
fn local_norm_matches_box_margins_3_and_4() {
    let anchor = Plaquette(ZEdge::new(vec![0, 0, 0], 0));
    let mut checked = [0usize; 9];
    let mut nonzero = [0usize; 9];
    let mut bad = Vec::new();
    for_each_plaquette_polymer(&anchor, 8, &mut |v| {
        let local = v.wired_norm();
        if v.size() > 5 && local == 0 {
            return;
        }
        let s = v.plaquettes();
        let m3 = polymer_norm(&s, &Norm::Wired { margin: 3 }).unwrap();
        let m4 = polymer_norm(&s, &Norm::Wired { margin: 4 }).unwrap();
        checked[v.size()] += 1;
        nonzero[v.size()] += (local > 0) as usize;
        if m3 != local || m4 != local {
            bad.push((s, local, m3, m4));
        }
    })
    .unwrap();
    assert!(bad.is_empty(), "{} disagreements, first {:?}", bad.len(), bad.first());
    assert_eq!(&checked[1..6], &[1, 12, 158, 2148, 29685]);
    assert_eq!(&nonzero[6..], &[2, 56, 1184]);
}
