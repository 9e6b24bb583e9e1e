//! t-core filtering: keep the maximal interaction subset in which every
//! surviving user and item has at least t interactions.

use super::Interaction;
use std::collections::HashMap;

/// Repeatedly remove interactions of users or items with fewer than `t`
/// interactions until a fixpoint is reached. A single pass is not enough:
/// removing a user can push an item below `t` and vice versa.
///
/// Input order is preserved. The result is the unique maximal subset in
/// which every user and item occurs at least `t` times.
pub fn tcore_filter(interactions: Vec<Interaction>, t: usize) -> Vec<Interaction> {
    assert!(t >= 1, "t-core threshold must be >= 1");
    if t == 1 {
        return interactions;
    }
    let mut alive: Vec<bool> = vec![true; interactions.len()];
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for (i, inter) in interactions.iter().enumerate() {
            if alive[i] {
                *user_count.entry(inter.user_id.as_str()).or_insert(0) += 1;
                *item_count.entry(inter.item_id.as_str()).or_insert(0) += 1;
            }
        }
        let mut changed = false;
        for (i, inter) in interactions.iter().enumerate() {
            if alive[i]
                && (user_count[inter.user_id.as_str()] < t
                    || item_count[inter.item_id.as_str()] < t)
            {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .into_iter()
        .zip(alive)
        .filter_map(|(inter, keep)| keep.then_some(inter))
        .collect()
}
