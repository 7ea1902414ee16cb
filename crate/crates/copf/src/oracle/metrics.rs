//! Reference metric computation by explicit full sort per user.

/// One user's complete candidate score list (held-out item included).
#[derive(Clone, Debug)]
pub struct UserScores {
    pub user: u32,
    pub held_item: u32,
    pub candidates: Vec<(u32, f64)>,
}

/// HR@K and NDCG@K by sorting every candidate list descending by score,
/// ties ascending by item id, and locating the held-out item. Users reduce
/// in ascending user-id order.
pub fn reference_metrics(tables: &[UserScores], k: usize) -> (f64, f64) {
    let mut ordered: Vec<&UserScores> = tables.iter().collect();
    ordered.sort_by_key(|t| t.user);
    let mut hits = 0.0;
    let mut gain = 0.0;
    for table in &ordered {
        let mut sorted = table.candidates.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let rank = 1 + sorted
            .iter()
            .position(|&(id, _)| id == table.held_item)
            .expect("held-out item present in candidates");
        if rank <= k {
            hits += 1.0;
            gain += 1.0 / ((rank as f64) + 1.0).log2();
        }
    }
    let n = ordered.len() as f64;
    (hits / n, gain / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_sorted_five_item_table() {
        let table = UserScores {
            user: 0,
            held_item: 3,
            candidates: vec![
                (0, 0.9),
                (1, 0.1),
                (2, 0.5),
                (3, 0.7),
                (4, 0.7),
            ],
        };
        // descending: 0 (0.9), 3 (0.7, smaller id), 4 (0.7), 2, 1 -> rank 2
        let (hr, ndcg) = reference_metrics(&[table], 10);
        assert_eq!(hr, 1.0);
        assert!((ndcg - 1.0 / 3.0_f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn relabeling_items_leaves_metrics_unchanged() {
        let base = UserScores {
            user: 0,
            held_item: 2,
            candidates: vec![(0, 0.3), (1, 0.9), (2, 0.5), (3, 0.1)],
        };
        // permute ids with their scores; ties absent so ranks are unchanged
        let permuted = UserScores {
            user: 0,
            held_item: 0,
            candidates: vec![(3, 0.3), (2, 0.9), (0, 0.5), (1, 0.1)],
        };
        assert_eq!(reference_metrics(&[base], 10), reference_metrics(&[permuted], 10));
    }
}
