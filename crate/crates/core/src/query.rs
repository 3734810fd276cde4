//! Anchor queries and grouped perturbed label queries.
//!
//! A query is the flat vector `[x_proj, y_proj, o_l, o_t, o_r, o_b, depth,
//! class one-hot]` of length `7 + C`. Grouped construction emits `2 * N * K`
//! perturbed queries for `N` groups over `K` objects: each group holds one
//! positive and one negative query per object, laid out as `K` positives
//! followed by `K` negatives. A negative reuses its positive's sign draws
//! with the perturbation scale increased by one and is trained toward the
//! no-object class.
//!
//! Draw order is group-major, object-minor; per object the draws follow
//! [`PerturbDraws::sample`].

use std::io::{self, Write};

use rand::Rng;
use thiserror::Error;

use crate::dap::{
    apply_perturbation, perturb_corners_negative, CleanLabel, DapConfig, DapError, PerturbDraws,
};
use crate::geometry::ProjectedBox;
use crate::uncertainty::DifficultyScores;
use crate::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("no labels to build groups from")]
    EmptyLabels,
    #[error("scores length does not match labels length")]
    ScoreCountMismatch,
    #[error(transparent)]
    Dap(#[from] DapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    Anchor,
    PositivePerturbed,
    NegativePerturbed,
}

impl QueryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryKind::Anchor => "anchor",
            QueryKind::PositivePerturbed => "positive",
            QueryKind::NegativePerturbed => "negative",
        }
    }
}

/// A single decoder query plus its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelQuery<F> {
    pub vec: Vec<F>,
    pub kind: QueryKind,
    pub group: usize,
    pub gt_index: Option<usize>,
}

impl<F: Real> LabelQuery<F> {
    pub fn num_classes(&self) -> usize {
        self.vec.len() - 7
    }

    pub fn depth(&self) -> F {
        self.vec[6]
    }

    /// Box slice `(x_proj, y_proj, o_l, o_t, o_r, o_b)`.
    pub fn box_values(&self) -> [F; 6] {
        [
            self.vec[0], self.vec[1], self.vec[2], self.vec[3], self.vec[4], self.vec[5],
        ]
    }

    /// Corner values `(x_l, y_t, x_r, y_b)` reconstructed from the box slice.
    pub fn corner_values(&self) -> [F; 4] {
        let [x, y, ol, ot, or, ob] = self.box_values();
        [x - ol, y - ot, x + or, y + ob]
    }

    pub fn class_slice(&self) -> &[F] {
        &self.vec[7..]
    }
}

fn query_vec<F: Real>(box_vals: [F; 6], depth: F, class_onehot: &[F]) -> Vec<F> {
    let mut v = Vec::with_capacity(7 + class_onehot.len());
    v.extend_from_slice(&box_vals);
    v.push(depth);
    v.extend_from_slice(class_onehot);
    v
}

/// Anchor query from explicit spatial priors (Eq. form `[b, d, c]`).
pub fn build_dab_query<F: Real>(
    b: &ProjectedBox<F>,
    depth: F,
    class_idx: usize,
    num_classes: usize,
) -> LabelQuery<F> {
    let onehot = crate::dap::one_hot::<F>(class_idx, num_classes);
    LabelQuery {
        vec: query_vec(
            [b.x_proj(), b.y_proj(), b.o_l(), b.o_t(), b.o_r(), b.o_b()],
            depth,
            &onehot,
        ),
        kind: QueryKind::Anchor,
        group: 0,
        gt_index: None,
    }
}

/// A coarse grid of anchor queries covering the image plane, rotating the
/// class prior over the available classes.
pub fn anchor_grid<F: Real>(count: usize, depth: F, num_classes: usize) -> Vec<LabelQuery<F>> {
    assert!(count >= 1 && num_classes >= 1);
    let rows = (count as f64).sqrt().floor().max(1.0) as usize;
    let cols = count.div_ceil(rows);
    let o_x = real::<F>(0.45 / cols as f64);
    let o_y = real::<F>(0.45 / rows as f64);
    let mut out = Vec::with_capacity(count);
    'outer: for r in 0..rows {
        for c in 0..cols {
            if out.len() == count {
                break 'outer;
            }
            let x = real::<F>((c as f64 + 0.5) / cols as f64);
            let y = real::<F>((r as f64 + 0.5) / rows as f64);
            let b = ProjectedBox::new(x, y, o_x, o_y, o_x, o_y)
                .expect("grid anchors are inside the unit square");
            out.push(build_dab_query(&b, depth, out.len() % num_classes, num_classes));
        }
    }
    out
}

/// Attention slots: the anchor block, or one perturbed query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    AnchorBlock,
    Query(usize),
}

/// Block mask over perturbation groups. Queries attend only within their own
/// group; anchors and perturbed queries never attend to each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    group_of: Vec<usize>,
}

impl AttentionMask {
    pub fn num_queries(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self, query_idx: usize) -> usize {
        self.group_of[query_idx]
    }

    pub fn allowed(&self, from: Slot, to: Slot) -> bool {
        match (from, to) {
            (Slot::AnchorBlock, Slot::AnchorBlock) => true,
            (Slot::Query(i), Slot::Query(j)) => self.group_of[i] == self.group_of[j],
            _ => false,
        }
    }
}

/// The grouped positive/negative query set for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbGroupSet<F> {
    pub queries: Vec<LabelQuery<F>>,
    pub num_groups: usize,
    pub num_objects: usize,
    pub mask: AttentionMask,
}

impl<F: Real> PerturbGroupSet<F> {
    /// Index of the positive query for `(group, object)`.
    pub fn positive_index(&self, group: usize, object: usize) -> usize {
        group * 2 * self.num_objects + object
    }

    /// Index of the negative query paired with `(group, object)`.
    pub fn negative_index(&self, group: usize, object: usize) -> usize {
        group * 2 * self.num_objects + self.num_objects + object
    }

    /// One query per row: kind, group, gt_index, then the `7 + C` values.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let c = self
            .queries
            .first()
            .map(|q| q.num_classes())
            .unwrap_or(0);
        write!(w, "kind,group,gt_index,x_proj,y_proj,o_l,o_t,o_r,o_b,depth")?;
        for i in 0..c {
            write!(w, ",class_{i}")?;
        }
        writeln!(w)?;
        for q in &self.queries {
            write!(w, "{},{}", q.kind.as_str(), q.group)?;
            match q.gt_index {
                Some(i) => write!(w, ",{i}")?,
                None => write!(w, ",")?,
            }
            for v in &q.vec {
                write!(w, ",{}", v.to_f64().unwrap_or(f64::NAN))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Builds `N` perturbation groups over `K` clean labels: `2 * N * K` queries.
pub fn build_groups<F: Real, R: Rng>(
    labels: &[CleanLabel<F>],
    scores: &[DifficultyScores<F>],
    cfg: &DapConfig<F>,
    num_groups: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<PerturbGroupSet<F>, QueryError> {
    if labels.is_empty() {
        return Err(QueryError::EmptyLabels);
    }
    if scores.len() != labels.len() {
        return Err(QueryError::ScoreCountMismatch);
    }
    assert!(num_groups >= 1);
    let k = labels.len();
    let mut queries = Vec::with_capacity(2 * num_groups * k);
    let mut group_of = Vec::with_capacity(2 * num_groups * k);

    for g in 0..num_groups {
        let mut negatives = Vec::with_capacity(k);
        for (i, (label, score)) in labels.iter().zip(scores).enumerate() {
            let draws =
                PerturbDraws::sample(label.class_idx, num_classes, cfg.class_flip_prob, rng)?;

            let pos = apply_perturbation(label, score, cfg, num_classes, &draws)?;
            queries.push(LabelQuery {
                vec: query_vec(
                    [
                        pos.box_proj.x_proj(),
                        pos.box_proj.y_proj(),
                        pos.box_proj.o_l(),
                        pos.box_proj.o_t(),
                        pos.box_proj.o_r(),
                        pos.box_proj.o_b(),
                    ],
                    pos.depth,
                    &pos.class_onehot,
                ),
                kind: QueryKind::PositivePerturbed,
                group: g,
                gt_index: Some(i),
            });

            // Negative twin: identical signs, scale boosted by one.
            let [x_l, y_t, x_r, y_b] = perturb_corners_negative(
                &label.box_proj,
                score.box_scores(),
                cfg.gamma_b,
                draws.box_signs,
            );
            let half = real::<F>(0.5);
            let (cx, cy) = ((x_l + x_r) * half, (y_t + y_b) * half);
            let neg_depth_scale =
                score.depth_score() * cfg.gamma_d + F::one();
            let sign = real::<F>(draws.depth_sign as f64);
            let neg_depth = label.depth * (F::one() + neg_depth_scale * sign);
            negatives.push(LabelQuery {
                vec: query_vec(
                    [cx, cy, cx - x_l, cy - y_t, x_r - cx, y_b - cy],
                    neg_depth,
                    &crate::dap::one_hot::<F>(draws.class_idx, num_classes),
                ),
                kind: QueryKind::NegativePerturbed,
                group: g,
                gt_index: Some(i),
            });
        }
        queries.append(&mut negatives);
        group_of.extend(std::iter::repeat(g).take(2 * k));
    }

    Ok(PerturbGroupSet {
        queries,
        num_groups,
        num_objects: k,
        mask: AttentionMask { group_of },
    })
}

/// Reconstruction target of one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconTarget {
    /// Reconstruct the originating clean label.
    Object(usize),
    /// Class target is the no-object index `C`; no box or depth loss.
    NoObject,
}

/// Targets are known by construction: positives map to their clean label,
/// negatives to no-object, anchors are excluded.
pub fn reconstruction_targets<F: Real>(
    queries: &[LabelQuery<F>],
    num_clean: usize,
) -> Vec<(usize, ReconTarget)> {
    queries
        .iter()
        .enumerate()
        .filter_map(|(i, q)| match q.kind {
            QueryKind::Anchor => None,
            QueryKind::PositivePerturbed => {
                let gt = q.gt_index.expect("perturbed queries carry gt_index");
                assert!(gt < num_clean, "gt_index out of range");
                Some((i, ReconTarget::Object(gt)))
            }
            QueryKind::NegativePerturbed => Some((i, ReconTarget::NoObject)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dap::DepthMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pbox(x: f64, y: f64, o: [f64; 4]) -> ProjectedBox<f64> {
        ProjectedBox::new(x, y, o[0], o[1], o[2], o[3]).unwrap()
    }

    fn labels(k: usize) -> Vec<CleanLabel<f64>> {
        (0..k)
            .map(|i| CleanLabel {
                box_proj: pbox(
                    0.3 + 0.05 * (i % 5) as f64,
                    0.5,
                    [0.05, 0.04, 0.06, 0.05],
                ),
                depth: 0.5 + i as f64 * 0.1,
                class_idx: i % 3,
            })
            .collect()
    }

    #[test]
    fn dab_query_concatenates_in_order() {
        let q = build_dab_query(&pbox(0.5, 0.5, [0.1, 0.2, 0.1, 0.2]), 20.0, 0, 3);
        assert_eq!(
            q.vec,
            vec![0.5, 0.5, 0.1, 0.2, 0.1, 0.2, 20.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(q.vec.len(), 10);
        assert_eq!(q.kind, QueryKind::Anchor);
    }

    #[test]
    fn dab_query_length_tracks_class_count() {
        let q = build_dab_query(&pbox(0.5, 0.5, [0.1, 0.2, 0.1, 0.2]), 20.0, 0, 1);
        assert_eq!(q.vec.len(), 8);
    }

    #[test]
    fn distinct_labels_give_distinct_queries() {
        let a = build_dab_query(&pbox(0.5, 0.5, [0.1, 0.2, 0.1, 0.2]), 20.0, 0, 3);
        let b = build_dab_query(&pbox(0.5, 0.5, [0.1, 0.2, 0.1, 0.2]), 21.0, 0, 3);
        assert_ne!(a.vec, b.vec);
    }

    #[test]
    fn group_count_identity() {
        let cfg = DapConfig::default();
        let ls = labels(3);
        let scores = vec![DifficultyScores::uniform(0.5).unwrap(); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = build_groups(&ls, &scores, &cfg, 7, 3, &mut rng).unwrap();
        assert_eq!(set.queries.len(), 42);
        assert_eq!(set.num_groups, 7);
        assert_eq!(set.num_objects, 3);
    }

    #[test]
    fn minimal_group_is_one_positive_one_negative() {
        let cfg = DapConfig::default();
        let ls = labels(1);
        let scores = vec![DifficultyScores::uniform(0.5).unwrap(); 1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = build_groups(&ls, &scores, &cfg, 1, 3, &mut rng).unwrap();
        assert_eq!(set.queries.len(), 2);
        assert_eq!(set.queries[0].kind, QueryKind::PositivePerturbed);
        assert_eq!(set.queries[1].kind, QueryKind::NegativePerturbed);
    }

    #[test]
    fn empty_labels_rejected() {
        let cfg = DapConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            build_groups::<f64, _>(&[], &[], &cfg, 1, 3, &mut rng).unwrap_err(),
            QueryError::EmptyLabels
        );
    }

    #[test]
    fn negative_shares_sign_and_adds_one_to_scale() {
        // No flipping and a box far from the borders so nothing clips.
        let cfg = DapConfig::new(0.4, 0.8, 0.0, DepthMode::Residual, 0).unwrap();
        let label = CleanLabel {
            box_proj: pbox(0.5, 0.5, [0.02, 0.02, 0.02, 0.02]),
            depth: 0.3,
            class_idx: 0,
        };
        let scores = [DifficultyScores::new([0.3, 0.8, 0.6, 0.4, 0.2]).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let set = build_groups(&[label], &scores, &cfg, 4, 3, &mut rng).unwrap();

        let clean = crate::geometry::reparameterize(&label.box_proj);
        let offsets = label.box_proj.offsets();
        let box_scores = scores[0].box_scores();
        for g in 0..4 {
            let pos = &set.queries[set.positive_index(g, 0)];
            let neg = &set.queries[set.negative_index(g, 0)];
            assert_eq!(set.mask.group_of(set.positive_index(g, 0)), g);
            let pc = pos.corner_values();
            let nc = neg.corner_values();
            for v in 0..4 {
                let pos_delta = pc[v] - clean.values()[v];
                let neg_delta = nc[v] - clean.values()[v];
                let sign = if pos_delta >= 0.0 { 1.0 } else { -1.0 };
                // positive scale c*gamma, negative scale c*gamma + 1
                let scale = box_scores[v] * 0.4;
                assert!((pos_delta - offsets[v] * scale * sign).abs() < 1e-12);
                assert!((neg_delta - offsets[v] * (scale + 1.0) * sign).abs() < 1e-12);
                assert!(neg_delta.abs() > offsets[v] - 1e-12);
                assert!(pos_delta.abs() < offsets[v]);
            }
            // depth follows the same +1 rule at equal sign
            let pos_scale = (pos.depth() - 0.3) / 0.3;
            let neg_scale = (neg.depth() - 0.3) / 0.3;
            assert!((neg_scale - pos_scale).abs() - 1.0 < 1e-12);
            assert_eq!(pos_scale > 0.0, neg_scale > 0.0);
        }
    }

    #[test]
    fn negative_corners_stay_in_unit_range_and_ordered() {
        let cfg = DapConfig::default();
        let ls = labels(6);
        let scores = vec![DifficultyScores::uniform(1.0).unwrap(); 6];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in 1..=4 {
            let set = build_groups(&ls, &scores, &cfg, n, 3, &mut rng).unwrap();
            for q in &set.queries {
                let [x_l, y_t, x_r, y_b] = q.corner_values();
                assert!((0.0..=1.0).contains(&x_l) && (0.0..=1.0).contains(&x_r));
                assert!((0.0..=1.0).contains(&y_t) && (0.0..=1.0).contains(&y_b));
                assert!(x_l <= x_r && y_t <= y_b);
                if q.kind == QueryKind::PositivePerturbed {
                    assert!(x_l < x_r && y_t < y_b);
                }
            }
        }
    }

    #[test]
    fn mask_is_block_diagonal_and_anchor_isolated() {
        let cfg = DapConfig::default();
        let ls = labels(2);
        let scores = vec![DifficultyScores::uniform(0.5).unwrap(); 2];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let set = build_groups(&ls, &scores, &cfg, 3, 3, &mut rng).unwrap();
        let m = &set.mask;
        for i in 0..m.num_queries() {
            assert!(!m.allowed(Slot::Query(i), Slot::AnchorBlock));
            assert!(!m.allowed(Slot::AnchorBlock, Slot::Query(i)));
            for j in 0..m.num_queries() {
                let same_group = set.queries[i].group == set.queries[j].group;
                assert_eq!(m.allowed(Slot::Query(i), Slot::Query(j)), same_group);
            }
        }
        assert!(m.allowed(Slot::AnchorBlock, Slot::AnchorBlock));
    }

    #[test]
    fn targets_partition_by_kind() {
        let cfg = DapConfig::default();
        let ls = labels(3);
        let scores = vec![DifficultyScores::uniform(0.5).unwrap(); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = build_groups(&ls, &scores, &cfg, 2, 3, &mut rng).unwrap();

        let mut queries = set.queries.clone();
        queries.push(build_dab_query(
            &pbox(0.5, 0.5, [0.1, 0.1, 0.1, 0.1]),
            0.0,
            0,
            3,
        ));
        let targets = reconstruction_targets(&queries, ls.len());
        assert_eq!(targets.len(), set.queries.len()); // anchor excluded
        for (i, t) in &targets {
            match set.queries[*i].kind {
                QueryKind::PositivePerturbed => {
                    assert_eq!(*t, ReconTarget::Object(set.queries[*i].gt_index.unwrap()));
                }
                QueryKind::NegativePerturbed => assert_eq!(*t, ReconTarget::NoObject),
                QueryKind::Anchor => panic!("anchor in targets"),
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_query() {
        let cfg = DapConfig::default();
        let ls = labels(2);
        let scores = vec![DifficultyScores::uniform(0.5).unwrap(); 2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = build_groups(&ls, &scores, &cfg, 2, 3, &mut rng).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + set.queries.len());
        assert!(text.starts_with("kind,group,gt_index,x_proj"));
    }

    #[test]
    fn anchor_grid_covers_and_counts() {
        let anchors = anchor_grid::<f64>(8, 0.0, 3);
        assert_eq!(anchors.len(), 8);
        for a in &anchors {
            assert_eq!(a.kind, QueryKind::Anchor);
            assert_eq!(a.vec.len(), 10);
        }
    }
}
