//! Cosine nearest-neighbour retrieval and mAP@All.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::{DomainDataset, Domain};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// Unit-norm gallery features with their ids and (evaluation-only) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    features: Matrix,
    ids: Vec<u64>,
    labels: Vec<Option<usize>>,
}

impl RetrievalIndex {
    pub fn new(features: Matrix, ids: Vec<u64>, labels: Vec<Option<usize>>) -> Result<Self> {
        if features.rows() != ids.len() || ids.len() != labels.len() {
            return Err(Error::invalid("gallery features, ids and labels differ in length"));
        }
        for (i, r) in features.row_iter().enumerate() {
            if (norm(r) - 1.0).abs() > 1e-10 {
                return Err(Error::invalid(format!("gallery row {i} is not unit-norm")));
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("duplicate gallery id {dup}")));
        }
        Ok(RetrievalIndex { features, ids, labels })
    }

    /// Encodes every record of `dataset`.
    pub fn encode(dataset: &DomainDataset, encoder: &Encoder) -> Result<Self> {
        let (features, ids, labels) = encode_dataset(dataset, encoder)?;
        RetrievalIndex::new(features, ids, labels)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Gallery positions sorted by descending similarity, ties by ascending id.
    pub fn rank_positions(&self, query: &[f64]) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::invalid("cannot rank against an empty gallery"));
        }
        if query.len() != self.features.cols() {
            return Err(Error::invalid(format!(
                "query has {} dims, gallery has {}",
                query.len(),
                self.features.cols()
            )));
        }
        let mut scored: Vec<(usize, f64)> = self.features.row_iter().map(|g| dot(g, query)).enumerate().collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(self.ids[a.0].cmp(&self.ids[b.0])));
        Ok(scored)
    }

    /// Ranked `(gallery id, similarity)` pairs.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<(u64, f64)>> {
        Ok(self.rank_positions(query)?.into_iter().map(|(i, s)| (self.ids[i], s)).collect())
    }
}

/// Encodes a dataset into `(features, ids, labels)`.
pub fn encode_dataset(dataset: &DomainDataset, encoder: &Encoder) -> Result<(Matrix, Vec<u64>, Vec<Option<usize>>)> {
    if dataset.dim() != encoder.input_dim() {
        return Err(Error::invalid(format!(
            "dataset has {} input dims but the encoder expects {}",
            dataset.dim(),
            encoder.input_dim()
        )));
    }
    let rows = dataset
        .records()
        .par_iter()
        .map(|r| encoder.encode(&r.x))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Matrix::from_rows(&rows)?,
        dataset.ids(),
        dataset.records().iter().map(|r| r.label).collect(),
    ))
}

/// Average precision over a fully ranked gallery; `None` when no item is
/// relevant.
pub fn average_precision(ranked_labels: &[Option<usize>], query_label: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, l) in ranked_labels.iter().enumerate() {
        if *l == Some(query_label) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn precision_at(ranked_labels: &[Option<usize>], query_label: usize, k: usize) -> f64 {
    let k = k.min(ranked_labels.len());
    if k == 0 {
        return 0.0;
    }
    ranked_labels[..k].iter().filter(|l| **l == Some(query_label)).count() as f64 / k as f64
}

pub const PRECISION_DEPTHS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub query_domain: Domain,
    pub gallery_domain: Domain,
    /// Mean AP over queries with at least one relevant gallery item.
    pub map: f64,
    /// Mean precision at each of [`PRECISION_DEPTHS`], over the same queries.
    pub precision: Vec<(usize, f64)>,
    /// Per query, `None` when nothing in the gallery shares its label.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_queries: usize,
    pub num_zero_relevant: usize,
}

impl EvalReport {
    pub fn direction(&self) -> String {
        format!("{}->{}", self.query_domain, self.gallery_domain)
    }
}

/// Scores every query of `queries` against `gallery` (features and labels of
/// the query set are given explicitly).
pub fn evaluate_direction(
    query_features: &Matrix,
    query_labels: &[Option<usize>],
    query_domain: Domain,
    gallery: &RetrievalIndex,
    gallery_domain: Domain,
) -> Result<EvalReport> {
    if query_features.rows() == 0 {
        return Err(Error::invalid("no queries to evaluate"));
    }
    if query_labels.len() != query_features.rows() {
        return Err(Error::invalid("query features and labels differ in length"));
    }
    if query_labels.iter().any(Option::is_none) || gallery.labels().iter().any(Option::is_none) {
        return Err(Error::invalid("evaluation requires labels on every query and gallery item"));
    }
    let per_query: Vec<(Option<f64>, Vec<f64>)> = (0..query_features.rows())
        .into_par_iter()
        .map(|q| {
            let ranked = gallery.rank_positions(query_features.row(q))?;
            let labels: Vec<Option<usize>> = ranked.iter().map(|(i, _)| gallery.labels()[*i]).collect();
            let ql = query_labels[q].unwrap();
            let precisions = PRECISION_DEPTHS.iter().map(|&k| precision_at(&labels, ql, k)).collect();
            Ok((average_precision(&labels, ql), precisions))
        })
        .collect::<Result<_>>()?;

    let scored: Vec<&(Option<f64>, Vec<f64>)> = per_query.iter().filter(|(ap, _)| ap.is_some()).collect();
    let n = scored.len();
    let map = if n == 0 { 0.0 } else { scored.iter().map(|(ap, _)| ap.unwrap()).sum::<f64>() / n as f64 };
    let precision = PRECISION_DEPTHS
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let p = if n == 0 { 0.0 } else { scored.iter().map(|(_, ps)| ps[j]).sum::<f64>() / n as f64 };
            (k, p)
        })
        .collect();
    Ok(EvalReport {
        query_domain,
        gallery_domain,
        map,
        precision,
        num_queries: per_query.len(),
        num_zero_relevant: per_query.len() - n,
        per_query_ap: per_query.into_iter().map(|(ap, _)| ap).collect(),
    })
}

/// Both retrieval directions between the encoded test sets, `A→B` first.
pub fn evaluate_cross_domain(encoder: &Encoder, test_a: &DomainDataset, test_b: &DomainDataset) -> Result<[EvalReport; 2]> {
    let (fa, ida, la) = encode_dataset(test_a, encoder)?;
    let (fb, idb, lb) = encode_dataset(test_b, encoder)?;
    let index_a = RetrievalIndex::new(fa.clone(), ida, la.clone())?;
    let index_b = RetrievalIndex::new(fb.clone(), idb, lb.clone())?;
    let ab = evaluate_direction(&fa, &la, test_a.domain(), &index_b, test_b.domain())?;
    let ba = evaluate_direction(&fb, &lb, test_b.domain(), &index_a, test_a.domain())?;
    Ok([ab, ba])
}

pub const REPORT_CSV_HEADER: &str = "direction,mAP,precision@1,precision@5,precision@10,num_queries,num_zero_relevant";

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        write!(out, "{},{}", r.direction(), r.map).unwrap();
        for (_, p) in &r.precision {
            write!(out, ",{p}").unwrap();
        }
        writeln!(out, ",{},{}", r.num_queries, r.num_zero_relevant).unwrap();
    }
    out
}

/// Fixed-width table, one column per direction plus the average.
pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    write!(out, "{:<14}", "Metric").unwrap();
    for r in reports {
        write!(out, "{:>10}", r.direction()).unwrap();
    }
    writeln!(out, "{:>10}", "Avg").unwrap();
    let mut row = |name: &str, vals: Vec<f64>| {
        write!(out, "{name:<14}").unwrap();
        for v in &vals {
            write!(out, "{v:>10.4}").unwrap();
        }
        let avg = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        writeln!(out, "{avg:>10.4}").unwrap();
    };
    row("mAP@All", reports.iter().map(|r| r.map).collect());
    for (j, k) in PRECISION_DEPTHS.iter().enumerate() {
        row(&format!("P@{k}"), reports.iter().map(|r| r.precision[j].1).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize, Rng};
    use proptest::prelude::*;

    fn index(rows: &[Vec<f64>], labels: &[usize]) -> RetrievalIndex {
        RetrievalIndex::new(
            Matrix::from_rows(rows).unwrap(),
            (0..rows.len() as u64).collect(),
            labels.iter().map(|&l| Some(l)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rank_basic() {
        let g = index(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[0, 1]);
        let r = g.rank(&[1.0, 0.0]).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn rank_self_first_and_ties_by_id() {
        let mut rng = Rng::new(1);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| l2_normalize(&rng.normal_vec(3)).unwrap()).collect();
        let g = index(&rows, &[0; 6]);
        assert_eq!(g.rank(&rows[4]).unwrap()[0].0, 4);

        let dup = RetrievalIndex::new(
            Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap(),
            vec![9, 2, 5],
            vec![Some(0); 3],
        )
        .unwrap();
        assert_eq!(dup.rank(&[1.0, 0.0]).unwrap().iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 9, 5]);
    }

    #[test]
    fn rank_rejects_empty_gallery() {
        let g = RetrievalIndex::new(Matrix::zeros(0, 2), vec![], vec![]).unwrap();
        assert!(g.rank(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn ap_closed_forms() {
        assert_eq!(average_precision(&[Some(1), Some(1), Some(0)], 1), Some(1.0));
        assert_eq!(average_precision(&[Some(0), Some(1)], 1), Some(0.5));
        assert_eq!(average_precision(&[Some(0), Some(0)], 1), None);
    }

    #[test]
    fn identical_domains_give_perfect_map() {
        let mut rng = Rng::new(2);
        let protos: Vec<Vec<f64>> = (0..3).map(|_| l2_normalize(&rng.normal_vec(4)).unwrap()).collect();
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = labels.iter().map(|&l| protos[l].clone()).collect();
        let g = index(&rows, &labels);
        let q = Matrix::from_rows(&rows).unwrap();
        let ql: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let rep = evaluate_direction(&q, &ql, Domain::A, &g, Domain::B).unwrap();
        assert_eq!(rep.map, 1.0);
        assert_eq!(rep.direction(), "A->B");
    }

    #[test]
    fn single_class_is_perfect() {
        let mut rng = Rng::new(3);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| l2_normalize(&rng.normal_vec(3)).unwrap()).collect();
        let g = index(&rows, &[0; 7]);
        let q = Matrix::from_rows(&rows[..3]).unwrap();
        let rep = evaluate_direction(&q, &[Some(0); 3], Domain::B, &g, Domain::A).unwrap();
        assert_eq!(rep.map, 1.0);
    }

    #[test]
    fn zero_relevant_queries_are_excluded() {
        let g = index(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0]);
        let q = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let rep = evaluate_direction(&q, &[Some(0), Some(5)], Domain::A, &g, Domain::B).unwrap();
        assert_eq!(rep.num_zero_relevant, 1);
        assert_eq!(rep.per_query_ap, vec![Some(1.0), None]);
        assert_eq!(rep.map, 1.0);
        assert!(evaluate_direction(&Matrix::zeros(0, 2), &[], Domain::A, &g, Domain::B).is_err());
    }

    #[test]
    fn csv_and_table_shapes() {
        let g = index(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let rep = evaluate_direction(&q, &[Some(1)], Domain::A, &g, Domain::B).unwrap();
        let csv = reports_to_csv(&[rep.clone(), rep.clone()]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("A->B,0.5,0,"));
        assert!(reports_to_table(&[rep]).contains("mAP@All"));
    }

    proptest! {
        #[test]
        fn ranking_is_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<f64>> = (0..12).map(|_| l2_normalize(&rng.normal_vec(3)).unwrap()).collect();
            let g = index(&rows, &[0; 12]);
            let q = l2_normalize(&rng.normal_vec(3)).unwrap();
            let ids: Vec<u64> = g.rank(&q).unwrap().into_iter().map(|x| x.0).collect();
            // scaling every similarity by the same positive factor
            let mut scaled: Vec<(u64, f64)> = rows.iter().enumerate().map(|(i, r)| (i as u64, scale * dot(r, &q))).collect();
            scaled.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            prop_assert_eq!(ids, scaled.into_iter().map(|x| x.0).collect::<Vec<_>>());
        }
    }
}
