use coda::clustering::{build_cluster_runs, KMeansOptions};
use coda::dataset::{generate_synthetic, split_train_test, Domain, DomainDataset, SynthConfig};
use coda::encoder::{Activation, Encoder};
use coda::memory::MemoryBank;
use coda::numerics::{l2_normalize, Matrix};
use coda::retrieval::{evaluate_direction, RetrievalIndex};

fn normalized(ds: &DomainDataset) -> (Matrix, Vec<Option<usize>>) {
    let rows: Vec<Vec<f64>> = ds.records().iter().map(|r| l2_normalize(&r.x).unwrap()).collect();
    (Matrix::from_rows(&rows).unwrap(), ds.records().iter().map(|r| r.label).collect())
}

fn raw_map(query: &DomainDataset, gallery: &DomainDataset) -> f64 {
    let (q, ql) = normalized(query);
    let (g, gl) = normalized(gallery);
    let index = RetrievalIndex::new(g, gallery.ids(), gl).unwrap();
    evaluate_direction(&q, &ql, query.domain(), &index, gallery.domain()).unwrap().map
}

#[test]
fn default_dataset_has_a_raw_domain_gap() {
    let cfg = SynthConfig::default();
    let (a, b) = generate_synthetic(&cfg).unwrap();
    let (train_a, test_a) = split_train_test(&a, 0.8, cfg.seed).unwrap();
    let (train_b, test_b) = split_train_test(&b, 0.8, cfg.seed).unwrap();
    let within = 0.5 * (raw_map(&test_a, &train_a) + raw_map(&test_b, &train_b));
    let cross = 0.5 * (raw_map(&test_a, &train_b) + raw_map(&test_b, &train_a));
    assert!(cross < within, "cross {cross} within {within}");
}

#[test]
fn default_clustering_has_no_empty_clusters() {
    let cfg = SynthConfig::default();
    let (a, b) = generate_synthetic(&cfg).unwrap();
    let (train_a, _) = split_train_test(&a, 0.8, cfg.seed).unwrap();
    let (train_b, _) = split_train_test(&b, 0.8, cfg.seed).unwrap();
    let enc = Encoder::init(cfg.input_dim, &[128], 64, Activation::Tanh, 0).unwrap();
    let bank_a = MemoryBank::init(&train_a.unlabeled(), &enc, 0.95).unwrap();
    let bank_b = MemoryBank::init(&train_b.unlabeled(), &enc, 0.95).unwrap();
    let runs = build_cluster_runs(&bank_a, &bank_b, 10, 4, &KMeansOptions::default(), 0).unwrap();
    assert_eq!(runs.iter().map(|r| r.k).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    for run in &runs {
        for (assign, domain) in [(&run.assignments_a, Domain::A), (&run.assignments_b, Domain::B)] {
            let mut counts = vec![0usize; run.k];
            for &c in assign {
                counts[c] += 1;
            }
            assert!(!counts.contains(&0), "k={} domain {domain}", run.k);
        }
    }
}
