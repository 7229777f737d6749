use std::fs;

use factorgraph::checks::toy_world;
use factorgraph::gnn::GnnConfig;
use factorgraph::graph::{read_edges, write_edges};
use factorgraph::numerics::Rng;
use factorgraph::quantizer::{read_assignments, write_assignments, FactorAssignment, QuantizerConfig, QuantizerModel};
use factorgraph::recommender::{read_checkpoint, write_checkpoint, Checkpoint, RecConfig, RecModel};
use factorgraph::semantic::{EmbeddingSet, SemanticVector};

fn embeddings(seed: u64, dim: usize) -> EmbeddingSet {
    let mut rng = Rng::new(seed);
    let mut set = EmbeddingSet::new(dim);
    for id in [3u64, 1, 99, 7, 42] {
        let values = (0..dim).map(|_| rng.normal() as f32).collect();
        set.insert(SemanticVector { id, values }).unwrap();
    }
    set
}

fn quantizer() -> QuantizerModel<f32> {
    let cfg = QuantizerConfig {
        levels: 3,
        codebook_size: 5,
        code_dim: 4,
        hidden: vec![6],
        ..QuantizerConfig::default()
    };
    QuantizerModel::new(6, cfg, &mut Rng::new(9)).unwrap()
}

fn graph_config() -> RecConfig {
    RecConfig {
        dim: 8,
        gnn: GnnConfig {
            dim: 8,
            ..GnnConfig::default()
        },
        ..RecConfig::default()
    }
}

#[test]
fn embedding_files_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let set = embeddings(1, 6);
    let bin = dir.path().join("v.semv");
    set.save(&bin).unwrap();
    assert_eq!(EmbeddingSet::load(&bin, Some(6)).unwrap(), set);
    assert!(EmbeddingSet::load(&bin, Some(5)).is_err());
    let mut text = Vec::new();
    set.write_jsonl(&mut text).unwrap();
    assert_eq!(EmbeddingSet::read_jsonl(text.as_slice(), None).unwrap(), set);
}

#[test]
fn quantizer_file_reloads_to_the_same_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let q = quantizer();
    let path = dir.path().join("q.rqvq");
    q.save(&path).unwrap();
    let back = QuantizerModel::<f32>::load(&path).unwrap();
    for v in embeddings(2, 6).vectors.values() {
        assert_eq!(back.assign(v).unwrap(), q.assign(v).unwrap());
    }
    let assignments: Vec<FactorAssignment> = embeddings(2, 6)
        .iter()
        .map(|v| q.assign_incremental(v.id, &v.values).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_assignments(&mut buf, &assignments).unwrap();
    assert_eq!(read_assignments(buf.as_slice()).unwrap(), assignments);
}

#[test]
fn checkpoint_restores_identical_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, g) = toy_world(15, 25, 4);
    let mut m = RecModel::<f32>::new(graph_config(), ds.n_users(), ds.n_items(), ds.config.max_len, Some(&g)).unwrap();
    m.refresh().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&m, &path).unwrap();

    let other = RecConfig {
        seed: 77,
        ..graph_config()
    };
    let mut fresh = RecModel::<f32>::new(other.clone(), ds.n_users(), ds.n_items(), ds.config.max_len, Some(&g)).unwrap();
    assert!(read_checkpoint(&path).unwrap().restore_into(&mut fresh).is_err());

    let mut fresh = RecModel::<f32>::new(graph_config(), ds.n_users(), ds.n_items(), ds.config.max_len, Some(&g)).unwrap();
    for p in fresh.params_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    read_checkpoint(&path).unwrap().restore_into(&mut fresh).unwrap();
    let items: Vec<u32> = (1..=ds.n_items() as u32).collect();
    for u in ds.user_ids() {
        let a = m.user_encode(u, ds.train_items(u)).unwrap();
        let b = fresh.user_encode(u, ds.train_items(u)).unwrap();
        assert_eq!(m.score_many(&a, &items).unwrap(), fresh.score_many(&b, &items).unwrap());
    }
}

#[test]
fn edge_export_reloads_the_graph() {
    let dir = tempfile::tempdir().unwrap();
    let (_, g) = toy_world(10, 18, 5);
    let path = dir.path().join("g.edges");
    write_edges(&g, fs::File::create(&path).unwrap()).unwrap();
    assert_eq!(read_edges(fs::File::open(&path).unwrap()).unwrap(), g);
}

#[test]
fn corrupt_headers_are_rejected() {
    let mut semv = Vec::new();
    embeddings(3, 4).write_binary(&mut semv).unwrap();
    let mut rqvq = Vec::new();
    quantizer().write_to(&mut rqvq).unwrap();
    let (ds, g) = toy_world(8, 12, 6);
    let m = RecModel::<f32>::new(graph_config(), ds.n_users(), ds.n_items(), ds.config.max_len, Some(&g)).unwrap();
    let mut ckpt = Vec::new();
    Checkpoint::from_model(&m).write_to(&mut ckpt).unwrap();
    let mut edges = Vec::new();
    write_edges(&g, &mut edges).unwrap();

    for (offset, bytes) in [(0usize, &semv), (0, &rqvq), (0, &ckpt), (1, &edges)] {
        let mut magic = bytes.clone();
        magic[offset] ^= 0x20;
        let mut version = bytes.clone();
        let at = if offset == 1 { edges.iter().position(|&b| b == b'v').unwrap() + 1 } else { 4 };
        version[at] = version[at].wrapping_add(3);
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 3);
        for bad in [magic, version, truncated] {
            let rejected = match bytes {
                b if b == &semv => EmbeddingSet::read_binary(bad.as_slice(), None).is_err(),
                b if b == &rqvq => QuantizerModel::<f32>::read_from(bad.as_slice()).is_err(),
                b if b == &ckpt => Checkpoint::read_from(bad.as_slice()).is_err(),
                _ => read_edges(bad.as_slice()).is_err(),
            };
            assert!(rejected);
        }
    }
    let mut trailing = ckpt.clone();
    trailing.push(0);
    assert!(Checkpoint::read_from(trailing.as_slice()).is_err());
}
