//! Edge-list TSV export/import.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EdgeKind, FactorAdjacency, GraphError, HeteroGraph, NodeRef, Result};

pub const EDGE_MAGIC: &str = "#FGED";
const EDGE_VERSION: &str = "v1";

pub fn write_edges<W: Write>(g: &HeteroGraph, mut w: W) -> Result<()> {
    let used: Vec<String> = g.levels_used.iter().map(|t| t.to_string()).collect();
    writeln!(
        w,
        "{EDGE_MAGIC}\t{EDGE_VERSION}\tusers={}\titems={}\tuser_levels={}\tuser_k={}\titem_levels={}\titem_k={}\tlevels_used={}",
        g.n_users,
        g.n_items,
        g.user_factors.levels,
        g.user_factors.codebook_size,
        g.item_factors.levels,
        g.item_factors.codebook_size,
        used.join(",")
    )?;
    writeln!(w, "kind\tsrc\tdst")?;
    for (kind, src, dst) in g.edges() {
        writeln!(w, "{}\t{src}\t{dst}", kind.tag())?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_edges(g: &HeteroGraph, path: &Path) -> Result<()> {
    write_edges(g, BufWriter::new(File::create(path)?))
}

fn header_field(fields: &[&str], key: &str) -> Result<String> {
    fields
        .iter()
        .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .map(str::to_owned)
        .ok_or_else(|| GraphError::Format(format!("header lacks `{key}`")))
}

fn header_usize(fields: &[&str], key: &str) -> Result<usize> {
    header_field(fields, key)?
        .parse()
        .map_err(|_| GraphError::Format(format!("header field `{key}` is not a count")))
}

fn empty_adjacency(n: usize, levels: usize, k: usize) -> FactorAdjacency {
    FactorAdjacency {
        levels,
        codebook_size: k,
        entity_factors: vec![Vec::new(); n + 1],
        factor_entities: vec![Vec::new(); levels * k],
    }
}

fn add_factor(adj: &mut FactorAdjacency, entity: u32, level: usize, index: u32, n: usize) -> Result<()> {
    if entity == 0 || entity as usize > n || level >= adj.levels || index as usize >= adj.codebook_size {
        return Err(GraphError::Format(format!(
            "factor edge ({entity}, {level}:{index}) out of range"
        )));
    }
    let node = (level * adj.codebook_size) as u32 + index;
    adj.entity_factors[entity as usize].push(node);
    adj.factor_entities[node as usize].push(entity);
    Ok(())
}

pub fn read_edges<R: Read>(r: R) -> Result<HeteroGraph> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().transpose()?.ok_or_else(|| GraphError::Format("empty file".into()))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.first() != Some(&EDGE_MAGIC) {
        return Err(GraphError::Format("missing edge-file magic".into()));
    }
    if fields.get(1) != Some(&EDGE_VERSION) {
        return Err(GraphError::Format(format!("unsupported version {:?}", fields.get(1))));
    }
    let n_users = header_usize(&fields, "users")?;
    let n_items = header_usize(&fields, "items")?;
    let levels_used: BTreeSet<usize> = header_field(&fields, "levels_used")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| GraphError::Format(format!("bad level `{s}`"))))
        .collect::<Result<_>>()?;
    let mut g = HeteroGraph {
        n_users,
        n_items,
        levels_used,
        user_items: vec![Vec::new(); n_users + 1],
        item_users: vec![Vec::new(); n_items + 1],
        user_factors: empty_adjacency(n_users, header_usize(&fields, "user_levels")?, header_usize(&fields, "user_k")?),
        item_factors: empty_adjacency(n_items, header_usize(&fields, "item_levels")?, header_usize(&fields, "item_k")?),
    };
    match lines.next().transpose()? {
        Some(l) if l == "kind\tsrc\tdst" => {}
        _ => return Err(GraphError::Format("missing column header".into())),
    }
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [kind, src, dst] = cols.as_slice() else {
            return Err(GraphError::Format(format!("expected 3 columns: `{line}`")));
        };
        let (src, dst): (NodeRef, NodeRef) = (src.parse()?, dst.parse()?);
        match (*kind, src, dst) {
            ("ui", NodeRef::User(u), NodeRef::Item(i)) => {
                if u == 0 || i == 0 || u as usize > n_users || i as usize > n_items {
                    return Err(GraphError::Entity { user: u, item: i });
                }
                g.user_items[u as usize].push(i);
                g.item_users[i as usize].push(u);
            }
            ("uq", NodeRef::User(u), NodeRef::UserFactor { level, index }) => {
                add_factor(&mut g.user_factors, u, level, index, n_users)?
            }
            ("iq", NodeRef::Item(i), NodeRef::ItemFactor { level, index }) => {
                add_factor(&mut g.item_factors, i, level, index, n_items)?
            }
            _ => return Err(GraphError::Format(format!("edge kind does not match endpoints: `{line}`"))),
        }
    }
    for list in g
        .user_items
        .iter_mut()
        .chain(g.item_users.iter_mut())
        .chain(g.user_factors.entity_factors.iter_mut())
        .chain(g.user_factors.factor_entities.iter_mut())
        .chain(g.item_factors.entity_factors.iter_mut())
        .chain(g.item_factors.factor_entities.iter_mut())
    {
        list.sort_unstable();
    }
    Ok(g)
}

pub fn import_edges(path: &Path) -> Result<HeteroGraph> {
    read_edges(File::open(path)?)
}

impl EdgeKind {
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "ui" => Some(EdgeKind::UserItem),
            "uq" => Some(EdgeKind::UserFactor),
            "iq" => Some(EdgeKind::ItemFactor),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{levels, random_world};
    use super::super::{build_graph, FactorTable};
    use super::*;

    fn dump(g: &HeteroGraph) -> String {
        let mut buf = Vec::new();
        write_edges(g, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn single_edge_and_empty_graph() {
        let uq = FactorTable::from_rows(1, 2, &[vec![1]]);
        let iq = FactorTable::from_rows(1, 2, &[vec![0]]);
        let g = HeteroGraph::from_interactions(1, 1, &[(1, 1)], &uq, &iq, &levels(&[]), true).unwrap();
        let text = dump(&g);
        let body: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(body, vec!["ui\tu:1\ti:1"]);
        let g = HeteroGraph::from_interactions(1, 1, &[], &uq, &iq, &levels(&[]), true).unwrap();
        assert_eq!(dump(&g).lines().count(), 2);
    }

    #[test]
    fn round_trip_preserves_adjacency() {
        let (ds, uq, iq) = random_world(50, 20, 4);
        let g = build_graph(&ds, &uq, &iq, &levels(&[0, 1]), true).unwrap();
        let text = dump(&g);
        assert!(text.starts_with(EDGE_MAGIC));
        let back = read_edges(text.as_bytes()).unwrap();
        assert_eq!(back, g);
        assert_eq!(dump(&back), text);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(read_edges(&b"garbage\n"[..]).is_err());
        assert!(read_edges(&b"#FGED\tv9\n"[..]).is_err());
        let hdr = "#FGED\tv1\tusers=1\titems=1\tuser_levels=1\tuser_k=2\titem_levels=1\titem_k=2\tlevels_used=0\nkind\tsrc\tdst\n";
        assert!(read_edges(format!("{hdr}ui\tu:1\ti:1\n").as_bytes()).is_ok());
        assert!(read_edges(format!("{hdr}ui\tu:1\tqu:0:1\n").as_bytes()).is_err());
        assert!(read_edges(format!("{hdr}uq\tu:1\tqu:0:5\n").as_bytes()).is_err());
        assert!(read_edges(format!("{hdr}ui\tu:2\ti:1\n").as_bytes()).is_err());
    }
}
