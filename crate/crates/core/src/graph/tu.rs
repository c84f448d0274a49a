use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{Dataset, Edge, Graph};
use crate::error::{Error, Result};

struct IntFile {
    name: String,
    values: Vec<(usize, Vec<i64>)>,
}

fn read_ints(dir: &Path, file: &str, required: bool) -> Result<Option<IntFile>> {
    let path = dir.join(file);
    if !path.exists() {
        if required {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing mandatory TU file")));
        }
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| tok.trim().parse::<i64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                file: file.to_string(),
                line: i + 1,
                message: format!("{e}: {line:?}"),
            })?;
        values.push((i + 1, row));
    }
    Ok(Some(IntFile {
        name: file.to_string(),
        values,
    }))
}

fn scalar_column(f: &IntFile) -> Result<Vec<i64>> {
    f.values
        .iter()
        .map(|(line, row)| match row.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Format {
                file: f.name.clone(),
                line: *line,
                message: format!("expected one integer, got {}", row.len()),
            }),
        })
        .collect()
}

/// Maps raw labels to type indices: kept as-is when non-negative, otherwise
/// remapped onto sorted-unique positions.
fn type_mapping(raw: &[i64]) -> (BTreeMap<i64, usize>, usize) {
    let distinct: BTreeSet<i64> = raw.iter().copied().collect();
    if distinct.iter().all(|&v| v >= 0) {
        let max = distinct.iter().max().copied().unwrap_or(0) as usize;
        (distinct.iter().map(|&v| (v, v as usize)).collect(), max + 1)
    } else {
        let n = distinct.len();
        (distinct.into_iter().enumerate().map(|(i, v)| (v, i)).collect(), n)
    }
}

/// Reads `<name>_A.txt`, `<name>_graph_indicator.txt`, `<name>_graph_labels.txt`
/// and, when present, `<name>_node_labels.txt` / `<name>_edge_labels.txt`.
pub fn parse_tu_dataset(dir: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    let a = read_ints(dir, &format!("{name}_A.txt"), true)?.unwrap();
    let indicator_file = read_ints(dir, &format!("{name}_graph_indicator.txt"), true)?.unwrap();
    let labels_file = read_ints(dir, &format!("{name}_graph_labels.txt"), true)?.unwrap();
    let node_labels_file = read_ints(dir, &format!("{name}_node_labels.txt"), false)?;
    let edge_labels_file = read_ints(dir, &format!("{name}_edge_labels.txt"), false)?;

    let indicator = scalar_column(&indicator_file)?;
    let raw_labels = scalar_column(&labels_file)?;
    let num_graphs = raw_labels.len();
    let num_nodes = indicator.len();

    // Graph ids are 1-based and nodes of one graph are contiguous.
    let mut graph_of = Vec::with_capacity(num_nodes);
    let mut offsets = vec![usize::MAX; num_graphs];
    let mut sizes = vec![0usize; num_graphs];
    for (v, (&gid, (line, _))) in indicator.iter().zip(&indicator_file.values).enumerate() {
        if gid < 1 || gid as usize > num_graphs {
            return Err(Error::Format {
                file: indicator_file.name.clone(),
                line: *line,
                message: format!("graph id {gid} outside 1..={num_graphs}"),
            });
        }
        let g = gid as usize - 1;
        if offsets[g] == usize::MAX {
            offsets[g] = v;
        }
        sizes[g] += 1;
        graph_of.push(g);
    }
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Format {
            file: indicator_file.name.clone(),
            line: 0,
            message: format!("graph {} has no nodes", g + 1),
        });
    }

    let (node_types_all, num_node_types) = match &node_labels_file {
        Some(f) => {
            let raw = scalar_column(f)?;
            if raw.len() != num_nodes {
                return Err(Error::Format {
                    file: f.name.clone(),
                    line: raw.len(),
                    message: format!("{} node labels for {num_nodes} nodes", raw.len()),
                });
            }
            let (map, count) = type_mapping(&raw);
            (raw.iter().map(|v| map[v]).collect::<Vec<_>>(), count)
        }
        None => (vec![0; num_nodes], 1),
    };

    let edge_raw = match &edge_labels_file {
        Some(f) => {
            let raw = scalar_column(f)?;
            if raw.len() != a.values.len() {
                return Err(Error::Format {
                    file: f.name.clone(),
                    line: raw.len(),
                    message: format!("{} edge labels for {} adjacency rows", raw.len(), a.values.len()),
                });
            }
            Some(raw)
        }
        None => None,
    };
    let (edge_map, num_edge_types) = match &edge_raw {
        Some(raw) => type_mapping(raw),
        None => (BTreeMap::from([(0, 0)]), 1),
    };

    let mut edge_sets: Vec<BTreeMap<(usize, usize), usize>> = vec![BTreeMap::new(); num_graphs];
    for (row_idx, (line, row)) in a.values.iter().enumerate() {
        let fmt_err = |message: String| Error::Format {
            file: a.name.clone(),
            line: *line,
            message,
        };
        let [s, d] = row.as_slice() else {
            return Err(fmt_err(format!("expected \"src, dst\", got {} values", row.len())));
        };
        for &x in [s, d] {
            if x < 1 || x as usize > num_nodes {
                return Err(fmt_err(format!("dangling node index {x} (nodes are 1..={num_nodes})")));
            }
        }
        let (s, d) = (*s as usize - 1, *d as usize - 1);
        let g = graph_of[s];
        if graph_of[d] != g {
            return Err(fmt_err(format!("edge joins graphs {} and {}", g + 1, graph_of[d] + 1)));
        }
        if s == d {
            continue;
        }
        let kind = edge_raw.as_ref().map(|raw| edge_map[&raw[row_idx]]).unwrap_or(0);
        let (ls, ld) = (s - offsets[g], d - offsets[g]);
        edge_sets[g].entry((ls.min(ld), ls.max(ld))).or_insert(kind);
    }

    let (label_map, num_classes) = {
        let distinct: BTreeSet<i64> = raw_labels.iter().copied().collect();
        let n = distinct.len();
        (distinct.into_iter().enumerate().map(|(i, v)| (v, i)).collect::<BTreeMap<_, _>>(), n)
    };

    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let types = node_types_all[offsets[g]..offsets[g] + sizes[g]].to_vec();
        let edges = edge_sets[g]
            .iter()
            .map(|(&(s, d), &kind)| Edge { src: s, dst: d, kind })
            .collect();
        graphs.push(Graph::from_types(format!("g{g}"), types, edges, label_map[&raw_labels[g]], num_node_types)?);
    }
    Dataset::new(name, graphs, num_classes, num_node_types, num_edge_types)
}

pub(super) fn render_tu(ds: &Dataset) -> Vec<(&'static str, String)> {
    use std::fmt::Write;
    let mut a = String::new();
    let mut edge_labels = String::new();
    let mut indicator = String::new();
    let mut node_labels = String::new();
    let mut graph_labels = String::new();
    let mut offset = 0;
    for (gi, g) in ds.graphs.iter().enumerate() {
        for &t in &g.node_types {
            writeln!(indicator, "{}", gi + 1).unwrap();
            writeln!(node_labels, "{t}").unwrap();
        }
        for e in &g.edges {
            let (s, d) = (offset + e.src + 1, offset + e.dst + 1);
            writeln!(a, "{s}, {d}").unwrap();
            writeln!(a, "{d}, {s}").unwrap();
            writeln!(edge_labels, "{}\n{}", e.kind, e.kind).unwrap();
        }
        writeln!(graph_labels, "{}", g.label).unwrap();
        offset += g.num_nodes();
    }
    let mut files = vec![
        ("_A.txt", a),
        ("_graph_indicator.txt", indicator),
        ("_graph_labels.txt", graph_labels),
        ("_node_labels.txt", node_labels),
    ];
    if ds.num_edge_types > 1 {
        files.push(("_edge_labels.txt", edge_labels));
    }
    files
}

/// Writes the dataset in TU layout, both directions per undirected edge.
pub fn write_tu_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (suffix, body) in render_tu(ds) {
        let path = dir.join(format!("{}{suffix}", ds.name));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Finds the dataset name from the single `*_graph_indicator.txt` in `dir`.
pub fn discover_tu_name(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|s| s.strip_suffix("_graph_indicator.txt")).map(str::to_string))
        .collect();
    names.sort();
    match names.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(Error::io(dir.join("*_graph_indicator.txt"), std::io::Error::new(std::io::ErrorKind::NotFound, "no TU dataset found"))),
        _ => Err(Error::Argument(format!("several TU datasets in {}: {names:?}", dir.display()))),
    }
}
