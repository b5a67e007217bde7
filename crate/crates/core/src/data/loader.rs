//! Tab-separated dataset ingestion.
//!
//! Inputs follow the common benchmark layout: `rel_triples_1` and
//! `rel_triples_2` hold `head<TAB>rel<TAB>tail` lines, `ent_links` holds
//! `e1<TAB>e2` alignment lines, and optional `train_links` / `valid_links` /
//! `test_links` carry a pre-made split. Identifiers are opaque strings; dense
//! ids are assigned in first-occurrence order and the dictionaries are kept
//! so rankings translate back to source identifiers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::kg::{AlignmentTask, KnowledgeGraph, SeedAlignment};

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub rel_triples_1: PathBuf,
    pub rel_triples_2: PathBuf,
    pub ent_links: PathBuf,
    pub train_links: Option<PathBuf>,
    pub valid_links: Option<PathBuf>,
    pub test_links: Option<PathBuf>,
    /// Drives the 20/10/70 split when no pre-split files are given.
    pub rng_seed: u64,
}

impl DatasetManifest {
    /// Conventional file names under one directory; fold files are picked up
    /// when all three are present.
    pub fn from_dir(dir: &Path, rng_seed: u64) -> Self {
        let fold = |name: &str| {
            let p = dir.join(name);
            p.is_file().then_some(p)
        };
        DatasetManifest {
            rel_triples_1: dir.join("rel_triples_1"),
            rel_triples_2: dir.join("rel_triples_2"),
            ent_links: dir.join("ent_links"),
            train_links: fold("train_links"),
            valid_links: fold("valid_links"),
            test_links: fold("test_links"),
            rng_seed,
        }
    }
}

/// Dense-id to source-identifier tables, one per side and symbol kind.
#[derive(Clone, Debug, Default)]
pub struct IdDictionaries {
    pub entities_1: Vec<String>,
    pub entities_2: Vec<String>,
    pub relations_1: Vec<String>,
    pub relations_2: Vec<String>,
}

impl IdDictionaries {
    /// Persists the four tables as `<name>\t<id>` files next to other run
    /// outputs.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (file, names) in [
            ("ent_ids_1", &self.entities_1),
            ("ent_ids_2", &self.entities_2),
            ("rel_ids_1", &self.relations_1),
            ("rel_ids_2", &self.relations_2),
        ] {
            let mut out = String::new();
            for (id, name) in names.iter().enumerate() {
                writeln!(out, "{id}\t{name}").expect("string write");
            }
            fs::write(dir.join(file), out)?;
        }
        Ok(())
    }
}

pub struct LoadedTask {
    pub task: AlignmentTask,
    pub dicts: IdDictionaries,
}

#[derive(Default)]
struct Interner {
    map: HashMap<String, u32>,
    names: Vec<String>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.map.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.map.insert(s.to_string(), id);
        self.names.push(s.to_string());
        id
    }

}

fn malformed(path: &Path, line: usize, detail: String) -> Error {
    Error::MalformedLine {
        path: path.display().to_string(),
        line,
        detail,
    }
}

fn split_fields<'a, const N: usize>(
    path: &Path,
    line_no: usize,
    line: &'a str,
) -> Result<[&'a str; N]> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != N {
        return Err(malformed(
            path,
            line_no,
            format!("expected {N} tab-separated fields, found {}", fields.len()),
        ));
    }
    Ok(fields.try_into().expect("length checked"))
}

fn read_triples(
    path: &Path,
    ents: &mut Interner,
    rels: &mut Interner,
) -> Result<Vec<(u32, u32, u32)>> {
    let text = fs::read_to_string(path)?;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let [h, r, t] = split_fields(path, i + 1, line)?;
        triples.push((ents.intern(h), rels.intern(r), ents.intern(t)));
    }
    if triples.is_empty() {
        return Err(malformed(path, 1, "no triples in file".into()));
    }
    Ok(triples)
}

/// Link entities missing from the triples files are interned as isolated
/// nodes; rejecting them would make dumped tasks with zero-degree aligned
/// entities unloadable.
fn read_links(path: &Path, e1: &mut Interner, e2: &mut Interner) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path)?;
    let mut links = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let [a, b] = split_fields(path, i + 1, line)?;
        links.push((e1.intern(a), e2.intern(b)));
    }
    Ok(links)
}

pub fn load_task(manifest: &DatasetManifest) -> Result<LoadedTask> {
    let mut ents_1 = Interner::default();
    let mut rels_1 = Interner::default();
    let mut ents_2 = Interner::default();
    let mut rels_2 = Interner::default();
    let t1 = read_triples(&manifest.rel_triples_1, &mut ents_1, &mut rels_1)?;
    let t2 = read_triples(&manifest.rel_triples_2, &mut ents_2, &mut rels_2)?;

    let folds = [
        manifest.train_links.as_ref(),
        manifest.valid_links.as_ref(),
        manifest.test_links.as_ref(),
    ];
    let present = folds.iter().filter(|p| p.is_some()).count();
    let (mut train, mut valid, mut test) = match present {
        3 => (
            read_links(folds[0].unwrap(), &mut ents_1, &mut ents_2)?,
            read_links(folds[1].unwrap(), &mut ents_1, &mut ents_2)?,
            read_links(folds[2].unwrap(), &mut ents_1, &mut ents_2)?,
        ),
        0 => {
            let mut links = read_links(&manifest.ent_links, &mut ents_1, &mut ents_2)?;
            if links.is_empty() {
                return Err(malformed(&manifest.ent_links, 1, "no alignment links".into()));
            }
            let mut rng = StdRng::seed_from_u64(manifest.rng_seed);
            links.shuffle(&mut rng);
            let n = links.len();
            let n_train = ((0.2 * n as f64).round() as usize).clamp(1, n);
            let n_valid = ((0.1 * n as f64).round() as usize).min(n - n_train);
            let test = links.split_off(n_train + n_valid);
            let valid = links.split_off(n_train);
            (links, valid, test)
        }
        _ => {
            return Err(Error::InvalidConfig(
                "pre-split link files must be given all together or not at all".into(),
            ))
        }
    };
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();

    let g1 = KnowledgeGraph::build(ents_1.names.len(), rels_1.names.len(), &t1)?;
    let g2 = KnowledgeGraph::build(ents_2.names.len(), rels_2.names.len(), &t2)?;
    let task = AlignmentTask::new(
        g1,
        g2,
        SeedAlignment::new(train),
        SeedAlignment::new(valid),
        SeedAlignment::new(test),
    )?;
    Ok(LoadedTask {
        task,
        dicts: IdDictionaries {
            entities_1: ents_1.names,
            entities_2: ents_2.names,
            relations_1: rels_1.names,
            relations_2: rels_2.names,
        },
    })
}

/// Dumps a task as loadable files (triples, full link list, fold files) with
/// generated identifiers: side 1 uses `a<id>`/`p<id>`, side 2 `b<id>`/`q<id>`.
pub fn write_task_dir(task: &AlignmentTask, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dump_triples = |g: &KnowledgeGraph, ent: char, rel: char| {
        let mut out = String::new();
        let originals = g.num_original_relations() as u32;
        for t in g.triples().iter().filter(|t| t.rel < originals) {
            writeln!(out, "{ent}{}\t{rel}{}\t{ent}{}", t.head, t.rel, t.tail).expect("string write");
        }
        out
    };
    fs::write(dir.join("rel_triples_1"), dump_triples(&task.g1, 'a', 'p'))?;
    fs::write(dir.join("rel_triples_2"), dump_triples(&task.g2, 'b', 'q'))?;

    let dump_links = |pairs: &[(u32, u32)]| {
        let mut out = String::new();
        for &(x, y) in pairs {
            writeln!(out, "a{x}\tb{y}").expect("string write");
        }
        out
    };
    let mut all: Vec<(u32, u32)> = task
        .train_seeds
        .pairs
        .iter()
        .chain(&task.valid_pairs.pairs)
        .chain(&task.test_pairs.pairs)
        .copied()
        .collect();
    all.sort_unstable();
    fs::write(dir.join("ent_links"), dump_links(&all))?;
    fs::write(dir.join("train_links"), dump_links(&task.train_seeds.pairs))?;
    fs::write(dir.join("valid_links"), dump_links(&task.valid_pairs.pairs))?;
    fs::write(dir.join("test_links"), dump_links(&task.test_pairs.pairs))?;
    Ok(())
}
