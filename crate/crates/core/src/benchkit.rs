//! Test-domain incremental benchmark construction.
//!
//! A dataset is cut into trainable groups `G_0..G_{S-1}` plus one holdout
//! group. Every group owns a disjoint set of ood classes and a disjoint set
//! of images; groups hold record indices into the dataset, never copies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurestore::Dataset;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupTag {
    Session(usize),
    Holdout,
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupTag::Session(i) => write!(f, "{i}"),
            GroupTag::Holdout => f.write_str("holdout"),
        }
    }
}

impl std::str::FromStr for GroupTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" => Ok(GroupTag::Holdout),
            _ => s
                .parse()
                .map(GroupTag::Session)
                .map_err(|_| Error::malformed("group tag", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub tag: GroupTag,
    /// Ascending dataset indices.
    pub id_records: Vec<usize>,
    pub ood_records: Vec<usize>,
    pub ood_classes: BTreeSet<i32>,
}

impl Group {
    fn empty(tag: GroupTag) -> Self {
        Self {
            tag,
            id_records: Vec::new(),
            ood_records: Vec::new(),
            ood_classes: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.id_records.len() + self.ood_records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All record indices, ascending.
    pub fn records(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.id_records.iter().chain(&self.ood_records).copied().collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Benchmark {
    pub groups: Vec<Group>,
    pub holdout: Group,
    pub id_classes: BTreeSet<i32>,
    pub seed: u64,
    /// `sha256:<hex>` over the manifest body.
    pub manifest_digest: String,
}

impl Benchmark {
    pub fn trainable_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, tag: GroupTag) -> Option<&Group> {
        match tag {
            GroupTag::Session(i) => self.groups.get(i),
            GroupTag::Holdout => Some(&self.holdout),
        }
    }

    /// Union of the trainable groups `0..=upto`, as (id, ood) index lists.
    pub fn cumulative(&self, upto: usize) -> Group {
        let mut acc = Group::empty(GroupTag::Session(upto));
        for g in self.groups.iter().take(upto + 1) {
            acc.id_records.extend(&g.id_records);
            acc.ood_records.extend(&g.ood_records);
            acc.ood_classes.extend(&g.ood_classes);
        }
        acc.id_records.sort_unstable();
        acc.ood_records.sort_unstable();
        acc
    }

    fn all_groups(&self) -> impl Iterator<Item = &Group> {
        self.groups.iter().chain(std::iter::once(&self.holdout))
    }

    /// Checks the disjointness invariants against `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let mut class_owner: BTreeMap<i32, GroupTag> = BTreeMap::new();
        let mut image_owner: BTreeMap<u64, GroupTag> = BTreeMap::new();
        let dataset_ood = dataset.ood_classes();
        for g in self.all_groups() {
            for c in &g.ood_classes {
                if !dataset_ood.contains(c) {
                    return Err(Error::malformed("benchmark", format!("group {} ood class {c} not in dataset", g.tag)));
                }
                if let Some(prev) = class_owner.insert(*c, g.tag) {
                    return Err(Error::malformed("benchmark", format!("ood class {c} in groups {prev} and {}", g.tag)));
                }
            }
            for (&idx, want_id) in g
                .id_records
                .iter()
                .map(|i| (i, true))
                .chain(g.ood_records.iter().map(|i| (i, false)))
            {
                let r = dataset
                    .records
                    .get(idx)
                    .ok_or_else(|| Error::malformed("benchmark", format!("record index {idx} out of range")))?;
                if r.is_id != want_id || (!want_id && !g.ood_classes.contains(&r.class_id)) {
                    return Err(Error::malformed("benchmark", format!("record {idx} misfiled in group {}", g.tag)));
                }
                if let Some(prev) = image_owner.insert(r.image_id, g.tag) {
                    if prev != g.tag {
                        return Err(Error::malformed(
                            "benchmark",
                            format!("image {} shared by groups {prev} and {}", r.image_id, g.tag),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Classes with at least `min_count` records.
pub fn filter_classes_by_frequency(dataset: &Dataset, min_count: usize) -> BTreeSet<i32> {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for r in &dataset.records {
        *counts.entry(r.class_id).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|&(_, n)| n >= min_count.max(1))
        .map(|(c, _)| c)
        .collect()
}

/// Class counts for the post-`G_0` partitions: as even as possible, larger
/// shares first.
pub fn even_shares(classes: usize, parts: usize) -> Vec<usize> {
    let base = classes / parts;
    let extra = classes % parts;
    (0..parts).map(|p| base + usize::from(p < extra)).collect()
}

/// Builds the benchmark.
///
/// `session_count` is the number of trainable groups including `G_0`.
/// After `g0_class_count` ood classes go to `G_0`, the rest are split into
/// `session_count` partitions: `G_1..G_{S-1}` and, last, the holdout.
///
/// Images are the unit of assignment. An image containing ood objects goes
/// to the group owning those classes; an image whose ood objects belong to
/// several groups is dropped. Images with only id objects are dealt
/// round-robin over all groups after a seeded shuffle.
pub fn build_benchmark(
    dataset: &Dataset,
    id_classes: &BTreeSet<i32>,
    ood_classes: &BTreeSet<i32>,
    session_count: usize,
    g0_class_count: usize,
    seed: u64,
) -> Result<Benchmark> {
    if session_count == 0 {
        return Err(Error::InvalidConfig("session count must be >= 1".into()));
    }
    if let Some(c) = id_classes.intersection(ood_classes).next() {
        return Err(Error::InvalidConfig(format!("class {c} is both id and ood")));
    }
    if g0_class_count == 0 || g0_class_count >= ood_classes.len() {
        return Err(Error::InvalidConfig(format!(
            "G_0 class count {g0_class_count} must be in 1..{}",
            ood_classes.len()
        )));
    }
    let rest = ood_classes.len() - g0_class_count;
    if rest < session_count {
        return Err(Error::Insufficient(format!(
            "{rest} ood classes cannot fill {session_count} post-G_0 partitions"
        )));
    }

    let mut shuffled: Vec<i32> = ood_classes.iter().copied().collect();
    shuffled.shuffle(&mut rng::stream(seed, 10));

    // Partition index per class: 0 = G_0, 1..S-1 = sessions, S = holdout.
    let mut class_part: BTreeMap<i32, usize> = BTreeMap::new();
    let mut groups: Vec<Group> = (0..=session_count)
        .map(|p| {
            Group::empty(if p == session_count {
                GroupTag::Holdout
            } else {
                GroupTag::Session(p)
            })
        })
        .collect();
    let mut cursor = shuffled.iter();
    for (part, share) in std::iter::once(g0_class_count)
        .chain(even_shares(rest, session_count))
        .enumerate()
    {
        for &c in cursor.by_ref().take(share) {
            class_part.insert(c, part);
            groups[part].ood_classes.insert(c);
        }
    }

    let mut images: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (idx, r) in dataset.records.iter().enumerate() {
        if id_classes.contains(&r.class_id) || ood_classes.contains(&r.class_id) {
            images.entry(r.image_id).or_default().push(idx);
        }
    }
    let mut id_only: Vec<u64> = Vec::new();
    let mut image_part: BTreeMap<u64, usize> = BTreeMap::new();
    for (&image, members) in &images {
        let parts: BTreeSet<usize> = members
            .iter()
            .filter_map(|&i| class_part.get(&dataset.records[i].class_id).copied())
            .collect();
        match parts.len() {
            0 => id_only.push(image),
            1 => {
                image_part.insert(image, *parts.first().unwrap());
            }
            _ => {}
        }
    }
    id_only.shuffle(&mut rng::stream(seed, 11));
    for (k, image) in id_only.into_iter().enumerate() {
        image_part.insert(image, k % groups.len());
    }

    for (image, part) in image_part {
        for &idx in &images[&image] {
            if id_classes.contains(&dataset.records[idx].class_id) {
                groups[part].id_records.push(idx);
            } else {
                groups[part].ood_records.push(idx);
            }
        }
    }
    for g in &mut groups {
        g.id_records.sort_unstable();
        g.ood_records.sort_unstable();
        if g.id_records.is_empty() || g.ood_records.is_empty() {
            return Err(Error::Insufficient(format!(
                "group {} has {} id and {} ood records",
                g.tag,
                g.id_records.len(),
                g.ood_records.len()
            )));
        }
    }

    let holdout = groups.pop().expect("holdout partition");
    let mut bench = Benchmark {
        groups,
        holdout,
        id_classes: id_classes.clone(),
        seed,
        manifest_digest: String::new(),
    };
    bench.manifest_digest = digest(&manifest_body(&bench));
    Ok(bench)
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, x) in items.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

fn manifest_body(b: &Benchmark) -> String {
    let mut s = String::new();
    writeln!(s, "# ond benchmark manifest").unwrap();
    writeln!(s, "version 1").unwrap();
    writeln!(s, "seed {}", b.seed).unwrap();
    writeln!(s, "id_classes {}", join(&b.id_classes)).unwrap();
    writeln!(s, "groups {}", b.groups.len() + 1).unwrap();
    for g in b.all_groups() {
        writeln!(
            s,
            "group {} n_id {} n_ood {} ood_classes {}",
            g.tag,
            g.id_records.len(),
            g.ood_records.len(),
            join(&g.ood_classes)
        )
        .unwrap();
        writeln!(s, "id_records {}", join(&g.id_records)).unwrap();
        writeln!(s, "ood_records {}", join(&g.ood_records)).unwrap();
    }
    s
}

fn digest(body: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(body.as_bytes())))
}

/// Human-readable, stable listing of the benchmark; also its persisted form.
pub fn benchmark_manifest(b: &Benchmark) -> String {
    let mut s = manifest_body(b);
    writeln!(s, "digest {}", b.manifest_digest).unwrap();
    s
}

/// Parses a manifest written by [`benchmark_manifest`], checking its digest.
pub fn parse_manifest(text: &str) -> Result<Benchmark> {
    let bad = |detail: String| Error::malformed("manifest", detail);
    let (body, digest_line) = match text.trim_end().rsplit_once('\n') {
        Some((body, last)) => (format!("{body}\n"), last),
        None => return Err(bad("missing digest line".into())),
    };
    let stored = digest_line
        .strip_prefix("digest ")
        .ok_or_else(|| bad("missing digest line".into()))?;
    if digest(&body) != stored {
        return Err(bad("digest does not match contents".into()));
    }

    fn nums<T: std::str::FromStr>(rest: &str) -> Result<Vec<T>> {
        rest.split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::malformed("manifest", format!("bad number {t:?}"))))
            .collect()
    }

    let mut seed = None;
    let mut id_classes = BTreeSet::new();
    let mut groups: Vec<Group> = Vec::new();
    for line in body.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "version" if rest == "1" => {}
            "version" => return Err(bad(format!("unsupported version {rest}"))),
            "seed" => seed = Some(rest.parse().map_err(|_| bad(format!("bad seed {rest:?}")))?),
            "id_classes" => id_classes = nums::<i32>(rest)?.into_iter().collect(),
            "groups" => {}
            "group" => {
                let mut toks = rest.split_whitespace();
                let tag: GroupTag = toks.next().ok_or_else(|| bad("group without tag".into()))?.parse()?;
                let mut g = Group::empty(tag);
                let classes = rest
                    .split_once("ood_classes")
                    .map(|(_, c)| c)
                    .ok_or_else(|| bad(format!("group {tag} has no ood_classes")))?;
                g.ood_classes = nums::<i32>(classes)?.into_iter().collect();
                groups.push(g);
            }
            "id_records" | "ood_records" => {
                let g = groups.last_mut().ok_or_else(|| bad("records before any group".into()))?;
                let list = nums::<usize>(rest)?;
                if key == "id_records" {
                    g.id_records = list;
                } else {
                    g.ood_records = list;
                }
            }
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let holdout = match groups.pop() {
        Some(g) if g.tag == GroupTag::Holdout => g,
        _ => return Err(bad("last group must be the holdout".into())),
    };
    for (i, g) in groups.iter().enumerate() {
        if g.tag != GroupTag::Session(i) {
            return Err(bad(format!("group {} out of order", g.tag)));
        }
    }
    Ok(Benchmark {
        groups,
        holdout,
        id_classes,
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        manifest_digest: stored.to_string(),
    })
}
