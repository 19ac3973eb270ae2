use log::warn;

use crate::data::{ClientData, GroupTag, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{purpose, RngStream};

/// Classes owned by one subpopulation and how many clients share them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub classes: Vec<usize>,
    pub clients: usize,
}

/// Majority and minority groups for a named dataset.
pub fn multimodal_preset(dataset: &str) -> Result<(GroupSpec, GroupSpec)> {
    let g = |classes: &[usize], clients| GroupSpec {
        classes: classes.to_vec(),
        clients,
    };
    match dataset {
        "mnist" => Ok((g(&[1, 3, 5, 7, 9], 100), g(&[0, 2, 4, 6, 8], 20))),
        // T-shirt/top and shirt plus the three footwear classes form the minority.
        "fmnist" => Ok((g(&[1, 2, 3, 4, 8], 90), g(&[0, 5, 6, 7, 9], 20))),
        "cifar10" => Ok((g(&[2, 3, 4, 5, 6, 7], 90), g(&[0, 1, 8, 9], 20))),
        other => Err(Error::config(format!(
            "no multimodal preset for `{other}` (expected mnist, fmnist or cifar10)"
        ))),
    }
}

/// A client's pool split into local train and test sets.
#[derive(Clone, Debug)]
pub struct LocalSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub warning: Option<String>,
}

/// Shuffled split, stratified by class when every class has at least two examples.
pub fn local_split(pool: &LabeledDataset, fraction: f64, seed: u64) -> Result<LocalSplit> {
    split_with(pool, fraction, &mut RngStream::new(seed, 0, 0, purpose::PARTITION))
}

fn split_with(pool: &LabeledDataset, fraction: f64, rng: &mut RngStream) -> Result<LocalSplit> {
    if pool.is_empty() {
        return Err(Error::config("cannot split an empty pool"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("test fraction {fraction} outside (0, 1)")));
    }
    let groups: Vec<Vec<usize>> = pool.indices_by_class().into_iter().filter(|g| !g.is_empty()).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut warning = None;
    if groups.iter().all(|g| g.len() >= 2) {
        for mut g in groups {
            rng.shuffle(&mut g);
            let k = ((g.len() as f64 * fraction).round() as usize).clamp(1, g.len() - 1);
            test.extend_from_slice(&g[..k]);
            train.extend_from_slice(&g[k..]);
        }
    } else {
        let msg = "a class has fewer than 2 examples; split is not stratified".to_string();
        warn!("{msg}");
        warning = Some(msg);
        let mut all: Vec<usize> = (0..pool.len()).collect();
        rng.shuffle(&mut all);
        let k = (pool.len() as f64 * fraction).round() as usize;
        let k = if pool.len() >= 2 {
            k.clamp(1, pool.len() - 1)
        } else {
            k.min(pool.len())
        };
        test.extend_from_slice(&all[..k]);
        train.extend_from_slice(&all[k..]);
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    Ok(LocalSplit {
        train: pool.subset(&train),
        test: pool.subset(&test),
        warning,
    })
}

/// One single-class shard: example indices into the source dataset.
type Shard = Vec<usize>;

/// Cuts `per_class` shards of `size` examples from each class after shuffling within the class.
fn cut_shards(
    by_class: &[Vec<usize>],
    classes: &[usize],
    per_class: usize,
    size: usize,
    rng: &mut RngStream,
) -> Vec<Shard> {
    let mut shards = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let mut idx = by_class[c].clone();
        rng.shuffle(&mut idx);
        shards.extend(idx.chunks_exact(size).take(per_class).map(<[usize]>::to_vec));
    }
    shards
}

fn shards_per_class(clients: usize, z: usize, classes: usize) -> Result<usize> {
    if clients == 0 || z == 0 || classes == 0 {
        return Err(Error::config(
            "clients, classes per client and class count must be >= 1",
        ));
    }
    if (clients * z) % classes != 0 {
        return Err(Error::config(format!(
            "{clients} clients x {z} shards cannot be split evenly over {classes} classes"
        )));
    }
    Ok(clients * z / classes)
}

/// Deals shards `z` at a time to consecutive client ids starting at `first_id`.
#[allow(clippy::too_many_arguments)]
fn deal(
    data: &LabeledDataset,
    mut shards: Vec<Shard>,
    z: usize,
    first_id: usize,
    group: GroupTag,
    test_fraction: f64,
    seed: u64,
    rng: &mut RngStream,
) -> Result<Vec<ClientData>> {
    rng.shuffle(&mut shards);
    shards
        .chunks_exact(z)
        .enumerate()
        .map(|(k, hand)| {
            let id = first_id + k;
            let mut pool: Vec<usize> = hand.concat();
            let mut client_rng = RngStream::new(seed, 1, id as u64, purpose::PARTITION);
            client_rng.shuffle(&mut pool);
            let split = split_with(&data.subset(&pool), test_fraction, &mut client_rng)?;
            Ok(ClientData {
                id,
                group,
                train: split.train,
                test: split.test,
                warnings: split.warning.into_iter().collect(),
            })
        })
        .collect()
}

/// Splits every class into `N·Z/K` equal single-class shards and deals `Z` shards per client.
///
/// The shard size is the largest that every class can supply; leftover examples are unused.
pub fn partition_unimodal(
    data: &LabeledDataset,
    clients: usize,
    z: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientData>> {
    let classes = data.present_classes();
    let per_class = shards_per_class(clients, z, classes.len())?;
    let by_class = data.indices_by_class();
    let size = classes
        .iter()
        .map(|&c| by_class[c].len() / per_class)
        .min()
        .unwrap_or(0);
    if size == 0 {
        return Err(Error::config(format!(
            "too few examples for {per_class} shards per class"
        )));
    }
    let mut rng = RngStream::new(seed, 0, 0, purpose::PARTITION);
    let shards = cut_shards(&by_class, &classes, per_class, size, &mut rng);
    deal(data, shards, z, 0, GroupTag::None, test_fraction, seed, &mut rng)
}

/// Partitions two disjoint class groups over separate client subpopulations.
///
/// Shards have one size across both groups, set by the scarcest class; surplus
/// examples are discarded. Majority clients take ids `0..N₁`, minority clients `N₁..N₁+N₂`.
pub fn partition_multimodal(
    data: &LabeledDataset,
    majority: &GroupSpec,
    minority: &GroupSpec,
    z: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if majority.classes.iter().any(|c| minority.classes.contains(c)) {
        return Err(Error::config("majority and minority class groups overlap"));
    }
    let by_class = data.indices_by_class();
    let mut size = usize::MAX;
    let mut per_group = Vec::new();
    for g in [majority, minority] {
        if let Some(&c) = g.classes.iter().find(|&&c| c >= data.classes()) {
            return Err(Error::config(format!("group class {c} outside the dataset")));
        }
        let per_class = shards_per_class(g.clients, z, g.classes.len())?;
        for &c in &g.classes {
            size = size.min(by_class[c].len() / per_class);
        }
        per_group.push(per_class);
    }
    if size == 0 {
        return Err(Error::config("too few examples for the requested shard counts"));
    }
    let mut rng = RngStream::new(seed, 0, 0, purpose::PARTITION);
    let major_shards = cut_shards(&by_class, &majority.classes, per_group[0], size, &mut rng);
    let minor_shards = cut_shards(&by_class, &minority.classes, per_group[1], size, &mut rng);
    let mut out = deal(
        data,
        major_shards,
        z,
        0,
        GroupTag::Majority,
        test_fraction,
        seed,
        &mut rng,
    )?;
    out.extend(deal(
        data,
        minor_shards,
        z,
        majority.clients,
        GroupTag::Minority,
        test_fraction,
        seed,
        &mut rng,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> LabeledDataset {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let features = (0..n).map(|i| i as f32).collect();
        LabeledDataset::new(features, 1, labels, classes).unwrap()
    }

    fn distinct(c: &ClientData) -> usize {
        let mut l: Vec<usize> = c.train.labels().iter().chain(c.test.labels()).copied().collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    #[test]
    fn ten_clients_two_shards() {
        let clients = partition_unimodal(&toy(10, 100), 10, 2, 0.2, 1).unwrap();
        assert_eq!(clients.len(), 10);
        for c in &clients {
            assert_eq!(c.train.len() + c.test.len(), 100);
            assert!(distinct(c) <= 2);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let clients = partition_unimodal(&toy(4, 25), 1, 4, 0.2, 1).unwrap();
        assert_eq!(clients[0].train.len() + clients[0].test.len(), 100);
    }

    #[test]
    fn one_class_per_client() {
        for c in partition_unimodal(&toy(5, 40), 10, 1, 0.2, 3).unwrap() {
            assert_eq!(distinct(&c), 1);
        }
    }

    #[test]
    fn infeasible_arithmetic() {
        assert!(matches!(
            partition_unimodal(&toy(10, 100), 7, 2, 0.2, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            partition_unimodal(&toy(2, 3), 10, 2, 0.2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_examples() {
        let pool = toy(2, 50);
        let s = local_split(&pool, 0.2, 4).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        assert_eq!(s.test.class_counts(), vec![10, 10]);
        assert!(s.warning.is_none());
        let mut all: Vec<usize> = s.train.origin().iter().chain(s.test.origin()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_falls_back_when_class_is_singleton() {
        let pool = LabeledDataset::new(vec![0.0; 5], 1, vec![0, 0, 0, 0, 1], 2).unwrap();
        let s = local_split(&pool, 0.2, 0).unwrap();
        assert!(s.warning.is_some());
        assert_eq!(s.train.len() + s.test.len(), 5);
        assert!(local_split(&pool, 1.0, 0).is_err());
    }

    #[test]
    fn mnist_style_multimodal() {
        let data = toy(10, 200);
        let (major, minor) = multimodal_preset("mnist").unwrap();
        let clients = partition_multimodal(&data, &major, &minor, 2, 0.2, 5).unwrap();
        assert_eq!(clients.len(), 120);
        let size = 200 / 40;
        for c in &clients {
            assert_eq!(c.train.len() + c.test.len(), 2 * size);
            let groups = if c.id < 100 { &major.classes } else { &minor.classes };
            assert_eq!(
                c.group,
                if c.id < 100 {
                    GroupTag::Majority
                } else {
                    GroupTag::Minority
                }
            );
            assert!(c
                .train
                .labels()
                .iter()
                .chain(c.test.labels())
                .all(|l| groups.contains(l)));
        }
        let retained_even: usize = clients[100..].iter().map(|c| c.train.len() + c.test.len()).sum();
        assert_eq!(retained_even, 20 * 2 * size);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let g = GroupSpec {
            classes: vec![0, 1],
            clients: 2,
        };
        assert!(partition_multimodal(&toy(4, 10), &g, &g, 1, 0.2, 0).is_err());
        assert!(multimodal_preset("svhn").is_err());
    }
}
