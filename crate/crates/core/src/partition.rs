//! Non-iid client partitions and per-round client sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamRng};

const MAX_ATTEMPTS: usize = 1000;

/// Splits sample indices across `clients` so that each class's share per
/// client follows a symmetric Dirichlet(`alpha`) draw. Smaller `alpha`
/// concentrates each class on fewer clients. Every client gets at least one
/// sample; draws that leave a client empty are redrawn.
pub fn dirichlet_partition(labels: &[usize], clients: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!("alpha must be positive and finite, got {alpha}")));
    }
    if labels.len() < clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {clients} clients; use a larger dataset",
            labels.len()
        )));
    }
    if clients == 1 {
        return Ok(vec![(0..labels.len()).collect()]);
    }

    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    let mut rng = stream(seed, Purpose::Partition);

    for _ in 0..MAX_ATTEMPTS {
        let mut shards = vec![Vec::new(); clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let proportions = dirichlet(&gamma, clients, &mut rng);
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let n = shuffled.len() as f64;
            let mut start = 0usize;
            let mut cumulative = 0.0;
            for (client, p) in proportions.iter().enumerate() {
                cumulative += p;
                let end = if client + 1 == clients {
                    shuffled.len()
                } else {
                    ((cumulative * n).round() as usize).clamp(start, shuffled.len())
                };
                shards[client].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for shard in &mut shards {
                shard.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::Partition(format!(
        "could not give every one of {clients} clients a sample after {MAX_ATTEMPTS} draws; \
         use a larger dataset or a larger alpha"
    )))
}

fn dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut StreamRng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// `ceil(fraction * clients)` distinct client ids, uniformly without
/// replacement, sorted ascending.
pub fn sample_clients(clients: usize, fraction: f64, round: u64, seed: u64) -> Vec<usize> {
    let wanted = ((fraction * clients as f64).ceil() as usize).clamp(1, clients.max(1));
    if wanted >= clients {
        return (0..clients).collect();
    }
    let mut rng = stream(seed, Purpose::Sampling { round });
    let mut ids = rand::seq::index::sample(&mut rng, clients, wanted).into_vec();
    ids.sort_unstable();
    ids
}

/// Mean total-variation distance between each shard's label distribution
/// and the pooled label distribution. 0 for perfectly iid shards.
pub fn label_skew(labels: &[usize], shards: &[Vec<usize>]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut global = vec![0.0; classes];
    for &y in labels {
        global[y] += 1.0;
    }
    let total = labels.len() as f64;
    global.iter_mut().for_each(|g| *g /= total);
    let mut sum = 0.0;
    for shard in shards {
        let mut local = vec![0.0; classes];
        for &i in shard {
            local[labels[i]] += 1.0;
        }
        let n = shard.len() as f64;
        sum += 0.5
            * local
                .iter()
                .zip(&global)
                .map(|(l, g)| (l / n - g).abs())
                .sum::<f64>();
    }
    sum / shards.len() as f64
}

/// Path of client `n`'s shard file inside `dir`.
pub fn shard_path(dir: &Path, client: usize) -> PathBuf {
    dir.join(format!("client_{client:04}.txt"))
}

/// Writes one file per client holding its sample indices, one per line.
pub fn write_shards(dir: &Path, shards: &[Vec<usize>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (n, shard) in shards.iter().enumerate() {
        let mut text = String::with_capacity(shard.len() * 6);
        for i in shard {
            text.push_str(&i.to_string());
            text.push('\n');
        }
        fs::write(shard_path(dir, n), text)?;
    }
    Ok(())
}

/// Reads shard files written by [`write_shards`] and checks they are
/// disjoint, in range, and non-empty.
pub fn read_shards(dir: &Path, clients: usize, samples: usize) -> Result<Vec<Vec<usize>>> {
    let mut seen = vec![false; samples];
    let mut shards = Vec::with_capacity(clients);
    for n in 0..clients {
        let path = shard_path(dir, n);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Partition(format!("{}: {e}", path.display())))?;
        let mut shard = Vec::new();
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let i: usize = line.trim().parse().map_err(|_| {
                Error::Partition(format!("{}:{}: not an index: {line:?}", path.display(), line_no + 1))
            })?;
            if i >= samples || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Partition(format!(
                    "{}:{}: index {i} is out of range or already assigned",
                    path.display(),
                    line_no + 1
                )));
            }
            shard.push(i);
        }
        if shard.is_empty() {
            return Err(Error::Partition(format!("{} is empty", path.display())));
        }
        shards.push(shard);
    }
    Ok(shards)
}
