use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Fraction of each client's samples held out for its test split.
pub const TEST_FRACTION: f64 = 0.2;

const DIRICHLET_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Pathological {
        num_clients: usize,
        classes_per_client: usize,
    },
    Dirichlet {
        num_clients: usize,
        alpha: f64,
    },
    Pachinko {
        num_clients: usize,
        alpha: f64,
        beta: f64,
    },
    /// Uniform random split; heterogeneity comes from per-client input
    /// noise applied at load time.
    NoiseLadder {
        num_clients: usize,
        sigma_max: f64,
    },
}

impl PartitionScheme {
    pub fn num_clients(&self) -> usize {
        match *self {
            PartitionScheme::Pathological { num_clients, .. }
            | PartitionScheme::Dirichlet { num_clients, .. }
            | PartitionScheme::Pachinko { num_clients, .. }
            | PartitionScheme::NoiseLadder { num_clients, .. } => num_clients,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PartitionScheme::Pathological { .. } => "pathological",
            PartitionScheme::Dirichlet { .. } => "dirichlet",
            PartitionScheme::Pachinko { .. } => "pachinko",
            PartitionScheme::NoiseLadder { .. } => "noise_ladder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub num_samples: usize,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl PartitionManifest {
    pub fn num_clients(&self) -> usize {
        self.train.len()
    }

    /// Training-set sizes `m_i`.
    pub fn train_sizes(&self) -> Vec<usize> {
        self.train.iter().map(Vec::len).collect()
    }

    /// Train indices are pairwise disjoint across clients, test indices
    /// likewise, and no sample is both a train and a test sample.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (c, idx) in self.train.iter().chain(&self.test).enumerate() {
            for &i in idx {
                if i >= self.num_samples {
                    return Err(Error::Partition(format!("index {i} out of range in list {c}")));
                }
                if !seen.insert(i) {
                    return Err(Error::Partition(format!("sample {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Every sample appears somewhere.
    pub fn check_exhaustive(&self) -> Result<()> {
        let assigned: usize = self.train.iter().chain(&self.test).map(Vec::len).sum();
        if assigned != self.num_samples {
            return Err(Error::Partition(format!(
                "{assigned} of {} samples assigned",
                self.num_samples
            )));
        }
        Ok(())
    }

    /// Per client and class, the test count is within one sample of the
    /// class's proportional share of the client's test split.
    pub fn check_matched(&self, ds: &LabeledDataset) -> Result<()> {
        for (c, (tr, te)) in self.train.iter().zip(&self.test).enumerate() {
            let n = (tr.len() + te.len()) as f64;
            let t = te.len() as f64;
            let mut counts: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for &i in tr {
                counts.entry(ds.labels[i]).or_default().0 += 1.0;
            }
            for &i in te {
                counts.entry(ds.labels[i]).or_default().1 += 1.0;
            }
            for (label, (a, b)) in counts {
                let expected = (a + b) * t / n;
                if (b - expected).abs() > 1.0 + 1e-9 {
                    return Err(Error::Partition(format!(
                        "client {c} class {label}: {b} test samples, expected {expected:.2}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full structural validation against the dataset the manifest was
    /// built from.
    pub fn validate(&self, ds: &LabeledDataset) -> Result<()> {
        if self.dataset_fingerprint != ds.fingerprint() {
            return Err(Error::Partition("dataset fingerprint mismatch".into()));
        }
        if self.num_samples != ds.len() {
            return Err(Error::Partition("sample count mismatch".into()));
        }
        let n = self.scheme.num_clients();
        if self.train.len() != n || self.test.len() != n {
            return Err(Error::Partition(format!("expected {n} clients")));
        }
        self.check_disjoint()?;
        match self.scheme {
            PartitionScheme::Pachinko { num_clients, .. } => {
                let quota = ds.len() / num_clients;
                for (c, (tr, te)) in self.train.iter().zip(&self.test).enumerate() {
                    if tr.len() + te.len() != quota {
                        return Err(Error::Partition(format!(
                            "client {c} holds {} samples, quota {quota}",
                            tr.len() + te.len()
                        )));
                    }
                }
            }
            _ => self.check_exhaustive()?,
        }
        self.check_matched(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Splits `total` into integer counts proportional to `weights`: floors
/// first, then the leftover units go to the largest fractional parts, ties
/// to the lower index. Non-positive total weight is treated as uniform.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let uniform = !(sum > 0.0) || !sum.is_finite();
    let quotas: Vec<f64> = weights
        .iter()
        .map(|&w| {
            if uniform {
                total as f64 / weights.len() as f64
            } else {
                total as f64 * w / sum
            }
        })
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified per-client split: `max(1, round(0.2·n))` test samples spread
/// over classes by largest remainder.
fn split_client(indices: Vec<usize>, ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n = indices.len();
    let t = if n < 2 {
        0
    } else {
        ((TEST_FRACTION * n as f64).round() as usize).max(1)
    };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in indices {
        groups.entry(ds.labels[i]).or_default().push(i);
    }
    let sizes: Vec<f64> = groups.values().map(|g| g.len() as f64).collect();
    let tests = largest_remainder(&sizes, t);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (mut g, k) in groups.into_values().zip(tests) {
        g.shuffle(rng);
        test.extend_from_slice(&g[..k]);
        train.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn finish(
    scheme: PartitionScheme,
    seed: u64,
    ds: &LabeledDataset,
    clients: Vec<Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> Result<PartitionManifest> {
    let mut train = Vec::with_capacity(clients.len());
    let mut test = Vec::with_capacity(clients.len());
    for (c, idx) in clients.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Partition(format!(
                "client {c} received {} samples, need at least 2",
                idx.len()
            )));
        }
        let (tr, te) = split_client(idx, ds, rng);
        train.push(tr);
        test.push(te);
    }
    Ok(PartitionManifest {
        scheme,
        seed,
        dataset_fingerprint: ds.fingerprint(),
        num_samples: ds.len(),
        train,
        test,
    })
}

/// Splits the shuffled samples of each class into consecutive chunks of
/// the given sizes, appending chunk `j` to client `holders[j]`.
fn deal_class(
    clients: &mut [Vec<usize>],
    mut samples: Vec<usize>,
    holders: &[usize],
    counts: &[usize],
    rng: &mut ChaCha8Rng,
) {
    samples.shuffle(rng);
    let mut start = 0;
    for (&h, &k) in holders.iter().zip(counts) {
        clients[h].extend_from_slice(&samples[start..start + k]);
        start += k;
    }
}

fn check_clients(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    Ok(())
}

/// Each client receives exactly `classes_per_client` distinct classes and
/// every class has at least one holder. Class `c`'s samples are shared
/// among its holders in proportion to `a_{i,c} ~ U(0.4, 0.6)` normalized
/// over the holders.
pub fn partition_pathological(
    ds: &LabeledDataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionManifest> {
    check_clients(num_clients)?;
    let c = ds.num_classes;
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::Partition(format!(
            "classes_per_client {classes_per_client} must be in 1..={c}"
        )));
    }
    if num_clients * classes_per_client < c {
        return Err(Error::Partition(format!(
            "{num_clients} clients x {classes_per_client} classes cannot cover {c} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Coverage pass: one random permutation of the classes dealt round-robin
    // over a random client order, then each hand is topped up with random
    // classes it does not hold yet.
    let mut hands: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_clients];
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..num_clients).collect();
    order.shuffle(&mut rng);
    for (j, &cls) in classes.iter().enumerate() {
        hands[order[j % num_clients]].insert(cls);
    }
    for hand in &mut hands {
        while hand.len() < classes_per_client {
            let free: Vec<usize> = (0..c).filter(|k| !hand.contains(k)).collect();
            hand.insert(free[rng.random_range(0..free.len())]);
        }
    }
    let mut clients = vec![Vec::new(); num_clients];
    for (cls, samples) in ds.by_class().into_iter().enumerate() {
        let holders: Vec<usize> = (0..num_clients).filter(|&i| hands[i].contains(&cls)).collect();
        let shares: Vec<f64> = holders.iter().map(|_| rng.random_range(0.4..0.6)).collect();
        let counts = largest_remainder(&shares, samples.len());
        deal_class(&mut clients, samples, &holders, &counts, &mut rng);
    }
    finish(
        PartitionScheme::Pathological {
            num_clients,
            classes_per_client,
        },
        seed,
        ds,
        clients,
        &mut rng,
    )
}

fn dirichlet(alpha: f64, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let g = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    for _ in 0..DIRICHLET_RETRIES {
        let draws: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return Ok(draws.into_iter().map(|x| x / s).collect());
        }
    }
    Err(Error::Partition(format!("Dirichlet({alpha}) draw underflowed")))
}

/// Per class, a `Dirichlet(α·1_N)` draw sets each client's share;
/// counts are made exact by largest remainder. Allocations that leave a
/// client with fewer than two samples are redrawn.
pub fn partition_dirichlet(ds: &LabeledDataset, num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionManifest> {
    check_clients(num_clients)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Partition(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let holders: Vec<usize> = (0..num_clients).collect();
    for _ in 0..DIRICHLET_RETRIES {
        let mut clients = vec![Vec::new(); num_clients];
        for samples in ds.by_class() {
            let p = dirichlet(alpha, num_clients, &mut rng)?;
            let counts = largest_remainder(&p, samples.len());
            deal_class(&mut clients, samples, &holders, &counts, &mut rng);
        }
        if clients.iter().all(|c| c.len() >= 2) {
            return finish(
                PartitionScheme::Dirichlet { num_clients, alpha },
                seed,
                ds,
                clients,
                &mut rng,
            );
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet({alpha}) allocation gave every client 2 samples in {DIRICHLET_RETRIES} attempts"
    )))
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let s: f64 = weights.iter().sum();
    if !(s > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * s;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Two-stage allocation: each client draws `Dirichlet(α)` over coarse
/// labels and `Dirichlet(β)` over each coarse group's fine labels, then
/// fills a quota of `⌊total/N⌋` samples without replacement, renormalizing
/// over groups and classes that still have supply.
pub fn partition_pachinko(
    ds: &LabeledDataset,
    num_clients: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<PartitionManifest> {
    check_clients(num_clients)?;
    let (Some(coarse), Some(num_coarse)) = (&ds.coarse, ds.num_coarse) else {
        return Err(Error::Partition("pachinko allocation needs coarse labels".into()));
    };
    let mut fine_of: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_coarse];
    for (i, &f) in ds.labels.iter().enumerate() {
        fine_of[coarse[i]].insert(f);
    }
    let fine_of: Vec<Vec<usize>> = fine_of.into_iter().map(|s| s.into_iter().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut supply = ds.by_class();
    for s in &mut supply {
        s.shuffle(&mut rng);
    }
    let quota = ds.len() / num_clients;
    let mut clients = vec![Vec::with_capacity(quota); num_clients];
    for (c, client) in clients.iter_mut().enumerate() {
        let theta = dirichlet(alpha, num_coarse, &mut rng)?;
        let fine_p: Vec<Vec<f64>> = fine_of
            .iter()
            .map(|f| dirichlet(beta, f.len().max(1), &mut rng))
            .collect::<Result<_>>()?;
        while client.len() < quota {
            let coarse_w: Vec<f64> = (0..num_coarse)
                .map(|g| {
                    if fine_of[g].iter().any(|&f| !supply[f].is_empty()) {
                        theta[g]
                    } else {
                        0.0
                    }
                })
                .collect();
            let shortfall = || {
                Error::Partition(format!(
                    "supply exhausted: client {c} short by {}",
                    quota - client.len()
                ))
            };
            let g = categorical(&coarse_w, &mut rng).ok_or_else(shortfall)?;
            let fine_w: Vec<f64> = fine_of[g]
                .iter()
                .zip(&fine_p[g])
                .map(|(&f, &p)| if supply[f].is_empty() { 0.0 } else { p })
                .collect();
            let j = categorical(&fine_w, &mut rng).ok_or_else(shortfall)?;
            client.push(supply[fine_of[g][j]].pop().unwrap());
        }
    }
    finish(
        PartitionScheme::Pachinko {
            num_clients,
            alpha,
            beta,
        },
        seed,
        ds,
        clients,
        &mut rng,
    )
}

/// Uniform random split into near-equal client shards.
pub fn partition_noise_ladder(
    ds: &LabeledDataset,
    num_clients: usize,
    sigma_max: f64,
    seed: u64,
) -> Result<PartitionManifest> {
    check_clients(num_clients)?;
    if num_clients < 2 || !(sigma_max >= 0.0) {
        return Err(Error::Partition("noise ladder needs >= 2 clients and sigma_max >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..ds.len()).collect();
    all.shuffle(&mut rng);
    let counts = largest_remainder(&vec![1.0; num_clients], all.len());
    let mut clients = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in counts {
        clients.push(all[start..start + k].to_vec());
        start += k;
    }
    finish(
        PartitionScheme::NoiseLadder {
            num_clients,
            sigma_max,
        },
        seed,
        ds,
        clients,
        &mut rng,
    )
}

/// Dispatches on `scheme`.
pub fn partition(ds: &LabeledDataset, scheme: &PartitionScheme, seed: u64) -> Result<PartitionManifest> {
    match *scheme {
        PartitionScheme::Pathological {
            num_clients,
            classes_per_client,
        } => partition_pathological(ds, num_clients, classes_per_client, seed),
        PartitionScheme::Dirichlet { num_clients, alpha } => partition_dirichlet(ds, num_clients, alpha, seed),
        PartitionScheme::Pachinko {
            num_clients,
            alpha,
            beta,
        } => partition_pachinko(ds, num_clients, alpha, beta, seed),
        PartitionScheme::NoiseLadder {
            num_clients,
            sigma_max,
        } => partition_noise_ladder(ds, num_clients, sigma_max, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 7), vec![4, 3]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 5), vec![0, 5]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 0), vec![0, 0, 0]);
    }

    #[test]
    fn split_sizes() {
        let ds = crate::data::synth_image_task(2, 5, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tr, te) = split_client((0..10).collect(), &ds, &mut rng);
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr, te) = split_client(vec![0, 1], &ds, &mut rng);
        assert_eq!((tr.len(), te.len()), (1, 1));
    }
}
