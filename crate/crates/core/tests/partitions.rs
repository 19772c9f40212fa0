use std::collections::BTreeSet;

use fedtp_core::data::{
    apply_noise_ladder, largest_remainder, noise_sigma, partition, partition_dirichlet, partition_noise_ladder,
    partition_pachinko, partition_pathological, synth_image_task, Inputs, LabeledDataset, PartitionManifest,
    PartitionScheme, SynthImageSpec,
};
use proptest::prelude::*;

fn images(classes: usize, per_class: usize, seed: u64) -> LabeledDataset {
    synth_image_task(classes, per_class, 4, seed).unwrap()
}

fn hierarchical(seed: u64) -> LabeledDataset {
    SynthImageSpec {
        num_classes: 20,
        per_class: 30,
        extent: 4,
        coarse_groups: Some(4),
        seed,
        ..SynthImageSpec::default()
    }
    .generate()
    .unwrap()
}

/// `counts[client][class]` over train and test.
fn class_counts(man: &PartitionManifest, ds: &LabeledDataset) -> Vec<Vec<usize>> {
    man.train
        .iter()
        .zip(&man.test)
        .map(|(tr, te)| {
            let mut c = vec![0; ds.num_classes];
            for &i in tr.iter().chain(te) {
                c[ds.labels[i]] += 1;
            }
            c
        })
        .collect()
}

fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[test]
fn pathological_five_clients_hold_exactly_two_classes() {
    let ds = images(10, 20, 0);
    for seed in 0..20 {
        let man = partition_pathological(&ds, 5, 2, seed).unwrap();
        man.validate(&ds).unwrap();
        for row in class_counts(&man, &ds) {
            assert_eq!(row.iter().filter(|&&c| c > 0).count(), 2, "seed {seed}");
        }
    }
}

#[test]
fn pathological_two_holder_shares_stay_in_bounds() {
    let ds = images(10, 60, 1);
    let mut checked = 0;
    for seed in 0..100 {
        let man = partition_pathological(&ds, 10, 2, seed).unwrap();
        man.validate(&ds).unwrap();
        let counts = class_counts(&man, &ds);
        for class in 0..10 {
            let holders: Vec<usize> = counts.iter().map(|r| r[class]).filter(|&c| c > 0).collect();
            assert!(!holders.is_empty(), "class {class} unassigned");
            if holders.len() == 2 {
                for h in holders {
                    let share = h as f64 / 60.0;
                    assert!((0.25..=0.75).contains(&share), "seed {seed} class {class} share {share}");
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn pathological_rejects_infeasible_requests() {
    let ds = images(10, 5, 0);
    assert!(partition_pathological(&ds, 4, 2, 0).is_err());
    assert!(partition_pathological(&ds, 5, 11, 0).is_err());
}

#[test]
fn dirichlet_concentrated_limit_is_uniform() {
    let ds = images(6, 40, 2);
    let mut mean = vec![vec![0.0; 6]; 4];
    for seed in 0..100 {
        let man = partition_dirichlet(&ds, 4, 1e6, seed).unwrap();
        man.validate(&ds).unwrap();
        for (c, row) in class_counts(&man, &ds).iter().enumerate() {
            for (k, &n) in row.iter().enumerate() {
                mean[c][k] += n as f64 / 40.0 / 100.0;
            }
        }
    }
    for row in &mean {
        for &p in row {
            assert!((p - 0.25).abs() <= 0.05 * 0.25, "{p}");
        }
    }
}

#[test]
fn dirichlet_class_counts_sum_to_class_totals() {
    let ds = images(5, 33, 3);
    let man = partition_dirichlet(&ds, 6, 0.5, 9).unwrap();
    let counts = class_counts(&man, &ds);
    for k in 0..5 {
        assert_eq!(counts.iter().map(|r| r[k]).sum::<usize>(), 33);
    }
    assert!(man.train.iter().zip(&man.test).all(|(a, b)| a.len() + b.len() >= 2));
}

#[test]
fn dirichlet_entropy_orders_with_alpha() {
    let ds = images(10, 30, 4);
    let mean_entropy = |alpha: f64| {
        let mut total = 0.0;
        for seed in 0..30 {
            let man = partition_dirichlet(&ds, 10, alpha, seed).unwrap();
            let counts = class_counts(&man, &ds);
            total += counts.iter().map(|r| entropy(r)).sum::<f64>() / counts.len() as f64;
        }
        total / 30.0
    };
    let low = mean_entropy(0.1);
    let high = mean_entropy(0.9);
    assert!(low < high, "{low} vs {high}");
}

#[test]
fn dirichlet_rejects_bad_alpha() {
    let ds = images(3, 10, 0);
    assert!(partition_dirichlet(&ds, 2, 0.0, 0).is_err());
    assert!(partition_dirichlet(&ds, 2, f64::NAN, 0).is_err());
}

#[test]
fn pachinko_quota_is_exact() {
    let ds = hierarchical(0);
    let coarse = ds.coarse.clone().unwrap();
    for seed in 0..10 {
        let man = partition_pachinko(&ds, 7, 0.3, 10.0, seed).unwrap();
        man.validate(&ds).unwrap();
        let quota = ds.len() / 7;
        for (tr, te) in man.train.iter().zip(&man.test) {
            assert_eq!(tr.len() + te.len(), quota);
            let groups: BTreeSet<usize> = tr.iter().chain(te).map(|&i| coarse[i]).collect();
            assert!(!groups.is_empty() && groups.len() <= 4);
        }
    }
}

#[test]
fn pachinko_fine_labels_follow_coarse_groups() {
    let ds = hierarchical(1);
    let coarse = ds.coarse.clone().unwrap();
    let man = partition_pachinko(&ds, 5, 0.3, 10.0, 3).unwrap();
    for (tr, te) in man.train.iter().zip(&man.test) {
        for &i in tr.iter().chain(te) {
            // classes 5g..5g+5 form coarse group g
            assert_eq!(coarse[i], ds.labels[i] / 5);
        }
    }
}

#[test]
fn pachinko_concentrated_fine_draw_is_uniform() {
    let ds = hierarchical(2);
    let mut share_sum = vec![0.0; 20];
    let mut group_mass = vec![0.0; 20];
    for seed in 0..30 {
        let man = partition_pachinko(&ds, 10, 1e6, 1e6, seed).unwrap();
        for row in class_counts(&man, &ds) {
            for g in 0..4 {
                let total: usize = row[5 * g..5 * g + 5].iter().sum();
                if total == 0 {
                    continue;
                }
                for k in 5 * g..5 * g + 5 {
                    share_sum[k] += row[k] as f64 / total as f64;
                    group_mass[k] += 1.0;
                }
            }
        }
    }
    for k in 0..20 {
        let p = share_sum[k] / group_mass[k];
        assert!((p - 0.2).abs() <= 0.1 * 0.2, "class {k}: {p}");
    }
}

#[test]
fn pachinko_needs_coarse_labels() {
    let ds = images(4, 10, 0);
    let err = partition_pachinko(&ds, 2, 0.3, 10.0, 0).unwrap_err().to_string();
    assert!(err.contains("coarse"), "{err}");
}

#[test]
fn manifests_are_pure_functions_of_their_inputs() {
    let ds = images(6, 20, 5);
    let before = ds.clone();
    for scheme in [
        PartitionScheme::Pathological {
            num_clients: 4,
            classes_per_client: 2,
        },
        PartitionScheme::Dirichlet {
            num_clients: 4,
            alpha: 0.3,
        },
        PartitionScheme::NoiseLadder {
            num_clients: 4,
            sigma_max: 20.0,
        },
    ] {
        let a = partition(&ds, &scheme, 11).unwrap();
        let b = partition(&ds, &scheme, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, partition(&ds, &scheme, 12).unwrap());
        a.validate(&ds).unwrap();
        assert_eq!(a.dataset_fingerprint, ds.fingerprint());
    }
    assert_eq!(ds, before);
}

#[test]
fn manifest_json_round_trip() {
    let ds = hierarchical(3);
    let man = partition(
        &ds,
        &PartitionScheme::Pachinko {
            num_clients: 4,
            alpha: 0.3,
            beta: 10.0,
        },
        1,
    )
    .unwrap();
    let json = man.to_json().unwrap();
    assert!(json.contains("\"name\": \"pachinko\""));
    assert_eq!(PartitionManifest::from_json(&json).unwrap(), man);
    assert!(PartitionManifest::from_json("{\"scheme\": 1}").is_err());
}

#[test]
fn validation_catches_tampering() {
    let ds = images(4, 20, 6);
    let man = partition_dirichlet(&ds, 3, 1.0, 0).unwrap();

    let mut dup = man.clone();
    let i = dup.train[0][0];
    dup.train[1].push(i);
    assert!(dup.validate(&ds).is_err());

    let mut lost = man.clone();
    lost.train[2].pop();
    assert!(lost.check_exhaustive().is_err());

    let mut skew = man.clone();
    let (big, _) = skew.test.iter().enumerate().max_by_key(|(_, t)| t.len()).unwrap();
    let label = ds.labels[skew.test[big][0]];
    let (moved, kept): (Vec<usize>, Vec<usize>) = skew.test[big].iter().partition(|&&i| ds.labels[i] == label);
    skew.test[big] = kept;
    skew.train[big].extend(moved);
    assert!(skew.check_matched(&ds).is_err());

    let other = images(4, 20, 7);
    assert!(man.validate(&other).is_err());
}

#[test]
fn matched_split_holds_out_a_fifth() {
    let ds = images(5, 40, 8);
    let man = partition_dirichlet(&ds, 4, 0.5, 2).unwrap();
    for (tr, te) in man.train.iter().zip(&man.test) {
        let n = tr.len() + te.len();
        let expect = ((0.2 * n as f64).round() as usize).max(1);
        assert!(te.len().abs_diff(expect) <= ds.num_classes, "{} of {n}", te.len());
    }
    man.check_matched(&ds).unwrap();
}

#[test]
fn noise_ladder_sigmas() {
    assert_eq!(noise_sigma(9, 10, 20.0), 20.0);
    assert_eq!(noise_sigma(0, 10, 20.0), 0.0);
    assert!((noise_sigma(3, 10, 20.0) - 20.0 / 3.0).abs() < 1e-12);
}

#[test]
fn zero_sigma_ladder_is_noiseless() {
    let ds = images(4, 25, 9);
    let man = partition_noise_ladder(&ds, 5, 0.0, 0).unwrap();
    man.validate(&ds).unwrap();
    let noisy = apply_noise_ladder(&man, &ds, 0.0).unwrap();
    assert_eq!(noisy.dataset, ds);
    assert!(noisy.sigmas.iter().all(|&s| s == 0.0));
}

#[test]
fn noise_inflation_grows_with_client_index() {
    // flat grey images keep clipping out of the picture
    let n = 400;
    let ds = LabeledDataset {
        inputs: Inputs::Images {
            channels: 3,
            extent: 4,
            pixels: vec![0.5; n * 48],
        },
        labels: (0..n).map(|i| i % 4).collect(),
        num_classes: 4,
        coarse: None,
        num_coarse: None,
    };
    let man = partition_noise_ladder(&ds, 5, 20.0, 3).unwrap();
    let noisy = apply_noise_ladder(&man, &ds, 20.0).unwrap();
    let Inputs::Images { pixels, .. } = &noisy.dataset.inputs else {
        unreachable!()
    };
    let mut prev = -1.0;
    for c in 0..5 {
        let vals: Vec<f64> = man.train[c]
            .iter()
            .chain(&man.test[c])
            .flat_map(|&i| pixels[i * 48..(i + 1) * 48].iter().copied())
            .collect();
        let var = vals.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / vals.len() as f64;
        let sd = var.sqrt() * 255.0;
        let target = noise_sigma(c, 5, 20.0);
        assert!(sd > prev, "client {c}: {sd} after {prev}");
        assert!((sd - target).abs() <= 0.1 * target + 1e-12, "client {c}: {sd} vs {target}");
        prev = sd;
    }
}

#[test]
fn noise_ladder_rejects_single_client() {
    let ds = images(2, 10, 0);
    assert!(partition_noise_ladder(&ds, 1, 20.0, 0).is_err());
}

proptest! {
    #[test]
    fn largest_remainder_is_exact(weights in prop::collection::vec(0.0f64..5.0, 1..12), total in 0usize..500) {
        let counts = largest_remainder(&weights, total);
        prop_assert_eq!(counts.len(), weights.len());
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        let w: f64 = weights.iter().sum();
        if w > 0.0 {
            for (c, x) in counts.iter().zip(&weights) {
                prop_assert!((*c as f64 - x / w * total as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn dirichlet_manifests_always_validate(alpha in 0.05f64..5.0, clients in 2usize..6, seed in 0u64..500) {
        let ds = images(4, 15, 0);
        let man = partition_dirichlet(&ds, clients, alpha, seed).unwrap();
        prop_assert!(man.validate(&ds).is_ok());
    }
}
