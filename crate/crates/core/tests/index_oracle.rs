use std::collections::BTreeSet;

use volterra_core::index::{binomial, IndexSet};
use volterra_core::{build_fpm, build_npm, build_pcms, count_params, count_terms};
use volterra_oracle::{count_multisets, multisets, pascal, strict_tuples};

fn row_set<'a>(rows: impl Iterator<Item = &'a [usize]>) -> (usize, BTreeSet<Vec<usize>>) {
    let mut count = 0;
    let set = rows
        .inspect(|_| count += 1)
        .map(<[usize]>::to_vec)
        .collect();
    (count, set)
}

#[test]
fn npm_matches_strict_enumeration() {
    for n in 1..=8 {
        for j in 1..=5 {
            let npm = build_npm(n, j).unwrap();
            let (count, set) = row_set(npm.rows());
            let expect: BTreeSet<_> = strict_tuples(n, j).into_iter().collect();
            assert_eq!(count, expect.len(), "n={n} j={j}");
            assert_eq!(set, expect);
        }
    }
}

#[test]
fn fpm_matches_multiset_enumeration() {
    for n in 1..=8 {
        for r in 1..=5 {
            let fpm = build_fpm(n, r).unwrap();
            assert!(fpm.rows().all(|row| row.windows(2).all(|w| w[0] <= w[1])));
            let (count, set) = row_set(fpm.rows());
            let expect: BTreeSet<_> = multisets(n, r).into_iter().collect();
            assert_eq!(count, expect.len(), "duplicate rows for n={n} r={r}");
            assert_eq!(set, expect, "n={n} r={r}");
        }
    }
}

#[test]
fn counting_identities() {
    for n in 1..=12 {
        for r in 1..=6 {
            assert_eq!(count_terms(n, r).unwrap(), count_multisets(n, r), "n={n} r={r}");
            let sum: u64 = (1..=r).map(|j| count_terms(n, j).unwrap()).sum();
            assert_eq!(1 + sum, count_params(n, r).unwrap());
            assert_eq!(count_params(n, r).unwrap() as u128, pascal(n + r, r));
            assert_eq!(binomial((n + r) as u64, r as u64).unwrap() as u128, pascal(n + r, r));
        }
    }
}

#[test]
fn pcms_rebuild_every_row() {
    for n in 1..=8 {
        for r in 2..=5 {
            let prev = build_fpm(n, r - 1).unwrap();
            let cur = build_fpm(n, r).unwrap();
            let pcms = build_pcms(&prev, &cur).unwrap();
            assert_eq!(pcms.variants().len(), r);
            for (t, table) in pcms.variants().iter().enumerate() {
                assert_eq!(table.len() as u64, count_terms(n, r).unwrap());
                for (k, e) in table.iter().enumerate() {
                    let mut merged = prev.row(e.prev_row).to_vec();
                    merged.push(e.position);
                    merged.sort_unstable();
                    assert_eq!(merged, cur.row(k), "n={n} r={r} variant={t} row={k}");
                    // The peeled position is column t of the row.
                    assert_eq!(e.position, cur.row(k)[t]);
                }
            }
        }
    }
}

#[test]
fn any_r_minus_one_columns_are_lower_order_rows() {
    for n in 1..=6 {
        for r in 2..=5 {
            let lower: BTreeSet<Vec<usize>> = multisets(n, r - 1).into_iter().collect();
            let cur = build_fpm(n, r).unwrap();
            for drop in 0..r {
                for row in cur.rows() {
                    let mut rest: Vec<usize> = row.iter().enumerate().filter(|&(c, _)| c != drop).map(|(_, &v)| v).collect();
                    rest.sort_unstable();
                    assert!(lower.contains(&rest));
                }
            }
        }
    }
}

#[test]
fn construction_is_deterministic() {
    for (n, r) in [(3, 2), (5, 4), (8, 5)] {
        let a = IndexSet::build(n, r).unwrap();
        let b = IndexSet::build(n, r).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a.export()).unwrap(), serde_json::to_string(&b.export()).unwrap());
    }
}

#[test]
fn moderate_kernel_builds_quickly() {
    // 5x5 kernel over 3 channels.
    let start = std::time::Instant::now();
    let set = IndexSet::build(75, 3).unwrap();
    assert_eq!(set.fpm(3).n_rows() as u64, count_terms(75, 3).unwrap());
    assert!(start.elapsed().as_secs() < 20);
}
