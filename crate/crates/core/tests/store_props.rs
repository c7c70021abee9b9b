use std::collections::HashMap;
use std::fs;

use forge_core::store::{db_read, db_stats, db_write, plan_batches, BatchOptions, Db, DbMeta, Record, StoreError};
use forge_oracles::layout;
use proptest::prelude::*;

const WIDTH_SIZES: [(u8, u64); 3] = [(1, 256), (2, 65_536), (4, 1 << 32)];

#[test]
fn golden_single_record_shard() {
    let dir = tempfile::tempdir().unwrap();
    // widths 2 and 1
    let meta = DbMeta::new(1000, 100).unwrap();
    db_write([Record::new(vec![1, 2, 3], vec![4])], meta, 1, dir.path()).unwrap();
    let bytes = fs::read(dir.path().join("part-00000.nldb")).unwrap();
    let expected = layout::single_record_shard(&[1, 2, 3], 2, &[4], 1);
    assert_eq!(bytes.len() as u64, layout::shard_size(&[(3, 1)], 2, 1));
    assert_eq!(bytes, expected);
    let golden = include_bytes!("golden/single_record.nldb");
    assert_eq!(bytes.as_slice(), golden.as_slice());
}

#[test]
fn corrupted_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let meta = DbMeta::new(1000, 1000).unwrap();
    let recs = vec![Record::new(vec![5, 6], vec![7]), Record::new(vec![], vec![8, 9])];
    db_write(recs, meta, 1, dir.path()).unwrap();
    let shard = dir.path().join("part-00000.nldb");
    let good = fs::read(&shard).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&shard, &bad).unwrap();
    assert!(matches!(db_read(&shard), Err(StoreError::BadMagic(_))));

    fs::write(&shard, &good[..good.len() - 1]).unwrap();
    match db_read(&shard) {
        Err(StoreError::TruncatedShard { expected, actual, .. }) => {
            assert_eq!(expected, good.len() as u64);
            assert_eq!(actual, good.len() as u64 - 1);
        }
        other => panic!("expected truncation, got {:?}", other.map(|_| ())),
    }

    let mut long = good.clone();
    long.push(0);
    fs::write(&shard, &long).unwrap();
    assert!(matches!(db_read(&shard), Err(StoreError::TruncatedShard { .. })));

    fs::write(&shard, &good[..10]).unwrap();
    assert!(matches!(db_read(&shard), Err(StoreError::TruncatedShard { .. })));
}

#[test]
fn missing_meta_means_absent() {
    let dir = tempfile::tempdir().unwrap();
    db_write(
        vec![Record::new(vec![1], vec![1])],
        DbMeta::new(4, 4).unwrap(),
        2,
        dir.path(),
    )
    .unwrap();
    fs::remove_file(dir.path().join("meta.json")).unwrap();
    assert!(matches!(Db::open(dir.path()), Err(StoreError::NotADb(_))));
}

#[test]
fn concurrent_shard_readers() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<Record> = (0..500u32).map(|i| Record::new(vec![i; 3], vec![i % 7; 2])).collect();
    db_write(recs.clone(), DbMeta::new(1000, 1000).unwrap(), 4, dir.path()).unwrap();
    let db = Db::open(dir.path()).unwrap();
    let per_shard: Vec<Vec<Record>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|i| {
                let db = &db;
                s.spawn(move || db.read_shard(i).unwrap().map(Result::unwrap).collect::<Vec<_>>())
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (k, shard) in per_shard.iter().enumerate() {
        let expected: Vec<Record> = recs.iter().skip(k).step_by(4).cloned().collect();
        assert_eq!(shard, &expected);
    }
}

#[test]
fn stats_match_naive_recount() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<Record> = (0..300u32)
        .map(|i| Record::new(vec![1; (i % 13) as usize], vec![2; (i % 5 + 1) as usize]))
        .collect();
    db_write(recs.clone(), DbMeta::new(10, 10).unwrap(), 3, dir.path()).unwrap();
    let db = Db::open(dir.path()).unwrap();
    let stats = db_stats(&db).unwrap();

    let mut n = 0u64;
    let (mut s, mut t) = (0u64, 0u64);
    let mut hist: HashMap<u32, u64> = HashMap::new();
    for path in db.shard_paths() {
        for r in db_read(&path).unwrap() {
            let r = r.unwrap();
            n += 1;
            s += r.src.len() as u64;
            t += r.tgt.len() as u64;
            *hist.entry(r.tgt.len() as u32).or_default() += 1;
        }
    }
    assert_eq!((stats.n_records, stats.src_tokens, stats.tgt_tokens), (n, s, t));
    assert_eq!(stats.tgt_len_hist.values().sum::<u64>(), n);
    assert_eq!(stats.src_len_hist.values().sum::<u64>(), n);
    for (len, c) in hist {
        assert_eq!(stats.tgt_len_hist[&len], c);
    }
}

#[test]
fn batches_of_loaded_db_carry_padding() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<Record> = (0..7u32)
        .map(|i| Record::new(vec![3; (i + 1) as usize], vec![4; (7 - i) as usize]))
        .collect();
    db_write(recs.clone(), DbMeta::new(10, 10).unwrap(), 2, dir.path()).unwrap();
    let loaded = Db::open(dir.path()).unwrap().load().unwrap();
    let batches: Vec<_> = loaded.batch_iter(&BatchOptions::new(50, 42)).unwrap().collect();
    let mut seen: Vec<Record> = batches.iter().flat_map(|b| b.records.clone()).collect();
    seen.sort();
    let mut want = recs;
    want.sort();
    assert_eq!(seen, want);
    for b in &batches {
        assert!(!b.is_empty());
        assert!(b.src_padded <= 50 && b.tgt_padded <= 50);
        assert_eq!(
            b.tgt_padded,
            b.len() * b.records.iter().map(|r| r.tgt.len()).max().unwrap()
        );
    }
}

fn records_for(width_src: u64, width_tgt: u64) -> impl Strategy<Value = Vec<Record>> {
    let seq = |size: u64| prop::collection::vec((0..size).prop_map(|x| x as u32), 0..12);
    prop::collection::vec(
        (seq(width_src), seq(width_tgt)).prop_map(|(s, t)| Record::new(s, t)),
        0..40,
    )
}

fn width_case() -> impl Strategy<Value = (u64, u64, Vec<Record>, usize)> {
    (0usize..3, 0usize..3, 1usize..5).prop_flat_map(|(a, b, shards)| {
        let (sa, sb) = (WIDTH_SIZES[a].1, WIDTH_SIZES[b].1);
        records_for(sa, sb).prop_map(move |r| (sa, sb, r, shards))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn write_read_round_trip((src_size, tgt_size, recs, shards) in width_case()) {
        let dir = tempfile::tempdir().unwrap();
        let meta = db_write(recs.clone(), DbMeta::new(src_size, tgt_size).unwrap(), shards, dir.path()).unwrap();
        prop_assert_eq!(meta.n_records as usize, recs.len());
        let db = Db::open(dir.path()).unwrap();
        for k in 0..shards {
            let got: Vec<Record> = db.read_shard(k).unwrap().map(Result::unwrap).collect();
            let expected: Vec<Record> = recs.iter().skip(k).step_by(shards).cloned().collect();
            let lens: Vec<(u64, u64)> = expected.iter().map(|r| (r.src.len() as u64, r.tgt.len() as u64)).collect();
            let size = fs::metadata(dir.path().join(&meta.shards[k].file)).unwrap().len();
            prop_assert_eq!(size, layout::shard_size(&lens, meta.src_width as u64, meta.tgt_width as u64));
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn epoch_partitions_within_budget(
        lens in prop::collection::vec((0usize..60, 0usize..60), 1..400),
        budget in 60usize..600,
        seed in any::<u64>(),
    ) {
        let opts = BatchOptions::new(budget, seed);
        let plan = plan_batches(&lens, &opts).unwrap();
        let mut all: Vec<usize> = plan.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..lens.len()).collect::<Vec<_>>());
        for b in &plan {
            prop_assert!(!b.is_empty());
            let ms = b.iter().map(|&i| lens[i].0).max().unwrap();
            let mt = b.iter().map(|&i| lens[i].1).max().unwrap();
            prop_assert!(b.len() * ms <= budget && b.len() * mt <= budget);
        }
        prop_assert_eq!(&plan, &plan_batches(&lens, &opts).unwrap());
    }

    #[test]
    fn equal_lengths_give_floor_sized_batches(n in 1usize..300, len in 1usize..40, budget in 40usize..500) {
        let plan = plan_batches(&vec![(len, len); n], &BatchOptions::new(budget, 9)).unwrap();
        let per = budget / len;
        for b in &plan[..plan.len() - 1] {
            prop_assert_eq!(b.len(), per);
        }
        prop_assert!(plan.last().unwrap().len() <= per);
    }
}
