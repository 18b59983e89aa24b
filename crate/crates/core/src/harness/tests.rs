use super::*;

const TINY: &str = r#"
classes = 3
per_class = 10
side = 8
noise = 0.25
initial_pool = 4
budget = 3
rounds = 2
epochs_vae = 1
epochs_target = 1
batch_size = 4
latent_dim = 3
enc_width = 2
proxy_hidden = 4
disc_hidden = 4
target_width = 2
seeds = [5, 6]
strategies = ["adroit", "random", "entropy", "kcenter"]
"#;

fn record(strategy: Strategy, seed: u64, round: usize, accuracy: f64) -> RoundRecord {
    RoundRecord {
        strategy,
        seed,
        round,
        labeled_count: 100 + 50 * round,
        accuracy,
        target_loss: 1.0,
        vae_loss: None,
        disc_loss: None,
        disc_accuracy: None,
        selected: Vec::new(),
    }
}

#[test]
fn mean_std_two_values() {
    let (m, s) = mean_std(&[0.4, 0.6]);
    assert!((m - 0.5).abs() < 1e-15);
    assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
}

#[test]
fn aggregate_groups_by_strategy_and_round() {
    let recs = vec![
        record(Strategy::Random, 1, 0, 0.4),
        record(Strategy::Random, 2, 0, 0.6),
        record(Strategy::Random, 1, 1, 0.5),
        record(Strategy::Random, 2, 1, 0.9),
        record(Strategy::Adroit, 1, 0, 0.3),
    ];
    let agg = aggregate(&recs).unwrap();
    assert_eq!(agg.len(), 3);
    let adroit = &agg[0];
    assert_eq!((adroit.strategy, adroit.seeds, adroit.std_acc), (Strategy::Adroit, 1, 0.0));
    let r1 = agg.iter().find(|a| a.strategy == Strategy::Random && a.round == 1).unwrap();
    assert!((r1.mean_acc - 0.7).abs() < 1e-12);
    assert!((r1.std_acc - 0.08f64.sqrt()).abs() < 1e-12);
    assert_eq!(r1.labeled_count, 150);
}

#[test]
fn aggregate_rejects_uneven_seeds() {
    let recs = vec![
        record(Strategy::Random, 1, 0, 0.4),
        record(Strategy::Random, 1, 1, 0.4),
        record(Strategy::Random, 2, 0, 0.6),
    ];
    assert!(aggregate(&recs).is_err());
}

#[test]
fn plot_data_round_trips_exactly() {
    let rows = aggregate(&[
        record(Strategy::Random, 1, 0, 0.1 + 0.2),
        record(Strategy::Random, 2, 0, 1.0 / 3.0),
        record(Strategy::Entropy, 1, 0, 0.12345678901234568),
    ])
    .unwrap();
    let text = plot_data_csv(&rows);
    assert_eq!(text.lines().next(), Some(PLOT_HEADER));
    let back = parse_plot_data(&text).unwrap();
    assert_eq!(back.len(), rows.len());
    for (r, b) in rows.iter().zip(&back) {
        assert_eq!((r.strategy, r.labeled_count), (b.0, b.1));
        assert_eq!(r.mean_acc.to_bits(), b.2.to_bits());
        assert_eq!(r.std_acc.to_bits(), b.3.to_bits());
    }
    assert!(parse_plot_data("a,b\n").is_err());
}

#[test]
fn argmax_takes_first_of_ties() {
    assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
    assert_eq!(argmax(&[-3.0, -1.0, -2.0]), 1);
}

#[test]
fn zero_target_predicts_class_zero() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    let splits = prepare_data(&spec).unwrap();
    let arch = Architecture::new(splits.holdout.shape(), 3, &spec.al).unwrap();
    let zero = ParamSet::zeros(arch.target.layout().clone());
    let idx: Vec<usize> = (0..splits.holdout.len()).collect();
    let expected = idx.iter().filter(|&&i| splits.holdout.label(i) == 0).count() as f64 / idx.len() as f64;
    let acc = evaluate_accuracy(&arch, &zero, &splits.holdout, &idx).unwrap();
    assert_eq!(acc, expected);
    assert!(evaluate_accuracy(&arch, &zero, &splits.holdout, &[]).is_err());
}

#[test]
fn parse_defaults_and_overrides() {
    let spec = ExperimentSpec::parse("seed = 9\n").unwrap();
    assert_eq!(spec.seeds, vec![9]);
    assert_eq!(spec.strategies, vec![Strategy::Adroit, Strategy::Random]);
    assert_eq!(spec.init_strategy, InitStrategy::Random);
    assert_eq!(spec.data.holdout_fraction, 0.2);
    let spec = ExperimentSpec::parse(TINY).unwrap();
    assert_eq!(spec.seeds, vec![5, 6]);
    assert_eq!(spec.al.budget, 3);
    assert_eq!(spec.data.synthetic.per_class, 10);
}

#[test]
fn parse_rejects_bad_input() {
    for text in [
        "bogus = 1\n",
        "strategies = [\"nope\"]\n",
        "strategies = []\n",
        "strategies = [\"random\", \"random\"]\n",
        "holdout_fraction = 1.0\n",
        "seeds = []\n",
        "source = \"cifar10\"\n",
        "init_strategy = \"best\"\n",
        "budget = -1\n",
        "[table]\nx = 1\n",
    ] {
        assert!(ExperimentSpec::parse(text).is_err(), "{text}");
    }
}

#[test]
fn snapshot_parses_back() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    assert_eq!(ExperimentSpec::parse(&spec.to_toml()).unwrap(), spec);
}

#[test]
fn label_demand_is_checked_against_train_size() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    assert_eq!(spec.label_demand(), 10);
    assert!(spec.validate_for(10).is_ok());
    assert!(spec.validate_for(9).is_err());
}

#[test]
fn split_is_disjoint_and_seeded() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    let a = prepare_data(&spec).unwrap();
    let b = prepare_data(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.holdout.len()), (24, 6));
    let mut other = spec.clone();
    other.al.seed += 1;
    assert_ne!(prepare_data(&other).unwrap(), a);
}

#[test]
fn imbalance_shrinks_affected_classes() {
    let mut spec = ExperimentSpec::parse(TINY).unwrap();
    spec.data.synthetic.per_class = 50;
    spec.data.imbalance_ratio = 10.0;
    spec.data.imbalance_classes = vec![1];
    let s = prepare_data(&spec).unwrap();
    let counts = s.train.class_counts();
    assert!(counts[1] < counts[0] / 5, "{counts:?}");
    assert_eq!(s.holdout.len(), 30);
}

#[test]
fn initial_pools_have_requested_size() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    let s = prepare_data(&spec).unwrap();
    for init in InitStrategy::ALL {
        let p = initial_pool(init, &s.train, 5, &mut Rng::new(1, "init")).unwrap();
        assert_eq!(p.labeled().len(), 5);
        assert_eq!(p.unlabeled().len(), s.train.len() - 5);
    }
    assert!(initial_pool(InitStrategy::KCenter, &s.train, 0, &mut Rng::new(1, "init")).is_err());
}

#[test]
fn rounds_csv_round_trips() {
    let mut r = record(Strategy::Adroit, 3, 1, 0.25);
    r.vae_loss = Some(1.5);
    r.disc_accuracy = Some(0.75);
    let text = format!("{ROUNDS_HEADER}\n{}\n", r.csv_row());
    assert_eq!(parse_rounds(&text).unwrap(), vec![r]);
}

#[test]
fn tiny_run_bookkeeping() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&spec, dir.path()).unwrap();
    let n_strat = spec.strategies.len();
    assert_eq!(summary.records.len(), n_strat * 2 * 3);
    for rec in &summary.records {
        assert_eq!(rec.labeled_count, 4 + 3 * rec.round);
        let expect = if rec.round == 2 { 0 } else { 3 };
        assert_eq!(rec.selected.len(), expect);
        assert_eq!(rec.vae_loss.is_some(), rec.strategy == Strategy::Adroit && rec.round < 2);
    }
    // round 0 is identical across strategies for a seed
    for seed in [5, 6] {
        let accs: Vec<f64> = summary
            .records
            .iter()
            .filter(|r| r.seed == seed && r.round == 0)
            .map(|r| r.accuracy)
            .collect();
        assert!(accs.windows(2).all(|w| w[0] == w[1]));
    }
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(parse_rounds(&rounds).unwrap().len(), summary.records.len());
    let sel = fs::read_to_string(dir.path().join("selections.csv")).unwrap();
    assert_eq!(sel.lines().count(), 1 + n_strat * 2 * 2 * 3);
    let plot = fs::read_to_string(dir.path().join("plot_data.csv")).unwrap();
    assert_eq!(parse_plot_data(&plot).unwrap().len(), n_strat * 3);
    let snap = fs::read_to_string(dir.path().join("config.snapshot")).unwrap();
    assert_eq!(ExperimentSpec::parse(&snap).unwrap(), spec);

    let arch = Architecture::new(ImageShape::square(3, 8), 3, &spec.al).unwrap();
    let ck0 = RoundCheckpoint::load(&round_checkpoint_dir(dir.path(), Strategy::Adroit, 5, 0), &arch).unwrap();
    let ck1 = RoundCheckpoint::load(&round_checkpoint_dir(dir.path(), Strategy::Adroit, 5, 1), &arch).unwrap();
    assert!(ck0.adversarial.is_some());
    assert_eq!(ck0.labeled.len(), 4);
    assert_eq!(ck1.labeled.len(), 7);
    let chosen: Vec<usize> = summary
        .records
        .iter()
        .find(|r| r.strategy == Strategy::Adroit && r.seed == 5 && r.round == 0)
        .unwrap()
        .selected
        .iter()
        .map(|s| s.index)
        .collect();
    assert!(chosen.iter().all(|i| ck1.labeled.contains(i) && !ck0.labeled.contains(i)));
    let last = RoundCheckpoint::load(&round_checkpoint_dir(dir.path(), Strategy::Random, 6, 2), &arch).unwrap();
    assert!(last.adversarial.is_none());
    assert_eq!(last.labeled.len(), 10);
    let seed_dir = seed_dir(dir.path(), Strategy::Adroit, 5);
    assert!(seed_dir.join("losses_target_round0.csv").exists());
    assert!(seed_dir.join("losses_adroit_round1.csv").exists());
    assert!(!seed_dir.join("losses_adroit_round2.csv").exists());
}

#[test]
fn tiny_run_is_reproducible() {
    let mut spec = ExperimentSpec::parse(TINY).unwrap();
    spec.seeds = vec![5];
    spec.strategies = vec![Strategy::Adroit];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&spec, a.path()).unwrap();
    let rb = run_experiment(&spec, b.path()).unwrap();
    assert_eq!(ra, rb);
    for f in ["rounds.csv", "selections.csv", "plot_data.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn adroit_needs_adversarial_models() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    let s = prepare_data(&spec).unwrap();
    let arch = Architecture::new(s.train.shape(), 3, &spec.al).unwrap();
    let target = arch.init_target(&mut Rng::new(0, "t"));
    let pool = PoolState::init(s.train.len(), 4, &mut Rng::new(0, "p")).unwrap();
    let models = Models {
        target: &target,
        adversarial: None,
    };
    let err = acquire(Strategy::Adroit, &s.train, &pool, &arch, models, 2, &mut Rng::new(0, "s"));
    assert!(matches!(err, Err(Error::InvalidState(_))));
    let ent = acquire(Strategy::Entropy, &s.train, &pool, &arch, models, 2, &mut Rng::new(0, "s")).unwrap();
    assert!(ent.iter().all(|s| s.score.is_some()));
    let kc = acquire(Strategy::KCenter, &s.train, &pool, &arch, models, 2, &mut Rng::new(0, "s")).unwrap();
    assert!(kc.iter().all(|s| !pool.labeled().contains(&s.index)));
}

#[test]
fn checkpoint_replays_selection_and_accuracy() {
    let mut spec = ExperimentSpec::parse(TINY).unwrap();
    spec.seeds = vec![5];
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&spec, dir.path()).unwrap();
    for strategy in spec.strategies.clone() {
        for round in 0..2 {
            let rec = summary
                .records
                .iter()
                .find(|r| r.strategy == strategy && r.round == round)
                .unwrap();
            let state = RoundState::load(&spec, dir.path(), strategy, 5, round).unwrap();
            assert_eq!(state.select(strategy, 5, round, spec.al.budget).unwrap(), rec.selected);
            assert_eq!(state.accuracy().unwrap(), rec.accuracy);
        }
    }
}

#[test]
fn records_file_reproduces_synthetic_splits() {
    let spec = ExperimentSpec::parse(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    fs::write(&path, crate::data::encode_records(&load_source(&spec).unwrap()).unwrap()).unwrap();
    let mut from_file = spec.clone();
    from_file.data.source = DataSource::Records;
    from_file.data.data_path = Some(path);
    let (a, b) = (prepare_data(&from_file).unwrap(), prepare_data(&spec).unwrap());
    for (x, y) in [(&a.train, &b.train), (&a.holdout, &b.holdout)] {
        assert_eq!(x.labels(), y.labels());
        // records store one byte per value
        assert!(x.pixels().iter().zip(y.pixels()).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
