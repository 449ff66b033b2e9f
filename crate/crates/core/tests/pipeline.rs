use renas::datastore::{self, SplitStrategy, SurrogateConfig};
use renas::evosearch::{self, EaConfig};
use renas::tensornet::{self, PredictorArch};
use renas::trainer::{self, LossKind, TrainConfig, TrainSetup};

fn setup(loss: LossKind) -> TrainSetup {
    TrainSetup {
        arch: PredictorArch { conv_channels: vec![8], hidden: vec![16, 12] },
        train: TrainConfig { epochs: 20, batch: 32, loss, seed: 5, lr: 2e-3, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn train_save_load_search() {
    let records = datastore::synthetic_records(evosearch::enumerate_space(4).unwrap(), &SurrogateConfig::default());
    let sk = renas::costmodel::Skeleton::default();
    let (train, hold) = datastore::split(&records, 0.6, SplitStrategy::Random, 1, &sk).unwrap();
    let cells: Vec<_> = train.iter().map(|r| r.cell.clone()).collect();
    let ys: Vec<_> = train.iter().map(|r| r.val_acc).collect();
    let hcells: Vec<_> = hold.iter().map(|r| r.cell.clone()).collect();
    let hys: Vec<_> = hold.iter().map(|r| r.val_acc).collect();

    let (model, logs) = trainer::train(&cells, &ys, Some((&hcells, &hys)), &setup(LossKind::Combined), |_| {}).unwrap();
    assert_eq!(logs.len(), 21);
    let first = logs[0].holdout_ktau.unwrap();
    let last = logs.last().unwrap().holdout_ktau.unwrap();
    assert!(last > first && last > 0.4, "holdout ktau {first} -> {last}");

    // Fitting-set agreement is at least holdout agreement.
    let on_train = renas::metrics::ktau(&model.score_cells(&cells).unwrap(), &ys).unwrap().ktau;
    assert!(on_train >= last, "train {on_train} < holdout {last}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    tensornet::save(&model, &path).unwrap();
    let loaded = tensornet::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.score_cells(&hcells).unwrap(), model.score_cells(&hcells).unwrap());

    let cfg = EaConfig { generations: 40, population: 16, seed: 3, max_nodes: 4, top_k: 5, ..Default::default() };
    let a = evosearch::ea_search(&loaded, &cfg).unwrap();
    let b = evosearch::ea_search(&model, &cfg).unwrap();
    assert_eq!(a, b);
    let best = evosearch::exhaustive_search(&model, evosearch::enumerate_space(4).unwrap(), 1).unwrap();
    assert!(a.top[0].score <= best[0].score);
    assert_eq!(a.top[0].score, best[0].score);
}

#[test]
fn combined_loss_beats_mse_on_a_small_split() {
    let records = datastore::synthetic_records(evosearch::enumerate_space(5).unwrap(), &SurrogateConfig::default());
    let sk = renas::costmodel::Skeleton::default();
    let (train, hold) = datastore::split(&records, 0.15, SplitStrategy::Random, 2, &sk).unwrap();
    let xs = |r: &[renas::ArchRecord]| -> (Vec<_>, Vec<_>) { r.iter().map(|r| (r.cell.clone(), r.val_acc)).unzip() };
    let (c, y) = xs(&train);
    let (hc, hy) = xs(&hold);
    let ktau = |loss| {
        let (_, logs) = trainer::train(&c, &y, Some((&hc, &hy)), &setup(loss), |_| {}).unwrap();
        logs.last().unwrap().holdout_ktau.unwrap()
    };
    let (combined, mse) = (ktau(LossKind::Combined), ktau(LossKind::Mse));
    assert!(combined > mse, "combined {combined} <= mse {mse}");
}
