//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use etm_core::dataset::{generate_synthetic, split, Split, SplitSpec, SyntheticSpec};
use etm_core::episodic::{EpisodeConfig, UnlabeledMode};
use etm_core::evaluator::{evaluate, EvalConfig, InferenceRule};
use etm_core::mining::{self, MiningConfig};
use etm_core::trainer::{lr_at, train, Checkpoint, EpisodeRecord, LossKind, TrainConfig, Trainer};
use etm_core::{EmbeddingNet, Execution};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn synthetic_split(num_train: usize, num_test: usize, scale: f64, labeled_fraction: f64, seed: u64) -> Split {
    let ds = generate_synthetic(&SyntheticSpec {
        num_classes: num_train + num_test,
        samples_per_class: 50,
        feature_dim: 32,
        class_mean_scale: scale,
        noise_sigma: 1.0,
        seed,
    })
    .unwrap();
    let spec = SplitSpec::by_counts(&ds.classes(), num_train, 0, num_test, labeled_fraction, seed).unwrap();
    split(&ds, &spec, seed).unwrap()
}

/// Default hyperparameters with smaller episodes and a short schedule.
fn small_config(seed: u64, loss_kind: LossKind) -> TrainConfig {
    TrainConfig {
        episodes: 500,
        seed,
        loss_kind,
        episode: EpisodeConfig { n_way: 5, n_support: 5, n_query: 5, ..EpisodeConfig::default() },
        ..TrainConfig::default()
    }
}

fn one_shot_accuracy(net: &EmbeddingNet, data: &Split, episodes: usize, seed: u64, inference: InferenceRule) -> f64 {
    let cfg = EvalConfig { way: 5, shot: 1, episodes, seed, inference, ..EvalConfig::default() };
    evaluate(net, &data.test, &cfg).unwrap().mean_accuracy
}

fn strip(log: &[EpisodeRecord]) -> Vec<(u64, u64, u64, usize, Option<u64>)> {
    log.iter().map(EpisodeRecord::deterministic_part).collect()
}

fn mining_oracle() -> Verdict {
    let worst = common::mining_oracle_max_deviation(1000, 1);
    verdict(worst <= 1e-12, format!("1000 episodes, max |module - brute force| = {worst:.2e}"))
}

fn gradient_checks() -> Verdict {
    let mut embedder = common::GradCheck::empty();
    for seed in 0..20 {
        embedder.merge(common::embedder_gradcheck(seed, 1e-5));
    }
    let mut episodes = 0;
    let mut seed = 0;
    let mut end_to_end = common::GradCheck::empty();
    while episodes < 10 {
        let c = common::end_to_end_gradcheck(10_000 + seed, 1e-5);
        seed += 1;
        if c.checked > 0 {
            episodes += 1;
            end_to_end.merge(c);
        }
    }
    let pass = embedder.max_rel_err < 1e-4 && end_to_end.max_rel_err < 1e-4;
    verdict(
        pass,
        format!(
            "embedder: 20 nets, {} params, max rel err {:.2e}; end-to-end: {episodes} episodes, {} params, max rel err {:.2e}",
            embedder.checked, embedder.max_rel_err, end_to_end.checked, end_to_end.max_rel_err
        ),
    )
}

fn supervised_sanity() -> Verdict {
    let data = synthetic_split(20, 5, 10.0, 1.0, 0);
    let (net, _) = train(&data.train_labeled, &data.train_unlabeled, &small_config(0, LossKind::Etm)).unwrap();
    let acc = one_shot_accuracy(&net, &data, 200, 0, InferenceRule::TopKVote);
    verdict(acc >= 0.95, format!("5-way 1-shot accuracy {acc:.4} over 200 episodes (need >= 0.95)"))
}

fn etm_vs_prototypical() -> Verdict {
    let mut etm = Vec::new();
    let mut proto = Vec::new();
    for seed in 0..5 {
        let data = synthetic_split(30, 10, 2.0, 1.0, seed);
        let (a, _) = train(&data.train_labeled, &data.train_unlabeled, &small_config(seed, LossKind::Etm)).unwrap();
        let (b, _) = train(&data.train_labeled, &data.train_unlabeled, &small_config(seed, LossKind::Prototypical)).unwrap();
        etm.push(one_shot_accuracy(&a, &data, 1000, seed, InferenceRule::TopKVote));
        proto.push(one_shot_accuracy(&b, &data, 1000, seed, InferenceRule::NearestPrototype));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = etm.iter().zip(&proto).filter(|(a, b)| a > b).count();
    let pass = mean(&etm) >= mean(&proto) - 0.005 && wins >= 3;
    verdict(
        pass,
        format!(
            "mean ETM {:.4} vs proto {:.4}, ETM higher in {wins}/5 seeds (need >= proto - 0.005 and >= 3)",
            mean(&etm),
            mean(&proto)
        ),
    )
}

fn semi_supervised_gain() -> Verdict {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let data = synthetic_split(30, 10, 2.0, 0.33, seed);
        let supervised = small_config(seed, LossKind::Etm);
        let mut semi = supervised.clone();
        semi.episode.unlabeled_mode = UnlabeledMode::WeaklyLabeled;
        semi.episode.n_unlabeled = 3;
        semi.warmup_supervised_episodes = 50;
        let (a, _) = train(&data.train_labeled, &data.train_unlabeled, &supervised).unwrap();
        let (b, _) = train(&data.train_labeled, &data.train_unlabeled, &semi).unwrap();
        let sup = one_shot_accuracy(&a, &data, 1000, seed, InferenceRule::TopKVote);
        let ssl = one_shot_accuracy(&b, &data, 1000, seed, InferenceRule::TopKVote);
        if ssl > sup {
            wins += 1;
        }
        pairs.push(format!("{ssl:.4}/{sup:.4}"));
    }
    verdict(wins >= 4, format!("semi/supervised per seed [{}], semi higher in {wins}/5 (need >= 4)", pairs.join(", ")))
}

fn degeneracy_identities() -> Verdict {
    let data = synthetic_split(30, 10, 2.0, 0.33, 11);
    let mut supervised = small_config(11, LossKind::Etm);
    supervised.episodes = 120;
    let mut semi = supervised.clone();
    semi.episode.unlabeled_mode = UnlabeledMode::WeaklyLabeled;
    semi.episode.n_unlabeled = 0;
    let (_, a) = train(&data.train_labeled, &data.train_unlabeled, &supervised).unwrap();
    let (_, b) = train(&data.train_labeled, &data.train_unlabeled, &semi).unwrap();
    let logs_equal = strip(&a) == strip(&b);

    let mut clamped = true;
    for seed in 0..500 {
        let mut r = common::rng(seed);
        let way = r.random_range(2..=6);
        let ep = common::random_raw_episode(&mut r, way, 1, 5, 8);
        let d = mining::distance_matrix(ep.queries.view(), ep.support.view()).unwrap();
        let three = MiningConfig { n_positive: 3, ..MiningConfig::default() };
        let one = MiningConfig { n_positive: 1, ..MiningConfig::default() };
        clamped &= mining::mine(&d, &ep.query_labels, &ep.support_labels, &three).unwrap()
            == mining::mine(&d, &ep.query_labels, &ep.support_labels, &one).unwrap();
    }
    verdict(
        logs_equal && clamped,
        format!("N_R=0 log identical: {logs_equal}; 1-shot n_P=3 == n_P=1 on 500 episodes: {clamped}"),
    )
}

fn determinism_and_checkpoint() -> Verdict {
    let data = synthetic_split(30, 10, 2.0, 0.33, 5);
    let mut cfg = small_config(5, LossKind::Etm);
    cfg.episodes = 80;
    cfg.warmup_supervised_episodes = 20;
    cfg.episode.unlabeled_mode = UnlabeledMode::WeaklyLabeled;
    cfg.episode.n_unlabeled = 3;

    let run = |exec: Execution| {
        let mut t = Trainer::new(&data.train_labeled, &data.train_unlabeled, cfg.clone()).unwrap().with_execution(exec);
        t.run().unwrap();
        (t.checkpoint(), strip(t.log()))
    };
    let (first, log) = run(Execution::default());
    let (second, _) = run(Execution::default());
    let (sequential, _) = run(Execution::Sequential);
    let same_seed = first == second && first == sequential;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.json");
    let mut t = Trainer::new(&data.train_labeled, &data.train_unlabeled, cfg.clone()).unwrap();
    for _ in 0..37 {
        t.step().unwrap();
    }
    t.checkpoint().save(&path).unwrap();
    let mut resumed_log = strip(t.log());
    drop(t);
    let ck = Checkpoint::load(&path).unwrap();
    let mut r = Trainer::resume(&data.train_labeled, &data.train_unlabeled, &ck, None).unwrap();
    r.run().unwrap();
    resumed_log.extend(strip(r.log()));
    let resumed = r.checkpoint() == first && resumed_log == log;

    verdict(
        same_seed && resumed,
        format!("same seed bit-identical (parallel and sequential): {same_seed}; resume at 37/80 matches: {resumed}"),
    )
}

fn lr_schedule() -> Verdict {
    let cfg = TrainConfig::default();
    let got = [0, 1000, 2000].map(|e| lr_at(e, &cfg));
    verdict(got == [1e-3, 5e-4, 2.5e-4], format!("lr at 0/1000/2000 = {got:?}"))
}

fn chance_control() -> Verdict {
    let data = synthetic_split(20, 5, 10.0, 1.0, 0);
    let (net, _) = train(&data.train_labeled, &data.train_unlabeled, &small_config(0, LossKind::Etm)).unwrap();
    let shuffled = data.test.with_shuffled_labels(17).unwrap();
    let cfg = EvalConfig { way: 5, shot: 1, episodes: 1000, seed: 3, ..EvalConfig::default() };
    let acc = evaluate(&net, &shuffled, &cfg).unwrap().mean_accuracy;
    verdict((0.17..=0.23).contains(&acc), format!("shuffled-label 5-way accuracy {acc:.4} over 1000 episodes"))
}

type Criterion = (&'static str, Duration, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        ("mining oracle equivalence", Duration::from_secs(10), mining_oracle),
        ("gradient checks", Duration::from_secs(60), gradient_checks),
        ("supervised synthetic sanity", Duration::from_secs(120), supervised_sanity),
        ("ETM vs prototypical, 1-shot", Duration::from_secs(15 * 60), etm_vs_prototypical),
        ("semi-supervised gain", Duration::from_secs(20 * 60), semi_supervised_gain),
        ("degeneracy identities", Duration::from_secs(120), degeneracy_identities),
        ("determinism and checkpoint resume", Duration::from_secs(120), determinism_and_checkpoint),
        ("learning-rate schedule", Duration::from_secs(1), lr_schedule),
        ("chance-level control", Duration::from_secs(120), chance_control),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let pass = v.pass && took <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {} ({:.1}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
