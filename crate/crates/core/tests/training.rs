use chatty_core::data::{gen_blobs, gen_moons, BlobSpec, MoonsSpec};
use chatty_core::model::{DiscInput, TransportMode};
use chatty_core::train::{run, GrlSchedule, RunRecord, TlVariant, TrainConfig, METRICS_HEADER};

fn moons() -> chatty_core::data::DomainPair {
    gen_moons(
        &MoonsSpec {
            n: 200,
            rotation_deg: 30.0,
            noise: 0.1,
            standardize: true,
        },
        7,
    )
    .unwrap()
}

fn short(mut c: TrainConfig) -> TrainConfig {
    c.iterations = 800;
    c.eval_every = 200;
    c.snapshot_iters = vec![0, 800];
    c.weights.lambda2 = 0.0248;
    c
}

fn all_finite(r: &RunRecord) -> bool {
    r.rows.iter().all(|row| {
        [row.l_c, row.l_adv, row.l_tl, row.l_mcc, row.l_total]
            .iter()
            .all(|v| v.is_finite())
    }) && r.final_target_mcc.is_finite()
}

#[test]
fn losses_stay_finite_across_configurations() {
    let pair = moons();
    let mut variants = vec![TrainConfig::default()];
    let mut c = TrainConfig::default();
    c.arch.mode = TransportMode::Single;
    variants.push(c);
    let mut c = TrainConfig::default();
    c.tl_variant = TlVariant::Cosine;
    variants.push(c);
    let mut c = TrainConfig::default();
    c.arch.disc_input = DiscInput::Logits;
    c.grl_schedule = GrlSchedule::Warmup;
    variants.push(c);
    let mut c = TrainConfig::default();
    c.alternating = true;
    c.lr = 0.01;
    variants.push(c);
    for (i, c) in variants.into_iter().enumerate() {
        let out = run(&pair, &short(c)).unwrap();
        assert!(all_finite(&out.record), "variant {i}");
    }
}

#[test]
fn source_accuracy_climbs_on_moons() {
    let pair = moons();
    let c = TrainConfig {
        lr: 0.01,
        ..short(TrainConfig::default())
    };
    let out = run(&pair, &c).unwrap();
    let first = &out.record.rows[0];
    let last = out.record.final_row();
    assert!(last.src_acc >= 0.95, "{last:?}");
    assert!(last.l_c < first.l_c);
}

#[test]
fn blob_shift_is_learnable_from_source_alone_when_small() {
    let pair = gen_blobs(
        &BlobSpec {
            classes: 4,
            n_per_class: 60,
            dim: 3,
            rotation_deg: 5.0,
            translation: vec![0.2, 0.0, 0.1],
            noise: 0.6,
            standardize: true,
        },
        3,
    )
    .unwrap();
    let c = TrainConfig {
        lr: 0.01,
        ..short(TrainConfig::default()).source_only()
    };
    let out = run(&pair, &c).unwrap();
    assert!(out.record.final_row().tgt_acc > 0.9);
}

#[test]
fn record_serialisations_agree() {
    let pair = moons();
    let out = run(&pair, &short(TrainConfig::default())).unwrap();
    let csv = out.record.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), out.record.rows.len());
    let back: RunRecord = serde_json::from_str(&out.record.to_json().unwrap()).unwrap();
    assert_eq!(back, out.record);
}
