use proptest::prelude::*;
use vrga_core::select::{default_k, efr_guided_selection};
use vrga_core::steer::reweight_row;
use vrga_core::toy::task::dataset;
use vrga_core::toy::{Hook, TaskKind, ToyConfig, ToyModel};
use vrga_core::{
    generate, AttentionDump, HeadId, HeadTable, MetricsConfig, Plan, ReweightPlan,
    RowCheck, SelectionConfig, SynthSpec,
};

fn tiny(seed: u64) -> ToyConfig {
    ToyConfig {
        d_model: 16,
        layers: 3,
        heads: 4,
        d_ff: 16,
        grid_rows: 3,
        grid_cols: 3,
        question_len: 2,
        seed,
        ..ToyConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_dumps_pass_strict_validation(seed in any::<u64>()) {
        let (dump, labels) = generate(&SynthSpec::standard(seed)).unwrap();
        let again = AttentionDump::new(dump.shape(), dump.layout().clone(), dump.data().to_vec(), RowCheck::Strict);
        prop_assert!(again.is_ok());
        let lay = dump.layout();
        prop_assert!(labels.region.iter().all(|&t| lay.is_visual(t)));
        prop_assert!(labels.vision_heads.iter().all(|h| !labels.sink_heads.contains(h)));
    }

    #[test]
    fn selected_vision_and_background_heads_are_disjoint(seed in any::<u64>()) {
        let (dump, _) = generate(&SynthSpec::standard(seed)).unwrap();
        let table = HeadTable::from_dump(&dump, None, &MetricsConfig::default()).unwrap();
        let sel = efr_guided_selection(&table, &SelectionConfig::for_heads(dump.heads())).unwrap();
        prop_assert!(sel.background_heads.iter().all(|h| !sel.vision_heads.contains(h)));
        for l in 0..dump.layers() {
            prop_assert!(sel.vision_in_layer(l).count() <= default_k(dump.heads()));
        }
    }

    #[test]
    fn toy_attention_rows_are_stochastic(seed in 0u64..1000, index in 0usize..8) {
        let cfg = tiny(seed);
        let model = ToyModel::init(&cfg).unwrap();
        let s = &dataset(&cfg, TaskKind::distract(), 8, seed)[index];
        let out = model.forward(s, Hook::None).unwrap();
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let sum: f64 = out.qt_row(l, h).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn interventions_touch_only_planned_rows(
        seed in 0u64..1000,
        layer in 0usize..3,
        head in 0usize..4,
        gamma in 0.0f64..3.0,
    ) {
        let cfg = tiny(seed);
        let model = ToyModel::init(&cfg).unwrap();
        let s = &dataset(&cfg, TaskKind::FindPatch, 1, seed)[0];
        let plan = ReweightPlan::new(vec![HeadId::new(layer, head)], vec![1 + s.cell], gamma);
        let clean = model.forward(s, Hook::None).unwrap();
        let steered = model.forward(s, Hook::Plan(&Plan::Reweight(plan.clone()))).unwrap();
        // layers up to the planned one see identical inputs
        for l in 0..=layer {
            for h in 0..cfg.heads {
                if (l, h) == (layer, head) {
                    prop_assert_eq!(steered.qt_row(l, h), &reweight_row(clean.qt_row(l, h), &plan).unwrap()[..]);
                } else {
                    prop_assert_eq!(steered.qt_row(l, h), clean.qt_row(l, h));
                }
            }
        }
    }

    #[test]
    fn toy_runs_are_seed_determined(seed in 0u64..1000) {
        let cfg = tiny(seed);
        let a = ToyModel::init(&cfg).unwrap();
        let b = ToyModel::init(&cfg).unwrap();
        prop_assert_eq!(a.params(), b.params());
        let s = &dataset(&cfg, TaskKind::FindPatch, 1, seed)[0];
        let (da, db) = (a.forward(s, Hook::None).unwrap(), b.forward(s, Hook::None).unwrap());
        prop_assert_eq!(da.qt_row(0, 0), db.qt_row(0, 0));
    }
}
