use coatsim::flow::FlowPolicy;
use coatsim::harness::{
    codec_audit, flow_sim, granularity_comparison, memory_table, optim_ablate, optim_train, AblateConfig,
    CodecAuditConfig, FlowSimConfig, HarnessError, MemoryConfig, Report, TrainConfig, TrainPolicy,
};
use coatsim::Fp8Format;

fn json(r: &impl serde::Serialize) -> String {
    serde_json::to_string(r).unwrap()
}

fn small_ablation() -> AblateConfig {
    AblateConfig {
        seeds: 4,
        size: 4096,
        ..AblateConfig::default()
    }
}

#[test]
fn codec_audit_passes() {
    let a = codec_audit(&CodecAuditConfig::default());
    assert!(a.passed(), "{:?}", a.verdicts);
    assert_eq!(a.table.len(), 3 * 256);
    assert_eq!(a.rows().len(), a.table.len());
    assert_eq!(a.summaries[0].delta_max, 448.0);
    assert_eq!(a.summaries[1].delta_max, 57344.0);
}

#[test]
fn reports_are_deterministic() {
    assert_eq!(json(&optim_ablate(&small_ablation()).unwrap()), json(&optim_ablate(&small_ablation()).unwrap()));
    let cfg = FlowSimConfig {
        seeds: 3,
        ..FlowSimConfig::default()
    };
    assert_eq!(json(&flow_sim(&cfg).unwrap()), json(&flow_sim(&cfg).unwrap()));
    let t = TrainConfig {
        steps: 50,
        ..TrainConfig::default()
    };
    assert_eq!(json(&optim_train(&t).unwrap()), json(&optim_train(&t).unwrap()));
}

#[test]
fn reports_embed_config() {
    let a = optim_ablate(&small_ablation()).unwrap();
    let cfg = a.config();
    assert!(cfg.contains(&("seeds".to_string(), "4".to_string())));
    assert!(cfg.contains(&("size".to_string(), "4096".to_string())));
    let v: serde_json::Value = serde_json::to_value(&a).unwrap();
    assert_eq!(v["config"]["group_size"], 128);
}

#[test]
fn ablation_matrix_shape_and_fp32_column() {
    let a = optim_ablate(&small_ablation()).unwrap();
    assert_eq!(a.cells.len(), 49);
    assert_eq!(a.cell("FP32", "FP32").unwrap().mean_mse, 0.0);
    assert!(a.cell("E4M3", "E4M3").unwrap().mean_mse > 0.0);
    assert_eq!(a.rows().len(), 49);
    assert_eq!(a.columns()[0], "first");
}

#[test]
fn ablation_config_errors() {
    let bad = AblateConfig {
        policies: vec!["E3M4".into()],
        ..small_ablation()
    };
    assert!(matches!(optim_ablate(&bad), Err(HarnessError::Config(_))));
    let bad = AblateConfig {
        seeds: 0,
        ..small_ablation()
    };
    assert!(optim_ablate(&bad).is_err());
}

#[test]
fn train_fp32_matches_oracle_and_policies_run() {
    let t = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let r = optim_train(&t).unwrap();
    assert_eq!(r.runs.len(), 8);
    for run in &r.runs {
        assert_eq!(run.losses.len(), 201);
        assert!(run.losses.iter().all(|l| l.is_finite()));
        if run.policy == TrainPolicy::Fp32 {
            assert!(run.matches_oracle, "{}", run.task);
            assert_eq!(run.relative_gap, 0.0);
        } else {
            assert!(!run.matches_oracle, "{} {:?}", run.task, run.policy);
        }
        // every policy still makes progress
        assert!(run.final_loss < run.losses[0], "{} {:?}", run.task, run.policy);
    }
    assert!(optim_train(&TrainConfig { dim: 60, ..t.clone() }).is_err());
}

#[test]
fn memory_table_default() {
    let m = memory_table(&MemoryConfig::default()).unwrap();
    assert!(m.passed(), "{:?}", m.verdicts);
    let totals: Vec<(String, String)> = m
        .rows()
        .into_iter()
        .filter(|r| r[0] == "Total")
        .map(|r| (r[2].clone(), r[4].clone()))
        .collect();
    assert_eq!(
        totals,
        vec![
            ("22.66".to_string(), "1.00".to_string()),
            ("18.33".to_string(), "1.23".to_string()),
            ("13.33".to_string(), "1.69".to_string())
        ]
    );
}

#[test]
fn flow_sim_small_run() {
    let cfg = FlowSimConfig {
        seeds: 4,
        policies: vec![FlowPolicy::Coat],
        ..FlowSimConfig::default()
    };
    let r = flow_sim(&cfg).unwrap();
    assert_eq!(r.policies.len(), 1);
    assert!(r.policies[0].reconciled);
    assert!(r.policies[0].fd_max_rel_err < 1e-3);
    assert_eq!(r.granularity.len(), 4);
}

#[test]
fn granularity_requires_equal_budget() {
    let cfg = FlowSimConfig {
        block_size: 3,
        ..FlowSimConfig::default()
    };
    assert!(matches!(granularity_comparison(&cfg), Err(HarnessError::Config(_))));
    let cfg = FlowSimConfig {
        group_size: 64,
        block_size: 8,
        seeds: 5,
        format: Fp8Format::E4M3,
        ..FlowSimConfig::default()
    };
    let g = granularity_comparison(&cfg).unwrap();
    assert!(g.iter().all(|r| r.per_group <= r.per_block));
}
