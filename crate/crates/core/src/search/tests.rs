use super::*;
use crate::network::checkpoint::save_checkpoint;

fn fmt(s: &str) -> NumericFormat {
    s.parse().unwrap()
}

fn blob_config(steps: u64, seed: u64) -> SearchConfig {
    SearchConfig {
        model: ModelSpec::Preset("mlp-2x16".into()),
        data: DataSource::Blobs {
            classes: 3,
            dims: 6,
            n_per_class: 100,
            separation: 4.0,
            seed: 0,
        },
        search_space: SearchSpace::FliqsSInt,
        total_steps: steps,
        act_quant_start_fraction: 0.2,
        cost_target: CostTarget::Interpolate {
            low: fmt("INT4"),
            high: fmt("INT8"),
            fraction: 0.5,
        },
        gamma: -1.0,
        controller: ControllerConfig::default(),
        trainer: TrainerConfig {
            batch_size: 16,
            ..TrainerConfig::default()
        },
        seed,
    }
}

#[test]
fn config_schema_rejects_unknown_keys() {
    let text = r#"{"model":{"preset":"mlp-1x8"},
        "data":{"blobs":{"classes":2,"dims":3,"n_per_class":10,"separation":1.0}},
        "total_steps":10,"cost_target":{"uniform":"INT8"}}"#;
    let cfg: SearchConfig = serde_json::from_str(text).unwrap();
    assert_eq!(cfg.search_space, SearchSpace::FliqsSInt);
    assert_eq!(cfg.gamma, -1.0);
    assert_eq!(cfg.act_quant_start_fraction, 0.2);
    let round: SearchConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(round, cfg);

    let bad = text.replace("\"total_steps\"", "\"foo\":1,\"total_steps\"");
    let err = serde_json::from_str::<SearchConfig>(&bad).unwrap_err().to_string();
    assert!(err.contains("foo"), "{err}");
    let bad = text.replace("\"separation\":1.0", "\"separation\":1.0,\"sep\":2");
    assert!(serde_json::from_str::<SearchConfig>(&bad).is_err());
    let bad = text.replace("\"lr\"", "").replace("\"total_steps\":10", "\"total_steps\":10,\"trainer\":{\"lr\":1}");
    assert!(serde_json::from_str::<SearchConfig>(&bad).is_err());
}

#[test]
fn invalid_fractions_are_config_errors() {
    let mut cfg = blob_config(10, 0);
    cfg.act_quant_start_fraction = 1.5;
    assert!(matches!(cfg.validate(), Err(SearchError::Config(_))));
    let mut cfg = blob_config(10, 0);
    cfg.total_steps = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn cost_targets_resolve() {
    let cfg = blob_config(10, 0);
    let ds = cfg.data.load().unwrap();
    let net = cfg.build_network(&ds).unwrap();
    let macs = net.manifest().total_macs() as f64;
    assert_eq!(CostTarget::Uniform(fmt("INT8")).resolve(&net).unwrap(), 64.0 * macs);
    assert_eq!(cfg.cost_target.resolve(&net).unwrap(), 40.0 * macs);
    assert_eq!(CostTarget::Gbops(2.0).resolve(&net).unwrap(), 2e9);
    assert!(CostTarget::Bops(0.0).resolve(&net).is_err());
}

#[test]
fn single_format_space_makes_reward_equal_quality() {
    let mut cfg = blob_config(40, 1);
    cfg.search_space = SearchSpace::Custom(vec![fmt("INT8")]);
    cfg.cost_target = CostTarget::Uniform(fmt("INT8"));
    let r = run_search(&cfg).unwrap();
    assert_eq!(r.trace.len(), 40);
    for t in &r.trace {
        assert_eq!(t.reward, t.quality);
        assert!((0.0..=1.0).contains(&t.quality));
    }
}

#[test]
fn bandit_degenerate_search_finds_designated_formats() {
    let designated = [fmt("INT4"), fmt("BF16"), fmt("INT8")];
    for seed in 0..10 {
        let mut cfg = blob_config(3000, seed);
        cfg.gamma = 0.0;
        cfg.trainer.freeze_weights = true;
        let data = cfg.data.load().unwrap();
        let mut hooks = SearchHooks {
            quality: Some(Box::new(|_, archs: &[ArchChoice]| {
                archs.iter().zip(&designated).filter(|(a, d)| a.format == **d).count() as f64 / 3.0
            })),
        };
        let r = run_search_on(&cfg, &data, &mut hooks).unwrap();
        let got: Vec<_> = r.final_archs.iter().map(|a| a.format).collect();
        assert_eq!(got, designated, "seed {seed}");
    }
}

#[test]
fn trace_is_complete_and_phases_are_ordered() {
    let cfg = blob_config(60, 2);
    let r = run_search(&cfg).unwrap();
    let steps: Vec<u64> = r.trace.iter().map(|t| t.step).collect();
    assert_eq!(steps, (0..60).collect::<Vec<_>>());
    let start = cfg.act_quant_start_step();
    assert_eq!(start, 12);
    for t in &r.trace {
        assert_eq!(t.act_quant, t.step >= start);
    }
    let warmup_end = (0.25 * 60.0) as usize;
    let first = &r.trace[0];
    for t in &r.trace[..=warmup_end] {
        assert_eq!(t.policy_updated, t.step as usize >= warmup_end);
        assert_eq!(t.pmax, first.pmax);
        assert_eq!(t.entropy, first.entropy);
    }
    assert!(r.trace[warmup_end + 1..].iter().all(|t| t.policy_updated));
    assert_ne!(r.trace.last().unwrap().entropy, first.entropy);
    let argmax: Vec<ArchChoice> = r
        .final_probs
        .iter()
        .zip(&r.options)
        .map(|(p, o)| {
            let mut best = 0;
            for j in 1..p.len() {
                if p[j] > p[best] {
                    best = j;
                }
            }
            o[best]
        })
        .collect();
    assert_eq!(argmax, r.final_archs);
}

#[test]
fn identical_runs_give_identical_traces() {
    let cfg = blob_config(50, 3);
    let csv = |r: &SearchResult| {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &r.layer_names, &r.trace).unwrap();
        buf
    };
    let a = run_search(&cfg).unwrap();
    let b = run_search(&cfg).unwrap();
    assert_eq!(csv(&a), csv(&b));
    let mut other = cfg.clone();
    other.seed = 4;
    assert_ne!(csv(&a), csv(&run_search(&other).unwrap()));
    let text = String::from_utf8(csv(&a)).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("step,reward,quality,cost_gbops,entropy,beta,loss,advantage,switch_rms,act_quant"));
    assert!(header.ends_with("dense3.arch,dense3.argmax,dense3.pmax"));
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn served_model_round_trips() {
    let cfg = blob_config(80, 5);
    let data = cfg.data.load().unwrap();
    let r = run_search_on(&cfg, &data, &mut SearchHooks::default()).unwrap();
    let served = serve_config(&r);
    assert_eq!(served.layers.len(), 3);
    let names: Vec<_> = served.layers.iter().map(|l| l.name.as_str()).collect();
    assert_eq!(names, ["dense1", "dense2", "dense3"]);
    for (l, a) in served.layers.iter().zip(&r.final_archs) {
        assert_eq!(l.format, a.format);
        assert!(SearchSpace::FliqsSInt.formats().contains(&l.format));
    }
    let json = serde_json::to_string(&served).unwrap();
    let back: ServedConfig = serde_json::from_str(&json).unwrap();
    let mut weights = Vec::new();
    save_checkpoint(&r.network, &mut weights).unwrap();
    let model = back.load(&weights[..]).unwrap();
    let plan = BatchPlan {
        batch_size: cfg.trainer.batch_size,
        seed: derive_seed(cfg.seed, 2),
        validation_fraction: cfg.trainer.validation_fraction,
    };
    let split = plan.split(data.len()).unwrap();
    let acc = model.evaluate(&data, &split.validation, 7).unwrap();
    assert_eq!(acc, r.served_accuracy);
    assert!(r.served_accuracy > 0.5, "{}", r.served_accuracy);
}

#[test]
fn uniform_runs_and_sweeps() {
    let cfg = blob_config(30, 0);
    let data = cfg.data.load().unwrap();
    let r = run_uniform_on(&cfg, &data, fmt("INT8")).unwrap();
    assert!(r.final_archs.iter().all(|a| a.format == fmt("INT8")));
    assert!(r.trace.iter().all(|t| t.cost == r.served_cost));

    let fp8: Vec<NumericFormat> = ["E1M6", "E2M5", "E3M4", "E4M3", "E5M2"].iter().map(|s| fmt(s)).collect();
    let rows = uniform_sweep(&cfg, &data, &fp8, &[0], 2).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.error.is_none()));
    assert_eq!(rows[3].key, "E4M3");

    let one = pareto_sweep(&cfg, &data, &[CostTarget::Uniform(fmt("INT8"))], &[0], 1).unwrap();
    assert_eq!(one.len(), 1);
    let grid = pareto_sweep(&cfg, &data, &[CostTarget::Uniform(fmt("INT4")), CostTarget::Uniform(fmt("INT8"))], &[0, 1], 3)
        .unwrap();
    assert_eq!(grid.len(), 4);
    assert_eq!((grid[1].key.as_str(), grid[1].seed), ("uniform-INT4", 1));
    assert!(pareto_sweep(&cfg, &data, &[], &[0], 1).is_err());
}

#[test]
fn pool_preserves_order() {
    let out = run_pool(20, 4, |i| i * i);
    assert_eq!(out, (0..20).map(|i| i * i).collect::<Vec<_>>());
    assert!(run_pool(0, 3, |i| i).is_empty());
}
