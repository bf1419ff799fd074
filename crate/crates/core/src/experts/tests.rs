use super::*;
use crate::fraction::Fraction;
use proptest::prelude::*;

fn arch() -> ExpertArchConfig {
    ExpertArchConfig::uniform(1, 8, &[1], 16, Fraction::new(1, 2))
}

fn config(n: usize, steps: usize, p: &[f64]) -> MultiExpertConfig {
    let schedule = DiffusionSchedule::linear(steps, 1e-4, 2e-2).unwrap();
    MultiExpertConfig::new(
        schedule.descriptor().clone(),
        p,
        vec![arch(); n],
        TrainingConfig::new(7, 10),
    )
    .unwrap()
}

#[test]
fn intervals_partition_the_range() {
    let iv = make_intervals(4, 1000).unwrap();
    assert_eq!(iv[0], Interval { lo: 0, hi: 250 });
    assert_eq!(iv[3], Interval { lo: 750, hi: 1000 });
    assert!(make_intervals(3, 1000).is_err());
    assert!(make_intervals(0, 1000).is_err());
}

#[test]
fn routing_examples() {
    let cfg = config(4, 1000, &[0.8, 0.4, 0.2, 0.1]);
    assert_eq!(route(0, &cfg).unwrap(), 1);
    assert_eq!(route(249, &cfg).unwrap(), 1);
    assert_eq!(route(250, &cfg).unwrap(), 2);
    assert_eq!(route(999, &cfg).unwrap(), 4);
    assert!(route(1000, &cfg).is_err());
}

#[test]
fn default_probabilities_match_the_reference_set() {
    assert_eq!(default_probabilities(4), vec![0.8, 0.4, 0.2, 0.1]);
    assert_eq!(default_probabilities(1), vec![1.0]);
    let p = default_probabilities(7);
    assert!(p.windows(2).all(|w| w[1] < w[0]));
    assert!((p[6] - 0.1).abs() < 1e-12);
}

#[test]
fn mixture_law_of_soft_experts() {
    let cfg = config(4, 1000, &[0.8, 0.4, 0.2, 0.1]);
    let draws = 100_000;
    for e in &cfg.experts {
        let mut r = rng::stream(3, &[e.n as u64]);
        let hits = (0..draws)
            .filter(|_| e.interval.contains(sample_timestep(e, 1000, &mut r)))
            .count();
        let expected = e.p + (1.0 - e.p) / 4.0;
        let got = hits as f64 / draws as f64;
        assert!((got - expected).abs() < 0.01, "expert {}: {got} vs {expected}", e.n);
    }
}

#[test]
fn hard_expert_stays_in_interval_uniformly() {
    let cfg = config(4, 1000, &[1.0; 4]);
    let e = &cfg.experts[2];
    let mut r = rng::stream(9, &[]);
    let bins = 10;
    let mut counts = vec![0usize; bins];
    let draws = 50_000;
    for _ in 0..draws {
        let t = sample_timestep(e, 1000, &mut r);
        assert!(e.interval.contains(t));
        counts[(t - e.interval.lo) * bins / e.interval.len()] += 1;
    }
    let exp = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - exp).powi(2) / exp).sum();
    // 9 dof, p = 0.001 critical value
    assert!(chi2 < 27.88, "chi2 = {chi2}");
}

#[test]
fn full_range_expert_draws_like_uniform_training() {
    let cfg = config(1, 100, &[0.3]);
    let mut a = rng::stream(5, &[]);
    let mut b = rng::stream(5, &[]);
    for _ in 0..1000 {
        assert_eq!(sample_timestep(&cfg.experts[0], 100, &mut a), b.random_range(0..100));
    }
}

#[test]
fn config_validation() {
    let mut cfg = config(2, 100, &[0.8, 0.1]);
    cfg.validate().unwrap();
    cfg.experts[1].p = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = config(2, 100, &[0.8, 0.1]);
    cfg.experts[0].interval.hi = 40;
    assert!(cfg.validate().is_err());
    let json = serde_json::to_string(&config(2, 100, &[0.8, 0.1])).unwrap();
    let back: MultiExpertConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, config(2, 100, &[0.8, 0.1]));
}

#[test]
fn ddim_plan_ends_clean() {
    let s = DiffusionSchedule::linear(100, 1e-4, 2e-2).unwrap();
    let plan = sampling_plan(&s, SamplerKind::Ddim, 5).unwrap();
    assert_eq!(plan.len(), 5);
    assert_eq!(plan[0].t, 99);
    assert_eq!(plan.last().unwrap().target, DdimTarget::Clean);
    assert!(sampling_plan(&s, SamplerKind::Ddpm, 50).is_err());
    assert_eq!(sampling_plan(&s, SamplerKind::Ddpm, 100).unwrap().len(), 100);
}

fn oracle_opts(sampler: SamplerKind, steps: usize, count: usize) -> SampleOptions {
    SampleOptions {
        sampler,
        steps,
        eta: 0.0,
        count,
        seed: 11,
        image_shape: vec![1, 4, 4],
        chunk: Some(3),
    }
}

fn planted() -> Tensor {
    Tensor::from_fn(&[1, 4, 4], |i| ((i as f32) * 0.37).sin() * 0.8)
}

#[test]
fn oracle_ddim_recovers_planted_image() {
    let cfg = config(4, 1000, &[0.8, 0.4, 0.2, 0.1]);
    let s = cfg.schedule.build().unwrap();
    let oracle = OracleDenoiser {
        x0: planted(),
        schedule: s,
    };
    let out = multi_expert_generate(
        &cfg,
        |_| Ok(Box::new(&oracle) as Box<dyn EpsPredictor>),
        &oracle_opts(SamplerKind::Ddim, 10, 4),
        &Paging::Resident,
    )
    .unwrap();
    for i in 0..4 {
        assert!(out.batch_item(i).max_abs_diff(&planted()) < 1e-3);
    }
}

#[test]
fn sequential_paging_matches_resident() {
    let cfg = config(4, 100, &[0.8, 0.4, 0.2, 0.1]);
    let s = cfg.schedule.build().unwrap();
    let oracle = OracleDenoiser {
        x0: planted(),
        schedule: s,
    };
    let mut opts = oracle_opts(SamplerKind::Ddim, 20, 5);
    opts.eta = 0.5;
    let load = |_| Ok(Box::new(&oracle) as Box<dyn EpsPredictor>);
    let resident = multi_expert_generate(&cfg, load, &opts, &Paging::Resident).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let seq = multi_expert_generate(
        &cfg,
        load,
        &opts,
        &Paging::Sequential {
            spool_dir: dir.path().join("spool"),
        },
    )
    .unwrap();
    assert_eq!(resident, seq);
    opts.chunk = None;
    let whole = multi_expert_generate(&cfg, load, &opts, &Paging::Resident).unwrap();
    assert_eq!(resident, whole);
}

#[test]
fn missing_expert_is_reported() {
    let cfg = config(2, 100, &[0.8, 0.1]);
    let s = cfg.schedule.build().unwrap();
    let oracle = OracleDenoiser {
        x0: planted(),
        schedule: s,
    };
    let err = multi_expert_generate(
        &cfg,
        |n| {
            if n == 2 {
                Err(Error::MissingExpert {
                    expert: 2,
                    reason: "absent".into(),
                })
            } else {
                Ok(Box::new(&oracle) as Box<dyn EpsPredictor>)
            }
        },
        &oracle_opts(SamplerKind::Ddim, 5, 2),
        &Paging::Resident,
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingExpert { expert: 2, .. }));
}

#[test]
fn single_expert_matches_single_model_generation() {
    let cfg = config(1, 50, &[1.0]);
    let s = cfg.schedule.build().unwrap();
    let model = Denoiser::new(&arch(), s.clone(), 4).unwrap();
    let mut opts = oracle_opts(SamplerKind::Ddpm, 50, 2);
    opts.image_shape = vec![1, 4, 4];
    let multi = multi_expert_generate(
        &cfg,
        |_| Ok(Box::new(&model) as Box<dyn EpsPredictor>),
        &opts,
        &Paging::Resident,
    )
    .unwrap();
    let single = generate(&model, &s, &opts).unwrap();
    assert_eq!(multi, single);
}

proptest! {
    #[test]
    fn every_step_routes_to_its_interval(n in 1usize..8, w in 1usize..40, t_frac in 0.0f64..1.0) {
        let steps = n * w;
        let t = ((t_frac * steps as f64) as usize).min(steps - 1);
        let cfg = config(n, steps, &default_probabilities(n));
        let e = route(t, &cfg).unwrap();
        prop_assert!(cfg.experts[e - 1].interval.contains(t));
        prop_assert_eq!(e, t / w + 1);
    }
}
