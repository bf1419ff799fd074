use std::path::Path;

use clap::Parser;

use super::*;

#[test]
fn shipped_desk_config_matches_builder() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.json");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg, RunConfig::desk());
    assert_eq!(cfg.multi_expert().unwrap().num_experts(), 4);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = RunConfig::desk();
    let back = RunConfig::parse(Path::new("x.json"), &cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn parse_errors_name_the_field() {
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
    v["training"]["batch_size"] = serde_json::json!("sixteen");
    let err = RunConfig::parse(Path::new("bad.json"), &v.to_string()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Format { .. }));
    assert!(msg.contains("training.batch_size"), "{msg}");

    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
    v["sampler"]["colour"] = serde_json::json!(1);
    assert!(RunConfig::parse(Path::new("bad.json"), &v.to_string()).is_err());
}

#[test]
fn invalid_partition_is_rejected() {
    let mut cfg = RunConfig::desk();
    cfg.experts.pop();
    cfg.schedule.steps = 1000;
    let three = cfg.to_json().unwrap();
    assert!(
        RunConfig::parse(Path::new("three.json"), &three).is_err(),
        "1000 % 3 != 0"
    );
}

#[test]
fn exit_codes_follow_error_kind() {
    assert_eq!(
        exit_code(&Error::MissingExpert {
            expert: 2,
            reason: "gone".into()
        }),
        EXIT_MISSING
    );
    assert_eq!(
        exit_code(&Error::NumericalAbort {
            step: 3,
            t: 10,
            loss: f64::NAN
        }),
        EXIT_NUMERIC
    );
    assert_eq!(exit_code(&Error::NonFinite { op: "mse" }), EXIT_NUMERIC);
    assert_eq!(exit_code(&Error::Config("bad".into())), EXIT_USAGE);
}

#[test]
fn command_line_parses() {
    let cli = Cli::try_parse_from([
        "meme",
        "sample",
        "--run",
        "r",
        "--out",
        "o",
        "--sampler",
        "ddpm",
        "--steps",
        "1000",
        "--resident-experts",
        "1",
    ])
    .unwrap();
    match cli.command {
        Command::Sample(a) => {
            assert!(matches!(a.sampler, Some(SamplerArg::Ddpm)));
            assert_eq!(a.resident_experts, Some(1));
        }
        _ => panic!("wrong subcommand"),
    }
    let cli = Cli::try_parse_from([
        "meme",
        "analyze",
        "feature-spectrum",
        "--run",
        "r",
        "--models",
        "1,4,extra",
        "--t",
        "125,875",
        "--out",
        "f.csv",
    ])
    .unwrap();
    match cli.command {
        Command::Analyze {
            kind: AnalyzeKind::FeatureSpectrum { models, common, .. },
        } => {
            assert_eq!(models, ["1", "4", "extra"]);
            assert_eq!(common.t, Some(vec![125, 875]));
        }
        _ => panic!("wrong subcommand"),
    }
    assert!(Cli::try_parse_from(["meme", "train", "--out", "r"]).is_err());
}

#[test]
fn model_items_resolve() {
    assert_eq!(
        resolve_model("3", Some(Path::new("run"))).unwrap(),
        expert_dir(Path::new("run"), 3)
    );
    assert_eq!(resolve_model("ckpt/a", None).unwrap(), Path::new("ckpt/a"));
    assert!(resolve_model("3", None).is_err());
}
