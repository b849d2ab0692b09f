use mvmcad_core::gradcheck::{check_modules, CheckOptions, Module, Outcome, TOLERANCE};
use mvmcad_core::aam::AamConfig;
use mvmcad_core::backbone::BackboneConfig;
use mvmcad_core::decoder::DecoderConfig;
use mvmcad_core::model::ModelConfig;

fn small() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            group_split: [vec![0], vec![1]],
            ..Default::default()
        },
        decoder: DecoderConfig { depth: 2, heads: 2, mlp_ratio: 2 },
        aam: AamConfig { heads: 2, ..Default::default() },
        ..ModelConfig::default()
    }
}

#[test]
fn default_model_passes_every_module() {
    let checks = check_modules(&ModelConfig::default(), &CheckOptions::default()).unwrap();
    assert_eq!(checks.iter().map(|c| c.module).collect::<Vec<_>>(), Module::ALL);
    for c in &checks {
        let err = c.max_rel_error.unwrap();
        assert_eq!(c.outcome, Outcome::Pass, "{}: {err:e} at {:?}", c.module.name(), c.worst_input);
        assert!(err <= TOLERANCE);
        assert!(c.coordinates > 0);
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    for module in Module::ALL {
        let opts = CheckOptions { corrupt: Some(module), ..CheckOptions::default() };
        let checks = check_modules(&small(), &opts).unwrap();
        for c in &checks {
            let expect = if c.module == module { Outcome::Fail } else { Outcome::Pass };
            assert_eq!(c.outcome, expect, "corrupting {} affected {}", module.name(), c.module.name());
        }
    }
}

#[test]
fn switched_off_modules_are_skipped() {
    let mut config = small();
    config.toggles.sfe_enabled = false;
    config.toggles.aam_enabled = false;
    config.toggles.cfl_enabled = false;
    let checks = check_modules(&config, &CheckOptions::default()).unwrap();
    let outcome = |m| checks.iter().find(|c| c.module == m).unwrap().outcome;
    assert_eq!(outcome(Module::PriorGate), Outcome::Skipped);
    assert_eq!(outcome(Module::Aam), Outcome::Skipped);
    assert_eq!(outcome(Module::Cfl), Outcome::Skipped);
    assert_eq!(outcome(Module::Decoder), Outcome::Pass);
}

#[test]
fn results_are_seed_deterministic() {
    let opts = CheckOptions { seed: 9, ..CheckOptions::default() };
    let a = check_modules(&small(), &opts).unwrap();
    let b = check_modules(&small(), &opts).unwrap();
    assert_eq!(a, b);
}
