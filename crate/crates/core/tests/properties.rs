use flowplan::codebook::CodebookSpec;
use flowplan::embedding::{train_embeddings, EmbedTrainConfig};
use flowplan::flow::{examples_from_scenes, mean_ce_at, toy_scenes, train_flow, FlowTrainConfig};
use flowplan::net::{Arch, PolicyParams};
use flowplan::path::{CoordinateSpace, GibbsSchedule};

#[test]
fn ce_near_the_data_end_is_lower_after_training() {
    let spec = CodebookSpec::desk();
    let space = CoordinateSpace::trajectory(spec).unwrap();
    let embed = EmbedTrainConfig {
        dim: 8,
        steps: 20_000,
        ..EmbedTrainConfig::default()
    };
    let table = train_embeddings(&spec, &embed).unwrap().table;
    let arch = Arch {
        d_in: 8,
        hidden: 64,
        ..Arch::desk()
    };
    let params = PolicyParams::init(arch, spec, &table, 1).unwrap();
    let data = examples_from_scenes(&toy_scenes(64, 0, &space).unwrap(), &space).unwrap();
    let sched = GibbsSchedule::default();
    let cfg = FlowTrainConfig {
        lr: 1e-3,
        steps: 400,
        batch: 32,
        ..FlowTrainConfig::default()
    };
    let (trained, _) = train_flow(&data, params, &space, &sched, &cfg, |_, _| Ok(())).unwrap();
    let early = mean_ce_at(&trained, &data, &space, &sched, (0.0, 0.05), 1000, 3).unwrap();
    let late = mean_ce_at(&trained, &data, &space, &sched, (0.95, 0.999), 1000, 4).unwrap();
    assert!(late <= early, "late {late} vs early {early}");
    assert!(late >= 0.0);
}
