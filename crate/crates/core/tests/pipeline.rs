mod common;

use slimformer::pipeline::{
    ablate_components, ablate_orderings, all_orderings, reference_orderings, run_pipeline, PipelineConfig, Task, Workbench,
    DEFAULT_ORDERING,
};

#[test]
fn default_ordering_runs_end_to_end() {
    let wb = Workbench::prepare(&common::tiny_pipeline_config(3), None).unwrap();
    let run = run_pipeline(&DEFAULT_ORDERING, &wb).unwrap();
    let r = &run.report;
    assert_eq!(r.stages.len(), 4);
    let budget = r.budget;
    assert!(r.stages[0].memory_bytes <= budget.max_memory_bytes);
    assert!(r.student.parameters <= r.teacher.parameters);
    assert!(r.retention.row("accuracy").is_some());
    assert!(r.student.green.is_consistent());
    // the final student carries int8 weights
    assert_eq!(run.student.precision(), slimformer::model::Precision::Int8Weights);
    let json = serde_json::to_string(r).unwrap();
    let back: slimformer::pipeline::PipelineReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.student.config, r.student.config);
}

#[test]
fn orderings_repeat_bit_identically() {
    let wb = Workbench::prepare(&common::tiny_pipeline_config(5), None).unwrap();
    let a = ablate_orderings(&reference_orderings(), &wb).unwrap();
    common::check_ordering_table(&a, 3).unwrap();
    let wb2 = Workbench::prepare(&common::tiny_pipeline_config(5), None).unwrap();
    let b = ablate_orderings(&reference_orderings(), &wb2).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.final_config, y.final_config);
    }
    assert_eq!(all_orderings().len(), 6);
}

#[test]
fn component_ablation_has_three_rows() {
    let wb = Workbench::prepare(&common::tiny_pipeline_config(2), None).unwrap();
    let (report, run) = ablate_components(&wb).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[2].config, run.report.student.config);
    assert!(report.render().contains("full pipeline"));
}

#[test]
fn lm_task_runs() {
    let c = PipelineConfig { task: Task::Lm, min_len: 3, max_len: 11, ..common::tiny_pipeline_config(4) };
    let wb = Workbench::prepare(&c, None).unwrap();
    let run = run_pipeline(&DEFAULT_ORDERING, &wb).unwrap();
    assert!(run.report.student.val.lm.is_some());
    assert!(run.report.retention.row("token_accuracy").is_some());
}

#[test]
fn wrong_teacher_checkpoint_rejected() {
    let c = common::tiny_pipeline_config(1);
    let other = PipelineConfig { teacher_layers: 1, ..c.clone() };
    let t = slimformer::model::build_model(&other.teacher_arch(), 1).unwrap();
    assert!(Workbench::prepare(&c, Some(t)).is_err());
}
