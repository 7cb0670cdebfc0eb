macro_rules! example {
    ($module:ident, $test:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $test() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example!(zero_shot, zero_shot_runs, "zero_shot.rs");
example!(source_prompts, source_prompts_runs, "source_prompts.rs");
example!(confidence_bank, confidence_bank_runs, "confidence_bank.rs");
example!(dual_branch, dual_branch_runs, "dual_branch.rs");
example!(objectives, objectives_runs, "objectives.rs");
example!(synthetic_adaptation, synthetic_adaptation_runs, "synthetic_adaptation.rs");
example!(staged_pipeline, staged_pipeline_runs, "staged_pipeline.rs");
example!(ablation_sweep, ablation_sweep_runs, "ablation_sweep.rs");
example!(report, report_runs, "report.rs");
