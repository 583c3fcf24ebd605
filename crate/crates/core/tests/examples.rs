//! Every example must run to completion.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));

            #[test]
            fn runs() {
                main().unwrap();
            }
        }
    };
}

example!(certify);
example!(ingest);
example!(train_checkpoint);
example!(salient_masks);
example!(ghostcert_attack);
example!(shadow_baseline);
example!(evaluate_grid);
example!(mask_ablation);
example!(render_report);
example!(run_config);
