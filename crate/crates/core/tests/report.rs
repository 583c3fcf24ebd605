//! Golden output for the report renderer. Regenerate the fixtures with
//! `UPDATE_GOLDEN=1 cargo test --test report`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use certspoof::data::Dataset;
use certspoof::evaluation::{
    read_records, run_grid, write_records, AttackKind, AttackParams, CertificationParams, Defense, DefenseKind,
    GoalKind, GridSpec, MaskStrategy, RecordStore,
};
use certspoof::models::LinearClassifier;
use certspoof::report::{plot_svg, render_report, summaries_csv, summaries_from_records, PlotKind};
use certspoof::{Image, Shape};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn generate_records() -> Vec<certspoof::evaluation::TrialRecord> {
    let shape = Shape::new(3, 3, 1);
    let images = (0..8).map(|i| Image::filled(shape, 0.35 + 0.04 * i as f64)).collect();
    let labels = (0..8).map(|i| usize::from(i >= 4)).collect();
    let data = Dataset::new(shape, 2, images, labels).unwrap();
    let clf = LinearClassifier::binary(shape, vec![-1.0; 9], 4.5).unwrap();
    let defense = Defense::from_classifier(DefenseKind::Single, Arc::new(clf), 0.25);
    let spec = GridSpec {
        images: 6,
        epsilons: vec![0.2, 0.6],
        scale_budget: false,
        attacks: vec![AttackKind::Ghostcert, AttackKind::ShadowBounded],
        goals: vec![GoalKind::Untargeted, GoalKind::Targeted],
        mask: MaskStrategy::Full,
        certification: CertificationParams { n: 200, ..Default::default() },
        attack: AttackParams { steps: 10, noise_batch: 4, ..Default::default() },
        ..Default::default()
    };
    run_grid(&data, &[defense], &spec, &mut RecordStore::in_memory()).unwrap().records
}

#[test]
fn renders_the_golden_report() {
    let dir = fixtures();
    let records_path = dir.join("report_records.jsonl");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    if update {
        std::fs::create_dir_all(&dir).unwrap();
        write_records(&records_path, &generate_records()).unwrap();
    }
    let records = read_records(&records_path).unwrap();
    let summaries = summaries_from_records(&records);
    let csv = summaries_csv(&summaries);
    let untargeted: Vec<_> = summaries.iter().filter(|s| s.cell.goal == GoalKind::Untargeted).cloned().collect();
    let svg = plot_svg(&untargeted, PlotKind::Asr, "single, sigma 0.25, untargeted");
    if update {
        std::fs::write(dir.join("report_summary.csv"), &csv).unwrap();
        std::fs::write(dir.join("report_asr.svg"), &svg).unwrap();
    }
    assert_eq!(csv, std::fs::read_to_string(dir.join("report_summary.csv")).unwrap());
    assert_eq!(svg, std::fs::read_to_string(dir.join("report_asr.svg")).unwrap());

    let out = tempfile::tempdir().unwrap();
    let files = render_report(&records, None, out.path(), 4).unwrap();
    assert_eq!(std::fs::read_to_string(&files.summary_csv).unwrap(), csv);
    assert_eq!(files.plots.len(), 4);
    assert!(files.panels.is_empty());
}

#[test]
fn fixture_records_are_current() {
    // the stored records must still be what the grid produces
    let stored = read_records(&fixtures().join("report_records.jsonl")).unwrap();
    let fresh = generate_records();
    assert_eq!(stored.len(), fresh.len());
    for (a, b) in stored.iter().zip(&fresh) {
        assert!(a.same_result(b), "trial {} differs", a.key());
    }
}
