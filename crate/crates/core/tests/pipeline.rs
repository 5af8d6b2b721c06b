//! Simulate, export, read back and measure again.

use trajcal_core::export::{read_report, write_dataset, Formats, GpsSource, Products};
use trajcal_core::geodata::read_gps_tsv;
use trajcal_core::metrics::{compute_metrics_with, measure_dataset, MeasureConfig};
use trajcal_core::simulate::{self, ParamSpec, SimConfig};

#[test]
fn exported_gps_measures_like_the_simulation() {
    let spec = ParamSpec::builtin();
    let cfg = SimConfig {
        agents: 15,
        days: 20,
        ..SimConfig::default()
    };
    let measure = MeasureConfig {
        min_staypoints: 30,
        ..MeasureConfig::default()
    };
    let out = simulate::run(&spec, &spec.defaults(), &cfg, 5).unwrap();
    let direct = simulate::sim_metrics(&out, &measure).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let products = Products {
        label: "pipeline".into(),
        staypoints: &out.staypoints,
        gps: GpsSource::Tracks(out.gps.as_deref().unwrap()),
        run_meta: Some(&out.meta),
        metrics: Some(direct),
        target: None,
        wall_clock_seconds: 0.0,
    };
    let report = write_dataset(&products, dir.path(), Formats::default()).unwrap();
    assert_eq!(read_report(dir.path()).unwrap(), report);

    let ds = read_gps_tsv(&dir.path().join("gps.tsv")).unwrap();
    assert_eq!(ds.n_points(), report.n_gps);
    let m = measure_dataset(&ds, &measure);
    let again = compute_metrics_with(&m.trips, measure.ada_mode).unwrap();
    assert_eq!(again, direct);
}
