use mpae::harness::gradcheck::{component_names, gradcheck, GradcheckOptions};

#[test]
fn every_component_passes() {
    let report = gradcheck(&["all".to_string()], &GradcheckOptions::default()).unwrap();
    print!("{}", report.table());
    assert_eq!(report.results.len(), component_names().len());
    assert!(report.passed);
    assert!(report.results.iter().all(|r| r.instances >= 20));
}

#[test]
fn corrupted_tv_gradient_is_reported() {
    let opts = GradcheckOptions { instances: 3, corrupt: vec!["tv_loss".into()], ..Default::default() };
    let names = vec!["tv_loss".to_string(), "entropy_loss".to_string()];
    let report = gradcheck(&names, &opts).unwrap();
    assert!(!report.passed);
    let failed: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert_eq!(failed, ["tv_loss"]);
    assert!(report.table().contains("FAIL"));
}

#[test]
fn empty_list_passes_with_warning() {
    let report = gradcheck(&[], &GradcheckOptions::default()).unwrap();
    assert!(report.passed);
    assert!(report.results.is_empty());
    assert_eq!(report.warnings.len(), 1);
}

#[test]
fn unknown_component_is_an_error() {
    assert!(gradcheck(&["nope".to_string()], &GradcheckOptions::default()).is_err());
}
