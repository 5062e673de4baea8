use dcac_core::dac::DomainCode;
use dcac_core::eval::{confusion_matrix, dsc, linear_probe_accuracy, mean_diagonal, ranking_table, two_sample_ttest, Report};
use dcac_core::eval::CaseResult;

// Welch worked examples; reference values from scipy.stats.ttest_ind(equal_var=False).
const A1: [f64; 10] = [19.8, 20.4, 19.6, 17.8, 18.5, 18.9, 18.3, 18.9, 19.5, 22.0];
const B1: [f64; 20] = [
    28.2, 26.6, 20.1, 23.3, 25.2, 22.1, 17.7, 27.6, 20.6, 13.7, 23.2, 17.5, 20.6, 18.0, 23.9, 21.6, 24.3, 20.4, 23.9, 13.3,
];
const A2: [f64; 15] = [27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4];
const B2: [f64; 15] = [27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 20.5, 24.4];

#[test]
fn welch_matches_reference_examples() {
    let r = two_sample_ttest(&A1, &B1).unwrap();
    assert!((r.t - -2.225512039969852).abs() < 1e-3, "t = {}", r.t);
    assert!((r.p_value - 0.035484530830010325).abs() < 1e-3, "p = {}", r.p_value);
    let r = two_sample_ttest(&A2, &B2).unwrap();
    assert!((r.t - -2.455356398286006).abs() < 1e-3, "t = {}", r.t);
    assert!((r.p_value - 0.021378001462866985).abs() < 1e-3, "p = {}", r.p_value);
}

#[test]
fn welch_is_symmetric_in_its_arguments() {
    let ab = two_sample_ttest(&A1, &B1).unwrap();
    let ba = two_sample_ttest(&B1, &A1).unwrap();
    assert_eq!(ab.t, -ba.t);
    assert!((ab.p_value - ba.p_value).abs() < 1e-15);
}

#[test]
fn jittered_separated_groups() {
    let a = [0.0, 0.001, -0.001, 0.0005];
    let b = [1.0, 1.001, 0.999, 1.0005];
    assert!(two_sample_ttest(&a, &b).unwrap().p_value < 0.01);
}

#[test]
fn dsc_worked_example() {
    let pred = [1u8, 1, 1, 1, 0, 0, 0, 0];
    let gt = [1u8, 1, 0, 0, 1, 1, 0, 0];
    assert_eq!(dsc(&pred, &gt, 1).unwrap(), 50.0);
    assert_eq!(dsc(&[0; 8], &[0; 8], 1).unwrap(), 100.0);
}

#[test]
fn confusion_rows_sum_to_one() {
    let truth = [0, 0, 0, 1, 1, 2, 2, 2, 2];
    let pred = [0, 1, 0, 1, 1, 2, 0, 2, 1];
    let m = confusion_matrix(&truth, &pred, 3);
    for row in &m {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!((m[0][0] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(mean_diagonal(&confusion_matrix(&truth, &truth, 3)), 1.0);
}

#[test]
fn ranking_columns_sum_to_hundred() {
    let codes: Vec<DomainCode> = [[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.5, 0.1, 0.4], [0.2, 0.3, 0.5]]
        .iter()
        .map(|p| DomainCode::new(p.to_vec()).unwrap())
        .collect();
    let t = ranking_table(&codes);
    for r in 0..3 {
        let col: f64 = t.iter().map(|row| row[r]).sum();
        assert!((col - 100.0).abs() < 1e-9);
    }
    assert!((t[0][0] - 50.0).abs() < 1e-9);
}

#[test]
fn uniform_codes_rank_by_index() {
    let codes = vec![DomainCode::uniform(2); 5];
    let t = ranking_table(&codes);
    assert_eq!(t.len(), 2);
    assert!((t[0][0] - 100.0).abs() < 1e-9 && (t[1][1] - 100.0).abs() < 1e-9);
}

#[test]
fn probe_separates_shifted_clusters() {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let k = i % 3;
        let jitter = ((i * 37) % 11) as f64 / 11.0 - 0.5;
        feats.push(vec![k as f64 * 3.0 + jitter, jitter * 0.5]);
        labels.push(k);
    }
    assert!(linear_probe_accuracy(&feats, &labels, 5, 0).unwrap() > 0.95);
}

fn case(domain: usize, id: &str, d: f64) -> CaseResult {
    CaseResult {
        case_id: id.into(),
        domain_id: domain,
        dsc: vec![d],
        asd: vec![Some(1.0)],
        code: None,
    }
}

#[test]
fn report_average_is_mean_of_domain_means() {
    let cases = vec![
        case(0, "a", 90.0),
        case(0, "b", 80.0),
        case(0, "c", 70.0),
        case(1, "d", 50.0),
    ];
    let r = Report::from_cases("x", 2, cases);
    assert!((r.mean_dsc() - (80.0 + 50.0) / 2.0).abs() < 1e-12);
    let back: Report = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}
