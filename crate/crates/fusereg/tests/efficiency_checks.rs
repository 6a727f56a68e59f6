//! Efficiency-module checks: the K operator's algebraic identities, basis
//! construction on simulated data, h_opt behavior, and tau_opt
//! self-consistency.

use nalgebra::{DMatrix, DVector};

use fusereg::data_model::{ColumnSchema, Record};
use fusereg::design::parse_terms;
use fusereg::efficiency::{
    h_opt_binary, k_operator, tau_opt, Basis, BasisFamily, BasisSpec,
};
use fusereg::estimating::{solve, u_dr, u_rows, EstimatorKind, GSpec, SolveOptions};
use fusereg::inference::{sandwich_covariance, SandwichOptions};
use fusereg::nuisance::{
    estimate_sigma_y, fit_imputation, fit_propensity, ImputationFit, OutcomeFamily, OutcomeModel,
    PropensityFit,
};
use fusereg::quadrature::GaussHermite;
use fusereg::simharness::{generate_dataset_stream, DgpParams};
use fusereg::stats::expit;

const SEED: u64 = 4040;

fn schema() -> ColumnSchema {
    ColumnSchema::new(
        vec!["A".into(), "C".into()],
        vec!["L".into()],
        "Y",
        "R",
        true,
    )
    .unwrap()
}

fn linear_outcome(beta: &[f64], sigma_y: Option<f64>) -> OutcomeModel {
    OutcomeModel::new(
        OutcomeFamily::LinearNormal,
        parse_terms(&["1", "A", "C"]).unwrap(),
        DVector::from_row_slice(beta),
        sigma_y,
    )
    .unwrap()
}

fn reference_fits(
    ds: &fusereg::data_model::FusedDataset,
) -> (PropensityFit, ImputationFit) {
    (
        fit_propensity(ds, &parse_terms(&["1", "A", "C"]).unwrap()).unwrap(),
        fit_imputation(ds, &parse_terms(&["1", "A", "C", "A*C"]).unwrap()).unwrap(),
    )
}

#[test]
fn k_annihilates_functions_of_v_alone() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 200, SEED, 0).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let outcome = linear_outcome(&[0.5, -0.5, 1.0, 1.5], Some(0.4));
    // constant and V-monomial members of the degree-2 polynomial basis
    let basis = Basis::polynomial(8, 2);
    let s = schema();
    for row in ds.rows().iter().take(40) {
        let k = k_operator(&basis, &outcome, &prop, &imp, &s, row).unwrap();
        // positions of 1, a, c, a^2 in the degree-graded order
        for idx in [0, 2, 3, 7] {
            assert!(
                k[idx].abs() < 1e-12,
                "K should annihilate V-only functions, got {} at {idx}",
                k[idx]
            );
        }
    }
}

#[test]
fn k_on_y_times_terms_recovers_u_dr_exactly() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 150, SEED, 1).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let outcome = linear_outcome(&[0.5, -0.5, 1.0, 1.5], None);
    let terms = parse_terms(&["1", "A", "C", "A*C"]).unwrap();
    let basis = Basis::y_times_terms(&terms, &ds.schema().v_names).unwrap();
    let g = GSpec::y_times_terms(terms);
    let s = schema();
    for row in ds.rows() {
        let k = k_operator(&basis, &outcome, &prop, &imp, &s, row).unwrap();
        let u = u_dr(&outcome, &prop, &imp, &s, row, &g).unwrap();
        // identical up to quadrature-weight roundoff in E[. | V]
        assert!((k - u).amax() < 1e-13);
    }
}

#[test]
fn k_is_linear_at_machine_precision() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 60, SEED, 2).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let outcome = linear_outcome(&[0.5, -0.5, 1.0, 1.5], Some(0.4));
    let s = schema();
    // psi1 = y, psi2 = y a (rows 1 and 5 of the K=8 polynomial basis);
    // a K(psi1) + b K(psi2) must match K applied to the combined basis
    let basis = Basis::polynomial(8, 2);
    let (a, b) = (2.5, -1.25);
    for row in ds.rows() {
        let k = k_operator(&basis, &outcome, &prop, &imp, &s, row).unwrap();
        let combined = a * k[1] + b * k[5];
        // evaluate the linear combination through a weight row
        let tau = {
            let mut t = DMatrix::<f64>::zeros(1, 8);
            t[(0, 1)] = a;
            t[(0, 5)] = b;
            t
        };
        let via_tau = (&tau * &k)[0];
        assert!((combined - via_tau).abs() < 1e-15);
    }
}

#[test]
fn k_of_constants_has_mean_zero_trivially() {
    // psi = const maps to exactly zero row by row, so its empirical mean
    // over simulation draws is zero as well
    let ds = generate_dataset_stream(&DgpParams::reference(), 400, SEED, 3).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let outcome = linear_outcome(&[0.5, -0.5, 1.0, 1.5], None);
    let basis = Basis::polynomial(1, 2);
    let s = schema();
    let mut total = 0.0;
    for row in ds.rows() {
        total += k_operator(&basis, &outcome, &prop, &imp, &s, row).unwrap()[0];
    }
    assert!(total.abs() < 1e-12);
}

#[test]
fn trigonometric_standardization_hits_the_endpoints() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 300, SEED, 4).unwrap();
    let basis = BasisSpec {
        family: BasisFamily::Trigonometric,
        k: 7,
    }
    .build(&ds, 4)
    .unwrap();
    // the first ladder rung of the A coordinate is sin(std(A)); at the
    // sample extrema the standardized value is exactly -pi / +pi, where the
    // sine vanishes (fmod of pi) and the cosine returns cos(pi)
    let a_min = ds.rows().iter().map(|r| r.v[0]).fold(f64::INFINITY, f64::min);
    let a_max = ds
        .rows()
        .iter()
        .map(|r| r.v[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let at_min = basis.eval(0.0, &[a_min, 0.0]);
    let at_max = basis.eval(0.0, &[a_max, 0.0]);
    // ladder order: 1, sin(y~), cos(y~), sin(A~), cos(A~), sin(C~), cos(C~)
    assert!((at_min[3] - (-std::f64::consts::PI).sin()).abs() < 1e-12);
    assert!((at_max[3] - std::f64::consts::PI.sin()).abs() < 1e-12);
    assert!((at_min[4] - (-1.0f64)).abs() < 1e-12);
    assert!((at_max[4] - (-1.0f64)).abs() < 1e-12);
}

#[test]
fn raw_gram_is_full_rank_on_reference_data_at_k8() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 2000, SEED, 5).unwrap();
    let basis = Basis::polynomial(8, 2);
    let cond = basis.raw_gram_condition(&ds).unwrap();
    assert!(cond.is_finite() && cond < 1e8, "raw Gram condition {cond}");

    // independent rank oracle: eigenvalues of the Gram matrix
    let mut gram = DMatrix::<f64>::zeros(8, 8);
    let mut count = 0.0;
    for row in ds.rows().iter().filter(|r| r.r) {
        let psi = basis.eval(row.y.unwrap(), &row.v);
        gram.syger(1.0, &psi, &psi, 1.0);
        count += 1.0;
    }
    gram.fill_upper_triangle_with_lower_triangle();
    gram /= count;
    let eig = gram.symmetric_eigen();
    assert!(eig.eigenvalues.min() > 1e-6, "rank oracle: min eigenvalue {}", eig.eigenvalues.min());
}

#[test]
fn h_opt_is_constant_when_conditionals_are_v_free() {
    // intercept-only outcome V part and alpha = 0 make both conditional
    // expectations free of V, so h_opt is the same at every point
    let outcome = OutcomeModel::new(
        OutcomeFamily::LogisticBinary,
        parse_terms(&["1"]).unwrap(),
        DVector::from_row_slice(&[0.3, 0.9]),
        None,
    )
    .unwrap();
    let prop =
        PropensityFit::from_eta(parse_terms(&["1"]).unwrap(), DVector::from_element(1, 0.4))
            .unwrap();
    let imp = ImputationFit::from_parts(
        parse_terms(&["1"]).unwrap(),
        DMatrix::from_element(1, 1, 0.7),
        DMatrix::from_element(1, 1, 0.2),
    )
    .unwrap();
    let s = schema();
    let baseline = h_opt_binary(&[0.0, 0.0], &outcome, &prop, &imp, &s, 4096, 11).unwrap();
    for v in [[1.0, -2.0], [0.5, 0.5], [-3.0, 2.0], [2.0, 2.0], [0.1, -0.1]] {
        let h = h_opt_binary(&v, &outcome, &prop, &imp, &s, 4096, 11).unwrap();
        assert_eq!(h, baseline);
    }
}

#[test]
fn h_opt_monte_carlo_matches_quadrature_oracle() {
    let outcome = OutcomeModel::new(
        OutcomeFamily::LogisticBinary,
        parse_terms(&["1", "A", "C"]).unwrap(),
        DVector::from_row_slice(&[0.3, -0.6, 0.4, 0.9]),
        None,
    )
    .unwrap();
    let prop = PropensityFit::from_eta(
        parse_terms(&["1", "A"]).unwrap(),
        DVector::from_row_slice(&[0.2, -0.5]),
    )
    .unwrap();
    let imp = ImputationFit::from_parts(
        parse_terms(&["1", "A", "C"]).unwrap(),
        DMatrix::from_column_slice(3, 1, &[0.1, 0.7, -0.3]),
        DMatrix::from_element(1, 1, 0.25),
    )
    .unwrap();
    let s = schema();
    let v = [0.8, -0.4];
    let draws = 200_000;
    let got = h_opt_binary(&v, &outcome, &prop, &imp, &s, draws, 13).unwrap();

    // quadrature oracle: integrate the same exact-in-(R, Y) expressions
    // over L with a dense Gauss-Hermite rule
    let rule = GaussHermite::new(64);
    let design_o = fusereg::design::Design::bind(outcome.v_terms(), &s.v_names).unwrap();
    let design_p = fusereg::design::Design::bind(prop.terms(), &s.v_names).unwrap();
    let design_i = fusereg::design::Design::bind(imp.terms(), &s.v_names).unwrap();
    let v_out = design_o.eval(&v);
    let pi = prop.predict_pi(&design_p.eval(&v));
    let mu = imp.mean_l(&design_i.eval(&v))[0];
    let sd = imp.sigma_l[(0, 0)].sqrt();
    let e_v = rule.expect_normal(mu, sd, |l| expit(0.3 - 0.6 * 0.8 + 0.4 * (-0.4) + 0.9 * l));
    let mut grad = DVector::<f64>::zeros(4);
    for j in 0..4 {
        grad[j] = rule.expect_normal(mu, sd, |l| {
            let x = [1.0, 0.8, -0.4, l];
            let p = expit(0.3 - 0.6 * 0.8 + 0.4 * (-0.4) + 0.9 * l);
            p * (1.0 - p) * x[j]
        });
    }
    let m2 = rule.expect_normal(mu, sd, |l| {
        let p = expit(0.3 - 0.6 * 0.8 + 0.4 * (-0.4) + 0.9 * l);
        let dev = p - e_v;
        (p * (1.0 - p) + dev * dev) / pi + dev * dev / (1.0 - pi)
    });
    // E[grad M | V] = -E[p(1-p) x | V], so h = +E[p(1-p) x | V] / E[M^2 | V]
    let want = grad / m2;
    // Monte Carlo error at 200k draws of L
    for j in 0..4 {
        assert!(
            (got[j] - want[j]).abs() < 0.02 * (1.0 + want[j].abs()),
            "component {j}: {} vs {}",
            got[j],
            want[j]
        );
    }
}

#[test]
fn tau_opt_with_default_span_reproduces_the_default_dr_fit() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 1000, SEED, 6).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let template = linear_outcome(&[0.0; 4], None);
    let terms = parse_terms(&["1", "A", "C", "A*C"]).unwrap();
    let g = GSpec::y_times_terms(terms.clone());
    let base = solve(
        &ds,
        EstimatorKind::Dr,
        &g,
        &template,
        Some(&prop),
        Some(&imp),
        None,
        &SolveOptions::default(),
    )
    .unwrap();

    let basis = Basis::y_times_terms(&terms, &ds.schema().v_names).unwrap();
    let model = template.with_beta(base.theta.clone());
    let opt = tau_opt(&ds, &basis, &model, &prop, &imp).unwrap();
    let g_tau = GSpec::CustomBasis {
        tau: opt.tau,
        basis: opt.basis,
    };
    let refit = solve(
        &ds,
        EstimatorKind::Dr,
        &g_tau,
        &template,
        Some(&prop),
        Some(&imp),
        Some(&base.theta),
        &SolveOptions::default(),
    )
    .unwrap();
    // same moment span: any invertible weighting has the same root
    assert!(
        (refit.theta - base.theta).amax() < 1e-7,
        "tau-weighted root deviates"
    );
}

#[test]
fn omega_is_monotone_over_nested_bases_and_tracks_the_sandwich() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 2000, SEED, 7).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let template = linear_outcome(&[0.0; 4], None);
    let g = GSpec::y_times_terms(parse_terms(&["1", "A", "C", "A*C"]).unwrap());
    let base = solve(
        &ds,
        EstimatorKind::Dr,
        &g,
        &template,
        Some(&prop),
        Some(&imp),
        None,
        &SolveOptions::default(),
    )
    .unwrap();
    let mut model = template.with_beta(base.theta.clone());
    model.sigma_y = Some(estimate_sigma_y(&ds, &model, &imp).unwrap());

    // nested polynomial bases: the Y-dependent spans grow with K
    let omega8 = tau_opt(&ds, &Basis::polynomial(8, 2), &model, &prop, &imp)
        .unwrap()
        .omega;
    let omega16 = tau_opt(&ds, &Basis::polynomial(16, 2), &model, &prop, &imp)
        .unwrap()
        .omega;
    let diff = &omega16 - &omega8;
    let eig = diff.symmetric_eigen();
    let scale = omega8.trace();
    assert!(
        eig.eigenvalues.min() >= -1e-6 * scale,
        "information decreased: min eigenvalue {} (scale {scale})",
        eig.eigenvalues.min()
    );

    // omega^{-1} approximates the sandwich variance of the tau-weighted fit
    let opt = tau_opt(&ds, &Basis::polynomial(8, 2), &model, &prop, &imp).unwrap();
    let g_tau = GSpec::CustomBasis {
        tau: opt.tau.clone(),
        basis: opt.basis.clone(),
    };
    let solved_template = OutcomeModel::new(
        OutcomeFamily::LinearNormal,
        parse_terms(&["1", "A", "C"]).unwrap(),
        DVector::zeros(4),
        model.sigma_y,
    )
    .unwrap();
    let fit = solve(
        &ds,
        EstimatorKind::Dr,
        &g_tau,
        &solved_template,
        Some(&prop),
        Some(&imp),
        Some(&base.theta),
        &SolveOptions::default(),
    )
    .unwrap();
    let cov = sandwich_covariance(
        &ds,
        &fit,
        &g_tau,
        &solved_template,
        Some(&prop),
        Some(&imp),
        &SandwichOptions::default(),
    )
    .unwrap();
    let omega_inv = opt.omega.try_inverse().unwrap();
    for j in 0..4 {
        let a = omega_inv[(j, j)];
        let b = cov.asymptotic[(j, j)];
        let rel = (a - b).abs() / b;
        assert!(rel < 0.15, "coef {j}: omega^-1 {a} vs sandwich {b} ({rel:.3})");
    }
}

#[test]
fn h_opt_rejects_degenerate_conditional_second_moments() {
    // an outcome that is almost surely 1 regardless of (V, L) collapses M
    let outcome = OutcomeModel::new(
        OutcomeFamily::LogisticBinary,
        parse_terms(&["1"]).unwrap(),
        DVector::from_row_slice(&[40.0, 0.0]),
        None,
    )
    .unwrap();
    let prop =
        PropensityFit::from_eta(parse_terms(&["1"]).unwrap(), DVector::zeros(1)).unwrap();
    let imp = ImputationFit::from_parts(
        parse_terms(&["1"]).unwrap(),
        DMatrix::from_element(1, 1, 0.0),
        DMatrix::from_element(1, 1, 1e-6),
    )
    .unwrap();
    let err = h_opt_binary(&[0.0, 0.0], &outcome, &prop, &imp, &schema(), 256, 3).unwrap_err();
    assert!(matches!(err, fusereg::Error::DegenerateVariance(_)));
}

#[test]
fn basis_spec_requires_k_above_dim_beta() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 100, SEED, 8).unwrap();
    let err = BasisSpec {
        family: BasisFamily::Polynomial,
        k: 4,
    }
    .build(&ds, 4)
    .unwrap_err();
    assert!(matches!(err, fusereg::Error::Validation(_)));
}

#[test]
fn tau_opt_rejects_y_free_spans() {
    let ds = generate_dataset_stream(&DgpParams::reference(), 200, SEED, 9).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let model = linear_outcome(&[0.5, -0.5, 1.0, 1.5], Some(0.4));
    // only 3 Y-dependent functions in the first 6 graded monomials
    let err = tau_opt(&ds, &Basis::polynomial(6, 2), &model, &prop, &imp).unwrap_err();
    assert!(matches!(err, fusereg::Error::Validation(_)));
}

#[test]
fn row_records_round_trip_through_k_operator_sources() {
    // both source patterns evaluate; a record with the wrong pattern cannot
    // be constructed, so k_operator needs no pattern guard of its own
    let ds = generate_dataset_stream(&DgpParams::reference(), 50, SEED, 10).unwrap();
    let (prop, imp) = reference_fits(&ds);
    let outcome = linear_outcome(&[0.5, -0.5, 1.0, 1.5], Some(0.4));
    let basis = Basis::polynomial(8, 2);
    let s = schema();
    let row_a = ds.rows().iter().find(|r| r.r).unwrap();
    let row_b = ds.rows().iter().find(|r| !r.r).unwrap();
    assert!(k_operator(&basis, &outcome, &prop, &imp, &s, row_a).is_ok());
    assert!(k_operator(&basis, &outcome, &prop, &imp, &s, row_b).is_ok());
    let _ = Record::source_a(1.0, vec![0.0, 0.0]);
}
