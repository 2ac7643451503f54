mod common;

use common::gradcheck::{self, run_case, CaseReport};

fn assert_case(r: CaseReport) {
    assert!(
        r.passed(),
        "{}: {} failures of {} checked over {} instances, max rel {:.3e} at {}",
        r.name,
        r.failures,
        r.checked,
        r.instances,
        r.max_rel,
        r.worst
    );
}

#[test]
fn conv2d() {
    assert_case(run_case("conv2d", 11, gradcheck::conv2d));
}

#[test]
fn linear() {
    assert_case(run_case("linear", 12, gradcheck::linear));
}

#[test]
fn relu() {
    assert_case(run_case("relu", 13, gradcheck::relu));
}

#[test]
fn hard_sigmoid() {
    assert_case(run_case("hard_sigmoid", 14, gradcheck::hard_sigmoid));
}

#[test]
fn batch_norm() {
    assert_case(run_case("batch_norm", 15, gradcheck::batch_norm));
}

#[test]
fn softmax_cross_entropy() {
    assert_case(run_case("softmax_cross_entropy", 16, gradcheck::softmax_cross_entropy));
}

#[test]
fn arithmetic_ops() {
    assert_case(run_case("arithmetic", 17, gradcheck::arithmetic));
}

#[test]
fn selection_ops() {
    assert_case(run_case("selection", 18, gradcheck::selection));
}

#[test]
fn generator_path() {
    assert_case(run_case("generator path", 19, gradcheck::generator_path));
}

#[test]
fn kink_coordinates_are_excluded() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut inst = gradcheck::relu(&mut rng);
    inst.inputs[0].data_mut()[0] = 4e-4;
    let mut report = CaseReport::default();
    gradcheck::check_instance(&mut report, &inst);
    assert_eq!(report.excluded, 1);
    assert_eq!(report.failures, 0);
}

#[test]
fn perturbed_gradients_are_caught() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut inst = gradcheck::linear(&mut rng);
    let analytic = std::mem::replace(&mut inst.analytic, Box::new(|_| Vec::new()));
    inst.analytic = Box::new(move |t| {
        let mut g = analytic(t);
        g[1].iter_mut().for_each(|v| *v *= 1.01);
        g
    });
    let mut report = CaseReport::default();
    gradcheck::check_instance(&mut report, &inst);
    assert!(report.failures > 0);
}

#[test]
fn suite_summary() {
    for r in gradcheck::all_cases() {
        println!("{:<34} instances {:>3} checked {:>5} excluded {:>3} max rel {:.2e}", r.name, r.instances, r.checked, r.excluded, r.max_rel);
        assert!(r.passed(), "{}: {}", r.name, r.worst);
    }
}
